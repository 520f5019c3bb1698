use super::*;
use crate::patch::normalize_volume;
use crate::volume::{generate_phantom, Dims, PhantomSpec, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(dims: Dims, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelVolume::new(
        dims,
        (0..dims.len()).map(|_| rng.random_range(0..4u8)).collect(),
        Convention::Model,
    )
    .unwrap()
}

fn one_hot(class: usize) -> Vec<f64> {
    let plane = PATCH_SIDE * PATCH_SIDE;
    let mut p = vec![0.0; NUM_CLASSES * plane];
    p[class * plane..(class + 1) * plane].iter_mut().for_each(|v| *v = 1.0);
    p
}

#[test]
fn majority_and_tie_break() {
    let mut g = VoteGrid::new(1, 1, Fusion::Majority);
    for c in [GM, GM, GM, WM] {
        g.add_vote(0, c);
    }
    assert_eq!(g.resolve(), vec![GM]);
    let mut g = VoteGrid::new(1, 1, Fusion::Majority);
    for c in [WM, GM, WM, GM] {
        g.add_vote(0, c);
    }
    assert_eq!(g.resolve(), vec![GM]);
    let mut g = VoteGrid::new(1, 1, Fusion::Average);
    for c in [CSF, WM] {
        g.add_vote(0, c);
    }
    assert_eq!(g.resolve(), vec![WM]);
}

#[test]
fn average_and_majority_can_differ() {
    let plane = PATCH_SIDE * PATCH_SIDE;
    let mut maj = VoteGrid::new(40, 40, Fusion::Majority);
    let mut avg = VoteGrid::new(40, 40, Fusion::Average);
    // two confident WM votes versus three marginal GM votes
    let mut confident = vec![0.0; 4 * plane];
    let mut marginal = vec![0.0; 4 * plane];
    for i in 0..plane {
        confident[2 * plane + i] = 0.95;
        confident[plane + i] = 0.05;
        marginal[plane + i] = 0.4;
        marginal[2 * plane + i] = 0.35;
        marginal[3 * plane + i] = 0.25;
    }
    for g in [&mut maj, &mut avg] {
        g.add_patch(0, 0, &confident);
        g.add_patch(0, 0, &confident);
        for _ in 0..3 {
            g.add_patch(0, 0, &marginal);
        }
    }
    assert_eq!(maj.resolve()[0], GM);
    assert_eq!(avg.resolve()[0], WM);
}

#[test]
fn coverage_follows_the_tile_plan() {
    let plan = TilePlan::new(128, 256).unwrap();
    let mut g = VoteGrid::new(128, 256, Fusion::Majority);
    for (y, x) in plan.origins() {
        g.add_patch(y, x, &one_hot(1));
    }
    assert_eq!(g.coverage(), &plan.coverage()[..]);
    for y in 30..88 {
        for x in 30..216 {
            assert_eq!(g.coverage()[y * 256 + x], 16);
            assert_eq!(g.votes(y * 256 + x)[1], 16);
        }
    }
    assert!(g.coverage().iter().all(|&c| c >= 1));
}

/// Predicts class from the position of the tile, so overlapping tiles disagree.
struct OriginSegmenter;

impl Segmenter for OriginSegmenter {
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let s = batch.shape();
        let mut out = Tensor::zeros(s.with_channels(NUM_CLASSES));
        for b in 0..s.batch {
            // the ramp volume encodes x in the pixel value
            let class = (batch.at(b, 1, 0, 0) as usize / 10) % NUM_CLASSES;
            let plane = s.plane();
            out.sample_mut(b)[class * plane..(class + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
        Ok(out)
    }
}

#[test]
fn single_coverage_pixels_agree_across_fusions() {
    let d = Dims::new(64, 40, 2);
    let v = Volume::new(d, (0..d.len()).map(|i| (i % 64) as f64).collect(), Provenance::Memory).unwrap();
    let maj = segment_volume(&OriginSegmenter, &v, Fusion::Majority).unwrap();
    let avg = segment_volume(&OriginSegmenter, &v, Fusion::Average).unwrap();
    assert_eq!(maj.dims(), d);
    let cov = TilePlan::for_volume(&v).unwrap().coverage();
    for z in 0..2 {
        for (i, &c) in cov.iter().enumerate() {
            if c == 1 {
                assert_eq!(maj.slice(z)[i], avg.slice(z)[i]);
            }
        }
    }
    // column 0 is seen only by the tile at x = 0 (class 0); column 63 only by x = 24 (class 2)
    assert_eq!(maj.at(0, 5, 0), 0);
    assert_eq!(maj.at(63, 5, 1), 2);
}

#[test]
fn segmentation_is_deterministic() {
    let (v, _) = generate_phantom(&PhantomSpec::new(Dims::new(48, 48, 2), 3)).unwrap();
    let seg = ThresholdSegmenter { cuts: [0.1, 0.4, 0.7] };
    let a = segment_volume(&seg, &v, Fusion::Average).unwrap();
    let b = segment_volume(&seg, &v, Fusion::Average).unwrap();
    assert_eq!(a, b);
}

#[test]
fn confusion_basics() {
    let d = Dims::new(10, 10, 10);
    let t = random_labels(d, 1);
    let cm = confusion_matrix(&t, &t).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                assert_eq!(cm.0[a][b], 0);
            }
        }
    }
    assert_eq!(cm.total(), 1000);

    let one = |l| LabelVolume::new(Dims::new(1, 1, 1), vec![l], Convention::Model).unwrap();
    let cm = confusion_matrix(&one(WM), &one(GM)).unwrap();
    assert_eq!(cm.0[1][2], 1);
    assert_eq!(cm.total(), 1);

    let p = random_labels(d, 2);
    let cm = confusion_matrix(&p, &t).unwrap();
    for a in 0..4u8 {
        for b in 0..4u8 {
            let brute = t
                .labels()
                .iter()
                .zip(p.labels())
                .filter(|(x, y)| **x == a && **y == b)
                .count();
            assert_eq!(cm.0[a as usize][b as usize], brute as u64);
        }
    }
    assert!(confusion_matrix(&p, &random_labels(Dims::new(10, 10, 9), 3)).is_err());
    let ibsr = crate::volume::remap_labels(&t, Convention::Ibsr);
    assert!(confusion_matrix(&p, &ibsr).is_err());
}

#[test]
fn dice_examples() {
    let mut cm = ConfusionMatrix::default();
    cm.0[1][1] = 3; // TP
    cm.0[2][1] = 1; // FP
    cm.0[1][3] = 2; // FN
    assert!((dice_per_class(&cm, GM) - 100.0 * 6.0 / 9.0).abs() < 1e-12);
    assert!((dice_per_class(&cm, GM) - 66.67).abs() < 0.005);

    let t = random_labels(Dims::new(8, 8, 8), 4);
    let perfect = confusion_matrix(&t, &t).unwrap();
    for c in [GM, WM, CSF] {
        assert_eq!(dice_per_class(&perfect, c), 100.0);
    }
    let mut disjoint = ConfusionMatrix::default();
    disjoint.0[1][2] = 5;
    assert_eq!(dice_per_class(&disjoint, GM), 0.0);
    assert_eq!(dice_per_class(&ConfusionMatrix::default(), CSF), 100.0);
}

#[test]
fn dice_matches_set_overlap() {
    for seed in 0..20 {
        let d = Dims::new(7, 6, 5);
        let t = random_labels(d, seed);
        let p = random_labels(d, seed + 1000);
        let cm = confusion_matrix(&p, &t).unwrap();
        for c in [GM, WM, CSF] {
            let a = t.labels().iter().filter(|&&l| l == c).count() as f64;
            let b = p.labels().iter().filter(|&&l| l == c).count() as f64;
            let both = t
                .labels()
                .iter()
                .zip(p.labels())
                .filter(|(x, y)| **x == c && **y == c)
                .count() as f64;
            assert!((dice_per_class(&cm, c) - 100.0 * 2.0 * both / (a + b)).abs() < 1e-9);
        }
    }
}

#[test]
fn weighted_dice_reproduces_reference_rows() {
    let rows = [
        ((83.11, 91.83, 21.7), 85.13),
        ((87.36, 84.15, 59.04), 85.92),
        ((86.87, 83.58, 58.36), 85.40),
        ((90.33, 89.23, 66.58), 89.64),
        ((88.17, 85.95, 57.81), 87.03),
    ];
    for ((gm, wm, csf), want) in rows {
        let got = weighted_dice(gm, wm, csf);
        assert!((got - want).abs() <= 0.02, "{got} vs {want}");
    }
    assert_eq!(weighted_dice(0.0, 0.0, 0.0), 0.0);
    assert!((weighted_dice(100.0, 100.0, 100.0) - 99.99).abs() < 1e-9);
}

#[test]
fn report_aggregation() {
    let t1 = random_labels(Dims::new(6, 6, 2), 5);
    let p1 = random_labels(Dims::new(6, 6, 2), 6);
    let single = EvalReport::from_predictions([("a".to_string(), &p1, &t1)]).unwrap();
    assert_eq!(single.mean, single.volumes[0].dice);
    assert_eq!(single.pooled, single.volumes[0].dice);

    let both = EvalReport::from_predictions([("a".to_string(), &p1, &t1), ("b".to_string(), &t1, &t1)]).unwrap();
    assert!((both.mean.gm - (single.mean.gm + 100.0) / 2.0).abs() < 1e-12);
    assert!((both.mean.weighted - weighted_dice(both.mean.gm, both.mean.wm, both.mean.csf)).abs() < 1e-12);
    assert_eq!(both.confusion.total(), 144);
    assert!(EvalReport::from_volumes(Vec::new()).is_err());

    let csv = both.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "volume_id,dice_gm,dice_wm,dice_csf,weighted");
    assert!(lines
        .nth(1)
        .unwrap()
        .starts_with("b,100.0000,100.0000,100.0000,99.9900"));
    let table = both.table();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["GM", "WM", "CSF", "Wt.", "DC"]);
}

#[test]
fn threshold_oracle_on_a_noiseless_phantom_is_perfect() {
    let mut spec = PhantomSpec::new(Dims::new(64, 64, 6), 8);
    spec.noise_std = 0.0;
    spec.bias_amplitude = 0.0;
    let (v, truth) = generate_phantom(&spec).unwrap();
    let (n, stats) = normalize_volume(&v).unwrap();
    let norm = |x: f64| stats.apply(x);
    let mid = |a: f64, b: f64| norm((a + b) / 2.0);
    let seg = ThresholdSegmenter {
        cuts: [
            mid(0.0, spec.csf_mean),
            mid(spec.csf_mean, spec.gm_mean),
            mid(spec.gm_mean, spec.wm_mean),
        ],
    };
    for fusion in [Fusion::Majority, Fusion::Average] {
        let report = evaluate(&seg, [("p".to_string(), &n, &truth)], fusion).unwrap();
        assert_eq!((report.mean.gm, report.mean.wm, report.mean.csf), (100.0, 100.0, 100.0));
    }
}

#[test]
fn overlay_colours_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.ppm");
    let d = Dims::new(5, 3, 2);
    let mut labels = vec![0u8; d.len()];
    labels[d.index(2, 1, 1)] = GM;
    let lv = LabelVolume::new(d, labels, Convention::Model).unwrap();

    export_overlay(&lv, 0, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P6\n5 3\n255\n";
    assert!(header.len() <= 15);
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 3 * 15);
    assert!(bytes[header.len()..].iter().all(|&b| b == 0));

    export_overlay(&lv, 1, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let px: Vec<&[u8]> = bytes[header.len()..].chunks(3).collect();
    assert_eq!(px.iter().filter(|p| **p == [0, 255, 0]).count(), 1);
    assert_eq!(px[5 + 2], &[0, 255, 0]);
    assert!(export_overlay(&lv, 2, &path).is_err());

    // IBSR input is coloured by tissue, not by raw id
    let ibsr = crate::volume::remap_labels(&lv, Convention::Ibsr);
    export_overlay(&ibsr, 1, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
