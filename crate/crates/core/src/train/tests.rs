use super::*;
use crate::net::{ModelVariant, NetConfig};
use crate::patch::{build_dataset, Role};
use crate::volume::{generate_phantom, Dims, PhantomSpec};

fn dataset(seed: u64, z: usize, role: Role) -> Dataset {
    let (v, lv) = generate_phantom(&PhantomSpec::new(Dims::new(48, 48, z), seed)).unwrap();
    build_dataset(&[v], &[lv], role, 1.0).unwrap()
}

fn small_net(seed: u64) -> LayerGraph {
    LayerGraph::build(ModelVariant::USegNet, &NetConfig::reduced(8, seed))
}

fn cfg(lr: f64, batch: usize) -> OptimConfig {
    OptimConfig {
        learning_rate: lr,
        batch_size: batch,
        max_epochs: 2,
        seed: 3,
        ..OptimConfig::default()
    }
}

fn plain(lr: f64, momentum: f64, l2: f64) -> OptimConfig {
    OptimConfig {
        learning_rate: lr,
        momentum,
        l2,
        ..OptimConfig::default()
    }
}

#[test]
fn defaults_match_reference_settings() {
    let c = OptimConfig::default();
    assert_eq!((c.batch_size, c.momentum, c.l2, c.max_epochs), (64, 0.9, 1e-4, 700));
    assert_eq!(c.learning_rate, 1e-3);
    c.validate().unwrap();
    assert!(OptimConfig {
        momentum: 1.0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(OptimConfig {
        batch_size: 0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(OptimConfig { l2: -1.0, ..c }.validate().is_err());
}

#[test]
fn zero_gradient_leaves_weights() {
    let mut w = vec![1.0, -2.0];
    let mut v = vec![0.0; 2];
    sgd_update(&mut w, &[0.0, 0.0], &mut v, &plain(0.1, 0.9, 0.0)).unwrap();
    assert_eq!(w, vec![1.0, -2.0]);
    assert_eq!(v, vec![0.0, 0.0]);
}

#[test]
fn single_step_arithmetic() {
    let mut w = vec![1.0];
    let mut v = vec![0.0];
    sgd_update(&mut w, &[0.5], &mut v, &plain(0.1, 0.0, 0.0)).unwrap();
    assert!((v[0] + 0.05).abs() < 1e-15);
    assert!((w[0] - 0.95).abs() < 1e-15);
}

#[test]
fn momentum_accumulates() {
    let mut w = vec![0.0];
    let mut v = vec![0.0];
    let c = plain(0.1, 0.9, 0.0);
    sgd_update(&mut w, &[1.0], &mut v, &c).unwrap();
    assert!((v[0] + 0.1).abs() < 1e-15);
    sgd_update(&mut w, &[1.0], &mut v, &c).unwrap();
    assert!((v[0] + 0.19).abs() < 1e-15);
    assert!((w[0] + 0.29).abs() < 1e-15);
}

#[test]
fn l2_alone_decays_geometrically() {
    let c = plain(0.1, 0.0, 0.01);
    let mut w = vec![2.0, -3.0];
    let mut v = vec![0.0; 2];
    for _ in 0..3 {
        let before = w.clone();
        sgd_update(&mut w, &[0.0, 0.0], &mut v, &c).unwrap();
        for (a, b) in w.iter().zip(&before) {
            assert!((a - b * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
            assert!(a.abs() < b.abs());
        }
    }
}

#[test]
fn update_rejects_mismatched_lengths() {
    let mut w = vec![0.0; 3];
    let mut v = vec![0.0; 3];
    assert!(sgd_update(&mut w, &[0.0; 2], &mut v, &plain(0.1, 0.0, 0.0)).is_err());
    let mut g = small_net(0);
    let mut st = TrainState::new(&g);
    st.velocity.pop();
    assert!(sgd_step(&mut g, &mut st, &OptimConfig::default()).is_err());
}

#[test]
fn zero_learning_rate_is_pure_evaluation() {
    let ds = dataset(1, 2, Role::Train);
    let mut g = small_net(1);
    let before = g.clone();
    let c = cfg(0.0, ds.len());
    let mut st = TrainState::new(&g);
    let loss = train_epoch(&mut g, &ds, &mut st, &c).unwrap();
    for (a, b) in g.layers().iter().zip(before.layers()) {
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
    }
    let (x, y) = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
    let mut h = before.clone();
    let out = h.forward(&x, Mode::Train).unwrap();
    let expect = softmax_ce(&out.logits, &y, None).unwrap().loss;
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(2, 2, Role::Train);
    let c = cfg(1e-2, 3);
    let run = || {
        let mut g = small_net(4);
        let mut st = TrainState::new(&g);
        let l1 = train_epoch(&mut g, &ds, &mut st, &c).unwrap();
        let l2 = train_epoch(&mut g, &ds, &mut st, &c).unwrap();
        (g, l1, l2)
    };
    let (a, la1, la2) = run();
    let (b, lb1, lb2) = run();
    assert_eq!(a, b);
    assert_eq!((la1.to_bits(), la2.to_bits()), (lb1.to_bits(), lb2.to_bits()));
}

#[test]
fn loss_decreases_when_overfitting_a_few_patches() {
    let ds = dataset(5, 1, Role::Train).truncated(4);
    let mut g = LayerGraph::build(ModelVariant::USegNet, &NetConfig::reduced(4, 5));
    let c = cfg(1e-2, 4);
    let mut st = TrainState::new(&g);
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(train_epoch(&mut g, &ds, &mut st, &c).unwrap());
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn frozen_layers_are_untouched() {
    let ds = dataset(3, 1, Role::Train);
    let mut g = small_net(2);
    let before = g.clone();
    let c = apply_freeze_schedule(&cfg(1e-2, 2), &g, &["classifier"]).unwrap();
    let mut st = TrainState::new(&g);
    train_epoch(&mut g, &ds, &mut st, &c).unwrap();
    let cls = g.layer_id("classifier").unwrap();
    for (i, (a, b)) in g.layers().iter().zip(before.layers()).enumerate() {
        for (p, q) in a.params().iter().zip(b.params()) {
            if i == cls {
                assert_ne!(p.value, q.value);
            } else {
                assert_eq!(p.value, q.value, "{}", a.name);
            }
        }
    }
    for (i, v) in st.velocity.iter().enumerate() {
        if i != cls {
            assert!(v.iter().flatten().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn freeze_schedule_masks() {
    let g = small_net(0);
    let names: Vec<String> = g.layers().iter().map(|l| l.name.clone()).collect();
    let all: Vec<&str> = names.iter().map(String::as_str).collect();
    let c = apply_freeze_schedule(&OptimConfig::default(), &g, &all).unwrap();
    assert!(c.freeze_mask.iter().all(|&f| !f));
    assert!(apply_freeze_schedule(&OptimConfig::default(), &g, &["nope"]).is_err());

    let stages = sequential_schedule(&g);
    assert_eq!(stages.first().unwrap(), &vec!["classifier".to_string()]);
    assert_eq!(stages.last().unwrap(), &vec!["enc1.conv1".to_string()]);
    let mut seen: Vec<String> = stages.into_iter().flatten().collect();
    let total = seen.len();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), total);
    assert_eq!(total, g.parametric_layer_ids().len());
}

#[test]
fn divergence_reports_location() {
    let ds = dataset(1, 1, Role::Train);
    let mut g = small_net(0);
    let cls = g.layer_id("classifier").unwrap();
    g.layers_mut()[cls].params_mut()[0].value[0] = f64::INFINITY;
    let mut st = TrainState::new(&g);
    let err = train_epoch(&mut g, &ds, &mut st, &cfg(1e-2, 4)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, batch: 0, .. }), "{err}");
    assert!(err.to_string().contains("classifier="));
}

#[test]
fn fit_with_zero_epochs_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(1, 1, Role::Train);
    let mut g = small_net(9);
    let initial = g.clone();
    let c = OptimConfig {
        max_epochs: 0,
        ..cfg(1e-2, 4)
    };
    let r = fit(&mut g, &ds, &ds, &c, dir.path()).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(r.best_epoch, None);
    assert_eq!(
        std::fs::read_to_string(dir.path().join(HISTORY_CSV)).unwrap(),
        "epoch,train_loss,val_loss\n"
    );
    let mut h = small_net(100);
    crate::net::load_weights(&mut h, &r.best_checkpoint).unwrap();
    for (a, b) in h.layers().iter().zip(initial.layers()) {
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
    }
}

#[test]
fn fit_keeps_the_best_validation_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = dataset(1, 2, Role::Train);
    let val = dataset(2, 1, Role::Val);
    let mut g = small_net(3);
    let c = OptimConfig {
        max_epochs: 3,
        ..cfg(2e-2, 4)
    };
    let r = fit(&mut g, &train, &val, &c, dir.path()).unwrap();
    assert_eq!(r.history.len(), 3);
    assert_eq!(r.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_loss");

    let best = r.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best <= r.history.last().unwrap().val_loss);
    assert_eq!(r.history[r.best_epoch.unwrap() - 1].val_loss, best);
    // the graph now holds the best weights, so re-scoring reproduces the best loss
    let again = evaluate_loss(&mut g, &val, 4).unwrap();
    assert_eq!(again.to_bits(), best.to_bits());
}
