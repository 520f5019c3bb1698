//! Whole-volume segmentation by overlapping-patch fusion, and Dice scoring.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{LayerGraph, INPUT_CHANNELS, NUM_CLASSES, PATCH_SIDE};
use crate::patch::{extract_input_into, TilePlan};
use crate::tensor::{Shape, Tensor};
use crate::volume::{Convention, LabelVolume, Volume, CSF, GM, WM};

/// Tissue-volume weights for GM, WM and CSF. They sum to 0.9999 and are used as is.
pub const DICE_WEIGHTS: [f64; 3] = [0.6584, 0.3280, 0.0135];

/// Patches evaluated per forward call during segmentation.
const SEGMENT_BATCH: usize = 32;

/// Anything that maps an (N, 3, 40, 40) batch to (N, 4, 40, 40) class probabilities.
pub trait Segmenter {
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Segmenter for LayerGraph {
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict(batch)
    }
}

/// Labels each pixel of the middle slice by intensity bands; one-hot output.
/// `cuts` are the upper bounds of background, CSF and GM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSegmenter {
    pub cuts: [f64; 3],
}

impl Segmenter for ThresholdSegmenter {
    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let s = batch.shape();
        if s.channels != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "threshold segmenter",
                expected: format!("{INPUT_CHANNELS} channels"),
                found: s.to_string(),
            });
        }
        let mut out = Tensor::zeros(s.with_channels(NUM_CLASSES));
        let plane = s.plane();
        for b in 0..s.batch {
            let middle = batch.plane(b, 1).to_vec();
            let dst = out.sample_mut(b);
            for (i, v) in middle.into_iter().enumerate() {
                let class = if v <= self.cuts[0] {
                    0
                } else if v <= self.cuts[1] {
                    CSF
                } else if v <= self.cuts[2] {
                    GM
                } else {
                    WM
                };
                dst[class as usize * plane + i] = 1.0;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Majority,
    Average,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Majority => "majority",
            Fusion::Average => "average",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(Fusion::Majority),
            "average" => Ok(Fusion::Average),
            _ => Err(Error::InvalidArgument(format!(
                "unknown fusion mode '{s}' (expected majority or average)"
            ))),
        }
    }
}

/// Index of the largest entry; the first one wins ties.
fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel accumulator for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteGrid {
    pub height: usize,
    pub width: usize,
    pub fusion: Fusion,
    votes: Vec<[u32; NUM_CLASSES]>,
    sums: Vec<[f64; NUM_CLASSES]>,
    coverage: Vec<u32>,
}

impl VoteGrid {
    pub fn new(height: usize, width: usize, fusion: Fusion) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            fusion,
            votes: vec![[0; NUM_CLASSES]; n],
            sums: vec![[0.0; NUM_CLASSES]; n],
            coverage: vec![0; n],
        }
    }

    /// Adds one patch's (4, 40, 40) probabilities with its window at `(y0, x0)`.
    pub fn add_patch(&mut self, y0: usize, x0: usize, probs: &[f64]) {
        let plane = PATCH_SIDE * PATCH_SIDE;
        debug_assert_eq!(probs.len(), NUM_CLASSES * plane);
        for r in 0..PATCH_SIDE {
            for q in 0..PATCH_SIDE {
                let i = r * PATCH_SIDE + q;
                let p: [f64; NUM_CLASSES] = std::array::from_fn(|c| probs[c * plane + i]);
                let px = (y0 + r) * self.width + x0 + q;
                self.votes[px][argmax(&p)] += 1;
                self.sums[px].iter_mut().zip(p).for_each(|(s, v)| *s += v);
                self.coverage[px] += 1;
            }
        }
    }

    /// Records a direct class vote, bypassing probabilities.
    pub fn add_vote(&mut self, pixel: usize, class: u8) {
        self.votes[pixel][class as usize] += 1;
        self.sums[pixel][class as usize] += 1.0;
        self.coverage[pixel] += 1;
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    pub fn votes(&self, pixel: usize) -> [u32; NUM_CLASSES] {
        self.votes[pixel]
    }

    /// Fused label per pixel; ties go to the lowest class id.
    pub fn resolve(&self) -> Vec<u8> {
        (0..self.coverage.len())
            .map(|px| match self.fusion {
                Fusion::Majority => argmax(&self.votes[px]) as u8,
                Fusion::Average => argmax(&self.sums[px]) as u8,
            })
            .collect()
    }
}

/// Segments a normalized volume slice by slice. Each 40×40 tile of the stride-10
/// plan is scored once and the overlapping predictions are fused per pixel.
pub fn segment_volume(seg: &dyn Segmenter, volume: &Volume, fusion: Fusion) -> Result<LabelVolume> {
    let d = volume.dims();
    if d.z == 0 {
        return Err(Error::InvalidArgument("volume has no slices".into()));
    }
    let plan = TilePlan::for_volume(volume)?;
    let origins: Vec<(usize, usize)> = plan.origins().collect();
    let per = INPUT_CHANNELS * PATCH_SIDE * PATCH_SIDE;
    let mut labels = Vec::with_capacity(d.len());
    for z in 0..d.z {
        let mut grid = VoteGrid::new(d.y, d.x, fusion);
        for chunk in origins.chunks(SEGMENT_BATCH) {
            let mut data = vec![0.0; chunk.len() * per];
            for (k, &(y, x)) in chunk.iter().enumerate() {
                extract_input_into(volume, z, y, x, &mut data[k * per..(k + 1) * per])?;
            }
            let batch = Tensor::new(Shape::new(chunk.len(), INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE), data)?;
            let probs = seg.probabilities(&batch)?;
            let expected = batch.shape().with_channels(NUM_CLASSES);
            if probs.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "segment_volume",
                    expected: expected.to_string(),
                    found: probs.shape().to_string(),
                });
            }
            for (k, &(y, x)) in chunk.iter().enumerate() {
                grid.add_patch(y, x, probs.sample(k));
            }
        }
        labels.extend(grid.resolve());
    }
    LabelVolume::new(d, labels, Convention::Model)
}

/// Entry `[t][p]` counts voxels with truth `t` predicted as `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.0[t][p] += other.0[t][p];
            }
        }
    }
}

pub fn confusion_matrix(pred: &LabelVolume, truth: &LabelVolume) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::InvalidArgument(format!(
            "prediction dims {} differ from truth dims {}",
            pred.dims(),
            truth.dims()
        )));
    }
    truth.ensure_convention(pred.convention())?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        cm.0[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// `100·2TP / (2TP + FP + FN)`; 100 when the class is absent from both.
pub fn dice_per_class(cm: &ConfusionMatrix, class: u8) -> f64 {
    let c = class as usize;
    let tp = cm.0[c][c];
    let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| cm.0[c][p]).sum();
    let fp: u64 = (0..NUM_CLASSES).filter(|&t| t != c).map(|t| cm.0[t][c]).sum();
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    }
}

pub fn weighted_dice(gm: f64, wm: f64, csf: f64) -> f64 {
    DICE_WEIGHTS[0] * gm + DICE_WEIGHTS[1] * wm + DICE_WEIGHTS[2] * csf
}

/// Dice percentages for one volume or an aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceScores {
    pub gm: f64,
    pub wm: f64,
    pub csf: f64,
    pub weighted: f64,
}

impl DiceScores {
    pub fn new(gm: f64, wm: f64, csf: f64) -> Self {
        Self {
            gm,
            wm,
            csf,
            weighted: weighted_dice(gm, wm, csf),
        }
    }

    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self::new(dice_per_class(cm, GM), dice_per_class(cm, WM), dice_per_class(cm, CSF))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub id: String,
    pub dice: DiceScores,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub volumes: Vec<VolumeReport>,
    /// Per-class Dice averaged over volumes; weighted Dice from those averages.
    pub mean: DiceScores,
    /// Dice of the summed confusion matrix over all voxels.
    pub pooled: DiceScores,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_volumes(volumes: Vec<VolumeReport>) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::InvalidArgument("no volumes to evaluate".into()));
        }
        let n = volumes.len() as f64;
        let avg = |f: fn(&DiceScores) -> f64| volumes.iter().map(|v| f(&v.dice)).sum::<f64>() / n;
        let mean = DiceScores::new(avg(|d| d.gm), avg(|d| d.wm), avg(|d| d.csf));
        let mut confusion = ConfusionMatrix::default();
        volumes.iter().for_each(|v| confusion.add(&v.confusion));
        Ok(Self {
            pooled: DiceScores::from_confusion(&confusion),
            mean,
            confusion,
            volumes,
        })
    }

    /// Pairs predictions with ground truth (both in the model convention).
    pub fn from_predictions<'a>(
        pairs: impl IntoIterator<Item = (String, &'a LabelVolume, &'a LabelVolume)>,
    ) -> Result<Self> {
        let volumes = pairs
            .into_iter()
            .map(|(id, pred, truth)| {
                truth.ensure_convention(Convention::Model)?;
                let confusion = confusion_matrix(pred, truth)?;
                Ok(VolumeReport {
                    id,
                    dice: DiceScores::from_confusion(&confusion),
                    confusion,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(volumes)
    }

    /// `volume_id,dice_gm,dice_wm,dice_csf,weighted`, one row per volume, then
    /// `mean` and `pooled` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("volume_id,dice_gm,dice_wm,dice_csf,weighted\n");
        let mut row = |id: &str, d: &DiceScores| {
            let _ = writeln!(s, "{id},{:.4},{:.4},{:.4},{:.4}", d.gm, d.wm, d.csf, d.weighted);
        };
        for v in &self.volumes {
            row(&v.id, &v.dice);
        }
        row("mean", &self.mean);
        row("pooled", &self.pooled);
        s
    }

    pub fn table(&self) -> String {
        let width = self.volumes.iter().map(|v| v.id.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$} {:>7} {:>7} {:>7} {:>7}\n", "", "GM", "WM", "CSF", "Wt. DC");
        let mut row = |id: &str, d: &DiceScores| {
            let _ = writeln!(
                s,
                "{id:<width$} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                d.gm, d.wm, d.csf, d.weighted
            );
        };
        for v in &self.volumes {
            row(&v.id, &v.dice);
        }
        row("mean", &self.mean);
        row("pooled", &self.pooled);
        s
    }
}

/// Segments every (id, normalized volume, truth) triple and scores it.
pub fn evaluate<'a>(
    seg: &dyn Segmenter,
    cases: impl IntoIterator<Item = (String, &'a Volume, &'a LabelVolume)>,
    fusion: Fusion,
) -> Result<EvalReport> {
    let mut volumes = Vec::new();
    for (id, volume, truth) in cases {
        truth.ensure_convention(Convention::Model)?;
        let pred = segment_volume(seg, volume, fusion)?;
        let confusion = confusion_matrix(&pred, truth)?;
        volumes.push(VolumeReport {
            id,
            dice: DiceScores::from_confusion(&confusion),
            confusion,
        });
    }
    EvalReport::from_volumes(volumes)
}

/// Overlay colours in the model convention: background, GM, WM, CSF.
pub const OVERLAY_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [0, 255, 0], [0, 0, 255], [255, 0, 0]];

/// Binary PPM (P6) of axial slice `z`, one pixel per voxel.
pub fn export_overlay(labels: &LabelVolume, z: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = labels.dims();
    if z >= d.z {
        return Err(Error::InvalidArgument(format!("slice {z} out of range for dims {d}")));
    }
    let model = crate::volume::remap_labels(labels, Convention::Model);
    let mut bytes = format!("P6\n{} {}\n255\n", d.x, d.y).into_bytes();
    bytes.extend(model.slice(z).iter().flat_map(|&l| OVERLAY_COLORS[l as usize]));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
