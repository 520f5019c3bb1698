//! Mini-batch SGD with momentum and L2, freeze masks, and validation-driven
//! checkpoint selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{load_weights, save_weights, LayerGraph};
use crate::patch::Dataset;
use crate::tensor::{softmax_ce, Mode};

pub const BEST_CHECKPOINT: &str = "best.usgn";
pub const HISTORY_CSV: &str = "history.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// One flag per graph layer; `true` freezes that layer. Empty freezes nothing.
    pub freeze_mask: Vec<bool>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            l2: 1e-4,
            batch_size: 64,
            max_epochs: 700,
            seed: 0,
            freeze_mask: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        Ok(())
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.freeze_mask.get(layer).copied().unwrap_or(false)
    }
}

/// One in-place update: `g' = g + l2·w; v ← momentum·v − lr·g'; w ← w + v`.
pub fn sgd_update(weights: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &OptimConfig) -> Result<()> {
    if grads.len() != weights.len() || velocity.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            expected: format!("{} values", weights.len()),
            found: format!("{} grads, {} velocities", grads.len(), velocity.len()),
        });
    }
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + cfg.l2 * *w;
        *v = cfg.momentum * *v - cfg.learning_rate * g;
        *w += *v;
    }
    Ok(())
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub velocity: Vec<Vec<Vec<f64>>>,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
}

impl TrainState {
    pub fn new(graph: &LayerGraph) -> Self {
        Self {
            velocity: graph
                .layers()
                .iter()
                .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
            epoch: 0,
            best_val_loss: None,
        }
    }
}

/// Applies the accumulated gradients of every unfrozen layer. BN running
/// statistics are not parameters and are left alone.
pub fn sgd_step(graph: &mut LayerGraph, state: &mut TrainState, cfg: &OptimConfig) -> Result<()> {
    if state.velocity.len() != graph.layers().len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            expected: format!("{} layers", graph.layers().len()),
            found: format!("velocity for {} layers", state.velocity.len()),
        });
    }
    for (i, (layer, vel)) in graph.layers_mut().iter_mut().zip(&mut state.velocity).enumerate() {
        if cfg.is_frozen(i) {
            continue;
        }
        let params = layer.params_mut();
        if params.len() != vel.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: format!("{} tensors in layer {}", params.len(), i),
                found: format!("{} velocity buffers", vel.len()),
            });
        }
        for (p, v) in params.into_iter().zip(vel.iter_mut()) {
            let crate::tensor::Param { value, grad } = p;
            sgd_update(value, grad, v, cfg)?;
        }
    }
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn norm_report(graph: &LayerGraph) -> String {
    let mut s = String::new();
    for layer in graph.layers().iter().filter(|l| l.is_parametric()) {
        let sq: f64 = layer.params().iter().flat_map(|p| p.value.iter()).map(|v| v * v).sum();
        let _ = write!(s, "{}={:.4e} ", layer.name, sq.sqrt());
    }
    s.trim_end().to_string()
}

/// One pass over `ds` in an epoch-seeded random order. Returns the
/// patch-weighted mean training loss.
pub fn train_epoch(graph: &mut LayerGraph, ds: &Dataset, state: &mut TrainState, cfg: &OptimConfig) -> Result<f64> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, state.epoch)));

    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (input, labels) = ds.batch(chunk);
        let diverged = |graph: &LayerGraph| Error::Diverged {
            epoch: state.epoch,
            batch: b,
            norms: norm_report(graph),
        };
        let out = match graph.forward(&input, Mode::Train) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => return Err(diverged(graph)),
            Err(e) => return Err(e),
        };
        let ce = softmax_ce(&out.logits, &labels, None)?;
        if !ce.loss.is_finite() {
            return Err(diverged(graph));
        }
        graph.backward(out.cache.expect("train mode"), &ce.grad_logits)?;
        sgd_step(graph, state, cfg)?;
        total += ce.loss * chunk.len() as f64;
    }
    state.epoch += 1;
    Ok(total / ds.len() as f64)
}

/// Patch-weighted mean loss with BN running statistics; parameters untouched.
pub fn evaluate_loss(graph: &mut LayerGraph, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (input, labels) = ds.batch(chunk);
        let out = graph.forward(&input, Mode::Infer)?;
        total += softmax_ce(&out.logits, &labels, None)?.loss * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub best_checkpoint: PathBuf,
    /// `None` when no epoch ran and the checkpoint holds the initial weights.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn fit(graph: &mut LayerGraph, train: &Dataset, val: &Dataset, cfg: &OptimConfig, dir: &Path) -> Result<FitResult> {
    fit_with_progress(graph, train, val, cfg, dir, |_| {})
}

/// Trains for `cfg.max_epochs`, scoring the validation set in infer mode after
/// every epoch. `best.usgn` always holds the weights with the lowest validation
/// loss so far (initially the starting weights) and is reloaded at the end.
/// `history.csv` is rewritten after every epoch.
pub fn fit_with_progress(
    graph: &mut LayerGraph,
    train: &Dataset,
    val: &Dataset,
    cfg: &OptimConfig,
    dir: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if val.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::InvalidArgument("validation dataset is empty".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best_path = dir.join(BEST_CHECKPOINT);
    let history_path = dir.join(HISTORY_CSV);
    save_weights(graph, &best_path)?;
    write_history(&history_path, &[])?;

    let mut state = TrainState::new(graph);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best_epoch = None;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(graph, train, &mut state, cfg)?;
        let val_loss = evaluate_loss(graph, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                batch: 0,
                norms: norm_report(graph),
            });
        }
        if state.best_val_loss.is_none_or(|b| val_loss < b) {
            state.best_val_loss = Some(val_loss);
            best_epoch = Some(epoch);
            save_weights(graph, &best_path)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        progress(&record);
        history.push(record);
        write_history(&history_path, &history)?;
    }
    load_weights(graph, &best_path)?;
    Ok(FitResult {
        best_checkpoint: best_path,
        best_epoch,
        history,
    })
}

/// Config whose mask unfreezes exactly the named layers.
pub fn apply_freeze_schedule(cfg: &OptimConfig, graph: &LayerGraph, stage: &[&str]) -> Result<OptimConfig> {
    let mut mask = vec![true; graph.layers().len()];
    for name in stage {
        let id = graph
            .layer_id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer '{name}'")))?;
        mask[id] = false;
    }
    Ok(OptimConfig {
        freeze_mask: mask,
        ..cfg.clone()
    })
}

/// One stage per parametric layer, from the classifier back to the first conv.
pub fn sequential_schedule(graph: &LayerGraph) -> Vec<Vec<String>> {
    graph
        .parametric_layer_ids()
        .into_iter()
        .rev()
        .map(|i| vec![graph.layers()[i].name.clone()])
        .collect()
}

#[cfg(test)]
mod tests;
