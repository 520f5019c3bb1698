//! Central-difference check of end-to-end parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerGraph, LayerKind};
use crate::error::Result;
use crate::tensor::{softmax_ce, Mode, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub layer: String,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// False when either perturbed pass switched a ReLU or max-pool branch,
    /// so the central difference straddles a kink.
    pub smooth: bool,
}

impl GradSample {
    /// |a − n| / max(|a|, |n|), floored at 1e-8 in the denominator.
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-8)
    }
}

/// Loss and activation signature of one train-mode pass.
fn train_loss(graph: &mut LayerGraph, input: &Tensor, labels: &[u8]) -> Result<(f64, u64)> {
    let out = graph.forward(input, Mode::Train)?;
    let signature = out.cache.as_ref().expect("train mode").activation_signature();
    Ok((softmax_ce(&out.logits, labels, None)?.loss, signature))
}

/// Compares analytic gradients of the train-mode softmax cross-entropy loss
/// against central differences with step `h`.
///
/// Parameters are drawn round-robin over the parametric layers until `samples`
/// smooth draws are collected or `20 × samples` draws have been made. Every
/// draw is returned, smooth or not.
pub fn check_gradients(
    graph: &mut LayerGraph,
    input: &Tensor,
    labels: &[u8],
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    let out = graph.forward(input, Mode::Train)?;
    let ce = softmax_ce(&out.logits, labels, None)?;
    let cache = out.cache.expect("train mode");
    let base = cache.activation_signature();
    graph.backward(cache, &ce.grad_logits)?;
    let analytic: Vec<Vec<Vec<f64>>> = graph
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| p.grad.clone()).collect())
        .collect();

    let ids = graph.parametric_layer_ids();
    let layers = graph.layers();
    // A conv bias feeding batch normalization has an identically zero gradient
    // (the mean subtraction cancels it), so only its weights are sampled.
    let before_bn = |i: usize| matches!(layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::BatchNorm(_)));
    let tensors: Vec<usize> = ids
        .iter()
        .map(|&i| if before_bn(i) { 1 } else { layers[i].params().len() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut smooth = 0;
    for draw in 0..samples * 20 {
        if smooth == samples || ids.is_empty() {
            break;
        }
        let slot = draw % ids.len();
        let layer = ids[slot];
        let tensor = rng.random_range(0..tensors[slot]);
        let index = rng.random_range(0..graph.layers()[layer].params()[tensor].len());

        let orig = graph.layers()[layer].params()[tensor].value[index];
        let set = |g: &mut LayerGraph, v: f64| g.layers_mut()[layer].params_mut()[tensor].value[index] = v;
        set(graph, orig + h);
        let (plus, sig_plus) = train_loss(graph, input, labels)?;
        set(graph, orig - h);
        let (minus, sig_minus) = train_loss(graph, input, labels)?;
        set(graph, orig);
        let sample = GradSample {
            layer: graph.layers()[layer].name.clone(),
            tensor,
            index,
            analytic: analytic[layer][tensor][index],
            numeric: (plus - minus) / (2.0 * h),
            smooth: sig_plus == base && sig_minus == base,
        };
        smooth += usize::from(sample.smooth);
        results.push(sample);
    }
    Ok(results)
}
