//! Fixed-schedule forward and reverse passes over a [`LayerGraph`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::{LayerGraph, LayerKind, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, concat_channels, conv2d_backward_select,
    conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu, relu_backward, softmax, split_channels, unpool2x2,
    unpool2x2_backward, upconv2x2_backward_select, upconv2x2_forward, BatchNormCache, Mode, PoolIndices, Shape, Tensor,
};

/// Only what each layer's backward needs; activations are shared, not copied.
#[derive(Debug)]
enum Saved {
    Input(Arc<Tensor>),
    Norm { input: Arc<Tensor>, stats: BatchNormCache },
    Output(Arc<Tensor>),
    Pool { indices: PoolIndices, input_shape: Shape },
    Unpool { indices: PoolIndices },
    Concat { first_channels: usize },
    Nothing,
}

/// Train-mode activations for one forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    saved: Vec<Saved>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub cache: Option<ForwardCache>,
}

impl ForwardCache {
    /// Hash of every ReLU on/off mask and pool argmax offset. Two passes with
    /// equal signatures lie on the same piecewise-smooth branch.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.saved {
            match s {
                Saved::Output(out) => out.data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Saved::Pool { indices, .. } => indices.offsets().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

impl LayerGraph {
    /// Runs the network. Train mode normalizes with batch statistics, updates
    /// BN running statistics and returns a cache for [`LayerGraph::backward`].
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        check_input(input, "forward")?;
        if mode == Mode::Infer {
            let logits = self.infer_logits(input)?;
            return Ok(ForwardOutput {
                probabilities: softmax(&logits),
                logits,
                cache: None,
            });
        }
        let fingerprint = self.fingerprint();
        let mut current = Arc::new(input.clone());
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut published: Vec<Option<PoolIndices>> = Vec::new();
        let mut skips: Vec<Option<Arc<Tensor>>> = Vec::new();

        for layer in &mut self.layers {
            let (next, keep) = match &mut layer.kind {
                LayerKind::Conv { params, padding } => {
                    let out = conv2d_forward(&current, params, *padding)?;
                    (Arc::new(out), Saved::Input(current.clone()))
                }
                LayerKind::BatchNorm(bn) => {
                    let (out, stats) = batchnorm_forward_train(&current, bn)?;
                    (
                        Arc::new(out),
                        Saved::Norm {
                            input: current.clone(),
                            stats,
                        },
                    )
                }
                LayerKind::Relu => {
                    let out = Arc::new(relu(&current));
                    (out.clone(), Saved::Output(out))
                }
                LayerKind::Pool { level } => {
                    let (out, indices) = maxpool2x2_forward(&current)?;
                    let input_shape = current.shape();
                    if let Some(l) = level {
                        if published.len() <= *l {
                            published.resize(*l + 1, None);
                        }
                        published[*l] = Some(indices.clone());
                    }
                    (Arc::new(out), Saved::Pool { indices, input_shape })
                }
                LayerKind::Unpool { level } => {
                    let indices = published
                        .get_mut(*level)
                        .and_then(Option::take)
                        .ok_or_else(|| Error::InvalidGraph(format!("{}: missing pool indices", layer.name)))?;
                    let out = unpool2x2(&current, &indices)?;
                    (Arc::new(out), Saved::Unpool { indices })
                }
                LayerKind::UpConv(p) => {
                    let out = upconv2x2_forward(&current, p)?;
                    (Arc::new(out), Saved::Input(current.clone()))
                }
                LayerKind::Tap { slot } => {
                    if skips.len() <= *slot {
                        skips.resize(*slot + 1, None);
                    }
                    skips[*slot] = Some(current.clone());
                    (current.clone(), Saved::Nothing)
                }
                LayerKind::Concat { slot } => {
                    let skip = skips
                        .get(*slot)
                        .and_then(Option::as_ref)
                        .ok_or_else(|| Error::InvalidGraph(format!("{}: missing tap", layer.name)))?;
                    let first_channels = current.shape().channels;
                    let out = concat_channels(&current, skip)?;
                    (Arc::new(out), Saved::Concat { first_channels })
                }
            };
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    op: "forward",
                    layer: Some(layer.name.clone()),
                });
            }
            saved.push(keep);
            current = next;
        }

        let logits = Arc::try_unwrap(current).unwrap_or_else(|shared| (*shared).clone());
        let probabilities = softmax(&logits);
        Ok(ForwardOutput {
            logits,
            probabilities,
            cache: Some(ForwardCache { fingerprint, saved }),
        })
    }

    /// Class probabilities under running statistics; no state is modified.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        check_input(input, "predict")?;
        Ok(softmax(&self.infer_logits(input)?))
    }

    /// Fills every parameter's gradient buffer from the loss gradient with
    /// respect to the logits. Skip edges accumulate into both branches.
    pub fn backward(&mut self, cache: ForwardCache, grad_logits: &Tensor) -> Result<()> {
        if cache.fingerprint != self.fingerprint() || cache.saved.len() != self.layers.len() {
            return Err(Error::MissingCache);
        }
        self.zero_grad();
        let mut grad = grad_logits.clone();
        let mut skip_grads: Vec<Option<Tensor>> = Vec::new();

        for (i, (layer, saved)) in self.layers.iter_mut().zip(cache.saved).enumerate().rev() {
            let want_input = i > 0;
            grad = match (&mut layer.kind, saved) {
                (LayerKind::Conv { params, padding }, Saved::Input(input)) => {
                    let (gi, gw, gb) = conv2d_backward_select(&input, params, &grad, *padding, want_input)?;
                    params.weights.accumulate(&gw);
                    params.bias.accumulate(&gb);
                    match gi {
                        Some(g) => g,
                        None => break,
                    }
                }
                (LayerKind::BatchNorm(bn), Saved::Norm { input, stats }) => {
                    let g = batchnorm_backward(&input, bn, &stats, &grad)?;
                    bn.gamma.accumulate(&g.gamma);
                    bn.beta.accumulate(&g.beta);
                    g.input
                }
                (LayerKind::Relu, Saved::Output(out)) => relu_backward(&out, &grad)?,
                (LayerKind::Pool { .. }, Saved::Pool { indices, input_shape }) => {
                    maxpool2x2_backward(&grad, &indices, input_shape)?
                }
                (LayerKind::Unpool { .. }, Saved::Unpool { indices }) => unpool2x2_backward(&grad, &indices)?,
                (LayerKind::UpConv(p), Saved::Input(input)) => {
                    let (gi, gw, gb) = upconv2x2_backward_select(&input, p, &grad, want_input)?;
                    p.weights.accumulate(&gw);
                    p.bias.accumulate(&gb);
                    match gi {
                        Some(g) => g,
                        None => break,
                    }
                }
                (LayerKind::Concat { slot }, Saved::Concat { first_channels }) => {
                    let (main, skip) = split_channels(&grad, first_channels)?;
                    if skip_grads.len() <= *slot {
                        skip_grads.resize(*slot + 1, None);
                    }
                    skip_grads[*slot] = Some(skip);
                    main
                }
                (LayerKind::Tap { slot }, Saved::Nothing) => {
                    let mut g = grad;
                    if let Some(skip) = skip_grads.get_mut(*slot).and_then(Option::take) {
                        for (a, b) in g.data_mut().iter_mut().zip(skip.data()) {
                            *a += b;
                        }
                    }
                    g
                }
                _ => return Err(Error::MissingCache),
            };
        }
        Ok(())
    }
}

impl LayerGraph {
    /// Infer-mode logits; BN uses running statistics and nothing is mutated.
    fn infer_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut current = input.clone();
        let mut published: Vec<Option<PoolIndices>> = Vec::new();
        let mut skips: Vec<Option<Tensor>> = Vec::new();
        for layer in &self.layers {
            current = match &layer.kind {
                LayerKind::Conv { params, padding } => conv2d_forward(&current, params, *padding)?,
                LayerKind::BatchNorm(bn) => batchnorm_forward_infer(&current, bn)?,
                LayerKind::Relu => relu(&current),
                LayerKind::Pool { level } => {
                    let (out, indices) = maxpool2x2_forward(&current)?;
                    if let Some(l) = level {
                        if published.len() <= *l {
                            published.resize(*l + 1, None);
                        }
                        published[*l] = Some(indices);
                    }
                    out
                }
                LayerKind::Unpool { level } => {
                    let indices = published
                        .get_mut(*level)
                        .and_then(Option::take)
                        .ok_or_else(|| Error::InvalidGraph(format!("{}: missing pool indices", layer.name)))?;
                    unpool2x2(&current, &indices)?
                }
                LayerKind::UpConv(p) => upconv2x2_forward(&current, p)?,
                LayerKind::Tap { slot } => {
                    if skips.len() <= *slot {
                        skips.resize(*slot + 1, None);
                    }
                    skips[*slot] = Some(current.clone());
                    current
                }
                LayerKind::Concat { slot } => {
                    let skip = skips
                        .get(*slot)
                        .and_then(Option::as_ref)
                        .ok_or_else(|| Error::InvalidGraph(format!("{}: missing tap", layer.name)))?;
                    concat_channels(&current, skip)?
                }
            };
            if !current.is_finite() {
                return Err(Error::NonFinite {
                    op: "forward",
                    layer: Some(layer.name.clone()),
                });
            }
        }
        Ok(current)
    }
}

fn check_input(input: &Tensor, op: &'static str) -> Result<()> {
    let s = input.shape();
    if s.channels != INPUT_CHANNELS || !s.height.is_multiple_of(8) || !s.width.is_multiple_of(8) {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("(N, {INPUT_CHANNELS}, H, W) with H, W divisible by 8"),
            found: s.to_string(),
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFinite {
            op,
            layer: Some("input".into()),
        });
    }
    Ok(())
}
