//! Per-channel batch normalization with running statistics.

use super::{shape_err, Mode, Param, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    /// Weight of the newest batch in the running-statistics moving average.
    pub momentum: f64,
    /// Set by the first train-mode update, a checkpoint load, or [`Self::init_running_stats`].
    pub stats_ready: bool,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            stats_ready: false,
        }
    }

    /// Marks the running statistics as usable (mean 0, variance 1 unless already set).
    pub fn init_running_stats(&mut self) {
        self.stats_ready = true;
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn check_channels(input: &Tensor, params: &BatchNormParams) -> Result<()> {
    if input.shape().channels != params.channels {
        return Err(shape_err(
            "batchnorm",
            format!("{} channels", params.channels),
            input.shape(),
        ));
    }
    Ok(())
}

/// Dispatches on `mode`; the cache is only produced in train mode.
pub fn batchnorm_forward(
    input: &Tensor,
    params: &mut BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, Option<BatchNormCache>)> {
    match mode {
        Mode::Train => batchnorm_forward_train(input, params).map(|(t, c)| (t, Some(c))),
        Mode::Infer => batchnorm_forward_infer(input, params).map(|t| (t, None)),
    }
}

/// Normalizes with batch statistics and folds them into the running averages
/// (running variance uses the unbiased estimate).
pub fn batchnorm_forward_train(input: &Tensor, params: &mut BatchNormParams) -> Result<(Tensor, BatchNormCache)> {
    check_channels(input, params)?;
    let s = input.shape();
    let count = s.batch * s.plane();
    if count < 2 {
        return Err(Error::BatchTooSmall(count));
    }
    let plane = s.plane();
    let mut mean = vec![0.0; s.channels];
    let mut var = vec![0.0; s.channels];
    for b in 0..s.batch {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += input.plane(b, c).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for b in 0..s.batch {
        for c in 0..s.channels {
            var[c] += input.plane(b, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        let dst = out.sample_mut(b);
        for c in 0..s.channels {
            let (g, be) = (params.gamma.value[c], params.beta.value[c]);
            let src = input.plane(b, c);
            for (d, &x) in dst[c * plane..(c + 1) * plane].iter_mut().zip(src) {
                *d = g * (x - mean[c]) * inv_std[c] + be;
            }
        }
    }

    let momentum = params.momentum;
    let unbias = count as f64 / (count as f64 - 1.0);
    for c in 0..s.channels {
        params.running_mean[c] = (1.0 - momentum) * params.running_mean[c] + momentum * mean[c];
        params.running_var[c] = (1.0 - momentum) * params.running_var[c] + momentum * var[c] * unbias;
    }
    params.stats_ready = true;
    Ok((out, BatchNormCache { mean, inv_std }))
}

pub fn batchnorm_forward_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    check_channels(input, params)?;
    if !params.stats_ready {
        return Err(Error::StatsUninitialized);
    }
    let s = input.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        let dst = out.sample_mut(b);
        for c in 0..s.channels {
            let inv_std = 1.0 / (params.running_var[c] + params.epsilon).sqrt();
            let scale = params.gamma.value[c] * inv_std;
            let shift = params.beta.value[c] - params.running_mean[c] * scale;
            for (d, &x) in dst[c * plane..(c + 1) * plane].iter_mut().zip(input.plane(b, c)) {
                *d = x * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Gradients of the train-mode forward map given its input and cached statistics.
pub fn batchnorm_backward(
    input: &Tensor,
    params: &BatchNormParams,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    check_channels(input, params)?;
    let s = input.shape();
    if grad_out.shape() != s {
        return Err(shape_err("batchnorm_backward", s, grad_out.shape()));
    }
    let plane = s.plane();
    let count = (s.batch * plane) as f64;
    let mut sum_g = vec![0.0; s.channels];
    let mut sum_gx = vec![0.0; s.channels];
    for b in 0..s.batch {
        for c in 0..s.channels {
            let (m, is) = (cache.mean[c], cache.inv_std[c]);
            for (&x, &g) in input.plane(b, c).iter().zip(grad_out.plane(b, c)) {
                sum_g[c] += g;
                sum_gx[c] += g * (x - m) * is;
            }
        }
    }
    let mut grad_in = Tensor::zeros(s);
    for b in 0..s.batch {
        let dst = grad_in.sample_mut(b);
        for c in 0..s.channels {
            let (m, is) = (cache.mean[c], cache.inv_std[c]);
            let k = params.gamma.value[c] * is / count;
            let src = input.plane(b, c).iter().zip(grad_out.plane(b, c));
            for (d, (&x, &g)) in dst[c * plane..(c + 1) * plane].iter_mut().zip(src) {
                let xhat = (x - m) * is;
                *d = k * (count * g - sum_g[c] - xhat * sum_gx[c]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_in,
        gamma: sum_gx,
        beta: sum_g,
    })
}
