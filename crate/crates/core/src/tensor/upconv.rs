//! Learnable 2×2 stride-2 transposed convolution (non-overlapping upsampling).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::{gemm, View};
use super::{shape_err, Param, Tensor};
use crate::error::Result;

/// Weights laid out as (in_channels, out_channels, 2, 2).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Param,
    pub bias: Param,
}

impl UpConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: Param::zeros(in_channels * out_channels * 4),
            bias: Param::zeros(out_channels),
        }
    }

    /// Each output pixel sees exactly `in_channels` inputs, which sets the fan-in.
    pub fn he_normal<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_channels, out_channels);
        let normal = Normal::new(0.0, (2.0 / in_channels as f64).sqrt()).expect("positive std");
        p.weights.value.iter_mut().for_each(|w| *w = normal.sample(rng));
        p
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// out[b,o,2y+i,2x+j] = bias[o] + Σ_c in[b,c,y,x]·w[c,o,i,j]
pub fn upconv2x2_forward(input: &Tensor, params: &UpConvParams) -> Result<Tensor> {
    let s = input.shape();
    if s.channels != params.in_channels {
        return Err(shape_err(
            "upconv2x2",
            format!("{} input channels", params.in_channels),
            s,
        ));
    }
    input.ensure_finite("upconv2x2")?;
    let (h, w) = (s.height, s.width);
    let plane = h * w;
    let rows = params.out_channels * 4;
    let out_shape = s.with_channels(params.out_channels).with_spatial(2 * h, 2 * w);
    let mut out = Tensor::zeros(out_shape);
    let mut expanded = vec![0.0; rows * plane];
    for b in 0..s.batch {
        gemm(
            rows,
            params.in_channels,
            plane,
            1.0,
            View::transposed(&params.weights.value, rows),
            View::rows(input.sample(b), plane),
            0.0,
            &mut expanded,
        );
        let dst = out.sample_mut(b);
        for o in 0..params.out_channels {
            for k in 0..4 {
                let (i, j) = (k / 2, k % 2);
                let src = &expanded[(o * 4 + k) * plane..(o * 4 + k + 1) * plane];
                for y in 0..h {
                    for x in 0..w {
                        dst[(o * 2 * h + 2 * y + i) * 2 * w + 2 * x + j] = src[y * w + x] + params.bias.value[o];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2x2_backward(input: &Tensor, params: &UpConvParams, grad_out: &Tensor) -> Result<UpConvGrads> {
    let (gi, gw, gb) = upconv2x2_backward_select(input, params, grad_out, true)?;
    Ok(UpConvGrads {
        input: gi.expect("requested input gradient"),
        weights: gw,
        bias: gb,
    })
}

pub(crate) fn upconv2x2_backward_select(
    input: &Tensor,
    params: &UpConvParams,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Vec<f64>, Vec<f64>)> {
    let s = input.shape();
    let out_shape = s
        .with_channels(params.out_channels)
        .with_spatial(2 * s.height, 2 * s.width);
    if s.channels != params.in_channels || grad_out.shape() != out_shape {
        return Err(shape_err("upconv2x2_backward", out_shape, grad_out.shape()));
    }
    let (h, w) = (s.height, s.width);
    let plane = h * w;
    let rows = params.out_channels * 4;
    let mut grad_w = vec![0.0; params.weights.len()];
    let mut grad_b = vec![0.0; params.out_channels];
    let mut grad_in = want_input.then(|| Tensor::zeros(s));
    let mut gathered = vec![0.0; rows * plane];
    for b in 0..s.batch {
        let g = grad_out.sample(b);
        for o in 0..params.out_channels {
            for k in 0..4 {
                let (i, j) = (k / 2, k % 2);
                let dst = &mut gathered[(o * 4 + k) * plane..(o * 4 + k + 1) * plane];
                for y in 0..h {
                    for x in 0..w {
                        let v = g[(o * 2 * h + 2 * y + i) * 2 * w + 2 * x + j];
                        dst[y * w + x] = v;
                        grad_b[o] += v;
                    }
                }
            }
        }
        // dW (in × out·4) += X (in × plane) · Gᵀ (plane × out·4)
        gemm(
            params.in_channels,
            plane,
            rows,
            1.0,
            View::rows(input.sample(b), plane),
            View::transposed(&gathered, plane),
            1.0,
            &mut grad_w,
        );
        if let Some(gi) = grad_in.as_mut() {
            gemm(
                params.in_channels,
                rows,
                plane,
                1.0,
                View::rows(&params.weights.value, rows),
                View::rows(&gathered, plane),
                0.0,
                gi.sample_mut(b),
            );
        }
    }
    Ok((grad_in, grad_w, grad_b))
}
