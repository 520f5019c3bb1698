//! Stride-1 2-D convolution lowered to a patch matrix and a GEMM per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::{gemm, View};
use super::{shape_err, Param, Shape, Tensor};
use crate::error::Result;

/// Weights laid out as (out_channels, in_channels, kernel, kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weights: Param,
    pub bias: Param,
}

impl ConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: Param::zeros(out_channels * in_channels * kernel * kernel),
            bias: Param::zeros(out_channels),
        }
    }

    /// Zero-mean Gaussian weights with standard deviation sqrt(2 / fan_in), zero bias.
    pub fn he_normal<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_channels, out_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        p.weights.value.iter_mut().for_each(|w| *w = normal.sample(rng));
        p
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn output_shape(&self, input: Shape, padding: usize) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(shape_err(
                "conv2d",
                format!("{} input channels", self.in_channels),
                input,
            ));
        }
        let (h, w) = (input.height + 2 * padding, input.width + 2 * padding);
        if h < self.kernel || w < self.kernel {
            return Err(shape_err(
                "conv2d",
                format!("padded input at least {0}x{0}", self.kernel),
                input,
            ));
        }
        Ok(Shape::new(
            input.batch,
            self.out_channels,
            h - self.kernel + 1,
            w - self.kernel + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Geometry shared by the lowering helpers.
#[derive(Clone, Copy)]
struct Lowering {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Lowering {
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` for which input column `ox + kx - padding` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.width + self.padding).saturating_sub(kx).min(self.out_w);
        (lo, hi.max(lo))
    }

    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.padding)?;
        (iy < self.height).then_some(iy)
    }

    /// Writes the (c·k·k) × (out_h·out_w) patch matrix of one sample.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let plane = self.height * self.width;
        let out_plane = self.out_plane();
        for c in 0..self.channels {
            let src = &sample[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src_row(oy, ky) {
                            Some(iy) if lo < hi => {
                                line[..lo].iter_mut().for_each(|v| *v = 0.0);
                                line[hi..].iter_mut().for_each(|v| *v = 0.0);
                                let start = iy * self.width + lo + kx - self.padding;
                                line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            }
                            _ => line.iter_mut().for_each(|v| *v = 0.0),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto one sample's input plane.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let k = self.kernel;
        let plane = self.height * self.width;
        let out_plane = self.out_plane();
        for c in 0..self.channels {
            let dst = &mut sample[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * out_plane..(row + 1) * out_plane];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        if let Some(iy) = self.src_row(oy, ky) {
                            let start = iy * self.width + lo + kx - self.padding;
                            let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                            for (d, s) in dst[start..start + (hi - lo)].iter_mut().zip(line) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// 1×1 kernels without padding read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }
}

fn lowering(input: Shape, params: &ConvParams, padding: usize, out: Shape) -> Lowering {
    Lowering {
        channels: input.channels,
        height: input.height,
        width: input.width,
        kernel: params.kernel,
        padding,
        out_h: out.height,
        out_w: out.width,
    }
}

/// out[b,o,y,x] = bias[o] + Σ w[o,c,dy,dx]·in_padded[b,c,y+dy,x+dx]
pub fn conv2d_forward(input: &Tensor, params: &ConvParams, padding: usize) -> Result<Tensor> {
    input.ensure_finite("conv2d")?;
    let out_shape = params.output_shape(input.shape(), padding)?;
    let geo = lowering(input.shape(), params, padding, out_shape);
    let out_plane = geo.out_plane();
    let patch = params.patch_len();
    let mut out = Tensor::zeros(out_shape);
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * out_plane]
    };

    for b in 0..input.shape().batch {
        let dst = out.sample_mut(b);
        for (o, chunk) in dst.chunks_mut(out_plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = params.bias.value[o]);
        }
        let rhs = if geo.is_pointwise() {
            input.sample(b)
        } else {
            geo.im2col(input.sample(b), &mut cols);
            &cols
        };
        gemm(
            params.out_channels,
            patch,
            out_plane,
            1.0,
            View::rows(&params.weights.value, patch),
            View::rows(rhs, out_plane),
            1.0,
            dst,
        );
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor, padding: usize) -> Result<ConvGrads> {
    let (gi, gw, gb) = conv2d_backward_select(input, params, grad_out, padding, true)?;
    Ok(ConvGrads {
        input: gi.expect("requested input gradient"),
        weights: gw,
        bias: gb,
    })
}

/// Backward pass that can skip the input gradient (first layer of a network).
pub(crate) fn conv2d_backward_select(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    padding: usize,
    want_input: bool,
) -> Result<(Option<Tensor>, Vec<f64>, Vec<f64>)> {
    let out_shape = params.output_shape(input.shape(), padding)?;
    if grad_out.shape() != out_shape {
        return Err(shape_err("conv2d_backward", out_shape, grad_out.shape()));
    }
    grad_out.ensure_finite("conv2d_backward")?;
    let geo = lowering(input.shape(), params, padding, out_shape);
    let out_plane = geo.out_plane();
    let patch = params.patch_len();
    let mut grad_w = vec![0.0; params.weights.len()];
    let mut grad_b = vec![0.0; params.out_channels];
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { patch * out_plane }];
    let mut dcols = vec![0.0; if want_input { patch * out_plane } else { 0 }];

    for b in 0..input.shape().batch {
        let dy = grad_out.sample(b);
        for (o, chunk) in dy.chunks(out_plane).enumerate() {
            grad_b[o] += chunk.iter().sum::<f64>();
        }
        let lhs = if geo.is_pointwise() {
            input.sample(b)
        } else {
            geo.im2col(input.sample(b), &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(
            params.out_channels,
            out_plane,
            patch,
            1.0,
            View::rows(dy, out_plane),
            View::transposed(lhs, out_plane),
            1.0,
            &mut grad_w,
        );
        if let Some(gi) = grad_in.as_mut() {
            // dcols = Wᵀ · dY
            let w_t = View::transposed(&params.weights.value, patch);
            if geo.is_pointwise() {
                gemm(
                    patch,
                    params.out_channels,
                    out_plane,
                    1.0,
                    w_t,
                    View::rows(dy, out_plane),
                    0.0,
                    gi.sample_mut(b),
                );
            } else {
                gemm(
                    patch,
                    params.out_channels,
                    out_plane,
                    1.0,
                    w_t,
                    View::rows(dy, out_plane),
                    0.0,
                    &mut dcols,
                );
                geo.col2im(&dcols, gi.sample_mut(b));
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    /// Direct nested-loop convolution used as the reference.
    fn reference_conv(input: &Tensor, p: &ConvParams, pad: usize) -> Tensor {
        let s = input.shape();
        let k = p.kernel;
        let (oh, ow) = (s.height + 2 * pad - k + 1, s.width + 2 * pad - k + 1);
        let mut out = Tensor::zeros(Shape::new(s.batch, p.out_channels, oh, ow));
        for b in 0..s.batch {
            for o in 0..p.out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = p.bias.value[o];
                        for c in 0..s.channels {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iy = (y + dy) as isize - pad as isize;
                                    let ix = (x + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                        continue;
                                    }
                                    let w = p.weights.value[((o * s.channels + c) * k + dy) * k + dx];
                                    acc += w * input.at(b, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(b, o, y, x, acc);
                    }
                }
            }
        }
        out
    }

    fn random_params(cin: usize, cout: usize, k: usize, seed: u64) -> ConvParams {
        let mut p = ConvParams::zeros(cin, cout, k);
        p.weights.value = random_vec(p.weights.len(), seed);
        p.bias.value = random_vec(cout, seed + 1);
        p
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut p = random_params(1, 1, 3, 3);
        p.bias.value = vec![0.5];
        let out = conv2d_forward(&Tensor::zeros(Shape::new(1, 1, 3, 3)), &p, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ones_kernel_center_sums_input() {
        let mut p = ConvParams::zeros(1, 1, 3);
        p.weights.value = vec![1.0; 9];
        let input = random_tensor(Shape::new(1, 1, 3, 3), 11);
        let out = conv2d_forward(&input, &p, 1).unwrap();
        let total: f64 = input.data().iter().sum();
        assert!((out.at(0, 0, 1, 1) - total).abs() < 1e-15);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let input = random_tensor(Shape::new(1, 2, 5, 5), 1);
        let p = random_params(2, 3, 3, 2);
        let got = conv2d_forward(&input, &p, 1).unwrap();
        let want = reference_conv(&input, &p, 1);
        assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        // pointwise path and rectangular planes
        let input = random_tensor(Shape::new(2, 4, 3, 6), 5);
        let p = random_params(4, 2, 1, 6);
        let got = conv2d_forward(&input, &p, 0).unwrap();
        let want = reference_conv(&input, &p, 0);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_spatial_size() {
        let input = random_tensor(Shape::new(1, 3, 8, 6), 3);
        assert_eq!(
            conv2d_forward(&input, &random_params(3, 5, 3, 1), 1).unwrap().shape(),
            Shape::new(1, 5, 8, 6)
        );
        assert_eq!(
            conv2d_forward(&input, &random_params(3, 5, 1, 1), 0).unwrap().shape(),
            Shape::new(1, 5, 8, 6)
        );
    }

    #[test]
    fn rejects_channel_mismatch_and_non_finite() {
        let p = random_params(2, 1, 3, 1);
        assert!(conv2d_forward(&Tensor::zeros(Shape::new(1, 3, 4, 4)), &p, 1).is_err());
        let mut bad = Tensor::zeros(Shape::new(1, 2, 4, 4));
        bad.data_mut()[5] = f64::NAN;
        assert!(conv2d_forward(&bad, &p, 1).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let input = random_tensor(Shape::new(1, 2, 4, 4), 1);
        let p = random_params(2, 3, 3, 2);
        let g = conv2d_backward(&input, &p, &Tensor::zeros(Shape::new(1, 3, 4, 4)), 1).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_single_pixel_scalar_chain_rule() {
        let input = Tensor::new(Shape::new(1, 1, 1, 1), vec![1.5]).unwrap();
        let mut p = ConvParams::zeros(1, 1, 1);
        p.weights.value = vec![-2.0];
        let g = conv2d_backward(&input, &p, &Tensor::new(Shape::new(1, 1, 1, 1), vec![0.25]).unwrap(), 0).unwrap();
        assert_eq!(g.weights, vec![1.5 * 0.25]);
        assert_eq!(g.bias, vec![0.25]);
        assert_eq!(g.input.data(), &[-2.0 * 0.25]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = Shape::new(2, 2, 4, 5);
        let input = random_tensor(shape, 21);
        let p = random_params(2, 3, 3, 22);
        let cot = random_vec(2 * 3 * 4 * 5, 23);
        let g = conv2d_backward(
            &input,
            &p,
            &Tensor::new(Shape::new(2, 3, 4, 5), cot.clone()).unwrap(),
            1,
        )
        .unwrap();
        let h = 1e-5;

        let mut x = input.data().to_vec();
        for i in 0..x.len() {
            let num = central_diff(&mut x, i, h, |v| {
                let t = Tensor::new(shape, v.to_vec()).unwrap();
                dot(conv2d_forward(&t, &p, 1).unwrap().data(), &cot)
            });
            assert!(rel_err(g.input.data()[i], num) < 1e-6, "input {i}");
        }
        let mut w = p.weights.value.clone();
        for i in 0..w.len() {
            let num = central_diff(&mut w, i, h, |v| {
                let mut q = p.clone();
                q.weights.value = v.to_vec();
                dot(conv2d_forward(&input, &q, 1).unwrap().data(), &cot)
            });
            assert!(rel_err(g.weights[i], num) < 1e-6, "weight {i}");
        }
        let mut bias = p.bias.value.clone();
        for i in 0..bias.len() {
            let num = central_diff(&mut bias, i, h, |v| {
                let mut q = p.clone();
                q.bias.value = v.to_vec();
                dot(conv2d_forward(&input, &q, 1).unwrap().data(), &cot)
            });
            assert!(rel_err(g.bias[i], num) < 1e-6, "bias {i}");
        }
    }
}
