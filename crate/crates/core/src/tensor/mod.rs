//! Dense 4-D tensors and the differentiable kernels the networks are built from.
//!
//! Every kernel is a pure function of its inputs. Forward kernels that need
//! state for their backward pass return it explicitly (pool indices, batch
//! normalization statistics); callers decide what to keep.

mod activation;
mod conv;
mod gemm;
mod loss;
mod norm;
mod pool;
mod upconv;

use std::fmt;

pub use activation::{concat_channels, relu, relu_backward, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use loss::{softmax, softmax_ce, SoftmaxCe};
pub use norm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_infer, batchnorm_forward_train, BatchNormCache,
    BatchNormGrads, BatchNormParams, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, unpool2x2, unpool2x2_backward, PoolIndices};
pub use upconv::{upconv2x2_backward, upconv2x2_forward, UpConvGrads, UpConvParams};

pub(crate) use conv::conv2d_backward_select;
pub(crate) use upconv::upconv2x2_backward_select;

use crate::error::{Error, Result};

/// Whether a forward pass runs with batch statistics (and caches) or frozen statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch entry.
    pub const fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub const fn with_spatial(self, height: usize, width: usize) -> Self {
        Self { height, width, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Row-major (batch, channel, row, column) array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: format!("{} values for {shape}", shape.len()),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = value;
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.shape.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op, layer: None })
        }
    }

    /// Copies batch entries `range` into a new tensor.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        if range.end > self.shape.batch || range.start > range.end {
            return Err(Error::ShapeMismatch {
                op: "batch_slice",
                expected: format!("range within 0..{}", self.shape.batch),
                found: format!("{range:?}"),
            });
        }
        let n = self.shape.sample_len();
        let shape = Shape {
            batch: range.len(),
            ..self.shape
        };
        Ok(Tensor {
            shape,
            data: self.data[range.start * n..range.end * n].to_vec(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Learnable array with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn accumulate(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }
}

pub(crate) fn shape_err(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Relative error with a small absolute floor so near-zero pairs compare sensibly.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference of `f` with respect to `x[i]`.
    pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        (plus - minus) / (2.0 * h)
    }

    /// Scalar objective sum(out * weights) used to turn a tensor map into a loss.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(Shape::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Tensor::new(Shape::new(1, 2, 2, 2), vec![0.0; 8]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |b, c, y, x| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 0, 0, 0)], 1000.0);
        assert_eq!(t.plane(0, 1)[0], 100.0);
    }

    #[test]
    fn batch_slice_copies_entries() {
        let t = Tensor::from_fn(Shape::new(3, 1, 1, 2), |b, _, _, x| (b * 2 + x) as f64);
        let s = t.batch_slice(1..3).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 1, 2));
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
