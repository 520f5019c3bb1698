//! 2×2 max pooling that records argmax positions, and the matching sparse unpooling.

use super::{shape_err, Shape, Tensor};
use crate::error::{Error, Result};

/// Argmax offsets of a 2×2 max-pool.
///
/// One entry per pooled output element, holding the flat `y * width + x`
/// offset of the winning position inside the pre-pool plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pooled: Shape,
    offsets: Vec<u32>,
}

impl PoolIndices {
    /// Builds indices from raw offsets, validating that each lies in its window.
    pub fn new(pooled: Shape, offsets: Vec<u32>) -> Result<Self> {
        if offsets.len() != pooled.len() {
            return Err(shape_err("pool_indices", pooled.len(), offsets.len()));
        }
        let idx = Self { pooled, offsets };
        idx.validate()?;
        Ok(idx)
    }

    pub fn pooled_shape(&self) -> Shape {
        self.pooled
    }

    pub fn source_shape(&self) -> Shape {
        self.pooled.with_spatial(self.pooled.height * 2, self.pooled.width * 2)
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = (self.pooled.height, self.pooled.width);
        let src_w = 2 * w;
        for plane in self.offsets.chunks(h * w) {
            for (i, &off) in plane.iter().enumerate() {
                let (oy, ox) = (i / w, i % w);
                let off = off as usize;
                let (y, x) = (off / src_w, off % src_w);
                if y / 2 != oy || x / 2 != ox || y >= 2 * h {
                    return Err(Error::IndexOutOfWindow {
                        offset: off,
                        y: oy,
                        x: ox,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Max over each non-overlapping 2×2 window. Ties go to the first position in
/// row-major window order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = input.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::OddSpatial {
            op: "maxpool2x2",
            height: s.height,
            width: s.width,
        });
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let pooled = s.with_spatial(oh, ow);
    let mut out = Vec::with_capacity(pooled.len());
    let mut offsets = Vec::with_capacity(pooled.len());
    for plane in input.data().chunks(s.plane().max(1)).take(s.batch * s.channels) {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * s.width + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + s.width, base + s.width + 1] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.push(plane[best]);
                offsets.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(pooled, out)?, PoolIndices { pooled, offsets }))
}

/// Routes each pooled gradient to its recorded argmax; every other input position gets 0.
pub fn maxpool2x2_backward(grad_out: &Tensor, indices: &PoolIndices, input_shape: Shape) -> Result<Tensor> {
    if input_shape != indices.source_shape() {
        return Err(shape_err("maxpool2x2_backward", indices.source_shape(), input_shape));
    }
    scatter(grad_out, indices, "maxpool2x2_backward")
}

/// Doubles both spatial dimensions, writing each value at its recorded argmax position.
pub fn unpool2x2(input: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    scatter(input, indices, "unpool2x2")
}

/// Gathers the upsampled gradient at the recorded positions.
pub fn unpool2x2_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    let src = indices.source_shape();
    if grad_out.shape() != src {
        return Err(shape_err("unpool2x2_backward", src, grad_out.shape()));
    }
    let pooled = indices.pooled;
    let plane = pooled.plane();
    let mut out = Vec::with_capacity(pooled.len());
    for (p, offs) in indices
        .offsets
        .chunks(plane.max(1))
        .enumerate()
        .take(pooled.batch * pooled.channels)
    {
        let g = &grad_out.data()[p * src.plane()..(p + 1) * src.plane()];
        out.extend(offs.iter().map(|&o| g[o as usize]));
    }
    Tensor::new(pooled, out)
}

fn scatter(values: &Tensor, indices: &PoolIndices, op: &'static str) -> Result<Tensor> {
    if values.shape() != indices.pooled {
        return Err(shape_err(op, indices.pooled, values.shape()));
    }
    let src = indices.source_shape();
    let mut out = Tensor::zeros(src);
    let plane = indices.pooled.plane();
    let src_plane = src.plane();
    if plane == 0 {
        return Ok(out);
    }
    let (h, w) = (indices.pooled.height, indices.pooled.width);
    for (p, (vals, offs)) in values
        .data()
        .chunks(plane)
        .zip(indices.offsets.chunks(plane))
        .enumerate()
    {
        let dst = &mut out.data_mut()[p * src_plane..(p + 1) * src_plane];
        for (i, (&v, &off)) in vals.iter().zip(offs).enumerate() {
            let off = off as usize;
            let (y, x) = (off / (2 * w), off % (2 * w));
            if y / 2 != i / w || x / 2 != i % w || y >= 2 * h {
                return Err(Error::IndexOutOfWindow {
                    offset: off,
                    y: i / w,
                    x: i % w,
                });
            }
            dst[off] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    fn t(h: usize, w: usize, vals: &[f64]) -> Tensor {
        Tensor::new(Shape::new(1, 1, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn unique_max_and_index() {
        let (out, idx) = maxpool2x2_forward(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);
    }

    #[test]
    fn ties_pick_first_in_row_major_order() {
        let (out, idx) = maxpool2x2_forward(&t(2, 2, &[5.0; 4])).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(idx.offsets(), &[0]);
        let (_, idx) = maxpool2x2_forward(&t(2, 2, &[1.0, 7.0, 7.0, 7.0])).unwrap();
        assert_eq!(idx.offsets(), &[1]);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            maxpool2x2_forward(&Tensor::zeros(Shape::new(1, 1, 3, 4))),
            Err(Error::OddSpatial { .. })
        ));
    }

    #[test]
    fn matches_window_scan() {
        let x = random_tensor(Shape::new(1, 1, 8, 8), 4);
        let (out, idx) = maxpool2x2_forward(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x.at(0, 0, 2 * oy + dy, 2 * ox + dx);
                        if v > best {
                            best = v;
                            at = (2 * oy + dy) * 8 + 2 * ox + dx;
                        }
                    }
                }
                assert_eq!(out.at(0, 0, oy, ox), best);
                assert_eq!(idx.offsets()[oy * 4 + ox] as usize, at);
            }
        }
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = random_tensor(Shape::new(2, 3, 4, 6), 9);
        let (out, idx) = maxpool2x2_forward(&x).unwrap();
        let g = maxpool2x2_backward(&Tensor::filled(out.shape(), 1.0), &idx, x.shape()).unwrap();
        for p in 0..6 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let ones: usize = (0..4)
                        .filter(|k| {
                            let (y, xx) = (2 * oy + k / 2, 2 * ox + k % 2);
                            g.data()[p * 24 + y * 6 + xx] == 1.0
                        })
                        .count();
                    assert_eq!(ones, 1);
                }
            }
        }
        assert_eq!(g.data().iter().sum::<f64>(), out.shape().len() as f64);
        let zero = maxpool2x2_backward(&Tensor::zeros(out.shape()), &idx, x.shape()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = Shape::new(1, 2, 4, 4);
        let x = random_tensor(shape, 31);
        let (out, idx) = maxpool2x2_forward(&x).unwrap();
        let cot = random_vec(out.shape().len(), 32);
        let g = maxpool2x2_backward(&Tensor::new(out.shape(), cot.clone()).unwrap(), &idx, shape).unwrap();
        let mut v = x.data().to_vec();
        for i in 0..v.len() {
            let num = central_diff(&mut v, i, 1e-5, |d| {
                let t = Tensor::new(shape, d.to_vec()).unwrap();
                dot(maxpool2x2_forward(&t).unwrap().0.data(), &cot)
            });
            assert!((g.data()[i] - num).abs() < 1e-8, "entry {i}");
        }
    }

    #[test]
    fn unpool_round_trip() {
        // pooling only ever sees rectified activations; an all-negative window
        // would repool to one of the zeros written by unpooling
        let x = crate::tensor::relu(&random_tensor(Shape::new(1, 2, 4, 4), 5));
        let (pooled, idx) = maxpool2x2_forward(&x).unwrap();
        let up = unpool2x2(&pooled, &idx).unwrap();
        for (i, (&u, &orig)) in up.data().iter().zip(x.data()).enumerate() {
            let plane = i / 16;
            let is_arg = idx.offsets()[plane * 4..(plane + 1) * 4].contains(&((i % 16) as u32));
            if is_arg {
                assert_eq!(u, orig);
            } else {
                assert_eq!(u, 0.0);
            }
        }
        let (again, idx2) = maxpool2x2_forward(&up).unwrap();
        assert_eq!(again, pooled);
        assert_eq!(idx2, idx);
    }

    #[test]
    fn unpool_zero_input_and_shape_mismatch() {
        let x = random_tensor(Shape::new(1, 1, 4, 4), 5);
        let (pooled, idx) = maxpool2x2_forward(&x).unwrap();
        let up = unpool2x2(&Tensor::zeros(pooled.shape()), &idx).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0));
        assert!(unpool2x2(&Tensor::zeros(Shape::new(1, 1, 3, 2)), &idx).is_err());
    }

    #[test]
    fn unpool_backward_gathers() {
        let x = random_tensor(Shape::new(1, 1, 4, 4), 8);
        let (pooled, idx) = maxpool2x2_forward(&x).unwrap();
        let g = unpool2x2_backward(&x, &idx).unwrap();
        assert_eq!(g, pooled);
    }

    #[test]
    fn corrupted_indices_rejected() {
        let shape = Shape::new(1, 1, 1, 2);
        assert!(PoolIndices::new(shape, vec![0, 1]).is_err());
        assert!(PoolIndices::new(shape, vec![5, 3]).is_ok());
        let bad = PoolIndices {
            pooled: shape,
            offsets: vec![2, 2],
        };
        assert!(matches!(
            maxpool2x2_backward(&Tensor::zeros(shape), &bad, bad.source_shape()),
            Err(Error::IndexOutOfWindow { .. })
        ));
    }
}
