use super::{shape_err, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxCe {
    pub loss: f64,
    pub probabilities: Tensor,
    pub grad_logits: Tensor,
}

/// Per-pixel softmax over channels, stabilized by subtracting the pixel max.
pub fn softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (classes, plane) = (s.channels, s.plane());
    let mut out = Tensor::zeros(s);
    let mut buf = vec![0.0; classes];
    for b in 0..s.batch {
        let src = logits.sample(b);
        let dst = out.sample_mut(b);
        for p in 0..plane {
            let max = (0..classes)
                .map(|c| src[c * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, e) in buf.iter_mut().enumerate() {
                *e = (src[c * plane + p] - max).exp();
                total += *e;
            }
            for (c, e) in buf.iter().enumerate() {
                dst[c * plane + p] = e / total;
            }
        }
    }
    out
}

/// Softmax cross-entropy averaged over all pixels.
///
/// `labels` holds one class id per (batch, row, column) in row-major order.
/// With `class_weights`, each pixel's negative log-likelihood is scaled by the
/// weight of its true class; the normalizer stays the pixel count.
pub fn softmax_ce(logits: &Tensor, labels: &[u8], class_weights: Option<&[f64]>) -> Result<SoftmaxCe> {
    let s = logits.shape();
    let (classes, plane) = (s.channels, s.plane());
    let pixels = s.batch * plane;
    if labels.len() != pixels {
        return Err(shape_err("softmax_ce", format!("{pixels} labels"), labels.len()));
    }
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(shape_err("softmax_ce", format!("{classes} class weights"), w.len()));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidLabel {
            label: bad as usize,
            classes,
        });
    }
    logits.ensure_finite("softmax_ce")?;

    let probabilities = softmax(logits);
    let mut grad = probabilities.clone();
    let norm = 1.0 / pixels.max(1) as f64;
    let mut loss = 0.0;
    for b in 0..s.batch {
        let probs = probabilities.sample(b);
        let g = grad.sample_mut(b);
        for p in 0..plane {
            let y = labels[b * plane + p] as usize;
            let w = class_weights.map_or(1.0, |w| w[y]);
            // log p_y computed from logits directly to avoid log(0) on saturated pixels
            let src = logits.sample(b);
            let max = (0..classes)
                .map(|c| src[c * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..classes).map(|c| (src[c * plane + p] - max).exp()).sum::<f64>().ln() + max;
            loss += w * (lse - src[y * plane + p]);
            for c in 0..classes {
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[c * plane + p] = (probs[c * plane + p] - onehot) * w * norm;
            }
        }
    }
    Ok(SoftmaxCe {
        loss: loss * norm,
        probabilities,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::zeros(Shape::new(1, 4, 2, 2));
        let out = softmax_ce(&logits, &[0, 1, 2, 3], None).unwrap();
        assert!(out.probabilities.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_class() {
        let mut logits = Tensor::zeros(Shape::new(1, 4, 1, 1));
        logits.set(0, 2, 0, 0, 50.0);
        let out = softmax_ce(&logits, &[2], None).unwrap();
        assert!(out.loss < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(Shape::new(1, 4, 1, 1));
        assert!(matches!(
            softmax_ce(&logits, &[4], None),
            Err(Error::InvalidLabel { label: 4, .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariance() {
        let shape = Shape::new(2, 4, 3, 3);
        let logits = random_tensor(shape, 7);
        let labels: Vec<u8> = (0..18).map(|i| (i % 4) as u8).collect();
        let base = softmax_ce(&logits, &labels, None).unwrap();
        for b in 0..2 {
            for p in 0..9 {
                let total: f64 = (0..4).map(|c| base.probabilities.sample(b)[c * 9 + p]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let shifted = Tensor::new(shape, logits.data().iter().map(|v| v + 17.0).collect()).unwrap();
        let moved = softmax_ce(&shifted, &labels, None).unwrap();
        assert!((moved.loss - base.loss).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = Shape::new(2, 4, 2, 3);
        let logits = random_tensor(shape, 12);
        let labels: Vec<u8> = (0..12).map(|i| ((i * 7) % 4) as u8).collect();
        let weights = [0.5, 1.0, 2.0, 0.25];
        for w in [None, Some(&weights[..])] {
            let out = softmax_ce(&logits, &labels, w).unwrap();
            let mut v = logits.data().to_vec();
            for i in 0..v.len() {
                let num = central_diff(&mut v, i, 1e-5, |d| {
                    softmax_ce(&Tensor::new(shape, d.to_vec()).unwrap(), &labels, w)
                        .unwrap()
                        .loss
                });
                assert!(rel_err(out.grad_logits.data()[i], num) < 1e-6, "logit {i}");
            }
        }
    }
}
