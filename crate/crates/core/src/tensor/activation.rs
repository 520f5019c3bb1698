use super::{shape_err, Tensor};
use crate::error::Result;

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Passes the gradient where the activation was positive. `activation` may be
/// either the ReLU input or its output; both have the same sign pattern and the
/// subgradient at 0 is taken as 0.
pub fn relu_backward(activation: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if activation.shape() != grad_out.shape() {
        return Err(shape_err("relu_backward", activation.shape(), grad_out.shape()));
    }
    let data = activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad_out.shape(), data)
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(shape_err("concat_channels", sa.with_channels(sb.channels), sb));
    }
    let shape = sa.with_channels(sa.channels + sb.channels);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.batch {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::new(shape, data)
}

/// Inverse of [`concat_channels`]: channels `[0, first)` and `[first, C)`.
pub fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let s = t.shape();
    if first > s.channels {
        return Err(shape_err(
            "split_channels",
            format!("at most {} channels", s.channels),
            first,
        ));
    }
    let (sa, sb) = (s.with_channels(first), s.with_channels(s.channels - first));
    let cut = sa.sample_len();
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for n in 0..s.batch {
        let (x, y) = t.sample(n).split_at(cut);
        a.extend_from_slice(x);
        b.extend_from_slice(y);
    }
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}
