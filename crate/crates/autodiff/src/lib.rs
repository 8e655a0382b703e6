//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! Every backward rule is written in terms of the same differentiable ops,
//! so gradients taken with `create_graph = true` can be differentiated
//! again. Tensors that take part in convolutions use NHWC layout.

pub mod kernels;
mod optim;
mod var;

pub use kernels::ConvGeom;
pub use optim::{Adam, AdamState};
pub use var::{grad, grad_with_seed, no_grad, NoGradGuard, Tensor, Var};

/// Central finite-difference gradient of `f` at `x`.
///
/// Test helper; O(len) evaluations of `f`.
pub fn numeric_grad(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_memory_order().expect("contiguous")[i];
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig + eps;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig - eps;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig;
        out.as_slice_memory_order_mut().expect("contiguous")[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over the two tensors.
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
