use std::rc::Rc;

use metacodec_autodiff::{grad, max_rel_error, no_grad, numeric_grad, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

/// Checks the analytic gradient of `f` against central differences.
fn check(x: Tensor, f: impl Fn(&Var) -> Var, tol: f64) {
    let p = Var::param(x.clone());
    let out = f(&p);
    let g = grad(&out, &[&p], false).remove(0);
    let num = numeric_grad(&x, 1e-6, |t| no_grad(|| f(&Var::constant(t.clone())).item()));
    let err = max_rel_error(g.value(), &num, 1e-6);
    assert!(err < tol, "relative error {err}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
    let c = Var::constant(rand_tensor(&mut rng, &[3, 4], 0.5, 1.5));
    check(x.clone(), |v| v.add(&c).mul(v).sum(), 1e-6);
    check(x.clone(), |v| v.sub(&c).square().mean(), 1e-6);
    check(x.clone(), |v| c.div(v).sum(), 1e-6);
    check(x.clone(), |v| v.exp().ln().scale(3.0).shift(1.0).neg().sum(), 1e-6);
    check(x.clone(), |v| v.sigmoid().mul(v).sum(), 1e-6);
    check(x.clone(), |v| v.shift(-1.0).leaky_relu(0.1).square().sum(), 1e-5);
    check(x.clone(), |v| v.shift(-1.0).abs().sum(), 1e-5);
    check(x.clone(), |v| v.powf(1.7).sum(), 1e-6);
}

#[test]
fn broadcasting_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let big = Var::constant(rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0));
    check(x.clone(), |v| big.mul(v).square().sum(), 1e-6);
    let y = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check(y.clone(), |v| v.sum_axis_keep(1).square().sum(), 1e-6);
    check(y.clone(), |v| v.sum_to(&[3, 1]).exp().sum(), 1e-6);
    check(y, |v| v.reshape(&[6, 4]).slice_axis(0, 2, 3).pad_axis(1, 1, 6).sigmoid().sum(), 1e-6);
}

#[test]
fn concat_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let b = Var::constant(rand_tensor(&mut rng, &[5, 2], -1.0, 1.0));
    let other = Var::constant(rand_tensor(&mut rng, &[3, 2], -1.0, 1.0));
    check(a.clone(), |v| Var::concat(&[v.matmul(&b), other.clone(), v.clone()], 1).square().sum(), 1e-6);
    check(a, |v| v.t().matmul(&other).sigmoid().sum(), 1e-6);
}

#[test]
fn convolution_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 5, 6, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 4], -0.5, 0.5);
    let wc = Var::constant(w.clone());
    let bias = Var::constant(rand_tensor(&mut rng, &[4], -0.1, 0.1));
    check(x.clone(), |v| v.conv2d(&wc, Some(&bias), 2, 1).square().sum(), 1e-5);
    let xc = Var::constant(x.clone());
    check(w, |v| xc.conv2d(v, None, 1, 1).sigmoid().sum(), 1e-5);
    check(x.clone(), |v| v.upsample2(10, 11).square().sum(), 1e-6);
    check(x.clone(), |v| v.sum_pool2().square().sum(), 1e-6);
    check(x.clone(), |v| v.avg_pool2().exp().sum(), 1e-6);
    let taps: Rc<[f64]> = Rc::from(vec![0.2, 0.6, 0.2]);
    check(x, move |v| v.blur_valid(&taps).square().sum(), 1e-6);
}

#[test]
fn straight_through_passes_identity() {
    let x = Var::param(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.12, 0.51, 0.97]).unwrap());
    let q = x.straight_through_map(|v| (v * 3.0).round() / 3.0);
    assert_eq!(q.value().as_slice().unwrap(), &[0.0, 2.0 / 3.0, 1.0]);
    let g = grad(&q.square().sum(), &[&x], false).remove(0);
    // d/dx (q^2) with dq/dx = 1 is 2q
    for (gv, qv) in g.value().iter().zip(q.value().iter()) {
        assert!((gv - 2.0 * qv).abs() < 1e-12);
    }
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let x = Var::param(ArrayD::ones(IxDyn(&[2])));
    let y = Var::param(ArrayD::ones(IxDyn(&[3])));
    let g = grad(&x.square().sum(), &[&x, &y], false);
    assert_eq!(g[1].shape(), &[3]);
    assert!(g[1].value().iter().all(|v| *v == 0.0));
}

/// Differentiating a gradient: compare `d/dw [g(w) . u]` with finite
/// differences of the first-order gradient.
#[test]
fn second_order_through_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Var::constant(rand_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0));
    let w0 = rand_tensor(&mut rng, &[3, 3, 2, 2], -0.5, 0.5);
    let u = rand_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
    let taps: Rc<[f64]> = Rc::from(vec![0.25, 0.5, 0.25]);

    // loss(x, w) with a non-linear path through every op family
    let loss = |x: &Var, w: &Var| -> Var {
        let h = x.conv2d(w, None, 1, 1).leaky_relu(0.2).sigmoid();
        let p = h.avg_pool2().upsample2(4, 4);
        p.mul(x).blur_valid(&taps).square().sum()
    };
    // meta-objective: inner product of the input-gradient with u
    let meta = |w: &Var, create: bool| -> Var {
        let xp = Var::param(x.value().clone());
        let gx = grad(&loss(&xp, w), &[&xp], create).remove(0);
        gx.mul(&Var::constant(u.clone())).sum()
    };
    let w = Var::param(w0.clone());
    let analytic = grad(&meta(&w, true), &[&w], false).remove(0);
    let numeric = numeric_grad(&w0, 1e-5, |t| meta(&Var::constant(t.clone()), false).item());
    let err = max_rel_error(analytic.value(), &numeric, 1e-5);
    assert!(err < 1e-4, "second-order relative error {err}");
}

#[test]
fn no_grad_records_nothing() {
    let x = Var::param(ArrayD::ones(IxDyn(&[2])));
    let y = no_grad(|| x.square());
    assert!(!y.requires_grad());
    assert!(x.square().requires_grad());
}
