//! Latent overfitting: plain gradient descent on the masked latent.

use metacodec::{CodecModel, ImageTensor, LatentStage, LatentTensor};
use metacodec_autodiff::{grad, no_grad, Tensor, Var};

use crate::config::LossWeights;
use crate::error::Result;
use crate::loss::{analyze, synthesize};

/// How inner-loop gradients relate to the surrounding graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMode {
    /// Gradients are differentiable; the outer gradient sees the inner
    /// Jacobian.
    SecondOrder,
    /// Gradients are constants; `y_n` still depends on `y_0` with identity
    /// Jacobian.
    FirstOrder,
    /// Every iterate is a fresh leaf; nothing reaches the networks.
    Frozen,
}

/// `n` steps of `y <- y - alpha * grad(objective)(y) * mask`. Returns the
/// final iterate and the objective value before each step.
pub fn inner_loop(
    y0: &Var,
    mask: Option<&Tensor>,
    n: usize,
    alpha: f64,
    mode: InnerMode,
    mut objective: impl FnMut(&Var) -> Result<Var>,
) -> Result<(Var, Vec<f64>)> {
    let mask = mask.map(|m| Var::constant(m.clone()));
    let mut y = match mode {
        InnerMode::Frozen => Var::param(y0.value().clone()),
        _ if !y0.requires_grad() => Var::param(y0.value().clone()),
        _ => y0.clone(),
    };
    let mut trace = Vec::with_capacity(n);
    for _ in 0..n {
        let (value, g) = match mode {
            InnerMode::SecondOrder => {
                let l = objective(&y)?;
                (l.item(), grad(&l, &[&y], true).remove(0))
            }
            InnerMode::FirstOrder | InnerMode::Frozen => {
                let leaf = Var::param(y.value().clone());
                let l = objective(&leaf)?;
                (l.item(), grad(&l, &[&leaf], false).remove(0).detach())
            }
        };
        trace.push(value);
        let g = match &mask {
            Some(m) => g.mul(m),
            None => g,
        };
        y = match mode {
            InnerMode::Frozen => Var::param(y.value() - &(g.value() * alpha)),
            _ => y.sub(&g.scale(alpha)),
        };
    }
    Ok((y, trace))
}

/// One image's latent adaptation state with the networks frozen.
#[derive(Debug, Clone)]
pub struct LatentProblem {
    x: Tensor,
    tau: Tensor,
    mask: Tensor,
    y: Tensor,
}

impl LatentProblem {
    /// Starts from `E(x) * m`; `x` must be aligned to the downsampling factor.
    pub fn new(model: &CodecModel, x: &ImageTensor) -> Result<Self> {
        let p = model.params.vars(false);
        let xb = x.to_batch();
        let a = no_grad(|| analyze(&p, model, &Var::constant(xb.clone())))?;
        Ok(LatentProblem {
            x: xb,
            tau: a.tau.value().clone(),
            mask: a.mask.value().clone(),
            y: a.y_tilde.value().clone(),
        })
    }

    /// Current masked latent.
    pub fn latent(&self) -> LatentTensor {
        LatentTensor::from_var(&Var::constant(self.y.clone()), 0, LatentStage::Masked)
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Loss of the current latent.
    pub fn loss(&self, model: &CodecModel, w: &LossWeights) -> Result<f64> {
        let p = model.params.vars(false);
        let terms = no_grad(|| {
            synthesize(
                &p,
                model,
                &Var::constant(self.x.clone()),
                &Var::constant(self.y.clone()),
                &Var::constant(self.tau.clone()),
                w,
                None,
            )
        })?;
        Ok(terms.total.item())
    }

    /// `n` descent steps; returns the loss before each step and after the last.
    pub fn run(&mut self, model: &CodecModel, n: usize, alpha: f64, w: &LossWeights) -> Result<Vec<f64>> {
        let p = model.params.vars(false);
        let x = Var::constant(self.x.clone());
        let tau = Var::constant(self.tau.clone());
        let (y, mut trace) =
            inner_loop(&Var::constant(self.y.clone()), Some(&self.mask), n, alpha, InnerMode::Frozen, |y| {
                Ok(synthesize(&p, model, &x, y, &tau, w, None)?.total.sum())
            })?;
        self.y = y.value().clone();
        trace.push(self.loss(model, w)?);
        Ok(trace)
    }

    /// Up to `n` steps with backtracking: each step starts at `alpha` and
    /// halves until the loss decreases. Stops early when no step size in
    /// the schedule helps.
    pub fn descend(&mut self, model: &CodecModel, n: usize, alpha: f64, w: &LossWeights) -> Result<Vec<f64>> {
        let p = model.params.vars(false);
        let x = Var::constant(self.x.clone());
        let tau = Var::constant(self.tau.clone());
        let mut trace = Vec::with_capacity(n + 1);
        let mut current = self.loss(model, w)?;
        for _ in 0..n {
            trace.push(current);
            let leaf = Var::param(self.y.clone());
            let l = synthesize(&p, model, &x, &leaf, &tau, w, None)?.total.sum();
            let g = grad(&l, &[&leaf], false).remove(0).value() * &self.mask;
            let mut step = alpha;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let candidate = LatentProblem { y: &self.y - &(&g * step), ..self.clone() };
                let lc = candidate.loss(model, w)?;
                if lc < current {
                    self.y = candidate.y;
                    current = lc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        trace.push(current);
        Ok(trace)
    }
}

const MAX_HALVINGS: usize = 6;

#[derive(Debug, Clone)]
pub struct OverfitResult {
    pub latent: LatentTensor,
    /// Loss before each step plus the final loss (`n + 1` values).
    pub trace: Vec<f64>,
}

/// Adapts the masked latent of `x` to `x` itself for `n` steps.
pub fn overfit_latent(
    x: &ImageTensor,
    model: &CodecModel,
    n: usize,
    alpha: f64,
    w: &LossWeights,
) -> Result<OverfitResult> {
    let mut prob = LatentProblem::new(model, x)?;
    let trace = prob.run(model, n, alpha, w)?;
    Ok(OverfitResult { latent: prob.latent(), trace })
}
