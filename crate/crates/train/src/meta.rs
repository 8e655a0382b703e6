//! Meta fine-tuning: networks are updated on the loss reached after a few
//! steps of latent overfitting.

use metacodec::{CodecModel, ImageTensor, Params};
use metacodec_autodiff::Var;

use crate::config::{LossWeights, MetaConfig};
use crate::error::Result;
use crate::loss::{analyze, synthesize, LossTerms};
use crate::overfit::{inner_loop, InnerMode};
use crate::stage1::{run_epochs, EpochLog};

/// Loss terms of a batch after `n` inner steps, differentiable with respect
/// to `p` (through the inner loop when `second_order` is set).
pub fn meta_objective(
    p: &Params,
    model: &CodecModel,
    x: &Var,
    mcfg: &MetaConfig,
    w: &LossWeights,
) -> Result<LossTerms> {
    let a = analyze(p, model, x)?;
    let mode = if mcfg.second_order { InnerMode::SecondOrder } else { InnerMode::FirstOrder };
    let (y_n, _) = inner_loop(&a.y_tilde, Some(a.mask.value()), mcfg.inner_iters, mcfg.inner_lr, mode, |y| {
        // Per-image losses are independent, so the batch sum gives each
        // image its own gradient.
        Ok(synthesize(p, model, x, y, &a.tau, w, None)?.total.sum())
    })?;
    synthesize(p, model, x, &y_n, &a.tau, w, None)
}

/// Outer Adam updates of all networks over `mcfg.epochs` epochs.
pub fn meta_finetune(
    model: &CodecModel,
    patches: &[ImageTensor],
    mcfg: &MetaConfig,
    w: &LossWeights,
) -> Result<(CodecModel, Vec<EpochLog>)> {
    mcfg.validate()?;
    w.validate()?;
    let (mut tuned, logs) =
        run_epochs(model, patches, mcfg.batch_size, mcfg.epochs, mcfg.outer_lr, mcfg.seed, |p, x| {
            meta_objective(p, model, x, mcfg, w)
        })?;
    let md = &mut tuned.metadata;
    md.insert("meta_epochs".into(), mcfg.epochs.to_string());
    md.insert("meta_inner_iters".into(), mcfg.inner_iters.to_string());
    md.insert("meta_inner_lr".into(), mcfg.inner_lr.to_string());
    md.insert("meta_second_order".into(), mcfg.second_order.to_string());
    Ok((tuned, logs))
}
