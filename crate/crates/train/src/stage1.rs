//! Conventional rate-distortion training and the shared epoch loop.

use std::path::Path;

use metacodec::checkpoint::write_atomic;
use metacodec::{CodecError, CodecModel, ImageTensor, Params};
use metacodec_autodiff::{grad, Adam, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, TrainConfig};
use crate::error::{Result, TrainError};
use crate::loss::{forward_loss, LossTerms};

/// Batch-size weighted averages over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ms_ssim: f64,
    pub mse: f64,
    pub bpp: f64,
    pub importance: f64,
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub(crate) fn check_patches(model: &CodecModel, patches: &[ImageTensor]) -> Result<()> {
    let first = patches.first().ok_or(TrainError::EmptyDataset)?;
    let dims = first.data.dim();
    if let Some(p) = patches.iter().find(|p| p.data.dim() != dims) {
        return Err(
            CodecError::ShapeMismatch { expected: first.data.shape().to_vec(), got: p.data.shape().to_vec() }.into()
        );
    }
    let s = model.codec.downsample;
    if dims.0 % s != 0 || dims.1 % s != 0 {
        return Err(CodecError::NotDivisible { height: dims.0, width: dims.1, factor: s }.into());
    }
    Ok(())
}

/// Seeded Adam epochs over shuffled batches; `step_loss` builds the batch
/// loss terms from trainable parameter handles.
pub(crate) fn run_epochs(
    model: &CodecModel,
    patches: &[ImageTensor],
    batch_size: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    mut step_loss: impl FnMut(&Params, &Var) -> Result<LossTerms>,
) -> Result<(CodecModel, Vec<EpochLog>)> {
    check_patches(model, patches)?;
    let mut model = model.clone();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut adam = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for chunk in order.chunks(batch_size) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| patches[i].clone()).collect();
            let x = Var::constant(ImageTensor::stack(&batch));
            let p = model.params.vars(true);
            let terms = step_loss(&p, &x)?;
            let loss = terms.mean();
            if !loss.item().is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let leaves: Vec<&Var> = names.iter().map(|n| p.get(n)).collect();
            let grads: Vec<Tensor> = grad(&loss, &leaves, false).into_iter().map(|g| g.value().clone()).collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged { step });
            }
            adam.step(&mut model.params.tensors_mut(&names), &grads);
            for (acc, v) in
                sums.iter_mut().zip([&terms.total, &terms.ms_ssim, &terms.mse, &terms.bpp, &terms.importance])
            {
                *acc += v.value().sum();
            }
            step += 1;
        }
        let n = patches.len() as f64;
        logs.push(EpochLog {
            epoch,
            loss: sums[0] / n,
            ms_ssim: sums[1] / n,
            mse: sums[2] / n,
            bpp: sums[3] / n,
            importance: sums[4] / n,
        });
    }
    Ok((model, logs))
}

/// Trains all four networks jointly on `patches`.
pub fn train_stage1(
    model: &CodecModel,
    patches: &[ImageTensor],
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<(CodecModel, Vec<EpochLog>)> {
    cfg.validate()?;
    w.validate()?;
    let (mut trained, logs) = run_epochs(model, patches, cfg.batch_size, cfg.epochs, cfg.lr, cfg.seed, |p, x| {
        forward_loss(p, model, x, w, None)
    })?;
    let md = &mut trained.metadata;
    md.insert("stage1_epochs".into(), cfg.epochs.to_string());
    md.insert("stage1_seed".into(), cfg.seed.to_string());
    md.insert("stage1_patches".into(), patches.len().to_string());
    md.insert("lambda_r".into(), w.lambda_r.to_string());
    Ok((trained, logs))
}
