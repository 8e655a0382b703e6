use metacodec::checkpoint::to_bytes;
use metacodec::{CodecConfig, CodecModel, ImageTensor, ProbModelConfig};
use metacodec_autodiff::{no_grad, Var};
use metacodec_train::{
    analyze, forward_loss, overfit_latent, train_stage1, write_log_csv, LatentProblem, LossWeights, TrainConfig,
    TrainError,
};

fn model(seed: u64) -> CodecModel {
    let codec = CodecConfig { channels: 3, bits: 6, downsample: 4, hidden_channels: 6, zeta: 0.6 };
    CodecModel::new(codec, ProbModelConfig { num_scales: 1, mixtures: 2, context_channels: 3 }, seed).unwrap()
}

fn patches(n: usize) -> Vec<ImageTensor> {
    (0..n)
        .map(|i| {
            let f = 0.3 + 0.1 * i as f64;
            ImageTensor::from_fn(16, 16, move |y, x, c| {
                0.5 + 0.35 * ((y as f64 * f + x as f64 * 0.4 + c as f64) * 0.9).sin()
            })
        })
        .collect()
}

fn eval_loss(m: &CodecModel, batch: &[ImageTensor], w: &LossWeights) -> f64 {
    let p = m.params.vars(false);
    no_grad(|| forward_loss(&p, m, &Var::constant(ImageTensor::stack(batch)), w, None).unwrap().mean().item())
}

#[test]
fn one_epoch_one_batch_is_finite() {
    let cfg = TrainConfig { epochs: 1, batch_size: 4, patch_size: 16, ..Default::default() };
    let (m, logs) = train_stage1(&model(0), &patches(4), &cfg, &LossWeights::default()).unwrap();
    assert_eq!(logs.len(), 1);
    let l = &logs[0];
    assert!([l.loss, l.ms_ssim, l.mse, l.bpp, l.importance].iter().all(|v| v.is_finite()));
    assert!(m.params.iter().all(|(_, t)| t.iter().all(|v| v.is_finite())));
    assert_ne!(m.params, model(0).params);
    assert_eq!(m.metadata["stage1_epochs"], "1");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 7, ..Default::default() };
    let w = LossWeights::default();
    let (a, la) = train_stage1(&model(1), &patches(5), &cfg, &w).unwrap();
    let (b, lb) = train_stage1(&model(1), &patches(5), &cfg, &w).unwrap();
    assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    assert_eq!(la, lb);
    let (c, _) = train_stage1(&model(1), &patches(5), &TrainConfig { seed: 8, ..cfg }, &w).unwrap();
    assert_ne!(c.params, a.params);
}

#[test]
fn validation_loss_decreases_over_fifty_epochs() {
    let data = patches(6);
    let w = LossWeights::default();
    let start = model(2);
    let cfg = TrainConfig { epochs: 50, batch_size: 3, lr: 3e-3, ..Default::default() };
    let (trained, logs) = train_stage1(&start, &data, &cfg, &w).unwrap();
    let validation = &data[..2];
    let (before, after) = (eval_loss(&start, validation, &w), eval_loss(&trained, validation, &w));
    assert!(after < before, "{before} -> {after}");
    assert!(logs.last().unwrap().loss < logs[0].loss);
}

#[test]
fn empty_dataset_and_mismatched_patches_are_rejected() {
    let cfg = TrainConfig::default();
    let err = train_stage1(&model(0), &[], &cfg, &LossWeights::default()).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset));
    let mut mixed = patches(2);
    mixed.push(ImageTensor::from_fn(8, 8, |_, _, _| 0.5));
    assert!(train_stage1(&model(0), &mixed, &cfg, &LossWeights::default()).is_err());
    assert!(
        train_stage1(&model(0), &[ImageTensor::from_fn(10, 10, |_, _, _| 0.5)], &cfg, &LossWeights::default()).is_err()
    );
}

#[test]
fn log_is_written_as_csv() {
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    let (_, logs) = train_stage1(&model(0), &patches(4), &cfg, &LossWeights::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log_csv(&path, &logs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,loss,ms_ssim,mse,bpp,importance");
    assert_eq!(lines.count(), 2);
}

#[test]
fn zero_steps_return_the_masked_encoder_output() {
    let m = model(3);
    let x = &patches(1)[0];
    let r = overfit_latent(x, &m, 0, 0.1, &LossWeights::default()).unwrap();
    let p = m.params.vars(false);
    let a = no_grad(|| analyze(&p, &m, &Var::constant(x.to_batch()))).unwrap();
    assert_eq!(r.latent.to_batch(), *a.y_tilde.value());
    assert_eq!(r.trace.len(), 1);
}

#[test]
fn latent_steps_leave_networks_untouched_and_respect_the_mask() {
    let m = model(4);
    let before = to_bytes(&m).unwrap();
    let x = &patches(2)[1];
    let mut prob = LatentProblem::new(&m, x).unwrap();
    let mask = prob.mask().clone();
    let trace = prob.run(&m, 3, 0.1, &LossWeights::default()).unwrap();
    assert_eq!(trace.len(), 4);
    assert_eq!(to_bytes(&m).unwrap(), before);
    let y = prob.latent().to_batch();
    for (v, mv) in y.iter().zip(mask.iter()) {
        if *mv == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
}
