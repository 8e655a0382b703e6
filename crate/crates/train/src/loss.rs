//! Rate-distortion objective.

use metacodec::codec::{forward_decoder, forward_encoder, forward_importance, mask_from_importance, quantize_st};
use metacodec::metrics::ms_ssim_var;
use metacodec::prob_model::rate_loss;
use metacodec::{CodecError, CodecModel, ImageTensor, ImportanceMap, Params};
use metacodec_autodiff::{no_grad, Var};
use ndarray::{ArrayD, IxDyn};

use crate::config::LossWeights;
use crate::error::Result;

/// Feature maps for the perceptual term. The distance is the mean absolute
/// difference of each returned map, summed over maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Var) -> Vec<Var>;
}

/// Per-image loss terms, each of shape `[N]`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub ms_ssim: Var,
    pub mse: Var,
    pub perceptual: Var,
    pub bpp: Var,
    pub importance: Var,
}

impl LossTerms {
    /// Batch mean of the total loss.
    pub fn mean(&self) -> Var {
        self.total.mean()
    }
}

fn per_image_mean(v: &Var) -> Var {
    let s = v.shape();
    let n = s[0];
    let count: usize = s[1..].iter().product();
    v.sum_to(&[n, 1, 1, 1]).reshape(&[n]).scale(1.0 / count as f64)
}

/// Loss terms from a reconstruction, the per-image rate in bits per pixel
/// and the importance map.
#[allow(clippy::too_many_arguments)]
pub fn rd_loss_terms(
    x: &Var,
    x_hat: &Var,
    bpp: &Var,
    tau: &Var,
    zeta: f64,
    w: &LossWeights,
    extractor: Option<&dyn FeatureExtractor>,
) -> LossTerms {
    let n = x.shape()[0];
    let ms_ssim = ms_ssim_var(x_hat, x);
    let d = x_hat.sub(x);
    let mse = per_image_mean(&d.mul(&d));
    let perceptual = match extractor {
        Some(f) if w.lambda_d3 > 0.0 => {
            let mut acc = Var::zeros(&[n]);
            for (a, b) in f.features(x_hat).iter().zip(f.features(x).iter()) {
                acc = acc.add(&per_image_mean(&a.sub(b).abs()));
            }
            acc
        }
        _ => Var::zeros(&[n]),
    };
    let importance = per_image_mean(tau).shift(-zeta).abs();
    let total = ms_ssim
        .scale(-w.lambda_d1)
        .add(&mse.scale(w.lambda_d2))
        .add(&perceptual.scale(w.lambda_d3))
        .add(&bpp.scale(w.lambda_r))
        .add(&importance.scale(w.lambda_m));
    LossTerms { total, ms_ssim, mse, perceptual, bpp: bpp.clone(), importance }
}

/// Scalar loss of one reconstruction coded with `rate_bits` bits in total.
pub fn rd_loss(
    x: &ImageTensor,
    x_hat: &ImageTensor,
    rate_bits: f64,
    tau: &ImportanceMap,
    zeta: f64,
    w: &LossWeights,
) -> Result<f64> {
    if x.data.dim() != x_hat.data.dim() {
        return Err(
            CodecError::ShapeMismatch { expected: x.data.shape().to_vec(), got: x_hat.data.shape().to_vec() }.into()
        );
    }
    let hw = (x.height() * x.width()) as f64;
    let (th, tw) = tau.tau.dim();
    let tau_v = Var::constant(tau.tau.clone().into_shape_with_order(IxDyn(&[1, th, tw, 1])).expect("tau shape"));
    let bpp = Var::constant(ArrayD::from_elem(IxDyn(&[1]), rate_bits / hw));
    let terms = no_grad(|| {
        rd_loss_terms(&Var::constant(x.to_batch()), &Var::constant(x_hat.to_batch()), &bpp, &tau_v, zeta, w, None)
    });
    Ok(terms.total.item())
}

/// Encoder side of the forward pass: masked latent, mask and importance map.
#[derive(Debug, Clone)]
pub struct Analysis {
    /// `E(x) * m`, before quantization.
    pub y_tilde: Var,
    pub mask: Var,
    pub tau: Var,
}

pub fn analyze(p: &Params, model: &CodecModel, x: &Var) -> Result<Analysis> {
    let y = forward_encoder(p, &model.codec, x)?;
    let tau = forward_importance(p, &model.codec, x)?;
    let mask = mask_from_importance(&tau, model.codec.channels);
    Ok(Analysis { y_tilde: y.mul(&mask), mask, tau })
}

/// Decoder side: quantizes `y_tilde`, decodes it and evaluates the loss.
pub fn synthesize(
    p: &Params,
    model: &CodecModel,
    x: &Var,
    y_tilde: &Var,
    tau: &Var,
    w: &LossWeights,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<LossTerms> {
    let bits = model.codec.bits;
    let y_hat = quantize_st(y_tilde, bits);
    let x_hat = forward_decoder(p, &model.codec, &y_hat)?;
    let hw = (x.shape()[1] * x.shape()[2]) as f64;
    let bpp = rate_loss(p, &model.prob, &y_hat, bits)?.scale(1.0 / hw);
    Ok(rd_loss_terms(x, &x_hat, &bpp, tau, model.codec.zeta, w, extractor))
}

/// Full forward pass of a batch.
pub fn forward_loss(
    p: &Params,
    model: &CodecModel,
    x: &Var,
    w: &LossWeights,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<LossTerms> {
    let a = analyze(p, model, x)?;
    synthesize(p, model, x, &a.y_tilde, &a.tau, w, extractor)
}
