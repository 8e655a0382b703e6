//! Encoder, importance network and decoder, plus channel masking and
//! uniform scalar quantization.
//!
//! Batched forward passes work on NHWC [`Var`]s so that training can
//! differentiate through them; the single-image helpers at the bottom wrap
//! them for inference.

use metacodec_autodiff::{no_grad, Tensor, Var};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::model::CodecModel;
use crate::params::{ConvSpec, Params};
use crate::tensors::{
    batch4, first_of_batch, max_symbol, ChannelMask, ImageTensor, ImportanceMap, LatentStage, LatentTensor,
    SymbolTensor,
};

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn encoder_specs(cfg: &CodecConfig) -> Vec<ConvSpec> {
    analysis_specs("enc", cfg, cfg.channels)
}

pub fn importance_specs(cfg: &CodecConfig) -> Vec<ConvSpec> {
    analysis_specs("imp", cfg, 1)
}

fn analysis_specs(prefix: &str, cfg: &CodecConfig, out: usize) -> Vec<ConvSpec> {
    let mut specs = Vec::new();
    for i in 0..cfg.stages() {
        let c_in = if i == 0 { 3 } else { cfg.hidden_channels };
        specs.push(ConvSpec::new(format!("{prefix}.{i}"), 3, c_in, cfg.hidden_channels));
    }
    specs.push(ConvSpec::new(format!("{prefix}.out"), 1, cfg.hidden_channels, out));
    specs
}

pub fn decoder_specs(cfg: &CodecConfig) -> Vec<ConvSpec> {
    let mut specs = vec![ConvSpec::new("dec.in", 1, cfg.channels, cfg.hidden_channels)];
    let stages = cfg.stages();
    for i in 0..stages {
        let c_out = if i + 1 == stages { 3 } else { cfg.hidden_channels };
        specs.push(ConvSpec::new(format!("dec.{i}"), 3, cfg.hidden_channels, c_out));
    }
    specs
}

fn conv(p: &Params, spec: &ConvSpec, x: &Var, stride: usize) -> Var {
    let pad = spec.kernel / 2;
    x.conv2d(p.get(&spec.weight_name()), Some(p.get(&spec.bias_name())), stride, pad)
}

fn analysis(p: &Params, specs: &[ConvSpec], x: &Var) -> Var {
    let (out, hidden) = specs.split_last().expect("at least the output layer");
    let mut h = x.clone();
    for spec in hidden {
        h = conv(p, spec, &h, 2).leaky_relu(LEAKY_SLOPE);
    }
    conv(p, out, &h, 1).sigmoid()
}

fn check_divisible(x: &Var, cfg: &CodecConfig) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(CodecError::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(1), 0, 0, 3],
            got: s.to_vec(),
        });
    }
    if !s[1].is_multiple_of(cfg.downsample) || !s[2].is_multiple_of(cfg.downsample) || s[1] == 0 || s[2] == 0 {
        return Err(CodecError::NotDivisible { height: s[1], width: s[2], factor: cfg.downsample });
    }
    Ok(())
}

/// Raw latent `y` in [0, 1], shape N x H/s x W/s x c.
pub fn forward_encoder(p: &Params, cfg: &CodecConfig, x: &Var) -> Result<Var> {
    check_divisible(x, cfg)?;
    Ok(analysis(p, &encoder_specs(cfg), x))
}

/// Importance map `tau` in [0, 1], shape N x H/s x W/s x 1.
pub fn forward_importance(p: &Params, cfg: &CodecConfig, x: &Var) -> Result<Var> {
    check_divisible(x, cfg)?;
    Ok(analysis(p, &importance_specs(cfg), x))
}

/// Channel mask from an importance map, N x h x w x c.
///
/// The forward value is exactly the binary mask `k < c * round(c tau) / c`.
/// Gradients reach `tau` through a straight-through rounding of `c tau`
/// followed by `clamp(level - k, 0, 1)`, which agrees with the binary mask
/// on the quantized grid.
pub fn mask_from_importance(tau: &Var, channels: usize) -> Var {
    let c = channels as f64;
    let level = tau.scale(c).straight_through_map(|v| v.clamp(0.0, c).round());
    let k = Var::constant(ArrayD::from_shape_fn(IxDyn(&[channels]), |i| i[0] as f64));
    level.sub(&k).clamp(0.0, 1.0)
}

/// Straight-through quantize/dequantize: forward `round(clamp(y,0,1) L) / L`,
/// backward identity.
pub fn quantize_st(y: &Var, bits: u8) -> Var {
    let levels = f64::from(max_symbol(bits));
    y.straight_through_map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
}

/// Reconstruction in [0, 1], shape N x (h s) x (w s) x 3.
pub fn forward_decoder(p: &Params, cfg: &CodecConfig, y_hat: &Var) -> Result<Var> {
    let s = y_hat.shape();
    if s.len() != 4 || s[3] != cfg.channels {
        return Err(CodecError::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(1), 0, 0, cfg.channels],
            got: s.to_vec(),
        });
    }
    let specs = decoder_specs(cfg);
    let mut h = conv(p, &specs[0], y_hat, 1).leaky_relu(LEAKY_SLOPE);
    let last = specs.len() - 1;
    for (i, spec) in specs.iter().enumerate().skip(1) {
        let (hh, ww) = (h.shape()[1] * 2, h.shape()[2] * 2);
        h = conv(p, spec, &h.upsample2(hh, ww), 1);
        h = if i == last { h.sigmoid() } else { h.leaky_relu(LEAKY_SLOPE) };
    }
    Ok(h)
}

/// Concatenated decoder conv biases with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector {
    pub values: Vec<f64>,
    pub layout: Vec<BiasSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

pub fn decoder_bias_layout(cfg: &CodecConfig) -> Vec<BiasSlot> {
    let mut offset = 0;
    decoder_specs(cfg)
        .iter()
        .map(|s| {
            let slot = BiasSlot { name: s.bias_name(), offset, len: s.c_out };
            offset += s.c_out;
            slot
        })
        .collect()
}

impl BiasVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Current decoder biases of `model`.
    pub fn from_model(model: &CodecModel) -> BiasVector {
        let layout = decoder_bias_layout(&model.codec);
        let mut values = Vec::new();
        for slot in &layout {
            let t = model.params.get(&slot.name).expect("decoder bias present");
            values.extend(t.iter().copied());
        }
        BiasVector { values, layout }
    }

    pub fn from_vars(layout: Vec<BiasSlot>, vars: &[Var]) -> BiasVector {
        let values = vars.iter().flat_map(|v| v.value().iter().copied().collect::<Vec<_>>()).collect();
        BiasVector { values, layout }
    }

    pub fn slot_tensor(&self, slot: &BiasSlot) -> Tensor {
        ArrayD::from_shape_vec(IxDyn(&[slot.len]), self.values[slot.offset..slot.offset + slot.len].to_vec())
            .expect("slot length")
    }

    pub fn check_layout(&self, cfg: &CodecConfig) -> Result<()> {
        let expected = decoder_bias_layout(cfg);
        let total: usize = expected.iter().map(|s| s.len).sum();
        if self.layout != expected || self.values.len() != total {
            return Err(CodecError::BiasLayout { expected: total, got: self.values.len() });
        }
        Ok(())
    }

    /// `params` with the decoder biases replaced by these values.
    pub fn apply(&self, params: &Params) -> Params {
        let mut out = params.clone();
        for slot in &self.layout {
            out.set(&slot.name, Var::constant(self.slot_tensor(slot)));
        }
        out
    }

    pub fn squared_distance(&self, other: &BiasVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

// ---- single-image operations ------------------------------------------

/// `E(x)`: raw latent of an aligned image.
pub fn encode_latent(model: &CodecModel, x: &ImageTensor) -> Result<LatentTensor> {
    let p = model.params.vars(false);
    let y = no_grad(|| forward_encoder(&p, &model.codec, &Var::constant(x.to_batch())))?;
    Ok(LatentTensor { data: first_of_batch(y.value()), stage: LatentStage::Raw })
}

pub fn importance_map(model: &CodecModel, x: &ImageTensor) -> Result<ImportanceMap> {
    let p = model.params.vars(false);
    let tau = no_grad(|| forward_importance(&p, &model.codec, &Var::constant(x.to_batch())))?;
    let tau = batch4(tau.value()).index_axis(Axis(0), 0).index_axis(Axis(2), 0).to_owned();
    Ok(ImportanceMap::from_tau(tau, model.codec.channels))
}

/// `m[i,j,k] = 1` iff `k < c * tau_q[i,j]` (zero-based `k`).
pub fn expand_mask(tau: &ImportanceMap, channels: usize) -> ChannelMask {
    let (h, w) = tau.levels.dim();
    let scale = channels as f64 / tau.channels as f64;
    let data = Array3::from_shape_fn((h, w, channels), |(i, j, k)| {
        let limit = f64::from(tau.levels[[i, j]]) * scale;
        u8::from((k as f64) < snap(limit))
    });
    ChannelMask { data }
}

/// Mask from arbitrary real `tau_q` values in [0, 1].
pub fn expand_mask_values(tau_q: &Array2<f64>, channels: usize) -> ChannelMask {
    let (h, w) = tau_q.dim();
    let data = Array3::from_shape_fn((h, w, channels), |(i, j, k)| {
        u8::from((k as f64) < snap(channels as f64 * tau_q[[i, j]]))
    });
    ChannelMask { data }
}

/// Removes float noise around integers so that `c * (k / c)` compares as `k`.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

pub fn apply_mask(y: &LatentTensor, m: &ChannelMask) -> Result<LatentTensor> {
    if y.dims() != m.dims() {
        let (a, b, c) = y.dims();
        let (d, e, f) = m.dims();
        return Err(CodecError::ShapeMismatch { expected: vec![a, b, c], got: vec![d, e, f] });
    }
    Ok(LatentTensor { data: &y.data * &m.to_f64(), stage: LatentStage::Masked })
}

/// `|mean(tau) - zeta|`.
pub fn importance_constraint(tau: &ImportanceMap, zeta: f64) -> f64 {
    (tau.tau.mean().unwrap_or(0.0) - zeta).abs()
}

pub fn quantize(y: &LatentTensor, bits: u8) -> SymbolTensor {
    let levels = f64::from(max_symbol(bits));
    SymbolTensor { data: y.data.mapv(|v| (v.clamp(0.0, 1.0) * levels).round() as u8), bits }
}

pub fn dequantize(z: &SymbolTensor) -> Result<LatentTensor> {
    let max = max_symbol(z.bits);
    if let Some(&s) = z.data.iter().find(|&&s| u32::from(s) > max) {
        return Err(CodecError::SymbolOutOfRange { symbol: s.into(), bits: z.bits });
    }
    let scale = f64::from(max);
    Ok(LatentTensor { data: z.data.mapv(|s| f64::from(s) / scale), stage: LatentStage::Dequantized })
}

/// `D(y_hat)`, optionally with substituted decoder biases.
pub fn decode_image(model: &CodecModel, y_hat: &LatentTensor, biases: Option<&BiasVector>) -> Result<ImageTensor> {
    let mut p = model.params.vars(false);
    if let Some(b) = biases {
        b.check_layout(&model.codec)?;
        p = b.apply(&p);
    }
    let x = no_grad(|| forward_decoder(&p, &model.codec, &Var::constant(y_hat.to_batch())))?;
    Ok(ImageTensor::from_batch(x.value(), 0))
}
