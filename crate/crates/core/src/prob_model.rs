//! Multi-scale progressive probability model.
//!
//! The quantized latent `z(0)` is reduced to a pyramid `z(1)..z(M)` by
//! keeping the top-left element of every 2x2 block. `z(M)` is coded with a
//! uniform distribution; every finer level is coded in three groups by 2x2
//! phase, each conditioned on the coarser level, the groups already coded at
//! this level and a context tensor handed down from the previous step.
//!
//! [`progressive_pass`] walks this order once and is shared by the training
//! rate loss, the encoder and the decoder.

use std::f64::consts::LN_2;

use metacodec_autodiff::{Tensor, Var};
use ndarray::{Array3, ArrayD, Axis, IxDyn};

use crate::config::{CodecConfig, ProbModelConfig};
use crate::error::{CodecError, Result};
use crate::params::{ConvSpec, Params};
use crate::tensors::{max_symbol, SymbolTensor};

/// Per-symbol probability floor, mixed in uniformly.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
pub const LOG_SCALE_MIN: f64 = -9.0;
pub const LOG_SCALE_MAX: f64 = 3.0;
pub const PROB_LAYERS: usize = 4;
pub const MEAN_BIAS_INIT: f64 = 0.5;
pub const LOG_SCALE_BIAS_INIT: f64 = -2.0;

const LEAKY_SLOPE: f64 = 0.1;

pub fn prob_specs(codec: &CodecConfig, cfg: &ProbModelConfig) -> Vec<ConvSpec> {
    let (c, q, k) = (codec.channels, cfg.context_channels, cfg.mixtures);
    let mut specs = Vec::new();
    for scale in 1..=cfg.num_scales {
        for layer in 0..PROB_LAYERS {
            let c_in = if layer == 0 { c + 1 + q } else { q };
            let c_out = if layer + 1 == PROB_LAYERS { 3 * k * c + q } else { q };
            specs.push(ConvSpec::new(format!("prob.{scale}.{layer}"), 3, c_in, c_out));
        }
    }
    specs
}

/// Name of the head layer of the parameter network for `scale`.
pub fn head_name(scale: usize) -> String {
    format!("prob.{scale}.{}", PROB_LAYERS - 1)
}

/// Head bias giving zero logits, means at `MEAN_BIAS_INIT` and log-scales at
/// `LOG_SCALE_BIAS_INIT`.
pub fn head_bias_init(codec: &CodecConfig, cfg: &ProbModelConfig) -> Tensor {
    let kc = cfg.mixtures * codec.channels;
    ArrayD::from_shape_fn(IxDyn(&[3 * kc + cfg.context_channels]), |i| match i[0] / kc {
        0 => 0.0,
        1 => MEAN_BIAS_INIT,
        2 => LOG_SCALE_BIAS_INIT,
        _ => 0.0,
    })
}

// ---- pyramid ------------------------------------------------------------

/// Nearest-neighbour pyramid of symbol tensors. `levels[0]` is the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePyramid {
    pub levels: Vec<SymbolTensor>,
    /// Whether level `i` (index into `levels`) had an odd height / width and
    /// was replicate-padded before subsampling.
    pub padded: Vec<(bool, bool)>,
}

pub fn level_dims(h: usize, w: usize, level: usize) -> (usize, usize) {
    (0..level).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
}

pub fn build_pyramid(z: &SymbolTensor, num_scales: usize) -> Result<ScalePyramid> {
    if num_scales == 0 {
        return Err(CodecError::Config("pyramid needs at least one scale".into()));
    }
    let mut levels = vec![z.clone()];
    let mut padded = Vec::new();
    for _ in 0..num_scales {
        let prev = levels.last().expect("non-empty");
        let (h, w, c) = prev.dims();
        padded.push((h % 2 == 1, w % 2 == 1));
        // Replicate padding never reaches a top-left anchor, so subsampling
        // the unpadded tensor is equivalent.
        let data = Array3::from_shape_fn((h.div_ceil(2), w.div_ceil(2), c), |(i, j, k)| prev.data[[2 * i, 2 * j, k]]);
        levels.push(SymbolTensor { data, bits: z.bits });
    }
    Ok(ScalePyramid { levels, padded })
}

/// Differentiable pyramid over dequantized values (N x h x w x c).
pub fn pyramid_vars(z_hat: &Var, num_scales: usize) -> Vec<Var> {
    let mut levels = vec![z_hat.clone()];
    for _ in 0..num_scales {
        let prev = levels.last().expect("non-empty");
        let (h, w) = (prev.shape()[1], prev.shape()[2]);
        let anchors = Var::constant(anchor_mask(h, w));
        levels.push(prev.mul(&anchors).sum_pool2());
    }
    levels
}

// ---- groups ---------------------------------------------------------------

/// The three groups of one scale by 2x2 phase, indexed 1..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub height: usize,
    pub width: usize,
}

pub const GROUP_PHASES: [(usize, usize); 3] = [(0, 1), (1, 0), (1, 1)];

impl GroupPartition {
    /// Zero for anchors, otherwise the group number.
    pub fn group_of(i: usize, j: usize) -> usize {
        match (i % 2, j % 2) {
            (0, 0) => 0,
            (0, 1) => 1,
            (1, 0) => 2,
            _ => 3,
        }
    }

    /// Positions of `group` (1..=3) in raster order.
    pub fn positions(&self, group: usize) -> Vec<(usize, usize)> {
        let (pi, pj) = GROUP_PHASES[group - 1];
        let mut out = Vec::new();
        for i in (pi..self.height).step_by(2) {
            for j in (pj..self.width).step_by(2) {
                out.push((i, j));
            }
        }
        out
    }

    pub fn anchors(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in (0..self.height).step_by(2) {
            for j in (0..self.width).step_by(2) {
                out.push((i, j));
            }
        }
        out
    }

    pub fn sizes(&self) -> [usize; 3] {
        [1, 2, 3].map(|g| self.positions(g).len())
    }
}

pub fn partition_groups(height: usize, width: usize) -> GroupPartition {
    GroupPartition { height, width }
}

fn spatial_mask(h: usize, w: usize, f: impl Fn(usize) -> bool) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(&[1, h, w, 1]), |ix| f64::from(u8::from(f(GroupPartition::group_of(ix[1], ix[2])))))
}

pub fn anchor_mask(h: usize, w: usize) -> Tensor {
    spatial_mask(h, w, |g| g == 0)
}

/// Positions whose ground truth is known before `group` is coded.
pub fn availability_mask(h: usize, w: usize, group: usize) -> Tensor {
    spatial_mask(h, w, |g| g < group)
}

pub fn group_mask(h: usize, w: usize, group: usize) -> Tensor {
    spatial_mask(h, w, |g| g == group)
}

// ---- parameter prediction -------------------------------------------------

/// Mixture parameters as graph values, each N x h x w x c x K.
#[derive(Debug, Clone)]
pub struct MixtureVars {
    pub weights: Var,
    pub means: Var,
    pub log_scales: Var,
}

/// Plain mixture parameters of one image, each h x w x c x K.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: ArrayD<f64>,
    pub means: ArrayD<f64>,
    pub log_scales: ArrayD<f64>,
}

/// Mixture of one element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MixtureVars {
    pub fn image(&self, index: usize) -> MixtureParams {
        let pick = |v: &Var| v.value().index_axis(Axis(0), index).to_owned();
        MixtureParams { weights: pick(&self.weights), means: pick(&self.means), log_scales: pick(&self.log_scales) }
    }
}

impl MixtureParams {
    pub fn element(&self, i: usize, j: usize, k: usize) -> ElementMixture {
        let lane = |a: &ArrayD<f64>| {
            let mut v = a.view();
            for idx in [i, j, k] {
                v = v.index_axis_move(Axis(0), idx);
            }
            v.iter().copied().collect::<Vec<_>>()
        };
        ElementMixture { weights: lane(&self.weights), means: lane(&self.means), log_scales: lane(&self.log_scales) }
    }
}

fn softmax_last(logits: &Var) -> Var {
    let last = logits.shape().len() - 1;
    let max = logits.value().fold_axis(Axis(last), f64::NEG_INFINITY, |a, &b| a.max(b)).insert_axis(Axis(last));
    let e = logits.sub(&Var::constant(max)).exp();
    e.div(&e.sum_axis_keep(last))
}

/// Runs the parameter network of `scale` on `[z_hat, avail, q_prev]`.
/// Returns the mixture parameters for every position and the next context.
pub fn predict_group_params(
    p: &Params,
    prob: &ProbModelConfig,
    channels: usize,
    scale: usize,
    z_hat: &Var,
    avail: &Var,
    q_prev: &Var,
) -> Result<(MixtureVars, Var)> {
    let s = z_hat.shape().to_vec();
    if s.len() != 4 || s[3] != channels {
        return Err(CodecError::ShapeMismatch {
            expected: vec![s.first().copied().unwrap_or(1), 0, 0, channels],
            got: s,
        });
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let q_shape = [n, h, w, prob.context_channels];
    if q_prev.shape() != q_shape {
        return Err(CodecError::ShapeMismatch { expected: q_shape.to_vec(), got: q_prev.shape().to_vec() });
    }
    if avail.shape()[1..] != [h, w, 1] {
        return Err(CodecError::ShapeMismatch { expected: vec![1, h, w, 1], got: avail.shape().to_vec() });
    }
    let input = Var::concat(&[z_hat.clone(), avail.broadcast_to(&[n, h, w, 1]), q_prev.clone()], 3);
    let mut x = input;
    for layer in 0..PROB_LAYERS {
        let name = format!("prob.{scale}.{layer}");
        x = x.conv2d(p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), 1, 1);
        if layer + 1 < PROB_LAYERS {
            x = x.leaky_relu(LEAKY_SLOPE);
        }
    }
    let k = prob.mixtures;
    let kc = k * channels;
    let block = |i: usize| x.slice_axis(3, i * kc, kc).reshape(&[n, h, w, channels, k]);
    let mix = MixtureVars {
        weights: softmax_last(&block(0)),
        means: block(1),
        log_scales: block(2).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
    };
    let q = x.slice_axis(3, 3 * kc, prob.context_channels);
    Ok((mix, q))
}

// ---- probabilities --------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn floor_mix(p: f64, bits: u8) -> f64 {
    let n = f64::from(max_symbol(bits) + 1);
    PROB_FLOOR + (1.0 - n * PROB_FLOOR) * p
}

/// Mixture CDF at `x`.
fn mixture_cdf(m: &ElementMixture, x: f64) -> f64 {
    let mut acc = 0.0;
    for ((w, mu), ls) in m.weights.iter().zip(&m.means).zip(&m.log_scales) {
        acc += w * sigmoid((x - mu) * (-ls).exp());
    }
    acc
}

/// Unfloored probability of every symbol of a `bits`-bit alphabet.
pub fn raw_pmf_table(m: &ElementMixture, bits: u8) -> Vec<f64> {
    let levels = max_symbol(bits) as usize;
    let l = levels as f64;
    let mut out = Vec::with_capacity(levels + 1);
    let mut lower = 0.0;
    for s in 0..=levels {
        let upper = if s == levels { 1.0 } else { mixture_cdf(m, (s as f64 + 0.5) / l) };
        out.push((upper - lower).max(0.0));
        lower = upper;
    }
    out
}

/// Floored probability of every symbol, as used for coding.
pub fn pmf_table(m: &ElementMixture, bits: u8) -> Vec<f64> {
    raw_pmf_table(m, bits).into_iter().map(|p| floor_mix(p, bits)).collect()
}

/// Floored probability of one symbol.
pub fn discretized_logistic_pmf(m: &ElementMixture, symbol: u32, bits: u8) -> Result<f64> {
    let levels = max_symbol(bits);
    if symbol > levels {
        return Err(CodecError::SymbolOutOfRange { symbol, bits });
    }
    let l = f64::from(levels);
    let u = f64::from(symbol) / l;
    let half = 0.5 / l;
    let mut p = 0.0;
    for ((w, mu), ls) in m.weights.iter().zip(&m.means).zip(&m.log_scales) {
        let inv = (-ls).exp();
        let up = if symbol == levels { 1.0 } else { sigmoid((u + half - mu) * inv) };
        let lo = if symbol == 0 { 0.0 } else { sigmoid((u - half - mu) * inv) };
        p += w * (up - lo);
    }
    Ok(floor_mix(p, bits))
}

/// Bits `-log2 p'` of each element of `u` (values on the `bits` grid) under
/// `mix`; shape N x h x w x c. Differentiable in `u` and the mixture.
pub fn element_bits(mix: &MixtureVars, u: &Var, bits: u8) -> Var {
    let levels = f64::from(max_symbol(bits));
    let half = 0.5 / levels;
    let s = u.shape().to_vec();
    let mut s5 = s.clone();
    s5.push(1);
    let u5 = u.reshape(&s5);
    let syms = u.value().mapv(|v| (v * levels).round());
    let top = Var::constant(
        syms.mapv(|v| f64::from(u8::from(v >= levels))).into_shape_with_order(IxDyn(&s5)).expect("shape"),
    );
    let bottom =
        Var::constant(syms.mapv(|v| f64::from(u8::from(v <= 0.0))).into_shape_with_order(IxDyn(&s5)).expect("shape"));
    let inv = mix.log_scales.neg().exp();
    let up = u5.shift(half).sub(&mix.means).mul(&inv).sigmoid();
    let lo = u5.shift(-half).sub(&mix.means).mul(&inv).sigmoid();
    let not_top = top.neg().shift(1.0);
    let not_bottom = bottom.neg().shift(1.0);
    let cdf_up = up.mul(&not_top).add(&top);
    let cdf_lo = lo.mul(&not_bottom);
    let p = mix.weights.mul(&cdf_up.sub(&cdf_lo)).sum_axis_keep(s5.len() - 1).reshape(&s);
    let n = levels + 1.0;
    p.scale(1.0 - n * PROB_FLOOR).shift(PROB_FLOOR).ln().scale(-1.0 / LN_2)
}

// ---- the progressive pass -------------------------------------------------

/// One coded group handed to the visitor of [`progressive_pass`].
pub struct GroupStep<'a> {
    pub scale: usize,
    pub group: usize,
    pub mixture: &'a MixtureVars,
    /// Current fine level, N x h x w x c.
    pub fine: &'a Var,
}

/// Walks scales `M..1` and groups `1..3`.
///
/// `top` is `z(M)` as dequantized values. `fine_for(scale, coarse)` supplies
/// the level-`scale - 1` tensor to start that scale from; only its anchor
/// positions and already visited groups are read. `visit` may return an
/// updated fine tensor after a group is coded (the decoder does). The final
/// fine tensor of each scale becomes the coarse tensor of the next. Returns
/// the finished level 0.
pub fn progressive_pass(
    p: &Params,
    prob: &ProbModelConfig,
    channels: usize,
    top: &Var,
    mut fine_for: impl FnMut(usize, &Var) -> Result<Var>,
    mut visit: impl FnMut(GroupStep<'_>) -> Result<Option<Var>>,
) -> Result<Var> {
    let mut coarse = top.clone();
    let mut q: Option<Var> = None;
    for scale in (1..=prob.num_scales).rev() {
        let mut fine = fine_for(scale, &coarse)?;
        let (n, h, w) = (fine.shape()[0], fine.shape()[1], fine.shape()[2]);
        let up = coarse.upsample2(h, w);
        let mut q_prev = match &q {
            None => Var::zeros(&[n, h, w, prob.context_channels]),
            Some(q) => q.upsample2(h, w),
        };
        for group in 1..=3 {
            let avail = Var::constant(availability_mask(h, w, group));
            let unknown = avail.neg().shift(1.0);
            let z_hat = fine.mul(&avail).add(&up.mul(&unknown));
            let (mixture, q_next) = predict_group_params(p, prob, channels, scale, &z_hat, &avail, &q_prev)?;
            if let Some(updated) = visit(GroupStep { scale, group, mixture: &mixture, fine: &fine })? {
                fine = updated;
            }
            q_prev = q_next;
        }
        q = Some(q_prev);
        coarse = fine;
    }
    Ok(coarse)
}

/// Training rate in bits per image (shape `[N]`) of the dequantized latent
/// `z_hat` (N x h x w x c, values on the `bits` grid).
pub fn rate_loss(p: &Params, prob: &ProbModelConfig, z_hat: &Var, bits: u8) -> Result<Var> {
    let s = z_hat.shape().to_vec();
    let (n, c) = (s[0], s[3]);
    let levels = pyramid_vars(z_hat, prob.num_scales);
    let top = &levels[prob.num_scales];
    let top_elems = top.len() / n.max(1);
    let uniform = f64::from(bits) * top_elems as f64;
    let mut total = Var::constant(ArrayD::from_elem(IxDyn(&[n]), uniform));
    progressive_pass(
        p,
        prob,
        c,
        top,
        |scale, _| Ok(levels[scale - 1].clone()),
        |step| {
            let (h, w) = (step.fine.shape()[1], step.fine.shape()[2]);
            let gm = Var::constant(group_mask(h, w, step.group));
            let eb = element_bits(step.mixture, step.fine, bits).mul(&gm);
            total = total.add(&eb.sum_to(&[n, 1, 1, 1]).reshape(&[n]));
            Ok(None)
        },
    )?;
    Ok(total)
}

/// Rate in bits of a single symbol tensor.
pub fn rate_bits(p: &Params, prob: &ProbModelConfig, z: &SymbolTensor) -> Result<f64> {
    let z_hat = Var::constant(z.dequantized_batch());
    Ok(metacodec_autodiff::no_grad(|| rate_loss(p, prob, &z_hat, z.bits))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CodecModel;
    use metacodec_autodiff::{grad, max_rel_error, no_grad, numeric_grad};
    use proptest::prelude::*;

    fn sym(h: usize, w: usize, c: usize, bits: u8, f: impl Fn(usize, usize, usize) -> u8) -> SymbolTensor {
        SymbolTensor::new(Array3::from_shape_fn((h, w, c), |(i, j, k)| f(i, j, k)), bits).unwrap()
    }

    fn tiny_model(c: usize, m: usize) -> CodecModel {
        let codec = CodecConfig { channels: c, bits: 4, downsample: 2, hidden_channels: 2, zeta: 0.5 };
        CodecModel::new(codec, ProbModelConfig { num_scales: m, mixtures: 2, context_channels: 3 }, 5).unwrap()
    }

    #[test]
    fn pyramid_examples() {
        let z = sym(4, 4, 1, 8, |i, j, _| (i * 4 + j) as u8);
        let p = build_pyramid(&z, 1).unwrap();
        assert_eq!(p.levels[1].data.iter().copied().collect::<Vec<_>>(), [0, 2, 8, 10]);

        let one = sym(1, 1, 2, 4, |_, _, k| k as u8 + 3);
        let p = build_pyramid(&one, 2).unwrap();
        assert!(p.levels.iter().all(|l| l == &one));

        // 5x5 is padded to 6x6 (row/col 4 replicated into 5); anchors at
        // rows/cols 0, 2, 4 of the original.
        let z = sym(5, 5, 1, 8, |i, j, _| (i * 5 + j) as u8);
        let p = build_pyramid(&z, 1).unwrap();
        assert_eq!(p.padded, vec![(true, true)]);
        assert_eq!(p.levels[1].data.iter().copied().collect::<Vec<_>>(), [0, 2, 4, 10, 12, 14, 20, 22, 24]);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_groups(2, 2).sizes(), [1, 1, 1]);
        assert_eq!(partition_groups(2, 2).anchors().len(), 1);
        assert_eq!(partition_groups(4, 4).sizes(), [4, 4, 4]);
        assert_eq!(partition_groups(4, 4).anchors().len(), 4);
        // Enumerating the nine positions of a 3x3 grid: anchors
        // (0,0),(0,2),(2,0),(2,2); (even,odd) = (0,1),(2,1); (odd,even) =
        // (1,0),(1,2); (odd,odd) = (1,1).
        let p = partition_groups(3, 3);
        assert_eq!(p.sizes(), [2, 2, 1]);
        assert_eq!(p.anchors().len(), 4);
        assert_eq!(p.positions(1), vec![(0, 1), (2, 1)]);
    }

    #[test]
    fn pyramid_vars_match_symbol_pyramid() {
        let z = sym(7, 5, 2, 4, |i, j, k| ((i * 3 + j * 7 + k) % 16) as u8);
        let sp = build_pyramid(&z, 3).unwrap();
        let vars = pyramid_vars(&Var::constant(z.dequantized_batch()), 3);
        for (s, v) in sp.levels.iter().zip(&vars) {
            assert_eq!(&s.dequantized_batch(), v.value());
        }
    }

    #[test]
    fn pmf_examples() {
        let m = ElementMixture { weights: vec![1.0], means: vec![0.5], log_scales: vec![10.0] };
        let t = raw_pmf_table(&m, 1);
        assert!((t[0] - 0.5).abs() < 1e-3 && (t[1] - 0.5).abs() < 1e-3);

        let sharp = ElementMixture { weights: vec![1.0], means: vec![3.0 / 15.0], log_scales: vec![-12.0] };
        let t = raw_pmf_table(&sharp, 4);
        assert!(t[3] > 1.0 - 1e-9);
        assert!(discretized_logistic_pmf(&sharp, 3, 4).unwrap() > 1.0 - 16.0 * PROB_FLOOR);
        assert!(discretized_logistic_pmf(&sharp, 16, 4).is_err());
    }

    /// Model whose every prediction is two equally weighted sharp
    /// components at the ends of the alphabet.
    fn two_point_model() -> CodecModel {
        let mut model = tiny_model(1, 1);
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for n in &names {
            model.params.get_mut(n).unwrap().fill(0.0);
        }
        let kc = 2;
        let bias = model.params.get_mut(&format!("{}.b", head_name(1))).unwrap();
        bias[[kc]] = 0.0;
        bias[[kc + 1]] = 1.0;
        bias[[2 * kc]] = -12.0;
        bias[[2 * kc + 1]] = -12.0;
        model
    }

    #[test]
    fn uniform_top_level_costs_b_bits_per_element() {
        let model = two_point_model();
        let z = sym(4, 4, 1, 4, |i, j, _| if (i + j) % 3 == 0 { 15 } else { 0 });
        assert_eq!(build_pyramid(&z, 1).unwrap().levels[1].len(), 4);
        let bits = rate_bits(&model.params.vars(false), &model.prob, &z).unwrap();
        let coded = 12.0 * -floor_mix(0.5, 4).log2();
        assert!((bits - coded - 16.0).abs() < 1e-9, "{bits}");
    }

    #[test]
    fn rate_counts_half_probability_symbols() {
        let model = two_point_model();
        let z = sym(8, 8, 1, 1, |i, j, _| ((i + j) % 2) as u8);
        let bits = rate_bits(&model.params.vars(false), &model.prob, &z).unwrap();
        let expected = 48.0 * -floor_mix(0.5, 1).log2() + 16.0;
        assert!((bits - expected).abs() < 1e-9, "{bits} vs {expected}");
        assert!(bits >= 0.0);
    }

    #[test]
    fn zero_weights_give_uniform_mixture_and_bias_values() {
        let mut model = tiny_model(2, 1);
        let names: Vec<String> = model.params.names().filter(|n| n.ends_with(".w")).map(String::from).collect();
        for n in &names {
            model.params.get_mut(n).unwrap().fill(0.0);
        }
        let p = model.params.vars(false);
        let z = Var::constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.3));
        let av = Var::constant(availability_mask(2, 2, 1));
        let q = Var::zeros(&[1, 2, 2, 3]);
        let (mix, _) = predict_group_params(&p, &model.prob, 2, 1, &z, &av, &q).unwrap();
        assert!(mix.weights.value().iter().all(|&w| (w - 0.5).abs() < 1e-15));
        assert!(mix.means.value().iter().all(|&m| m == MEAN_BIAS_INIT));
        assert!(mix.log_scales.value().iter().all(|&s| s == LOG_SCALE_BIAS_INIT));
    }

    #[test]
    fn batch_order_does_not_change_outputs() {
        let model = tiny_model(2, 2);
        let p = model.params.vars(false);
        let a = sym(6, 5, 2, 4, |i, j, k| ((i * 5 + j + k) % 16) as u8);
        let b = sym(6, 5, 2, 4, |i, j, k| ((i * j + 3 * k) % 16) as u8);
        let stack = |x: &SymbolTensor, y: &SymbolTensor| {
            Var::constant(
                ndarray::concatenate(Axis(0), &[x.dequantized_batch().view(), y.dequantized_batch().view()]).unwrap(),
            )
        };
        let ab = no_grad(|| rate_loss(&p, &model.prob, &stack(&a, &b), 4)).unwrap();
        let ba = no_grad(|| rate_loss(&p, &model.prob, &stack(&b, &a), 4)).unwrap();
        assert_eq!(ab.value()[[0]], ba.value()[[1]]);
        assert_eq!(ab.value()[[1]], ba.value()[[0]]);
        assert_eq!(ab.value()[[0]], rate_bits(&p, &model.prob, &a).unwrap());
    }

    #[test]
    fn rate_gradient_matches_finite_differences_in_mixture_parameters() {
        let shape = [1, 2, 2, 1, 2];
        let base =
            |seed: f64| ArrayD::from_shape_fn(IxDyn(&shape), |i| ((i[1] * 7 + i[2] * 3 + i[4]) as f64 * seed).sin());
        let logits = base(1.3);
        let means = base(0.7).mapv(|v| 0.5 + 0.3 * v);
        let ls = base(2.1).mapv(|v| -1.5 + 0.5 * v);
        let u = Var::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 1]), vec![0.0, 4.0 / 15.0, 9.0 / 15.0, 1.0]).unwrap(),
        );
        let total = |l: &Var, m: &Var, s: &Var| {
            let mix = MixtureVars { weights: softmax_last(l), means: m.clone(), log_scales: s.clone() };
            element_bits(&mix, &u, 4).sum()
        };
        let (l, m, s) = (Var::param(logits.clone()), Var::param(means.clone()), Var::param(ls.clone()));
        let g = grad(&total(&l, &m, &s), &[&l, &m, &s], false);
        let c = Var::constant;
        let nl = numeric_grad(&logits, 1e-6, |t| total(&c(t.clone()), &c(means.clone()), &c(ls.clone())).item());
        let nm = numeric_grad(&means, 1e-6, |t| total(&c(logits.clone()), &c(t.clone()), &c(ls.clone())).item());
        let ns = numeric_grad(&ls, 1e-6, |t| total(&c(logits.clone()), &c(means.clone()), &c(t.clone())).item());
        assert!(max_rel_error(g[0].value(), &nl, 1e-6) < 1e-3);
        assert!(max_rel_error(g[1].value(), &nm, 1e-6) < 1e-3);
        assert!(max_rel_error(g[2].value(), &ns, 1e-6) < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pmf_sums_to_one(
            k in 1usize..5,
            bits in 1u8..=8,
            seed in 0u64..1000,
        ) {
            let f = |i: usize, a: f64| ((seed as f64 + 1.0) * (i as f64 + a)).sin();
            let logits: Vec<f64> = (0..k).map(|i| 2.0 * f(i, 0.1)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let m = ElementMixture {
                weights: logits.iter().map(|l| l.exp() / z).collect(),
                means: (0..k).map(|i| 0.5 + 0.6 * f(i, 0.3)).collect(),
                log_scales: (0..k).map(|i| -3.0 + 2.5 * f(i, 0.7)).collect(),
            };
            let raw: f64 = raw_pmf_table(&m, bits).iter().sum();
            prop_assert!((raw - 1.0).abs() < 1e-6);
            let floored = pmf_table(&m, bits);
            prop_assert!((floored.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(floored.iter().all(|&p| p >= PROB_FLOOR));
            for s in [0u32, max_symbol(bits) / 2, max_symbol(bits)] {
                let single = discretized_logistic_pmf(&m, s, bits).unwrap();
                prop_assert!((single - floored[s as usize]).abs() < 1e-12);
            }
        }

        #[test]
        fn groups_and_anchors_partition_the_grid(h in 1usize..12, w in 1usize..12) {
            let p = partition_groups(h, w);
            let mut seen = vec![0u8; h * w];
            for (i, j) in p.anchors().into_iter().chain((1..=3).flat_map(|g| p.positions(g))) {
                seen[i * w + j] += 1;
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }

        #[test]
        fn anchors_equal_coarse_level(h in 1usize..10, w in 1usize..10, m in 1usize..4, seed in 0u32..100) {
            let z = sym(h, w, 2, 8, |i, j, k| ((i as u32 * 31 + j as u32 * 17 + k as u32 * 5 + seed) % 256) as u8);
            let p = build_pyramid(&z, m).unwrap();
            for lvl in 1..=m {
                let (fh, fw) = level_dims(h, w, lvl - 1);
                prop_assert_eq!(p.levels[lvl].dims().0, fh.div_ceil(2));
                prop_assert_eq!(p.levels[lvl].dims().1, fw.div_ceil(2));
                for ((i, j, k), &v) in p.levels[lvl].data.indexed_iter() {
                    prop_assert_eq!(v, p.levels[lvl - 1].data[[2 * i, 2 * j, k]]);
                }
            }
        }
    }
}
