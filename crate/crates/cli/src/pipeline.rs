//! Rate-controlled compression and decompression.
//!
//! Compression picks the codec whose trained bitrate is nearest the target,
//! lowers the quantization bits (then moves to lower-rate codecs) while the
//! trial bitrate is above the margin, then adjusts the rate by overfitting
//! the latent with re-weighted losses, and finally selects a decoder-bias
//! centroid per tile.

use metacodec::entropy::{decode_tensor, encode_tensor, Bitstream, ReferenceCoder};
use metacodec::{crop_image, dequantize, pad_image, quantize, CodecModel, CropRecord, ImageTensor, LatentTensor};
use metacodec_train::{
    decode_with_tiles, select_bias_tiles, tile_grid, LatentProblem, LossWeights, DEFAULT_BIAS_INDEX,
};
use serde::Serialize;

use crate::bank::{CodebookSet, CodecBank};
use crate::error::{PipelineError, Result};

pub const DEFAULT_MARGIN: f64 = 0.15;
pub const DEFAULT_OVERFIT_BUDGET: usize = 10;
/// Weight multiplier applied during rate-adjusting overfitting.
pub const REWEIGHT: f64 = 4.0;

/// The eight bitrate targets of the evaluation sweep.
pub const SWEEP_TARGETS: [f64; 8] = [2.0, 1.5, 1.0, 0.75, 0.5, 0.25, 0.12, 0.06];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTarget {
    pub target_bpp: f64,
    /// Allowed deviation as a fraction of the target.
    pub margin: f64,
}

impl RateTarget {
    pub fn new(target_bpp: f64) -> Self {
        RateTarget { target_bpp, margin: DEFAULT_MARGIN }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_bpp > 0.0 && self.target_bpp.is_finite()) {
            return Err(PipelineError::Target(format!("target bpp must be positive, got {}", self.target_bpp)));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(PipelineError::Target(format!("margin must be in (0, 1), got {}", self.margin)));
        }
        Ok(())
    }

    pub fn upper(&self) -> f64 {
        self.target_bpp * (1.0 + self.margin)
    }

    pub fn lower(&self) -> f64 {
        self.target_bpp * (1.0 - self.margin)
    }

    pub fn contains(&self, bpp: f64) -> bool {
        bpp >= self.lower() && bpp <= self.upper()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressOptions {
    /// Maximum number of rate-adjusting overfitting iterations.
    pub overfit_budget: usize,
    /// Step size of latent overfitting.
    pub overfit_lr: f64,
    /// Loss weights for overfitting and bias selection; the codec's own
    /// training weights when `None`.
    pub weights: Option<LossWeights>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions { overfit_budget: DEFAULT_OVERFIT_BUDGET, overfit_lr: 0.1, weights: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrialKind {
    Search,
    Overfit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trial {
    pub kind: TrialKind,
    pub codec: u8,
    pub bits: u8,
    pub bpp: f64,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub bitstream: Bitstream,
    pub bytes: Vec<u8>,
    /// Total container bits over the original pixel count.
    pub bpp: f64,
    pub trials: Vec<Trial>,
}

impl Compressed {
    pub fn bits_total(&self) -> u64 {
        8 * self.bytes.len() as u64
    }

    pub fn bits_payload(&self) -> u64 {
        8 * self.bitstream.payload.len() as u64
    }
}

/// Upper bound on trial encodes for a bank: every `(codec, bits)` pair plus
/// the overfitting budget.
pub fn trial_bound(bank: &CodecBank, budget: usize) -> usize {
    bank.entries.iter().map(|e| e.model.codec.bits as usize).sum::<usize>() + budget
}

/// `model` quantizing with `bits` instead of its native bit depth.
pub fn with_bits(model: &CodecModel, bits: u8) -> CodecModel {
    let mut m = model.clone();
    m.codec.bits = bits;
    m
}

struct Ctx<'a> {
    record: CropRecord,
    padded: &'a ImageTensor,
    codec_id: u8,
    tiles: usize,
}

fn build(
    model: &CodecModel,
    y: &LatentTensor,
    ctx: &Ctx,
    bias_indices: Vec<u8>,
    best_effort: bool,
) -> Result<Bitstream> {
    let z = quantize(y, model.codec.bits);
    let enc = encode_tensor(&model.params.vars(false), &model.prob, &z, &ReferenceCoder)?;
    Ok(Bitstream {
        best_effort,
        codec_id: ctx.codec_id,
        bits: model.codec.bits,
        channels: model.codec.channels as u8,
        num_scales: model.prob.num_scales as u8,
        orig_height: ctx.record.height as u32,
        orig_width: ctx.record.width as u32,
        padded_height: ctx.padded.height() as u32,
        padded_width: ctx.padded.width() as u32,
        checksum: enc.checksum,
        bias_indices,
        payload: enc.payload,
    })
}

/// Container bitrate of `y`, counting a full bias segment when a codebook
/// will be used.
fn trial_bpp(model: &CodecModel, y: &LatentTensor, ctx: &Ctx) -> Result<f64> {
    let bs = build(model, y, ctx, vec![DEFAULT_BIAS_INDEX; ctx.tiles], false)?;
    let bits = 8.0 * bs.serialize()?.len() as f64;
    Ok(bits / (ctx.record.height * ctx.record.width) as f64)
}

pub fn compress(
    x: &ImageTensor,
    target: &RateTarget,
    bank: &CodecBank,
    codebooks: Option<&CodebookSet>,
    opts: &CompressOptions,
) -> Result<Compressed> {
    target.validate()?;
    let mut trials = Vec::new();
    let start = bank.nearest(target.target_bpp);

    // Codec and bit-depth search.
    let mut chosen = None;
    'search: for (id, entry) in bank.entries.iter().enumerate().skip(start) {
        let (padded, record) = pad_image(x, entry.model.codec.downsample);
        let book = codebooks.and_then(|s| s.get(id as u8)).filter(|b| !b.is_empty());
        let tiles = book.map_or(0, |b| tile_grid(padded.height(), padded.width(), b.tile_size).len());
        let problem = LatentProblem::new(&entry.model, &padded)?;
        for bits in (1..=entry.model.codec.bits).rev() {
            let model = with_bits(&entry.model, bits);
            let ctx = Ctx { record, padded: &padded, codec_id: id as u8, tiles };
            let bpp = trial_bpp(&model, &problem.latent(), &ctx)?;
            trials.push(Trial { kind: TrialKind::Search, codec: id as u8, bits, bpp });
            let last = id + 1 == bank.len() && bits == 1;
            if bpp <= target.upper() || last {
                chosen = Some((id, model, padded, record, tiles, problem, bpp));
                break 'search;
            }
        }
    }
    let (id, model, padded, record, tiles, mut problem, mut bpp) =
        chosen.expect("the last configuration is always accepted");
    let ctx = Ctx { record, padded: &padded, codec_id: id as u8, tiles };
    let base = opts.weights.unwrap_or_else(|| bank.entries[id].weights());

    // Rate adjustment by latent overfitting; keeps the best iterate.
    let mut best = (problem.latent(), bpp);
    let mut iters = 0;
    while !target.contains(bpp) && iters < opts.overfit_budget {
        let w =
            if bpp > target.upper() { base.with_rate_scaled(REWEIGHT) } else { base.with_distortion_scaled(REWEIGHT) };
        problem.descend(&model, 1, opts.overfit_lr, &w)?;
        iters += 1;
        bpp = trial_bpp(&model, &problem.latent(), &ctx)?;
        trials.push(Trial { kind: TrialKind::Overfit, codec: id as u8, bits: model.codec.bits, bpp });
        let closer = (bpp - target.target_bpp).abs() < (best.1 - target.target_bpp).abs();
        if target.contains(bpp) || (!target.contains(best.1) && closer) {
            best = (problem.latent(), bpp);
        }
    }
    let (latent, _) = best;

    // Per-tile bias selection on the final symbols.
    let mut indices = Vec::new();
    if let Some(book) = codebooks.and_then(|s| s.get(id as u8)).filter(|b| !b.is_empty()) {
        let y_hat = dequantize(&quantize(&latent, model.codec.bits))?;
        indices = select_bias_tiles(&padded, &y_hat, &model, book, &base)?;
        if indices.iter().all(|&i| i == DEFAULT_BIAS_INDEX) {
            indices.clear();
        }
    }
    let mut bitstream = build(&model, &latent, &ctx, indices, false)?;
    let pixels = (record.height * record.width) as f64;
    let final_bpp = 8.0 * bitstream.serialize()?.len() as f64 / pixels;
    bitstream.best_effort = !target.contains(final_bpp);
    let bytes = bitstream.serialize()?;
    Ok(Compressed { bpp: 8.0 * bytes.len() as f64 / pixels, bitstream, bytes, trials })
}

/// Parses and decodes a container produced by [`compress`].
pub fn decompress(bytes: &[u8], bank: &CodecBank, codebooks: Option<&CodebookSet>) -> Result<ImageTensor> {
    let bs = Bitstream::parse(bytes)?;
    let entry = bank.get(bs.codec_id)?;
    let mismatch = |reason: &str| PipelineError::CodecMismatch { codec: bs.codec_id, reason: reason.into() };
    let cfg = &entry.model.codec;
    if bs.channels as usize != cfg.channels || bs.num_scales as usize != entry.model.prob.num_scales {
        return Err(mismatch("channel or scale count differs"));
    }
    if bs.bits > cfg.bits {
        return Err(mismatch("bit depth above the codec's native depth"));
    }
    let (ph, pw) = (bs.padded_height as usize, bs.padded_width as usize);
    let (oh, ow) = (bs.orig_height as usize, bs.orig_width as usize);
    let s = cfg.downsample;
    if ph % s != 0 || pw % s != 0 || oh > ph || ow > pw || ph - oh >= s || pw - ow >= s || oh == 0 || ow == 0 {
        return Err(mismatch("image dimensions inconsistent with the codec stride"));
    }
    let model = with_bits(&entry.model, bs.bits);
    let z = decode_tensor(
        &model.params.vars(false),
        &model.prob,
        &bs.payload,
        (ph / s, pw / s, cfg.channels),
        bs.bits,
        Some(bs.checksum),
        &ReferenceCoder,
    )?;
    let y_hat = dequantize(&z)?;
    let full = if bs.bias_indices.is_empty() {
        metacodec::decode_image(&model, &y_hat, None)?
    } else {
        let book = codebooks.and_then(|set| set.get(bs.codec_id)).ok_or_else(|| {
            PipelineError::Bank(format!("stream uses bias indices but no codebook for codec {}", bs.codec_id))
        })?;
        decode_with_tiles(&model, &y_hat, book, &bs.bias_indices)?
    };
    Ok(crop_image(&full, CropRecord { height: oh, width: ow }))
}
