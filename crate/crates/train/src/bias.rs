//! Decoder-bias adaptation: per-patch overfitting, k-means codebook and
//! per-tile selection.
//!
//! Codebook file layout:
//! ```text
//! "MCBK" | u32 LE version | u32 LE header length | JSON header | centroids
//! ```
//! Centroid values follow the header as f64 LE, one vector after another.

use std::path::Path;

use metacodec::checkpoint::write_atomic;
use metacodec::codec::{decode_image, decoder_bias_layout, forward_decoder, quantize_st};
use metacodec::{BiasSlot, BiasVector, CodecConfig, CodecModel, ImageTensor, LatentTensor, Params};
use metacodec_autodiff::{grad, no_grad, Var};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BiasConfig, LossWeights};
use crate::error::{Result, TrainError};
use crate::loss::{analyze, rd_loss_terms};
use crate::stage1::check_patches;

/// Index signaling "keep the default decoder biases".
pub const DEFAULT_BIAS_INDEX: u8 = 255;
pub const MAX_CENTROIDS: usize = 255;
const CODEBOOK_MAGIC: [u8; 4] = *b"MCBK";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCodebook {
    pub centroids: Vec<BiasVector>,
    /// Side length of the square tiles the indices refer to.
    pub tile_size: usize,
    pub kmeans_seed: u64,
    pub kmeans_iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    tile_size: usize,
    kmeans_seed: u64,
    kmeans_iterations: usize,
    layout: Vec<(String, usize)>,
    count: usize,
}

impl BiasCodebook {
    pub fn empty(tile_size: usize) -> Self {
        BiasCodebook { centroids: Vec::new(), tile_size, kmeans_seed: 0, kmeans_iterations: 0 }
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn validate(&self, cfg: &CodecConfig) -> Result<()> {
        if self.centroids.len() > MAX_CENTROIDS {
            return Err(TrainError::Codebook(format!("{} centroids exceed {MAX_CENTROIDS}", self.centroids.len())));
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(cfg.downsample) {
            return Err(TrainError::Codebook(format!(
                "tile size {} not aligned to {}",
                self.tile_size, cfg.downsample
            )));
        }
        for c in &self.centroids {
            c.check_layout(cfg)?;
        }
        Ok(())
    }

    /// Centroid for a signaled index; `None` for the default index.
    pub fn lookup(&self, index: u8) -> Result<Option<&BiasVector>> {
        if index == DEFAULT_BIAS_INDEX {
            return Ok(None);
        }
        self.centroids
            .get(index as usize)
            .map(Some)
            .ok_or_else(|| TrainError::Codebook(format!("index {index} beyond {} centroids", self.centroids.len())))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self
            .centroids
            .first()
            .map(|c| c.layout.iter().map(|s| (s.name.clone(), s.len)).collect())
            .unwrap_or_default();
        let header = CodebookHeader {
            tile_size: self.tile_size,
            kmeans_seed: self.kmeans_seed,
            kmeans_iterations: self.kmeans_iterations,
            layout,
            count: self.centroids.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| TrainError::Codebook(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.centroids {
            for v in &c.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TrainError::Codebook(m.to_string());
        if bytes.len() < 12 || bytes[..4] != CODEBOOK_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != CODEBOOK_VERSION {
            return Err(bad("unsupported version"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let h: CodebookHeader = serde_json::from_slice(json).map_err(|e| TrainError::Codebook(e.to_string()))?;
        if h.count > MAX_CENTROIDS {
            return Err(bad("too many centroids"));
        }
        let mut offset = 0;
        let layout: Vec<BiasSlot> = h
            .layout
            .iter()
            .map(|(name, len)| {
                let slot = BiasSlot { name: name.clone(), offset, len: *len };
                offset += len;
                slot
            })
            .collect();
        let data = &bytes[12 + len..];
        if data.len() != 8 * offset * h.count {
            return Err(bad("centroid data length mismatch"));
        }
        let values: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let centroids = (0..h.count)
            .map(|i| BiasVector { values: values[i * offset..(i + 1) * offset].to_vec(), layout: layout.clone() })
            .collect();
        Ok(BiasCodebook {
            centroids,
            tile_size: h.tile_size,
            kmeans_seed: h.kmeans_seed,
            kmeans_iterations: h.kmeans_iterations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-image distortion part of the loss for a decoded batch.
fn distortion(x: &Var, x_hat: &Var, w: &LossWeights) -> Var {
    let n = x.shape()[0];
    let zeros = Var::zeros(&[n]);
    let tau = Var::zeros(&[n, 1, 1, 1]);
    rd_loss_terms(x, x_hat, &zeros, &tau, 0.0, &w.distortion_only(), None).total
}

/// Distortion loss of decoding `y_hat` with parameter handles `p`.
pub fn bias_objective(p: &Params, model: &CodecModel, x: &Var, y_hat: &Var, w: &LossWeights) -> Result<Var> {
    let x_hat = forward_decoder(p, &model.codec, y_hat)?;
    Ok(distortion(x, &x_hat, w))
}

/// Plain gradient descent on the decoder biases for one patch; every other
/// parameter and the quantized latent stay fixed. Returns the iterate with
/// the lowest loss, so never does worse than the default biases.
pub fn overfit_biases(
    patch: &ImageTensor,
    model: &CodecModel,
    iters: usize,
    lr: f64,
    w: &LossWeights,
) -> Result<BiasVector> {
    let p0 = model.params.vars(false);
    let x = Var::constant(patch.to_batch());
    let y_hat = no_grad(|| -> Result<Var> {
        let a = analyze(&p0, model, &x)?;
        Ok(Var::constant(quantize_st(&a.y_tilde, model.codec.bits).value().clone()))
    })?;
    let layout = decoder_bias_layout(&model.codec);
    let mut bias = BiasVector::from_model(model);
    let mut best = (f64::INFINITY, bias.clone());
    for step in 0..=iters {
        let leaves: Vec<Var> = layout.iter().map(|s| Var::param(bias.slot_tensor(s))).collect();
        let mut p = p0.clone();
        for (slot, leaf) in layout.iter().zip(&leaves) {
            p.set(&slot.name, leaf.clone());
        }
        let loss = bias_objective(&p, model, &x, &y_hat, w)?.sum();
        if loss.item() < best.0 {
            best = (loss.item(), bias.clone());
        }
        if step == iters {
            break;
        }
        let refs: Vec<&Var> = leaves.iter().collect();
        for (slot, g) in layout.iter().zip(grad(&loss, &refs, false)) {
            for (i, gv) in g.value().iter().enumerate() {
                bias.values[slot.offset + i] -= lr * gv;
            }
        }
    }
    Ok(best.1)
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Euclidean k-means with k-means++ seeding. With at most `k` distinct
/// points every distinct point becomes its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> KMeans {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() <= k {
        let centroids: Vec<Vec<f64>> = distinct.into_iter().cloned().collect();
        let assignments = points.iter().map(|p| nearest(p, &centroids).0).collect();
        return KMeans { centroids, assignments, objective: vec![0.0], iterations: 0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.random_range(0..distinct.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = distinct.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = d.iter().rposition(|&v| v > 0.0).expect("more distinct points than centroids");
        for (i, &v) in d.iter().enumerate() {
            if v > 0.0 && r < v {
                pick = i;
                break;
            }
            r -= v;
        }
        centroids.push(distinct[pick].clone());
    }
    let dim = points[0].len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        let (next, obj): (Vec<usize>, f64) = {
            let pairs: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
            (pairs.iter().map(|x| x.0).collect(), pairs.iter().map(|x| x.1).sum())
        };
        objective.push(obj);
        iterations += 1;
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    KMeans { centroids, assignments, objective, iterations }
}

/// Overfits the biases of every patch and clusters them.
pub fn build_bias_clusters(
    patches: &[ImageTensor],
    model: &CodecModel,
    cfg: &BiasConfig,
    w: &LossWeights,
) -> Result<BiasCodebook> {
    cfg.validate()?;
    check_patches(model, patches)?;
    let vectors: Vec<BiasVector> =
        patches.iter().map(|p| overfit_biases(p, model, cfg.iters, cfg.lr, w)).collect::<Result<_>>()?;
    let points: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let km = kmeans(&points, cfg.clusters.min(MAX_CENTROIDS), cfg.kmeans_seed, cfg.kmeans_max_iter);
    let layout = decoder_bias_layout(&model.codec);
    Ok(BiasCodebook {
        centroids: km.centroids.into_iter().map(|values| BiasVector { values, layout: layout.clone() }).collect(),
        tile_size: patches[0].height(),
        kmeans_seed: cfg.kmeans_seed,
        kmeans_iterations: km.iterations,
    })
}

/// Index minimizing `losses`, where entry 0 is the default-bias loss and
/// entry `i + 1` belongs to centroid `i`. Ties go to the default, then to
/// the lower index.
fn argmin_index(losses: &[f64]) -> u8 {
    let mut best = (losses[0], DEFAULT_BIAS_INDEX);
    for (i, &l) in losses[1..].iter().enumerate() {
        if l < best.0 {
            best = (l, i as u8);
        }
    }
    best.1
}

fn tile_loss(x: &ImageTensor, x_hat: &ImageTensor, w: &LossWeights) -> f64 {
    no_grad(|| distortion(&Var::constant(x.to_batch()), &Var::constant(x_hat.to_batch()), w).item())
}

/// Best codebook entry for one patch decoded from its own latent.
pub fn select_bias_cluster(
    x_patch: &ImageTensor,
    latent_patch: &LatentTensor,
    model: &CodecModel,
    codebook: &BiasCodebook,
    w: &LossWeights,
) -> Result<u8> {
    let mut losses = vec![tile_loss(x_patch, &decode_image(model, latent_patch, None)?, w)];
    for c in &codebook.centroids {
        losses.push(tile_loss(x_patch, &decode_image(model, latent_patch, Some(c))?, w));
    }
    Ok(argmin_index(&losses))
}

/// Tile rectangles `(y, x, h, w)` of a `height` x `width` image in raster order.
pub fn tile_grid(height: usize, width: usize, tile: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y in (0..height).step_by(tile) {
        for x in (0..width).step_by(tile) {
            out.push((y, x, tile.min(height - y), tile.min(width - x)));
        }
    }
    out
}

fn cut(img: &ImageTensor, (y, x, h, w): (usize, usize, usize, usize)) -> ImageTensor {
    ImageTensor { data: img.data.slice(s![y..y + h, x..x + w, ..]).to_owned() }
}

/// MS-SSIM and MSE parts of the whole-image distortion.
fn distortion_parts(x: &ImageTensor, x_hat: &ImageTensor, w: &LossWeights) -> [f64; 2] {
    let d = w.distortion_only();
    let ssim = LossWeights { lambda_d2: 0.0, lambda_d3: 0.0, ..d };
    let mse = LossWeights { lambda_d1: 0.0, lambda_d3: 0.0, ..d };
    [tile_loss(x, x_hat, &ssim), tile_loss(x, x_hat, &mse)]
}

/// One index per tile of the full-image decode. Each tile gets its
/// lowest-loss candidate, kept only if it lowers the whole-image distortion
/// without raising either its MS-SSIM or its MSE part (tiles are visited in
/// raster order); otherwise the tile keeps the default biases. Every tile's
/// loss is thus at most its default loss.
pub fn select_bias_tiles(
    x: &ImageTensor,
    y_hat: &LatentTensor,
    model: &CodecModel,
    codebook: &BiasCodebook,
    w: &LossWeights,
) -> Result<Vec<u8>> {
    let tiles = tile_grid(x.height(), x.width(), codebook.tile_size);
    let mut losses = vec![Vec::with_capacity(codebook.len() + 1); tiles.len()];
    let mut decodes = Vec::with_capacity(codebook.len() + 1);
    let candidates = std::iter::once(None).chain(codebook.centroids.iter().map(Some));
    for c in candidates {
        let x_hat = decode_image(model, y_hat, c)?;
        for (l, &t) in losses.iter_mut().zip(&tiles) {
            l.push(tile_loss(&cut(x, t), &cut(&x_hat, t), w));
        }
        decodes.push(x_hat);
    }
    let mut indices = vec![DEFAULT_BIAS_INDEX; tiles.len()];
    let mut current = decodes[0].clone();
    let mut current_parts = distortion_parts(x, &current, w);
    for (i, (l, &(ty, tx, th, tw))) in losses.iter().zip(&tiles).enumerate() {
        let best = argmin_index(l);
        if best == DEFAULT_BIAS_INDEX {
            continue;
        }
        let mut trial = current.clone();
        let region = s![ty..ty + th, tx..tx + tw, ..];
        trial.data.slice_mut(region).assign(&decodes[best as usize + 1].data.slice(region));
        let parts = distortion_parts(x, &trial, w);
        let lower = parts[0] + parts[1] < current_parts[0] + current_parts[1];
        if lower && parts.iter().zip(&current_parts).all(|(p, c)| p <= c) {
            indices[i] = best;
            current = trial;
            current_parts = parts;
        }
    }
    Ok(indices)
}

/// Full-image decode with each tile taken from the decode under its
/// signaled biases.
pub fn decode_with_tiles(
    model: &CodecModel,
    y_hat: &LatentTensor,
    codebook: &BiasCodebook,
    indices: &[u8],
) -> Result<ImageTensor> {
    let mut out = decode_image(model, y_hat, None)?;
    let tiles = tile_grid(out.height(), out.width(), codebook.tile_size);
    if indices.len() != tiles.len() {
        return Err(TrainError::Codebook(format!("{} bias indices for {} tiles", indices.len(), tiles.len())));
    }
    let mut used: Vec<u8> = indices.iter().copied().filter(|&i| i != DEFAULT_BIAS_INDEX).collect();
    used.sort_unstable();
    used.dedup();
    for idx in used {
        let decoded = decode_image(model, y_hat, codebook.lookup(idx)?)?;
        for (&i, &(y, x, h, w)) in indices.iter().zip(&tiles) {
            if i == idx {
                out.data.slice_mut(s![y..y + h, x..x + w, ..]).assign(&decoded.data.slice(s![y..y + h, x..x + w, ..]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_tie_rules() {
        assert_eq!(argmin_index(&[1.0]), 255);
        assert_eq!(argmin_index(&[1.0, 1.0, 2.0]), 255);
        assert_eq!(argmin_index(&[1.0, 0.5, 0.5]), 0);
        assert_eq!(argmin_index(&[1.0, 2.0, 0.5]), 1);
    }

    #[test]
    fn kmeans_small_cases() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, 5.0]];
        let km = kmeans(&pts, 255, 0, 10);
        assert_eq!(km.centroids, pts);
        let same = vec![vec![1.5, 2.5]; 6];
        assert_eq!(kmeans(&same, 255, 0, 10).centroids.len(), 1);
        assert_eq!(kmeans(&same, 2, 0, 10).centroids.len(), 1);
    }

    #[test]
    fn tile_grid_covers_image() {
        let g = tile_grid(40, 24, 16);
        assert_eq!(g.len(), 6);
        assert_eq!(g[5], (32, 16, 8, 8));
        assert_eq!(g.iter().map(|t| t.2 * t.3).sum::<usize>(), 40 * 24);
    }
}
