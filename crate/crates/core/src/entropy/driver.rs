//! Multi-scale encode/decode of symbol tensors.
//!
//! Order: the top level `z(M)` with uniform tables in raster order, channels
//! innermost; then scales `M..1`, groups `1..3`, raster order within a
//! group, channels innermost.

use metacodec_autodiff::{no_grad, Var};
use ndarray::{Array3, ArrayD, IxDyn};

use super::cdf::CdfTable;
use super::range_coder::CoderBackend;
use crate::config::ProbModelConfig;
use crate::error::{CodecError, CoderError, Result};
use crate::params::Params;
use crate::prob_model::{build_pyramid, level_dims, partition_groups, pmf_table, progressive_pass, MixtureParams};
use crate::tensors::{max_symbol, SymbolTensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTensor {
    pub payload: Vec<u8>,
    pub checksum: u32,
}

pub fn symbol_checksum(z: &SymbolTensor) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[z.bits]);
    h.update(&z.data.iter().copied().collect::<Vec<u8>>());
    h.finalize()
}

fn group_tables(mix: &MixtureParams, positions: &[(usize, usize)], channels: usize, bits: u8) -> Result<Vec<CdfTable>> {
    let mut out = Vec::with_capacity(positions.len() * channels);
    for &(i, j) in positions {
        for k in 0..channels {
            out.push(CdfTable::from_pmf(&pmf_table(&mix.element(i, j, k), bits))?);
        }
    }
    Ok(out)
}

/// Tables and symbols of every coded element, in coding order.
pub fn coding_sequence(p: &Params, prob: &ProbModelConfig, z: &SymbolTensor) -> Result<(Vec<u32>, Vec<CdfTable>)> {
    let (_, _, c) = z.dims();
    let pyramid = build_pyramid(z, prob.num_scales)?;
    let top = &pyramid.levels[prob.num_scales];
    let uniform = CdfTable::uniform(max_symbol(z.bits) as usize + 1)?;
    let mut symbols: Vec<u32> = top.data.iter().map(|&s| u32::from(s)).collect();
    let mut tables = vec![uniform; symbols.len()];
    no_grad(|| {
        progressive_pass(
            p,
            prob,
            c,
            &Var::constant(top.dequantized_batch()),
            |scale, _| Ok(Var::constant(pyramid.levels[scale - 1].dequantized_batch())),
            |step| {
                let level = &pyramid.levels[step.scale - 1];
                let (h, w, _) = level.dims();
                let positions = partition_groups(h, w).positions(step.group);
                tables.extend(group_tables(&step.mixture.image(0), &positions, c, z.bits)?);
                for &(i, j) in &positions {
                    symbols.extend((0..c).map(|k| u32::from(level.data[[i, j, k]])));
                }
                Ok(None)
            },
        )
    })?;
    Ok((symbols, tables))
}

pub fn encode_tensor(
    p: &Params,
    prob: &ProbModelConfig,
    z: &SymbolTensor,
    coder: &dyn CoderBackend,
) -> Result<EncodedTensor> {
    let (symbols, tables) = coding_sequence(p, prob, z)?;
    let payload = coder.encode(&symbols, &tables)?;
    Ok(EncodedTensor { payload, checksum: symbol_checksum(z) })
}

/// Decodes a `dims` tensor of `bits`-bit symbols. With `checksum`, a
/// mismatch against the decoded symbols is reported as an error.
pub fn decode_tensor(
    p: &Params,
    prob: &ProbModelConfig,
    payload: &[u8],
    dims: (usize, usize, usize),
    bits: u8,
    checksum: Option<u32>,
    coder: &dyn CoderBackend,
) -> Result<SymbolTensor> {
    let (h0, w0, c) = dims;
    if h0 == 0 || w0 == 0 || c == 0 {
        return Err(CodecError::Config("empty tensor".into()));
    }
    let levels = f64::from(max_symbol(bits));
    let mut dec = coder.decoder(payload);
    let (th, tw) = level_dims(h0, w0, prob.num_scales);
    let uniform = CdfTable::uniform(levels as usize + 1)?;
    let top_syms = dec.decode_batch(&vec![uniform; th * tw * c])?;
    let top = ArrayD::from_shape_vec(IxDyn(&[1, th, tw, c]), top_syms.iter().map(|&s| f64::from(s) / levels).collect())
        .expect("top level shape");
    let level0 = no_grad(|| {
        progressive_pass(
            p,
            prob,
            c,
            &Var::constant(top),
            |scale, coarse| {
                let (h, w) = level_dims(h0, w0, scale - 1);
                Ok(coarse.upsample2(h, w))
            },
            |step| {
                let (h, w) = (step.fine.shape()[1], step.fine.shape()[2]);
                let positions = partition_groups(h, w).positions(step.group);
                let tables = group_tables(&step.mixture.image(0), &positions, c, bits)?;
                let syms = dec.decode_batch(&tables)?;
                let mut fine = step.fine.value().clone();
                for (n, &(i, j)) in positions.iter().enumerate() {
                    for k in 0..c {
                        fine[[0, i, j, k]] = f64::from(syms[n * c + k]) / levels;
                    }
                }
                Ok(Some(Var::constant(fine)))
            },
        )
    })?;
    let data = Array3::from_shape_fn((h0, w0, c), |(i, j, k)| (level0.value()[[0, i, j, k]] * levels).round() as u8);
    let z = SymbolTensor { data, bits };
    if let Some(expected) = checksum {
        if symbol_checksum(&z) != expected {
            return Err(CoderError::ChecksumMismatch.into());
        }
    }
    Ok(z)
}

/// Ideal code length of `z` under the quantized tables, in bits.
pub fn table_bits(p: &Params, prob: &ProbModelConfig, z: &SymbolTensor) -> Result<f64> {
    let (symbols, tables) = coding_sequence(p, prob, z)?;
    Ok(symbols.iter().zip(&tables).map(|(&s, t)| -t.probability(s as usize).log2()).sum())
}
