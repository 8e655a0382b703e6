//! Flat-buffer coder interface.
//!
//! Tables travel as contiguous `u16` start arrays, `alphabet` entries per
//! symbol, and results come back as integer status codes (0 on success,
//! otherwise [`CoderError::status_code`]). This is the boundary an
//! out-of-process or foreign coder implements; [`FlatBackend`] adapts any
//! such implementation to [`CoderBackend`] so the tensor drivers can use it.

use super::cdf::CdfTable;
use super::range_coder::{BatchDecoder, CoderBackend, RangeDecoder, RangeEncoder};
use crate::error::CoderError;

pub const STATUS_OK: i32 = 0;

fn tables_from_flat(cdfs: &[u16], alphabet: usize, n: usize) -> Result<Vec<CdfTable>, CoderError> {
    if alphabet == 0 || cdfs.len() != alphabet.checked_mul(n).ok_or(CoderError::LengthMismatch)? {
        return Err(CoderError::LengthMismatch);
    }
    cdfs.chunks_exact(alphabet).map(|c| CdfTable::from_starts(c.to_vec())).collect()
}

fn status<T>(r: Result<T, CoderError>, f: impl FnOnce(T)) -> i32 {
    match r {
        Ok(v) => {
            f(v);
            STATUS_OK
        }
        Err(e) => e.status_code(),
    }
}

/// Encodes `symbols`; appends the stream to `out` on success.
pub fn encode_flat(symbols: &[u32], cdfs: &[u16], alphabet: usize, out: &mut Vec<u8>) -> i32 {
    let run = || {
        let tables = tables_from_flat(cdfs, alphabet, symbols.len())?;
        let mut enc = RangeEncoder::new();
        for (&s, t) in symbols.iter().zip(&tables) {
            enc.encode(s, t)?;
        }
        Ok(enc.finish())
    };
    status(run(), |bytes| out.extend_from_slice(&bytes))
}

/// Decodes `n` symbols in one call.
pub fn decode_flat(bytes: &[u8], cdfs: &[u16], alphabet: usize, n: usize, out: &mut Vec<u32>) -> i32 {
    let mut session = FlatDecoder::new(bytes);
    session.decode_batch(cdfs, alphabet, n, out)
}

/// Decoder session that keeps coder state across batches.
pub struct FlatDecoder<'a> {
    inner: RangeDecoder<'a>,
}

impl<'a> FlatDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        FlatDecoder { inner: RangeDecoder::new(bytes) }
    }

    pub fn decode_batch(&mut self, cdfs: &[u16], alphabet: usize, n: usize, out: &mut Vec<u32>) -> i32 {
        let mut run = || {
            let tables = tables_from_flat(cdfs, alphabet, n)?;
            tables.iter().map(|t| self.inner.decode(t)).collect::<Result<Vec<_>, _>>()
        };
        status(run(), |syms| out.extend(syms))
    }
}

fn code_to_error(code: i32) -> CoderError {
    match code {
        1 => CoderError::SymbolOutsideAlphabet { symbol: u32::MAX, alphabet: 0 },
        2 => CoderError::BadTable,
        3 => CoderError::LengthMismatch,
        5 => CoderError::Truncated,
        _ => CoderError::ChecksumMismatch,
    }
}

fn flatten(tables: &[CdfTable]) -> Result<(Vec<u16>, usize), CoderError> {
    let alphabet = tables.first().map_or(1, CdfTable::alphabet);
    if tables.iter().any(|t| t.alphabet() != alphabet) {
        return Err(CoderError::BadTable);
    }
    Ok((tables.iter().flat_map(|t| t.starts().iter().copied()).collect(), alphabet))
}

/// Runs the drivers through the flat-buffer functions.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatBackend;

impl CoderBackend for FlatBackend {
    fn encode(&self, symbols: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>, CoderError> {
        if symbols.len() != tables.len() {
            return Err(CoderError::LengthMismatch);
        }
        let (flat, alphabet) = flatten(tables)?;
        let mut out = Vec::new();
        match encode_flat(symbols, &flat, alphabet, &mut out) {
            STATUS_OK => Ok(out),
            code => Err(code_to_error(code)),
        }
    }

    fn decoder<'a>(&self, bytes: &'a [u8]) -> Box<dyn BatchDecoder + 'a> {
        Box::new(FlatDecoder::new(bytes))
    }
}

impl BatchDecoder for FlatDecoder<'_> {
    fn decode_batch(&mut self, tables: &[CdfTable]) -> Result<Vec<u32>, CoderError> {
        let (flat, alphabet) = flatten(tables)?;
        let mut out = Vec::with_capacity(tables.len());
        match FlatDecoder::decode_batch(self, &flat, alphabet, tables.len(), &mut out) {
            STATUS_OK => Ok(out),
            code => Err(code_to_error(code)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::range_coder::ac_encode;

    #[test]
    fn status_codes() {
        let mut out = Vec::new();
        assert_eq!(encode_flat(&[0, 1], &[0, 100], 2, &mut out), 3);
        assert_eq!(encode_flat(&[2], &[0, 100], 2, &mut out), 1);
        assert_eq!(encode_flat(&[0], &[0, 0], 2, &mut out), 2);
        assert!(out.is_empty());
        assert_eq!(encode_flat(&[1], &[0, 100], 2, &mut out), STATUS_OK);
        let mut syms = Vec::new();
        assert_eq!(decode_flat(&out, &[0, 100], 2, 1, &mut syms), STATUS_OK);
        assert_eq!(syms, [1]);
    }

    #[test]
    fn matches_reference_bytes() {
        let tables: Vec<CdfTable> =
            (0..50).map(|i| CdfTable::from_pmf(&[1.0 + i as f64, 2.0, 0.5, 3.0]).unwrap()).collect();
        let symbols: Vec<u32> = (0..50).map(|i| (i * 7 % 4) as u32).collect();
        let reference = ac_encode(&symbols, &tables).unwrap();
        let flat = FlatBackend.encode(&symbols, &tables).unwrap();
        assert_eq!(reference, flat);
        let mut dec = FlatBackend.decoder(&flat);
        let mut got = dec.decode_batch(&tables[..20]).unwrap();
        got.extend(dec.decode_batch(&tables[20..]).unwrap());
        assert_eq!(got, symbols);
    }
}
