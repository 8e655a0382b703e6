//! 32-bit range coder with 16-bit probabilities and byte-wise
//! renormalization.
//!
//! The encoder keeps a 32-bit `low` with carries propagated into the bytes
//! already written. On finish it emits the shortest value inside the final
//! interval and drops trailing zero bytes; the decoder reads zeros past the
//! end of its input, so the stream never needs them.

use super::cdf::{CdfTable, PROB_BITS};
use crate::error::CoderError;

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the first byte of the stream");
    }

    fn normalize_low(&mut self) {
        if self.low >> 32 != 0 {
            self.carry();
            self.low &= 0xFFFF_FFFF;
        }
    }

    pub fn encode(&mut self, symbol: u32, table: &CdfTable) -> Result<(), CoderError> {
        let s = symbol as usize;
        if s >= table.alphabet() {
            return Err(CoderError::SymbolOutsideAlphabet { symbol, alphabet: table.alphabet() });
        }
        let r = self.range >> PROB_BITS;
        self.low += u64::from(r) * u64::from(table.start(s));
        self.range = r * table.freq(s);
        self.normalize_low();
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xFFFF_FFFF;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let high = self.low + u64::from(self.range);
        for nbytes in 1..=4u32 {
            let mask = (1u64 << (32 - 8 * nbytes)) - 1;
            let v = (self.low + mask) & !mask;
            if v < high {
                self.low = v;
                self.normalize_low();
                for i in 0..nbytes {
                    self.out.push((self.low >> (24 - 8 * i)) as u8);
                }
                break;
            }
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

/// Decoder over a byte slice; reads zeros past the end.
#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder { input, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<u32, CoderError> {
        let r = self.range >> PROB_BITS;
        let v = (self.code / r).min((1 << PROB_BITS) - 1);
        let s = table.find(v);
        let start = r * table.start(s);
        let size = r * table.freq(s);
        if self.code < start || self.code - start >= size {
            return Err(CoderError::ChecksumMismatch);
        }
        self.code -= start;
        self.range = size;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
        Ok(s as u32)
    }

    /// Bytes consumed beyond the end of the input (virtual zeros).
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.input.len())
    }
}

/// Encodes `symbols[t]` with `tables[t]`.
pub fn ac_encode(symbols: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != tables.len() {
        return Err(CoderError::LengthMismatch);
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols; `provider(t, decoded_so_far)` returns the table of
/// step `t`, which must equal the one the encoder used.
pub fn ac_decode(
    bytes: &[u8],
    mut provider: impl FnMut(usize, &[u32]) -> Result<CdfTable, CoderError>,
    n: usize,
) -> Result<Vec<u32>, CoderError> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let table = provider(t, &out)?;
        out.push(dec.decode(&table)?);
    }
    Ok(out)
}

/// A coder implementation behind the tensor drivers.
pub trait CoderBackend {
    fn encode(&self, symbols: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>, CoderError>;
    fn decoder<'a>(&self, bytes: &'a [u8]) -> Box<dyn BatchDecoder + 'a>;
}

/// Stateful decoder fed one batch of tables at a time; batching does not
/// change the coding order.
pub trait BatchDecoder {
    fn decode_batch(&mut self, tables: &[CdfTable]) -> Result<Vec<u32>, CoderError>;
}

/// The range coder in this module.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceCoder;

impl CoderBackend for ReferenceCoder {
    fn encode(&self, symbols: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>, CoderError> {
        ac_encode(symbols, tables)
    }

    fn decoder<'a>(&self, bytes: &'a [u8]) -> Box<dyn BatchDecoder + 'a> {
        Box::new(RangeDecoder::new(bytes))
    }
}

impl BatchDecoder for RangeDecoder<'_> {
    fn decode_batch(&mut self, tables: &[CdfTable]) -> Result<Vec<u32>, CoderError> {
        tables.iter().map(|t| self.decode(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ideal_bits(symbols: &[u32], tables: &[CdfTable]) -> f64 {
        symbols.iter().zip(tables).map(|(&s, t)| -t.probability(s as usize).log2()).sum()
    }

    #[test]
    fn empty_sequence() {
        let bytes = ac_encode(&[], &[]).unwrap();
        assert!(bytes.is_empty());
        assert!(ac_decode(&bytes, |_, _| unreachable!(), 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_bytes_are_tight() {
        let t = CdfTable::uniform(256).unwrap();
        let symbols: Vec<u32> = (0..100).map(|i| (i * 37 % 256) as u32).collect();
        let tables = vec![t.clone(); 100];
        let bytes = ac_encode(&symbols, &tables).unwrap();
        assert!(bytes.len() <= 104, "{}", bytes.len());
        assert_eq!(ac_decode(&bytes, |_, _| Ok(t.clone()), 100).unwrap(), symbols);
    }

    #[test]
    fn near_certain_symbol_costs_under_a_byte() {
        let mut pmf = vec![0.0; 256];
        pmf[0] = 1.0;
        let t = CdfTable::from_pmf(&pmf).unwrap();
        let bytes = ac_encode(&[0], std::slice::from_ref(&t)).unwrap();
        assert!(bytes.len() * 8 < 8, "{bytes:?}");
        assert_eq!(ac_decode(&bytes, |_, _| Ok(t.clone()), 1).unwrap(), [0]);
    }

    #[test]
    fn carry_propagates_through_ff_runs() {
        // Symbols at the top of the interval push `low` over 2^32 repeatedly.
        let t = CdfTable::from_counts(&[65535, 1]).unwrap();
        let mut symbols = vec![1u32; 5];
        symbols.extend(vec![0u32; 40]);
        symbols.extend(vec![1u32; 7]);
        let tables = vec![t.clone(); symbols.len()];
        let bytes = ac_encode(&symbols, &tables).unwrap();
        assert_eq!(ac_decode(&bytes, |_, _| Ok(t.clone()), symbols.len()).unwrap(), symbols);
        assert!(ideal_bits(&symbols, &tables) + 32.0 >= (bytes.len() * 8) as f64);
    }

    #[test]
    fn errors() {
        let t = CdfTable::uniform(4).unwrap();
        assert!(matches!(ac_encode(&[4], std::slice::from_ref(&t)), Err(CoderError::SymbolOutsideAlphabet { .. })));
        assert_eq!(ac_encode(&[1], &[]), Err(CoderError::LengthMismatch));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn round_trip_and_length_bound(
            spec in proptest::collection::vec((proptest::collection::vec(0.0f64..1.0, 1..40), any::<u32>()), 0..200)
        ) {
            let mut symbols = Vec::new();
            let mut tables = Vec::new();
            for (pmf, pick) in &spec {
                let pmf: Vec<f64> = if pmf.iter().sum::<f64>() > 0.0 { pmf.clone() } else { vec![1.0; pmf.len()] };
                let t = CdfTable::from_pmf(&pmf).unwrap();
                symbols.push(pick % t.alphabet() as u32);
                tables.push(t);
            }
            let bytes = ac_encode(&symbols, &tables).unwrap();
            prop_assert!((bytes.len() * 8) as f64 <= ideal_bits(&symbols, &tables) + 32.0);
            let back = ac_decode(&bytes, |t, _| Ok(tables[t].clone()), symbols.len()).unwrap();
            prop_assert_eq!(back, symbols);
        }
    }
}
