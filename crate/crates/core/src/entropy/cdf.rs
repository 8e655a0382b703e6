use crate::error::CoderError;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// Quantized cumulative distribution: `starts[s]` is the cumulative count
/// below symbol `s`; the total is `2^16`. Every symbol has a non-zero width.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CdfTable {
    starts: Vec<u16>,
}

impl CdfTable {
    /// Validates a start array: begins at 0, strictly increasing.
    pub fn from_starts(starts: Vec<u16>) -> Result<CdfTable, CoderError> {
        if starts.is_empty() || starts[0] != 0 || starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoderError::BadTable);
        }
        Ok(CdfTable { starts })
    }

    pub fn uniform(alphabet: usize) -> Result<CdfTable, CoderError> {
        if alphabet == 0 || alphabet > PROB_TOTAL as usize {
            return Err(CoderError::BadTable);
        }
        let counts = vec![PROB_TOTAL as usize / alphabet; alphabet];
        let rem = PROB_TOTAL as usize - counts.iter().sum::<usize>();
        let counts: Vec<u32> = counts.iter().enumerate().map(|(i, &c)| (c + usize::from(i < rem)) as u32).collect();
        Self::from_counts(&counts)
    }

    /// Largest-remainder apportionment of `2^16` counts, minimum one per
    /// symbol; ties go to the lower symbol index.
    pub fn from_pmf(pmf: &[f64]) -> Result<CdfTable, CoderError> {
        let n = pmf.len();
        if n == 0 || n > PROB_TOTAL as usize || pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CoderError::BadTable);
        }
        let sum: f64 = pmf.iter().sum();
        if sum <= 0.0 {
            return Err(CoderError::BadTable);
        }
        let total = f64::from(PROB_TOTAL);
        let ideal: Vec<f64> = pmf.iter().map(|p| p / sum * total).collect();
        let mut counts: Vec<u32> = ideal.iter().map(|v| (v.floor() as u32).max(1)).collect();
        let assigned: i64 = counts.iter().map(|&c| i64::from(c)).sum();
        let mut left = i64::from(PROB_TOTAL) - assigned;
        if left > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            let frac = |i: usize| ideal[i] - f64::from(counts[i]);
            order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[i] += 1;
                left -= 1;
            }
        }
        while left < 0 {
            let i = (0..n).filter(|&i| counts[i] > 1).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
            let i = i.ok_or(CoderError::BadTable)?;
            counts[i] -= 1;
            left += 1;
        }
        Self::from_counts(&counts)
    }

    /// Counts must be positive and sum to `2^16`.
    pub fn from_counts(counts: &[u32]) -> Result<CdfTable, CoderError> {
        if counts.is_empty()
            || counts.contains(&0)
            || counts.iter().map(|&c| u64::from(c)).sum::<u64>() != u64::from(PROB_TOTAL)
        {
            return Err(CoderError::BadTable);
        }
        let mut starts = Vec::with_capacity(counts.len());
        let mut acc = 0u32;
        for &c in counts {
            starts.push(acc as u16);
            acc += c;
        }
        Ok(CdfTable { starts })
    }

    pub fn alphabet(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[u16] {
        &self.starts
    }

    pub fn start(&self, s: usize) -> u32 {
        u32::from(self.starts[s])
    }

    pub fn freq(&self, s: usize) -> u32 {
        let end = self.starts.get(s + 1).map_or(PROB_TOTAL, |&v| u32::from(v));
        end - self.start(s)
    }

    pub fn probability(&self, s: usize) -> f64 {
        f64::from(self.freq(s)) / f64::from(PROB_TOTAL)
    }

    /// Symbol whose interval contains `v < 2^16`.
    pub fn find(&self, v: u32) -> usize {
        self.starts.partition_point(|&s| u32::from(s) <= v) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_examples() {
        let t = CdfTable::uniform(256).unwrap();
        assert!((0..256).all(|s| t.freq(s) == 256));
        let t = CdfTable::uniform(3).unwrap();
        assert_eq!((t.freq(0), t.freq(1), t.freq(2)), (21846, 21845, 21845));
        let t = CdfTable::from_pmf(&[0.9, 0.1]).unwrap();
        assert_eq!(t.freq(0), 58982);
        assert_eq!(t.freq(1), 6554);
        assert_eq!(t.find(58981), 0);
        assert_eq!(t.find(58982), 1);
    }

    #[test]
    fn degenerate_pmf_keeps_every_symbol_codable() {
        let mut pmf = vec![0.0; 256];
        pmf[17] = 1.0;
        let t = CdfTable::from_pmf(&pmf).unwrap();
        assert_eq!(t.freq(17), PROB_TOTAL - 255);
        assert!((0..256).all(|s| t.freq(s) >= 1));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let t = CdfTable::from_pmf(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((t.freq(0), t.freq(1), t.freq(2)), (21846, 21845, 21845));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CdfTable::from_pmf(&[]).is_err());
        assert!(CdfTable::from_pmf(&[f64::NAN, 1.0]).is_err());
        assert!(CdfTable::from_pmf(&[0.0, 0.0]).is_err());
        assert!(CdfTable::from_starts(vec![0, 5, 5]).is_err());
        assert!(CdfTable::from_starts(vec![1, 5]).is_err());
        assert!(CdfTable::from_counts(&[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn tables_are_valid(pmf in proptest::collection::vec(0.0f64..1.0, 1..300)) {
            prop_assume!(pmf.iter().sum::<f64>() > 0.0);
            let t = CdfTable::from_pmf(&pmf).unwrap();
            prop_assert_eq!(t.alphabet(), pmf.len());
            let total: u32 = (0..t.alphabet()).map(|s| t.freq(s)).sum();
            prop_assert_eq!(total, PROB_TOTAL);
            prop_assert!((0..t.alphabet()).all(|s| t.freq(s) >= 1));
            prop_assert!(CdfTable::from_starts(t.starts().to_vec()).is_ok());
        }
    }
}
