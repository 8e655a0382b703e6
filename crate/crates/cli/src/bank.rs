//! Codec bank: the ladder of trained codecs plus their bias codebooks.
//!
//! A bank directory holds `c0.ckpt`, `c1.ckpt`, ... in order of decreasing
//! rate. Each checkpoint records its trained bitrate under the metadata key
//! `target_bpp`. A codebook set file bundles one bias codebook per codec:
//!
//! ```text
//! "MCBS" | u8 count | count x (u8 codec index | u32 LE length | codebook bytes)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metacodec::checkpoint::{self, write_atomic};
use metacodec::{CodecConfig, CodecModel, ProbModelConfig};
use metacodec_train::{BiasCodebook, LossWeights};

use crate::error::{PipelineError, Result};

/// Desk-scale settings of one bank member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankPreset {
    pub channels: usize,
    pub bits: u8,
    pub target_bpp: f64,
    pub zeta: f64,
    pub lambda_r: f64,
}

/// The four-codec ladder `(c, b)` = (8,8), (6,8), (3,4), (1,4).
pub const BANK_PRESETS: [BankPreset; 4] = [
    BankPreset { channels: 8, bits: 8, target_bpp: 2.0, zeta: 0.8, lambda_r: 0.1 },
    BankPreset { channels: 6, bits: 8, target_bpp: 0.75, zeta: 0.4, lambda_r: 0.3 },
    BankPreset { channels: 3, bits: 4, target_bpp: 0.12, zeta: 0.4, lambda_r: 1.0 },
    BankPreset { channels: 1, bits: 4, target_bpp: 0.06, zeta: 0.5, lambda_r: 2.0 },
];

pub const DESK_DOWNSAMPLE: usize = 4;
pub const DESK_HIDDEN: usize = 16;
pub const DESK_PROB: ProbModelConfig = ProbModelConfig { num_scales: 3, mixtures: 3, context_channels: 8 };

impl BankPreset {
    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            channels: self.channels,
            bits: self.bits,
            downsample: DESK_DOWNSAMPLE,
            hidden_channels: DESK_HIDDEN,
            zeta: self.zeta,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_r: self.lambda_r, ..Default::default() }
    }

    /// Fresh model with the bank metadata filled in.
    pub fn init_model(&self, index: usize, seed: u64) -> Result<CodecModel> {
        let mut m = CodecModel::new(self.codec(), DESK_PROB, seed)?;
        m.metadata.insert("target_bpp".into(), self.target_bpp.to_string());
        m.metadata.insert("bank_index".into(), index.to_string());
        m.metadata.insert("lambda_r".into(), self.lambda_r.to_string());
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub model: CodecModel,
    pub target_bpp: f64,
}

impl BankEntry {
    pub fn new(model: CodecModel) -> Result<Self> {
        let target_bpp = model
            .metadata
            .get("target_bpp")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v > 0.0)
            .ok_or_else(|| PipelineError::Bank("checkpoint lacks a positive target_bpp".into()))?;
        Ok(BankEntry { model, target_bpp })
    }

    /// Loss weights the codec was trained with.
    pub fn weights(&self) -> LossWeights {
        let lambda_r =
            self.model.metadata.get("lambda_r").and_then(|v| v.parse().ok()).unwrap_or(LossWeights::default().lambda_r);
        LossWeights { lambda_r, ..Default::default() }
    }
}

/// Codecs ordered from highest to lowest trained bitrate.
#[derive(Debug, Clone)]
pub struct CodecBank {
    pub entries: Vec<BankEntry>,
}

impl CodecBank {
    pub fn new(entries: Vec<BankEntry>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 16 {
            return Err(PipelineError::Bank(format!("bank needs 1..=16 codecs, got {}", entries.len())));
        }
        if entries.windows(2).any(|w| w[0].target_bpp <= w[1].target_bpp) {
            return Err(PipelineError::Bank("codecs must be ordered by strictly decreasing target_bpp".into()));
        }
        Ok(CodecBank { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u8) -> Result<&BankEntry> {
        self.entries.get(id as usize).ok_or(PipelineError::UnknownCodec(id))
    }

    /// Index of the codec whose trained bitrate is nearest `bpp`; ties go
    /// to the higher-rate codec.
    pub fn nearest(&self, bpp: f64) -> usize {
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if (e.target_bpp - bpp).abs() < (self.entries[best].target_bpp - bpp).abs() {
                best = i;
            }
        }
        best
    }

    pub fn checkpoint_path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("c{index}.ckpt"))
    }

    /// Loads `c0.ckpt`, `c1.ckpt`, ... until the first missing index.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        loop {
            let path = Self::checkpoint_path(dir, entries.len());
            if !path.exists() {
                break;
            }
            entries.push(BankEntry::new(checkpoint::load(&path)?)?);
        }
        Self::new(entries)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, e) in self.entries.iter().enumerate() {
            checkpoint::save(&e.model, &Self::checkpoint_path(dir, i))?;
        }
        Ok(())
    }
}

/// Bias codebooks keyed by codec index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodebookSet {
    pub books: BTreeMap<u8, BiasCodebook>,
}

const SET_MAGIC: [u8; 4] = *b"MCBS";

impl CodebookSet {
    pub fn get(&self, codec: u8) -> Option<&BiasCodebook> {
        self.books.get(&codec)
    }

    pub fn validate(&self, bank: &CodecBank) -> Result<()> {
        for (&id, book) in &self.books {
            book.validate(&bank.get(id)?.model.codec)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = SET_MAGIC.to_vec();
        out.push(self.books.len() as u8);
        for (&id, book) in &self.books {
            let bytes = book.to_bytes()?;
            out.push(id);
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || PipelineError::Bank("malformed codebook set".into());
        if bytes.len() < 5 || bytes[..4] != SET_MAGIC {
            return Err(bad());
        }
        let mut pos = 5;
        let mut books = BTreeMap::new();
        for _ in 0..bytes[4] {
            let id = *bytes.get(pos).ok_or_else(bad)?;
            let len =
                u32::from_le_bytes(bytes.get(pos + 1..pos + 5).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
            let body = bytes.get(pos + 5..pos + 5 + len).ok_or_else(bad)?;
            books.insert(id, BiasCodebook::from_bytes(body)?);
            pos += 5 + len;
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(CodebookSet { books })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
