//! Rate-controlled compression pipeline, codec bank handling and the
//! `metacodec` command-line tool.

pub mod bank;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use bank::{BankEntry, BankPreset, CodebookSet, CodecBank, BANK_PRESETS};
pub use error::{PipelineError, Result};
pub use pipeline::{compress, decompress, CompressOptions, Compressed, RateTarget, SWEEP_TARGETS};
pub use report::{evaluate, MetricsRecord, SweepRow};
