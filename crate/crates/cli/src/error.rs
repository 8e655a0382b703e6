use metacodec::{CodecError, ContainerError};
use metacodec_train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("bitstream does not match codec {codec}: {reason}")]
    CodecMismatch { codec: u8, reason: String },
    #[error("invalid rate target: {0}")]
    Target(String),
    #[error("codec bank: {0}")]
    Bank(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// Stable machine-readable kind for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Codec(CodecError::Coder(_)) => "coder",
            PipelineError::Codec(CodecError::Container(_)) | PipelineError::Container(_) => "container",
            PipelineError::Codec(CodecError::Checkpoint(_)) => "checkpoint",
            PipelineError::Codec(_) => "codec",
            PipelineError::Train(_) => "train",
            PipelineError::UnknownCodec(_) | PipelineError::CodecMismatch { .. } => "codec_mismatch",
            PipelineError::Target(_) => "target",
            PipelineError::Bank(_) => "bank",
            PipelineError::Image(_) => "image",
            PipelineError::Io(_) => "io",
            PipelineError::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
