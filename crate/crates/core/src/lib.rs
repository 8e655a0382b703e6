//! Learned image codec.
//!
//! * [`codec`]: encoder, importance network, decoder, masking, quantization.
//! * [`prob_model`]: multi-scale progressive mixture-of-logistics model.
//! * [`entropy`]: range coder, tensor drivers and bitstream container.
//! * [`metrics`]: MS-SSIM and PSNR.
//! * [`checkpoint`]: model persistence.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prob_model;
pub mod tensors;

pub use codec::{
    apply_mask, decode_image, dequantize, encode_latent, expand_mask, importance_constraint, importance_map, quantize,
    BiasSlot, BiasVector,
};
pub use config::{CodecConfig, ProbModelConfig};
pub use error::{CodecError, CoderError, ContainerError, Result};
pub use model::CodecModel;
pub use params::{ConvSpec, ParamStore, Params};
pub use tensors::{
    crop_image, max_symbol, pad_image, ChannelMask, CropRecord, ImageTensor, ImportanceMap, LatentStage, LatentTensor,
    SymbolTensor,
};
