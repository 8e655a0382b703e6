//! Training for metacodec models.
//!
//! * [`train_stage1`]: joint rate-distortion training of all networks.
//! * [`overfit_latent`]: per-image latent adaptation with frozen networks.
//! * [`meta_finetune`]: outer updates on the post-adaptation loss, with or
//!   without differentiating through the inner loop.
//! * [`build_bias_clusters`], [`select_bias_cluster`]: decoder-bias codebook.

pub mod bias;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod meta;
pub mod overfit;
pub mod stage1;

pub use bias::{
    build_bias_clusters, decode_with_tiles, kmeans, overfit_biases, select_bias_cluster, select_bias_tiles, tile_grid,
    BiasCodebook, KMeans, DEFAULT_BIAS_INDEX,
};
pub use config::{BiasConfig, LossWeights, MetaConfig, SessionConfig, TrainConfig};
pub use data::extract_patches;
pub use error::{Result, TrainError};
pub use loss::{analyze, forward_loss, rd_loss, rd_loss_terms, synthesize, FeatureExtractor, LossTerms};
pub use meta::{meta_finetune, meta_objective};
pub use overfit::{inner_loop, overfit_latent, InnerMode, LatentProblem, OverfitResult};
pub use stage1::{train_stage1, write_log_csv, EpochLog};
