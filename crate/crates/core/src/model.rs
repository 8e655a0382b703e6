use std::collections::BTreeMap;

use crate::codec::{decoder_specs, encoder_specs, importance_specs};
use crate::config::{CodecConfig, ProbModelConfig};
use crate::error::Result;
use crate::params::{seeded_rng, ParamStore};
use crate::prob_model::{head_bias_init, head_name, prob_specs};

/// All four networks of one codec: encoder (`enc.*`), importance network
/// (`imp.*`), decoder (`dec.*`) and probability model (`prob.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub codec: CodecConfig,
    pub prob: ProbModelConfig,
    pub params: ParamStore,
    /// Free-form provenance (training data, seeds, target bitrate, ...).
    pub metadata: BTreeMap<String, String>,
}

impl CodecModel {
    /// Freshly initialized networks.
    pub fn new(codec: CodecConfig, prob: ProbModelConfig, seed: u64) -> Result<CodecModel> {
        codec.validate()?;
        prob.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        params.init_convs(&encoder_specs(&codec), &mut rng);
        params.init_convs(&importance_specs(&codec), &mut rng);
        params.init_convs(&decoder_specs(&codec), &mut rng);
        params.init_convs(&prob_specs(&codec, &prob), &mut rng);
        for scale in 1..=prob.num_scales {
            params.insert(format!("{}.b", head_name(scale)), head_bias_init(&codec, &prob));
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("init_seed".into(), seed.to_string());
        Ok(CodecModel { codec, prob, params, metadata })
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.")
    }

    pub fn is_decoder_bias(name: &str) -> bool {
        name.starts_with("dec.") && name.ends_with(".b")
    }
}
