//! Strict JSON run configuration.
//!
//! Every section is optional and falls back to the pinned defaults below;
//! unknown keys anywhere are rejected so typos cannot silently change a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use facet_core::data::DataParams;
use facet_core::denoiser::DenoiserDims;
use facet_core::error::{Error, Result};
use facet_core::finetune::FinetuneConfig;
use facet_core::metrics::EvalConfig;
use facet_core::pretrain::PretrainConfig;
use facet_core::sampler::SamplerConfig;
use facet_core::schedule::NoiseSchedule;
use facet_core::tokenopt::TokenOptConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    /// Reference items in the concept set.
    pub n_items: usize,
    /// Category the set personalizes.
    pub target_category: usize,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self { n_items: 4, target_category: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Items in the pretraining corpus.
    pub n_items: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_items: 160 }
    }
}

/// Network widths. The data width always comes from the `data` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_cond: usize,
    pub d_attn: usize,
    pub d_hidden: usize,
    pub d_time: usize,
    pub n_blocks: usize,
    pub encoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserDims::default();
        Self {
            d_model: d.d_model,
            d_cond: d.d_cond,
            d_attn: d.d_attn,
            d_hidden: d.d_hidden,
            d_time: d.d_time,
            n_blocks: d.n_blocks,
            encoder_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, data_dim: usize) -> DenoiserDims {
        DenoiserDims {
            data_dim,
            d_model: self.d_model,
            d_cond: self.d_cond,
            d_attn: self.d_attn,
            d_hidden: self.d_hidden,
            d_time: self.d_time,
            n_blocks: self.n_blocks,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub betas: Vec<f64>,
    pub residual_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
    pub seeds_per_cell: usize,
    pub include_finetune: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            residual_lens: vec![0, 1, 2, 4, 8],
            target_lens: vec![1, 2, 4, 8],
            seeds_per_cell: 3,
            include_finetune: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Generations per condition.
    pub n_samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_samples: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerivationConfig {
    /// Random (timestep, state, condition) tuples to check.
    pub trials: usize,
    /// Largest tolerated relative error for both identities.
    pub tolerance: f64,
}

impl Default for DerivationConfig {
    fn default() -> Self {
        Self { trials: 200, tolerance: 1e-8 }
    }
}

/// Resolved configuration covering every subcommand; embedded verbatim in the
/// run manifest so artifacts are self-describing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataParams,
    pub concept: ConceptConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub tokenopt: TokenOptConfig,
    pub finetune: FinetuneConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub sample: SampleConfig,
    pub derivation: DerivationConfig,
}

impl RunConfig {
    /// Loads and strictly parses a config file; `None` means all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("invalid config {}: {e}", p.display()))
                })
            }
        }
    }
}
