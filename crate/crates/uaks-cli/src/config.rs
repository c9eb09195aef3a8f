//! Pipeline configuration: one JSON file covering every module, with the
//! method defaults filled in and unknown keys rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use uaks_core::aud::EmConfig;
use uaks_core::corpus::SynthConfig;
use uaks_core::model::ArchConfig;
use uaks_core::pseudo::PseudoConfig;
use uaks_core::search::SearchConfig;
use uaks_core::train::{FinetuneSchedule, LossConfig, PretrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchProfile {
    Full,
    Reduced,
}

impl Default for ArchProfile {
    fn default() -> Self {
        ArchProfile::Full
    }
}

/// Architecture selection: a named profile plus optional field overrides.
/// The feature dimension always comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ArchChoice {
    pub profile: ArchProfile,
    pub embed_dim: Option<usize>,
    pub query_hidden: Option<usize>,
    pub query_layers: Option<usize>,
    pub doc_hidden: Option<usize>,
    pub doc_layers: Option<usize>,
    pub proj_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub downsample_after: Option<usize>,
    pub downsample_factor: Option<usize>,
}

impl ArchChoice {
    pub fn to_arch(&self, feature_dim: usize) -> Result<ArchConfig> {
        let mut arch = match self.profile {
            ArchProfile::Full => ArchConfig::full(feature_dim),
            ArchProfile::Reduced => ArchConfig::reduced(feature_dim),
        };
        if let Some(v) = self.embed_dim {
            arch.embed_dim = v;
        }
        if let Some(v) = self.query_hidden {
            arch.query_hidden = v;
        }
        if let Some(v) = self.query_layers {
            arch.query_layers = v;
        }
        if let Some(v) = self.doc_hidden {
            arch.doc_hidden = v;
        }
        if let Some(v) = self.doc_layers {
            arch.doc_layers = v;
        }
        if let Some(v) = self.proj_dim {
            arch.proj_dim = v;
        }
        if let Some(v) = self.dropout {
            arch.dropout = v;
        }
        if let Some(v) = self.downsample_after {
            arch.downsample_after = v;
        }
        if let Some(v) = self.downsample_factor {
            arch.downsample_factor = v;
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beta: f64,
    pub match_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beta: 999.9,
            match_tolerance: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryBuildConfig {
    /// Evaluation queries sampled by `prepare`; a desk-scale default.
    pub count: usize,
    pub orders: Vec<usize>,
}

impl Default for QueryBuildConfig {
    fn default() -> Self {
        QueryBuildConfig {
            count: 60,
            orders: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub pretrain: PretrainSchedule,
    pub finetune: FinetuneSchedule,
    pub aud: EmConfig,
    pub pseudo: PseudoConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
    pub arch: ArchChoice,
    pub synth: SynthConfig,
    pub queries: QueryBuildConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.eval.beta > 0.0) {
            bail!("eval.beta must be positive");
        }
        if self.eval.match_tolerance < 0.0 {
            bail!("eval.match_tolerance must be >= 0");
        }
        if self.queries.count == 0 || self.queries.orders.is_empty() {
            bail!("queries.count and queries.orders must be non-empty");
        }
        Ok(())
    }

    /// Canonical JSON with every default filled in.
    pub fn normalized(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loads and validates a config file; `None` yields the defaults. Unknown
/// keys and type errors are reported with their JSON path.
pub fn validate_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            let cfg: PipelineConfig = serde_path_to_error::deserialize(&mut de)
                .map_err(|e| anyhow::anyhow!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))?;
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
