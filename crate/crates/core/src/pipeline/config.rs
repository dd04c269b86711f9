//! Pipeline configuration, read from TOML. Every section has defaults, so an
//! empty file is a valid configuration.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::buffer::SbcConfig;
use crate::clusterlib::{Embedder, HashEmbedder, HttpEmbedder};
use crate::error::{Result, SageError};
use crate::learner::PretrainConfig;
use crate::lora_store::ParamSpace;
use crate::trigger::TriggerConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub trigger: TriggerConfig,
    pub id_reference: IdReferenceConfig,
    pub buffer: SbcConfig,
    pub clo: CloConfig,
    pub learner: LearnerConfig,
    pub embedder: EmbedderConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

/// In-distribution predictions that calibrate the attenuation band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdReferenceConfig {
    /// Canonical tasks per operation.
    pub per_kind: usize,
    pub seed: u64,
}

impl Default for IdReferenceConfig {
    fn default() -> Self {
        IdReferenceConfig { per_kind: 20, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloConfig {
    pub space: ParamSpace,
    /// A cluster is searched once it holds this many batches.
    pub min_batches: usize,
    /// Search again when a cluster has grown by this factor since its last search.
    pub retrain_growth: f64,
    /// Centroid cosine needed to serve a sample with a cluster's adapter.
    pub reuse_threshold: f64,
}

impl Default for CloConfig {
    fn default() -> Self {
        CloConfig {
            space: ParamSpace::default(),
            min_batches: 6,
            retrain_growth: 2.0,
            reuse_threshold: crate::lora_store::pool::DEFAULT_REUSE_THRESHOLD,
        }
    }
}

impl CloConfig {
    pub fn min_cluster_size(&self) -> usize {
        self.min_batches * self.space.batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Cached base model. Loaded when present, written after pretraining otherwise.
    pub base_path: Option<PathBuf>,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            base_path: None,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hash,
            dim: crate::clusterlib::embed::DEFAULT_DIM,
            endpoint: None,
            timeout_ms: 2000,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        let hash = HashEmbedder::new(self.dim)?;
        Ok(match self.kind {
            EmbedderKind::Hash => Box::new(hash),
            EmbedderKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| SageError::Config("embedder.kind = \"http\" needs embedder.endpoint".into()))?;
                Box::new(HttpEmbedder::new(endpoint, Duration::from_millis(self.timeout_ms), hash))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out folds paired for the before/after signed-rank test.
    pub folds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { folds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Train a single adapter on every anomaly instead of one per cluster.
    pub disable_clustering: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        self.buffer.validate()?;
        self.clo.space.validate()?;
        self.learner.pretrain.validate()?;
        if self.clo.min_batches == 0 {
            return Err(SageError::Config("clo.min_batches must be at least 1".into()));
        }
        if !(self.clo.retrain_growth > 1.0 && self.clo.retrain_growth.is_finite()) {
            return Err(SageError::Config("clo.retrain_growth must be greater than 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.clo.reuse_threshold) {
            return Err(SageError::Config("clo.reuse_threshold must lie in [-1, 1]".into()));
        }
        if self.trigger.attenuation_enabled && self.id_reference.per_kind * 3 < crate::trigger::IdReference::MIN_SAMPLES {
            return Err(SageError::Config(format!(
                "id_reference.per_kind must give at least {} reference samples",
                crate::trigger::IdReference::MIN_SAMPLES
            )));
        }
        if self.eval.folds < 2 {
            return Err(SageError::Config("eval.folds must be at least 2".into()));
        }
        if self.embedder.dim == 0 {
            return Err(SageError::Config("embedder.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| SageError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Returns the parsed config and the
    /// verbatim text for the report.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| SageError::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            SageError::Config(m) => SageError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = PipelineConfig::default();
        cfg.trigger.threshold = 0.4;
        cfg.clo.space.ranks = vec![2, 4];
        cfg.learner.base_path = Some("base.json".into());
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml("[trigger]\nthreshhold = 0.3"), Err(SageError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[trigger]\nweights = [1.0, 1.0, 0.0, 0.0]"), Err(SageError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[clo]\nretrain_growth = 1.0"), Err(SageError::Config(_))));
    }
}
