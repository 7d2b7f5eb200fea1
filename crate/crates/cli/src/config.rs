//! Pipeline configuration file (TOML). Every section is optional.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use ewi_core::alerting::TierThresholds;
use ewi_core::cohort::CohortConfig;
use ewi_core::features::{FeatureConfig, Featurizer, MedicationSignalConfig};
use ewi_core::model::{Grid, ModelKind, SplitSpec};
use ewi_core::textembed::{
    Embedder, DEFAULT_EMBEDDING_DIM, HashEmbedder, PromptTemplate, RemoteEmbedder, RemoteEmbedderConfig,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cohort: CohortConfig,
    pub features: FeatureConfig,
    /// TOML file with `green = [...]` and `yellow = [...]` medication names.
    pub medications: Option<PathBuf>,
    pub embedder: EmbedderSettings,
    pub split: SplitSpec,
    pub grid: Grid,
    pub model: ModelSettings,
    pub thresholds: TierThresholds,
    pub evaluation: EvaluationSettings,
    pub service: ServiceSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cohort: CohortConfig::default(),
            features: FeatureConfig::default(),
            medications: None,
            embedder: EmbedderSettings::default(),
            split: SplitSpec::default(),
            grid: Grid::default(),
            model: ModelSettings::default(),
            thresholds: TierThresholds::default(),
            evaluation: EvaluationSettings::default(),
            service: ServiceSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Hash-embedder seed; the library default when absent.
    pub seed: Option<u64>,
    pub prompt: Option<String>,
    pub remote: RemoteEmbedderConfig,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        EmbedderSettings {
            kind: EmbedderKind::Hash,
            dim: DEFAULT_EMBEDDING_DIM,
            seed: None,
            prompt: None,
            remote: RemoteEmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// `gbt` or `rf`.
    pub kind: String,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            kind: "gbt".into(),
            seed: 0,
        }
    }
}

impl ModelSettings {
    pub fn kind(&self) -> Result<ModelKind, CliError> {
        self.kind.parse().map_err(|e| CliError::Validation(format!("model.kind: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub thresholds: Vec<f64>,
    pub calibration_bins: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            thresholds: vec![0.03, 0.06, 0.12],
            calibration_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub addr: String,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config: PipelineConfig = match path {
            None => PipelineConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::Validation(e.to_string());
        self.cohort.validate().map_err(|e| invalid(&e))?;
        self.split.validate().map_err(|e| invalid(&e))?;
        self.thresholds.validate().map_err(|e| invalid(&e))?;
        self.model.kind()?;
        if self.embedder.dim == 0 {
            return Err(CliError::Validation("embedder.dim must be positive".into()));
        }
        if self.grid.n_estimators.is_empty() || self.grid.max_depth.is_empty() {
            return Err(CliError::Validation("grid must list at least one value per axis".into()));
        }
        Ok(())
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, CliError> {
        Ok(match self.embedder.kind {
            EmbedderKind::Hash => match self.embedder.seed {
                None if self.embedder.dim == DEFAULT_EMBEDDING_DIM => Arc::new(HashEmbedder::default()),
                seed => Arc::new(HashEmbedder::new(self.embedder.dim, seed.unwrap_or(0))),
            },
            EmbedderKind::Remote => {
                let mut remote = self.embedder.remote.clone().with_env_overrides();
                remote.dim = self.embedder.dim;
                Arc::new(RemoteEmbedder::new(remote).map_err(|e| CliError::Validation(e.to_string()))?)
            }
        })
    }

    pub fn featurizer(&self) -> Result<Featurizer, CliError> {
        let meds = match &self.medications {
            Some(path) => MedicationSignalConfig::load(path),
            None => Ok(MedicationSignalConfig::default()),
        }
        .map_err(|e| CliError::Validation(e.to_string()))?;
        let prompt = match &self.embedder.prompt {
            Some(p) => PromptTemplate::new(p.clone()).map_err(|e| CliError::Validation(e.to_string()))?,
            None => PromptTemplate::default(),
        };
        Featurizer::new(self.features.clone(), meds, self.embedder()?, prompt)
            .map_err(|e| CliError::Validation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: PipelineConfig = toml::from_str(
            "[cohort]\nn_patients = 50\n[thresholds]\nred_level = 0.2\nred_delta = 0.06\nyellow_level = 0.03\nyellow_delta = 0.015\n",
        )
        .unwrap();
        assert_eq!(c.cohort.n_patients, 50);
        assert_eq!(c.thresholds.red_level, 0.2);
        assert_eq!(c.grid, Grid::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn example_file_matches_defaults() {
        let text = include_str!("../../../config/ewi.example.toml");
        let mut c: PipelineConfig = toml::from_str(text).unwrap();
        assert!(c.validate().is_ok());
        assert_eq!(c.medications.take(), Some(PathBuf::from("config/medications.toml")));
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn example_medication_list_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/medications.toml");
        assert_eq!(MedicationSignalConfig::load(&path).unwrap(), MedicationSignalConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[model]\nflavour = 1\n").is_err());
    }
}
