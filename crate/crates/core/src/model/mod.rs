//! Tree-ensemble risk models: chronological splitting, gradient-boosted trees
//! and random forests trained from scratch, prediction, validation grid search
//! and a versioned model file.

mod grid;
mod split;
mod train;
mod tree;

pub use grid::{grid_search, Grid, GridCell, GridResult};
pub use split::{chronological_split, chronological_split_indices, SplitSpec, Splits};
pub use train::{train, train_gbt, train_rf};
pub use tree::{best_split, Node, SplitCandidate, Tree};

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureManifest, FeatureTable};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("empty dataset")]
    Empty,
    #[error("row has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value at row {row}, feature {feature}")]
    NonFinite { row: usize, feature: usize },
    #[error("rows and labels differ in length ({rows} vs {labels})")]
    Length { rows: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
    #[error("grid cell {cell} failed: {source}")]
    GridCell {
        cell: String,
        #[source]
        source: Box<ModelError>,
    },
    #[error("feature manifest hash {got} does not match the model's {expected}; refusing to score")]
    ManifestMismatch { expected: String, got: String },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    GradientBoosted,
    RandomForest,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::GradientBoosted => "Gradient Boosted Trees",
            ModelKind::RandomForest => "Random Forest",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gbt" | "gradient_boosted" => Ok(ModelKind::GradientBoosted),
            "rf" | "random_forest" => Ok(ModelKind::RandomForest),
            other => Err(ModelError::HyperParams(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Features considered at each forest split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Fraction(f64),
}

impl MaxFeatures {
    pub fn count(self, n_features: usize) -> usize {
        let k = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().ceil() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Fraction(f) => (f * n_features as f64).ceil() as usize,
        };
        k.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    /// Boosting shrinkage; unused by forests.
    pub learning_rate: f64,
    /// L2 penalty on leaf values in the split gain (0 for forests).
    pub lambda: f64,
    /// Minimum hessian (boosting) or bootstrap weight (forest) per child.
    pub min_child_weight: f64,
    /// Forests: Poisson(1) bootstrap row weights per tree.
    pub bootstrap: bool,
    pub max_features: MaxFeatures,
}

impl HyperParams {
    pub fn gbt(n_estimators: usize, max_depth: usize) -> Self {
        HyperParams {
            n_estimators,
            max_depth,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            bootstrap: false,
            max_features: MaxFeatures::All,
        }
    }

    pub fn rf(n_estimators: usize, max_depth: usize) -> Self {
        HyperParams {
            n_estimators,
            max_depth,
            learning_rate: 0.0,
            lambda: 0.0,
            min_child_weight: 1.0,
            bootstrap: true,
            max_features: MaxFeatures::Sqrt,
        }
    }

    pub fn for_kind(kind: ModelKind, n_estimators: usize, max_depth: usize) -> Self {
        match kind {
            ModelKind::GradientBoosted => HyperParams::gbt(n_estimators, max_depth),
            ModelKind::RandomForest => HyperParams::rf(n_estimators, max_depth),
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::HyperParams(m.to_string()));
        if kind == ModelKind::GradientBoosted && !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda and min_child_weight must be non-negative");
        }
        if kind == ModelKind::RandomForest && self.lambda == 0.0 && self.min_child_weight <= 0.0 {
            return bad("forests need min_child_weight > 0 when lambda is 0");
        }
        if let MaxFeatures::Fraction(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return bad("max_features fraction must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

/// Rows, labels and stable row identities for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Fix the canonical row order and forest bootstrap draws, making
    /// training independent of the order rows are supplied in.
    pub row_ids: Vec<u64>,
}

impl TrainSet {
    /// Row ids default to the row positions.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, ModelError> {
        let ids = (0..rows.len() as u64).collect();
        TrainSet::with_ids(rows, labels, ids)
    }

    pub fn with_ids(rows: Vec<Vec<f64>>, labels: Vec<u8>, row_ids: Vec<u64>) -> Result<Self, ModelError> {
        if rows.len() != labels.len() || rows.len() != row_ids.len() {
            return Err(ModelError::Length {
                rows: rows.len(),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(ModelError::Label(l));
        }
        Ok(TrainSet { rows, labels, row_ids })
    }

    pub fn from_table(table: &FeatureTable) -> Self {
        TrainSet {
            rows: table.rows.clone(),
            labels: table.labels.clone(),
            row_ids: table.keys.iter().map(|k| k.stable_id()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn concat(&self, other: &TrainSet) -> TrainSet {
        let mut out = self.clone();
        out.rows.extend(other.rows.iter().cloned());
        out.labels.extend(&other.labels);
        out.row_ids.extend(&other.row_ids);
        out
    }

    pub fn prevalence(&self) -> f64 {
        self.labels.iter().map(|&l| f64::from(l)).sum::<f64>() / self.len().max(1) as f64
    }
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic loss `log(1 + e^m) − y·m` of margin `m`, computed stably.
pub fn logistic_loss(margin: f64, y: f64) -> f64 {
    let softplus = if margin > 0.0 {
        margin + (-margin).exp().ln_1p()
    } else {
        margin.exp().ln_1p()
    };
    softplus - y * margin
}

/// First and second derivative of [`logistic_loss`] in the margin: `(p − y, p(1 − p))`.
pub fn logistic_gradient(margin: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(margin);
    (p - y, p * (1.0 - p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub format_version: u32,
    pub kind: ModelKind,
    pub hyperparams: HyperParams,
    /// Log-odds of training prevalence for boosting; 0 for forests.
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub seed: u64,
    /// Mean training logistic loss before the first tree and after each tree (boosting only).
    pub training_log: Vec<f64>,
    pub manifest_hash: String,
    pub feature_names: Vec<String>,
    pub trained_on: Option<NaiveDate>,
    /// Background rows for explanations.
    pub background: Vec<Vec<f64>>,
}

impl TreeEnsemble {
    /// Weight of one tree's leaf values in the margin.
    pub fn tree_scale(&self) -> f64 {
        match self.kind {
            ModelKind::GradientBoosted => self.learning_rate,
            ModelKind::RandomForest => {
                if self.trees.is_empty() {
                    0.0
                } else {
                    1.0 / self.trees.len() as f64
                }
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.n_features {
            return Err(ModelError::Dimension {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Boosting: log-odds. Forests: mean leaf probability.
    pub fn margin(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_score + self.tree_scale() * sum)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ModelError> {
        let m = self.margin(x)?;
        Ok(self.margin_to_proba(m))
    }

    pub fn margin_to_proba(&self, margin: f64) -> f64 {
        match self.kind {
            ModelKind::GradientBoosted => sigmoid(margin),
            ModelKind::RandomForest => margin.clamp(0.0, 1.0),
        }
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        rows.iter().map(|r| self.predict_proba(r)).collect()
    }

    /// The same model restricted to its first `n` trees. For both kinds this
    /// equals a model trained with `n_estimators = n` under the same seed.
    pub fn truncated(&self, n: usize) -> TreeEnsemble {
        let mut out = self.clone();
        out.trees.truncate(n);
        out.hyperparams.n_estimators = out.trees.len();
        if out.kind == ModelKind::GradientBoosted {
            out.training_log.truncate(out.trees.len() + 1);
        }
        out
    }

    /// Attaches the manifest the model was trained against.
    pub fn bind_manifest(&mut self, manifest: &FeatureManifest) -> Result<(), ModelError> {
        if manifest.len() != self.n_features {
            return Err(ModelError::Dimension {
                expected: self.n_features,
                got: manifest.len(),
            });
        }
        self.manifest_hash = manifest.hash();
        self.feature_names = manifest.names().map(String::from).collect();
        Ok(())
    }

    pub fn check_manifest(&self, manifest: &FeatureManifest) -> Result<(), ModelError> {
        let got = manifest.hash();
        if got != self.manifest_hash {
            return Err(ModelError::ManifestMismatch {
                expected: self.manifest_hash.clone(),
                got,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !self.base_score.is_finite() {
            return Err(ModelError::Format("base score is not finite".into()));
        }
        for tree in &self.trees {
            tree.validate(self.n_features)?;
        }
        if self.background.iter().any(|r| r.len() != self.n_features) {
            return Err(ModelError::Format("background row has the wrong width".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self).map_err(|e| ModelError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TreeEnsemble, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let model: TreeEnsemble = serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}
