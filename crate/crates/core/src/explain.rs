//! Exact interventional SHAP values for tree ensembles, in margin space.
//!
//! The value of a coalition `S` is the ensemble margin averaged over a
//! background set, with features in `S` taken from the explained row and the
//! rest from the background row. Per tree and background row, a path whose
//! splits disagree between the two rows touches a set `A` of features that
//! followed the explained row and a set `B` that followed the background row;
//! its leaf value `v` adds `v·(|A|−1)!|B|!/(|A|+|B|)!` to each feature in `A`
//! and subtracts `v·|A|!(|B|−1)!/(|A|+|B|)!` from each feature in `B`.
//! Background rows are tracked as bitsets so one walk covers all of them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientDayKey;
use crate::model::{Node, TreeEnsemble};

/// Upper bound on used features for exhaustive enumeration.
pub const BRUTE_FORCE_MAX_FEATURES: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("background dataset is empty")]
    EmptyBackground,
    #[error("row has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("model uses {used} features; exhaustive Shapley enumeration is limited to {limit}")]
    TooManyFeatures { used: usize, limit: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub phi: Vec<f64>,
    /// Mean margin over the background.
    pub base_value: f64,
    pub prediction_margin: f64,
    /// The explained row's raw feature values.
    pub values: Vec<f64>,
}

impl ShapExplanation {
    /// `|base + Σφ − margin|`.
    pub fn efficiency_error(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.prediction_margin).abs()
    }
}

/// Precomputed background routing for one ensemble.
pub struct Explainer<'m> {
    model: &'m TreeEnsemble,
    n_background: usize,
    words: usize,
    /// Per tree, per node: bitset of background rows sent left (empty for leaves).
    left: Vec<Vec<Vec<u64>>>,
    base_value: f64,
    factorial: Vec<f64>,
}

impl<'m> Explainer<'m> {
    pub fn new(model: &'m TreeEnsemble, background: &[Vec<f64>]) -> Result<Self, ExplainError> {
        if background.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        for row in background {
            check_dim(model, row)?;
        }
        let n = background.len();
        let words = n.div_ceil(64);
        let left = model
            .trees
            .iter()
            .map(|tree| {
                tree.nodes
                    .iter()
                    .map(|node| match *node {
                        Node::Split {
                            feature, threshold, ..
                        } => {
                            let mut bits = vec![0u64; words];
                            for (r, row) in background.iter().enumerate() {
                                if row[feature] <= threshold {
                                    bits[r / 64] |= 1 << (r % 64);
                                }
                            }
                            bits
                        }
                        Node::Leaf { .. } => Vec::new(),
                    })
                    .collect()
            })
            .collect();
        let scale = model.tree_scale();
        let base_value = model.base_score
            + model
                .trees
                .iter()
                .map(|t| scale * background.iter().map(|z| t.predict(z)).sum::<f64>() / n as f64)
                .sum::<f64>();
        let max_depth = model.trees.iter().map(|t| t.depth()).max().unwrap_or(0);
        let mut factorial = vec![1.0; 2 * max_depth + 2];
        for i in 1..factorial.len() {
            factorial[i] = factorial[i - 1] * i as f64;
        }
        Ok(Explainer {
            model,
            n_background: n,
            words,
            left,
            base_value,
            factorial,
        })
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn explain(&self, x: &[f64]) -> Result<ShapExplanation, ExplainError> {
        check_dim(self.model, x)?;
        let mut phi = vec![0.0; self.model.n_features];
        let scale = self.model.tree_scale();
        let mut all = vec![u64::MAX; self.words];
        let tail = self.n_background % 64;
        if tail != 0 {
            all[self.words - 1] = (1u64 << tail) - 1;
        }
        let mut margin = self.model.base_score;
        for t in 0..self.model.trees.len() {
            margin += scale * self.model.trees[t].predict(x);
            let mut walk = Walk {
                explainer: self,
                tree: t,
                x,
                scale,
                a: Vec::new(),
                b: Vec::new(),
                phi: &mut phi,
            };
            walk.visit(0, &all);
        }
        Ok(ShapExplanation {
            phi,
            base_value: self.base_value,
            prediction_margin: margin,
            values: x.to_vec(),
        })
    }

    pub fn explain_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<ShapExplanation>, ExplainError> {
        rows.par_iter().map(|r| self.explain(r)).collect()
    }
}

struct Walk<'a, 'm> {
    explainer: &'a Explainer<'m>,
    tree: usize,
    x: &'a [f64],
    scale: f64,
    a: Vec<usize>,
    b: Vec<usize>,
    phi: &'a mut [f64],
}

impl Walk<'_, '_> {
    fn visit(&mut self, node: usize, set: &[u64]) {
        let e = self.explainer;
        match e.model.trees[self.tree].nodes[node] {
            Node::Leaf { value } => self.leaf(value, set),
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let x_left = self.x[feature] <= threshold;
                let (x_child, other) = if x_left { (left, right) } else { (right, left) };
                let goes_left = &e.left[self.tree][node];
                if self.a.contains(&feature) {
                    self.visit(x_child, set);
                } else if self.b.contains(&feature) {
                    let l: Vec<u64> = set.iter().zip(goes_left).map(|(s, g)| s & g).collect();
                    let r: Vec<u64> = set.iter().zip(goes_left).map(|(s, g)| s & !g).collect();
                    self.visit_nonempty(left, &l);
                    self.visit_nonempty(right, &r);
                } else {
                    let (same, differ): (Vec<u64>, Vec<u64>) = set
                        .iter()
                        .zip(goes_left)
                        .map(|(s, g)| {
                            let with_x = if x_left { *g } else { !g };
                            (s & with_x, s & !with_x)
                        })
                        .unzip();
                    self.visit_nonempty(x_child, &same);
                    if differ.iter().any(|w| *w != 0) {
                        self.a.push(feature);
                        self.visit(x_child, &differ);
                        self.a.pop();
                        self.b.push(feature);
                        self.visit(other, &differ);
                        self.b.pop();
                    }
                }
            }
        }
    }

    fn visit_nonempty(&mut self, node: usize, set: &[u64]) {
        if set.iter().any(|w| *w != 0) {
            self.visit(node, set);
        }
    }

    fn leaf(&mut self, value: f64, set: &[u64]) {
        let (na, nb) = (self.a.len(), self.b.len());
        if na + nb == 0 {
            return;
        }
        let e = self.explainer;
        let count: u32 = set.iter().map(|w| w.count_ones()).sum();
        let v = self.scale * value * f64::from(count) / e.n_background as f64;
        let f = &e.factorial;
        if na > 0 {
            let w = f[na - 1] * f[nb] / f[na + nb];
            for &i in &self.a {
                self.phi[i] += v * w;
            }
        }
        if nb > 0 {
            let w = f[na] * f[nb - 1] / f[na + nb];
            for &i in &self.b {
                self.phi[i] -= v * w;
            }
        }
    }
}

fn check_dim(model: &TreeEnsemble, x: &[f64]) -> Result<(), ExplainError> {
    if x.len() != model.n_features {
        return Err(ExplainError::Dimension {
            expected: model.n_features,
            got: x.len(),
        });
    }
    Ok(())
}

/// SHAP values of `x` against `background`.
pub fn tree_shap(
    model: &TreeEnsemble,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<ShapExplanation, ExplainError> {
    Explainer::new(model, background)?.explain(x)
}

fn used_features(model: &TreeEnsemble) -> Vec<usize> {
    let mut used: Vec<usize> = model.trees.iter().flat_map(|t| t.used_features()).collect();
    used.sort_unstable();
    used.dedup();
    used
}

/// Shapley values by enumerating every coalition of the used features.
pub fn brute_force_shapley(
    model: &TreeEnsemble,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<Vec<f64>, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    check_dim(model, x)?;
    let used = used_features(model);
    let k = used.len();
    if k > BRUTE_FORCE_MAX_FEATURES {
        return Err(ExplainError::TooManyFeatures {
            used: k,
            limit: BRUTE_FORCE_MAX_FEATURES,
        });
    }
    let mut value = vec![0.0; 1 << k];
    let mut hybrid = vec![0.0; x.len()];
    for (mask, v) in value.iter_mut().enumerate() {
        let mut total = 0.0;
        for z in background {
            hybrid.copy_from_slice(z);
            for (bit, &f) in used.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    hybrid[f] = x[f];
                }
            }
            total += model.margin(&hybrid).expect("dimension checked");
        }
        *v = total / background.len() as f64;
    }
    let mut fact = vec![1.0; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; x.len()];
    for (bit, &f) in used.iter().enumerate() {
        let mut acc = 0.0;
        for mask in 0..(1usize << k) {
            if mask >> bit & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[k - s - 1] / fact[k];
            acc += weight * (value[mask | 1 << bit] - value[mask]);
        }
        phi[f] = acc;
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub feature: usize,
    pub name: String,
    pub phi: f64,
    pub value: f64,
}

/// The `k` largest contributions by `|φ|`, ties in manifest order.
pub fn top_drivers(
    explanation: &ShapExplanation,
    names: &[String],
    k: usize,
) -> Result<Vec<Driver>, ExplainError> {
    if k == 0 {
        return Err(ExplainError::ZeroK);
    }
    let mut idx: Vec<usize> = (0..explanation.phi.len()).collect();
    idx.sort_by(|&a, &b| {
        explanation.phi[b]
            .abs()
            .total_cmp(&explanation.phi[a].abs())
            .then(a.cmp(&b))
    });
    Ok(idx
        .into_iter()
        .take(k)
        .map(|j| Driver {
            feature: j,
            name: names.get(j).cloned().unwrap_or_else(|| format!("f{j}")),
            phi: explanation.phi[j],
            value: explanation.values.get(j).copied().unwrap_or(f64::NAN),
        })
        .collect())
}

/// `(raw value, φ_j)` for every row.
pub fn dependence_table(
    explainer: &Explainer<'_>,
    rows: &[Vec<f64>],
    feature: usize,
) -> Result<Vec<(f64, f64)>, ExplainError> {
    Ok(explainer
        .explain_batch(rows)?
        .into_iter()
        .map(|e| (e.values[feature], e.phi[feature]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub name: String,
    pub value: f64,
    pub phi: f64,
}

/// Export form of one explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub patient_day: String,
    pub base: f64,
    pub margin: f64,
    pub features: Vec<FeatureAttribution>,
}

impl ExplanationRecord {
    pub fn new(key: &PatientDayKey, explanation: &ShapExplanation, names: &[String]) -> Self {
        ExplanationRecord {
            patient_day: key.to_string(),
            base: explanation.base_value,
            margin: explanation.prediction_margin,
            features: explanation
                .phi
                .iter()
                .zip(&explanation.values)
                .enumerate()
                .map(|(j, (&phi, &value))| FeatureAttribution {
                    name: names.get(j).cloned().unwrap_or_else(|| format!("f{j}")),
                    value,
                    phi,
                })
                .collect(),
        }
    }

    pub fn to_explanation(&self) -> ShapExplanation {
        ShapExplanation {
            phi: self.features.iter().map(|f| f.phi).collect(),
            base_value: self.base,
            prediction_margin: self.margin,
            values: self.features.iter().map(|f| f.value).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, ModelKind, Tree, MODEL_FORMAT_VERSION};

    fn ensemble(kind: ModelKind, trees: Vec<Tree>, n_features: usize) -> TreeEnsemble {
        TreeEnsemble {
            format_version: MODEL_FORMAT_VERSION,
            kind,
            hyperparams: HyperParams::gbt(trees.len(), 3),
            base_score: 0.0,
            learning_rate: 1.0,
            trees,
            n_features,
            seed: 0,
            training_log: vec![],
            manifest_hash: String::new(),
            feature_names: vec![],
            trained_on: None,
            background: vec![],
        }
    }

    fn stump(feature: usize, a: f64, b: f64) -> Tree {
        Tree {
            nodes: vec![
                Node::Split { feature, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: a },
                Node::Leaf { value: b },
            ],
        }
    }

    #[test]
    fn stump_closed_form() {
        let m = ensemble(ModelKind::GradientBoosted, vec![stump(1, 0.2, 0.8)], 3);
        let background = vec![vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let e = tree_shap(&m, &[5.0, 1.0, 5.0], &background).unwrap();
        assert!((e.phi[1] - 0.3).abs() < 1e-15);
        assert!((e.base_value - 0.5).abs() < 1e-15);
        assert!((e.prediction_margin - 0.8).abs() < 1e-15);
        assert_eq!((e.phi[0], e.phi[2]), (0.0, 0.0));
    }

    #[test]
    fn and_tree_is_symmetric() {
        let tree = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: 0.0 },
                Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4 },
                Node::Leaf { value: 0.0 },
                Node::Leaf { value: 1.0 },
            ],
        };
        let m = ensemble(ModelKind::GradientBoosted, vec![tree], 2);
        let bg = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let x = [1.0, 1.0];
        let brute = brute_force_shapley(&m, &x, &bg).unwrap();
        assert!((brute[0] - brute[1]).abs() < 1e-15);
        let fast = tree_shap(&m, &x, &bg).unwrap();
        assert!((fast.phi[0] - brute[0]).abs() < 1e-15);
        assert!(fast.efficiency_error() < 1e-15);
    }

    #[test]
    fn null_model_has_zero_attributions() {
        let m = ensemble(ModelKind::GradientBoosted, vec![], 3);
        let bg = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(brute_force_shapley(&m, &[0.0; 3], &bg).unwrap(), vec![0.0; 3]);
        assert_eq!(tree_shap(&m, &[0.0; 3], &bg).unwrap().phi, vec![0.0; 3]);
    }

    #[test]
    fn repeated_feature_on_a_path() {
        let tree = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                Node::Split { feature: 0, threshold: 0.2, left: 3, right: 4 },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6 },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 0.5 },
                Node::Leaf { value: 2.0 },
                Node::Leaf { value: 3.0 },
            ],
        };
        let m = ensemble(ModelKind::RandomForest, vec![tree.clone(), tree], 2);
        let bg: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 / 6.0, ((i * 3) % 7) as f64 / 6.0]).collect();
        for x in [[0.1, 0.9], [0.3, 0.1], [0.9, 0.9]] {
            let fast = tree_shap(&m, &x, &bg).unwrap();
            let brute = brute_force_shapley(&m, &x, &bg).unwrap();
            for j in 0..2 {
                assert!((fast.phi[j] - brute[j]).abs() < 1e-12);
            }
            assert!(fast.efficiency_error() < 1e-12);
        }
    }

    #[test]
    fn background_larger_than_one_word() {
        let m = ensemble(ModelKind::GradientBoosted, vec![stump(0, 1.0, -1.0)], 1);
        let bg: Vec<Vec<f64>> = (0..130).map(|i| vec![f64::from(u8::from(i % 3 == 0))]).collect();
        let e = tree_shap(&m, &[1.0], &bg).unwrap();
        assert!(e.efficiency_error() < 1e-12);
        let w = 86.0 / 130.0; // share of background going left
        assert!((e.phi[0] - (-1.0 - 1.0) * w).abs() < 1e-12);
    }

    #[test]
    fn drivers_sorted_by_magnitude_then_index() {
        let e = ShapExplanation {
            phi: vec![0.3, -0.5, 0.1, 0.3],
            base_value: 0.0,
            prediction_margin: 0.2,
            values: vec![1.0, 2.0, 3.0, 4.0],
        };
        let names: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let d = top_drivers(&e, &names, 3).unwrap();
        assert_eq!(d.iter().map(|d| d.feature).collect::<Vec<_>>(), vec![1, 0, 3]);
        assert_eq!(d[0].value, 2.0);
        assert_eq!(top_drivers(&e, &names, 10).unwrap().len(), 4);
        assert_eq!(top_drivers(&e, &names, 0), Err(ExplainError::ZeroK));
    }

    #[test]
    fn errors() {
        let m = ensemble(ModelKind::GradientBoosted, vec![stump(0, 0.0, 1.0)], 1);
        assert_eq!(tree_shap(&m, &[1.0], &[]).unwrap_err(), ExplainError::EmptyBackground);
        let wide = ensemble(
            ModelKind::GradientBoosted,
            (0..16).map(|f| stump(f, 0.0, 1.0)).collect(),
            16,
        );
        assert!(matches!(
            brute_force_shapley(&wide, &[0.0; 16], &[vec![0.0; 16]]),
            Err(ExplainError::TooManyFeatures { used: 16, limit: 15 })
        ));
    }
}
