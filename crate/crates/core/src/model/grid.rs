use serde::{Deserialize, Serialize};

use super::{train, HyperParams, ModelError, ModelKind, TrainSet, TreeEnsemble};
use crate::evaluate::auroc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            n_estimators: vec![20, 50, 100],
            max_depth: vec![3, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub val_auroc: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: HyperParams,
    pub cells: Vec<GridCell>,
    /// Best cell refitted on train + validation.
    pub model: TreeEnsemble,
}

/// Scores every grid cell by validation AUROC, picks the best (ties: fewer
/// estimators, then shallower), and refits it on train + validation.
///
/// Each depth is trained once at the largest estimator count; smaller counts
/// are prefixes of that ensemble, identical to training them separately.
pub fn grid_search(
    train_set: &TrainSet,
    val: &TrainSet,
    grid: &Grid,
    kind: ModelKind,
    seed: u64,
) -> Result<GridResult, ModelError> {
    if grid.n_estimators.is_empty() || grid.max_depth.is_empty() {
        return Err(ModelError::HyperParams("grid must not be empty".into()));
    }
    let mut ns = grid.n_estimators.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut depths = grid.max_depth.clone();
    depths.sort_unstable();
    depths.dedup();
    let n_max = *ns.last().expect("non-empty");

    let mut cells = Vec::new();
    for &depth in &depths {
        let hp = HyperParams::for_kind(kind, n_max, depth);
        let full = train(kind, train_set, &hp, seed).map_err(|e| ModelError::GridCell {
            cell: format!("n_estimators={n_max}, max_depth={depth}"),
            source: Box::new(e),
        })?;
        for &n in &ns {
            let model = full.truncated(n);
            let scores = model.predict_batch(&val.rows)?;
            let val_auroc = auroc(&scores, &val.labels).map_err(|e| ModelError::GridCell {
                cell: format!("n_estimators={n}, max_depth={depth}"),
                source: Box::new(ModelError::Split(format!("validation AUROC: {e}"))),
            })?;
            cells.push(GridCell {
                n_estimators: n,
                max_depth: depth,
                val_auroc,
            });
        }
    }
    cells.sort_by_key(|c| (c.n_estimators, c.max_depth));
    let mut best = cells[0];
    for c in &cells[1..] {
        if c.val_auroc > best.val_auroc {
            best = *c;
        }
    }
    let hp = HyperParams::for_kind(kind, best.n_estimators, best.max_depth);
    let model = train(kind, &train_set.concat(val), &hp, seed)?;
    Ok(GridResult {
        best: hp,
        cells,
        model,
    })
}
