use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tree::{grow_tree, GrowParams, Presorted, Tree};
use super::{
    logistic_gradient, logistic_loss, logit, HyperParams, MaxFeatures, ModelError, ModelKind, TrainSet,
    TreeEnsemble, MODEL_FORMAT_VERSION,
};

/// Default number of background rows kept for explanations.
pub const DEFAULT_BACKGROUND_ROWS: usize = 1000;

pub fn train(kind: ModelKind, data: &TrainSet, hp: &HyperParams, seed: u64) -> Result<TreeEnsemble, ModelError> {
    match kind {
        ModelKind::GradientBoosted => train_gbt(data, hp, seed),
        ModelKind::RandomForest => train_rf(data, hp, seed),
    }
}

/// Rows sorted by id, so results do not depend on input order.
struct Canonical {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    ids: Vec<u64>,
}

fn canonicalize(data: &TrainSet) -> Result<Canonical, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Empty);
    }
    let positives = data.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(ModelError::SingleClass);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.row_ids[i]);
    Ok(Canonical {
        rows: order.iter().map(|&i| data.rows[i].clone()).collect(),
        y: order.iter().map(|&i| f64::from(data.labels[i])).collect(),
        ids: order.iter().map(|&i| data.row_ids[i]).collect(),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(a) ^ b) ^ c)
}

/// Poisson(1) draw from a uniform in [0, 1).
fn poisson1(u: f64) -> f64 {
    let mut k = 0u32;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    while u > cdf && k < 20 {
        k += 1;
        p /= f64::from(k);
        cdf += p;
    }
    f64::from(k)
}

fn background_sample(rows: &[Vec<f64>], ids: &[u64], seed: u64) -> Vec<Vec<f64>> {
    if rows.len() <= DEFAULT_BACKGROUND_ROWS {
        return rows.to_vec();
    }
    // Smallest hashed keys: a seeded subsample independent of row order.
    let mut keyed: Vec<(u64, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (mix(seed, 0xb4c6, id), i))
        .collect();
    keyed.sort_unstable();
    keyed.truncate(DEFAULT_BACKGROUND_ROWS);
    keyed.sort_by_key(|&(_, i)| i);
    keyed.into_iter().map(|(_, i)| rows[i].clone()).collect()
}

fn mean_loss(margins: &[f64], y: &[f64]) -> f64 {
    margins.iter().zip(y).map(|(&m, &y)| logistic_loss(m, y)).sum::<f64>() / y.len() as f64
}

fn ensemble(kind: ModelKind, hp: &HyperParams, seed: u64, n_features: usize, c: &Canonical) -> TreeEnsemble {
    TreeEnsemble {
        format_version: MODEL_FORMAT_VERSION,
        kind,
        hyperparams: *hp,
        base_score: 0.0,
        learning_rate: hp.learning_rate,
        trees: Vec::new(),
        n_features,
        seed,
        training_log: Vec::new(),
        manifest_hash: String::new(),
        feature_names: Vec::new(),
        trained_on: None,
        background: background_sample(&c.rows, &c.ids, seed),
    }
}

/// Gradient boosting under logistic loss.
///
/// Starts from the log-odds of training prevalence and adds `n_estimators`
/// trees fitted to the loss gradient. Leaves take the Newton step
/// `−G/(H+λ)`, halved until the leaf's training loss does not increase
/// (zero if no halving helps), so the logged loss never goes up.
pub fn train_gbt(data: &TrainSet, hp: &HyperParams, seed: u64) -> Result<TreeEnsemble, ModelError> {
    hp.validate(ModelKind::GradientBoosted)?;
    let c = canonicalize(data)?;
    let n_features = data.n_features();
    let presorted = Presorted::new(&c.rows, n_features)?;
    let mut model = ensemble(ModelKind::GradientBoosted, hp, seed, n_features, &c);
    let prevalence = c.y.iter().sum::<f64>() / c.y.len() as f64;
    model.base_score = logit(prevalence);
    let lr = hp.learning_rate;
    let params = GrowParams {
        max_depth: hp.max_depth,
        lambda: hp.lambda,
        min_child_weight: hp.min_child_weight,
    };

    let mut margins = vec![model.base_score; c.y.len()];
    model.training_log.push(mean_loss(&margins, &c.y));
    for _ in 0..hp.n_estimators {
        let (g, h): (Vec<f64>, Vec<f64>) = margins
            .iter()
            .zip(&c.y)
            .map(|(&m, &y)| {
                let (g, h) = logistic_gradient(m, y);
                (g, h.max(1e-16))
            })
            .unzip();
        let mut leaf_value = |_: usize, rows: &[u32]| -> f64 {
            let (gs, hs) = rows
                .iter()
                .fold((0.0, 0.0), |(a, b), &r| (a + g[r as usize], b + h[r as usize]));
            let newton = -gs / (hs + hp.lambda);
            let leaf_loss = |step: f64| -> f64 {
                rows.iter()
                    .map(|&r| logistic_loss(margins[r as usize] + lr * step, c.y[r as usize]))
                    .sum()
            };
            let before = leaf_loss(0.0);
            let mut step = newton;
            for _ in 0..30 {
                if leaf_loss(step) <= before {
                    return step;
                }
                step /= 2.0;
            }
            0.0
        };
        let tree = grow_tree(&presorted, &g, &h, params, &mut |_| None, &mut leaf_value);
        for (m, row) in margins.iter_mut().zip(&c.rows) {
            *m += lr * tree.predict(row);
        }
        model.training_log.push(mean_loss(&margins, &c.y));
        model.trees.push(tree);
    }
    Ok(model)
}

/// Random forest of variance-reduction regression trees on the 0/1 label.
///
/// Each tree sees Poisson(1) bootstrap weights keyed on (seed, tree, row id)
/// and, at each node, a feature subset seeded by (seed, tree, node). Leaves
/// hold the weighted event rate; the forest averages them.
pub fn train_rf(data: &TrainSet, hp: &HyperParams, seed: u64) -> Result<TreeEnsemble, ModelError> {
    hp.validate(ModelKind::RandomForest)?;
    let c = canonicalize(data)?;
    let n_features = data.n_features();
    let presorted = Presorted::new(&c.rows, n_features)?;
    let mut model = ensemble(ModelKind::RandomForest, hp, seed, n_features, &c);
    let prevalence = c.y.iter().sum::<f64>() / c.y.len() as f64;
    let params = GrowParams {
        max_depth: hp.max_depth,
        lambda: hp.lambda,
        min_child_weight: hp.min_child_weight,
    };
    let k = hp.max_features.count(n_features);

    for t in 0..hp.n_estimators as u64 {
        let w: Vec<f64> = c
            .ids
            .iter()
            .map(|&id| {
                if hp.bootstrap {
                    let u = (mix(seed, t, id) >> 11) as f64 / (1u64 << 53) as f64;
                    poisson1(u)
                } else {
                    1.0
                }
            })
            .collect();
        let g: Vec<f64> = w.iter().zip(&c.y).map(|(w, y)| -w * y).collect();
        let mut allowed = |node: usize| -> Option<Vec<bool>> {
            if k >= n_features || hp.max_features == MaxFeatures::All {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, t, node as u64 ^ 0x5eed_0000));
            let mut mask = vec![false; n_features];
            for f in sample(&mut rng, n_features, k) {
                mask[f] = true;
            }
            Some(mask)
        };
        let mut leaf_value = |_: usize, rows: &[u32]| -> f64 {
            let (wy, ws) = rows.iter().fold((0.0, 0.0), |(a, b), &r| {
                let r = r as usize;
                (a + w[r] * c.y[r], b + w[r])
            });
            if ws > 0.0 {
                wy / ws
            } else {
                prevalence
            }
        };
        let tree: Tree = grow_tree(&presorted, &g, &w, params, &mut allowed, &mut leaf_value);
        model.trees.push(tree);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::auroc;
    use crate::model::Node;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = rows
            .iter()
            .map(|r: &Vec<f64>| u8::from(r[0] + 0.5 * r[1] > 0.2))
            .collect();
        TrainSet::new(rows, labels).unwrap()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = toy(200, 1);
        let m = train_gbt(&data, &HyperParams::gbt(100, 3), 0).unwrap();
        let scores = m.predict_batch(&data.rows).unwrap();
        assert!(auroc(&scores, &data.labels).unwrap() >= 0.99);
    }

    #[test]
    fn zero_trees_predict_prevalence() {
        let data = toy(200, 2);
        let m = train_gbt(&data, &HyperParams::gbt(0, 3), 0).unwrap();
        let p = data.prevalence();
        for row in &data.rows {
            assert!((m.predict_proba(row).unwrap() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn training_loss_never_increases() {
        let mut data = toy(300, 3);
        // Label noise so the fit cannot become perfect.
        for i in (0..300).step_by(7) {
            data.labels[i] ^= 1;
        }
        let m = train_gbt(&data, &HyperParams::gbt(60, 4), 0).unwrap();
        assert_eq!(m.training_log.len(), 61);
        for w in m.training_log.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let data = TrainSet::new(vec![vec![0.0], vec![1.0]], vec![1, 1]).unwrap();
        assert!(matches!(train_gbt(&data, &HyperParams::gbt(5, 3), 0), Err(ModelError::SingleClass)));
        assert!(matches!(train_rf(&data, &HyperParams::rf(5, 3), 0), Err(ModelError::SingleClass)));
    }

    #[test]
    fn forest_is_row_order_invariant_and_bounded() {
        let data = toy(150, 4);
        let a = train_rf(&data, &HyperParams::rf(20, 4), 9).unwrap();
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.reverse();
        idx.rotate_left(37);
        let shuffled = TrainSet::with_ids(
            idx.iter().map(|&i| data.rows[i].clone()).collect(),
            idx.iter().map(|&i| data.labels[i]).collect(),
            idx.iter().map(|&i| data.row_ids[i]).collect(),
        )
        .unwrap();
        let b = train_rf(&shuffled, &HyperParams::rf(20, 4), 9).unwrap();
        assert_eq!(a, b);
        for row in &data.rows {
            let p = a.predict_proba(row).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
        assert!(a.trees.iter().all(|t| t.depth() <= 4));
    }

    #[test]
    fn truncation_equals_shorter_training() {
        let data = toy(120, 5);
        let long = train_rf(&data, &HyperParams::rf(50, 3), 2).unwrap();
        let short = train_rf(&data, &HyperParams::rf(20, 3), 2).unwrap();
        assert_eq!(long.truncated(20), short);
        let long = train_gbt(&data, &HyperParams::gbt(50, 3), 2).unwrap();
        let short = train_gbt(&data, &HyperParams::gbt(20, 3), 2).unwrap();
        assert_eq!(long.truncated(20), short);
    }

    /// Plain recursive CART on (x, y) with the variance criterion.
    fn oracle_tree(rows: &[Vec<f64>], y: &[f64], idx: Vec<usize>, depth: usize) -> Box<dyn Fn(&[f64]) -> f64> {
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        let sse = |set: &[usize]| {
            let m = set.iter().map(|&i| y[i]).sum::<f64>() / set.len() as f64;
            set.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let mut best: Option<(f64, usize, f64)> = None;
        if depth > 0 {
            for f in 0..rows[0].len() {
                let mut vals: Vec<f64> = idx.iter().map(|&i| rows[i][f]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = (w[0] + w[1]) / 2.0;
                    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][f] <= thr);
                    let red = sse(&idx) - sse(&l) - sse(&r);
                    if red > 1e-12 && best.map_or(true, |b| red > b.0 + 1e-12) {
                        best = Some((red, f, thr));
                    }
                }
            }
        }
        match best {
            None => Box::new(move |_| mean),
            Some((_, f, thr)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][f] <= thr);
                let left = oracle_tree(rows, y, l, depth - 1);
                let right = oracle_tree(rows, y, r, depth - 1);
                Box::new(move |x| if x[f] <= thr { left(x) } else { right(x) })
            }
        }
    }

    #[test]
    fn one_tree_forest_matches_plain_decision_tree() {
        // Pure-split data: the label is a function of two thresholded features.
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|i| vec![(i % 8) as f64, (i / 8) as f64, ((i * 5) % 7) as f64])
            .collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] >= 4.0 && r[1] < 3.0)).collect();
        let data = TrainSet::new(rows.clone(), labels.clone()).unwrap();
        let mut hp = HyperParams::rf(1, 4);
        hp.bootstrap = false;
        hp.max_features = MaxFeatures::All;
        let forest = train_rf(&data, &hp, 0).unwrap();
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let oracle = oracle_tree(&rows, &y, (0..64).collect(), 4);
        for row in &rows {
            assert_eq!(forest.predict_proba(row).unwrap(), oracle(row));
        }
        assert!(matches!(forest.trees[0].nodes[0], Node::Split { .. }));
    }
}
