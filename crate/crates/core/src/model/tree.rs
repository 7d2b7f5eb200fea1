//! Exact greedy regression-tree growth over presorted feature columns.
//!
//! Trees grow one level at a time: every feature column is scanned once per
//! level in ascending value order, accumulating gradient/hessian sums for the
//! node each row currently sits in. A split between adjacent distinct values
//! `a < b` uses the threshold `(a + b) / 2` (or `a` if that rounds up to `b`)
//! and sends `x <= threshold` left.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Binary decision tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Index of the leaf `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Distinct features used by any split, ascending.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub(crate) fn validate(&self, n_features: usize) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Format(msg));
        if self.nodes.is_empty() {
            return bad("empty tree".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { value } if !value.is_finite() => return bad(format!("leaf {i} is not finite")),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= n_features || !threshold.is_finite() {
                        return bad(format!("node {i} has an invalid split"));
                    }
                    // Children always come after their parent, so walks terminate.
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                        return bad(format!("node {i} has invalid children"));
                    }
                }
                Node::Leaf { .. } => {}
            }
        }
        Ok(())
    }
}

/// Feature columns plus per-column row order by (value, row index).
pub(crate) struct Presorted {
    pub columns: Vec<Vec<f64>>,
    pub order: Vec<Vec<u32>>,
    pub n_rows: usize,
}

impl Presorted {
    pub fn new(rows: &[Vec<f64>], n_features: usize) -> Result<Self, ModelError> {
        let n_rows = rows.len();
        let mut columns = vec![Vec::with_capacity(n_rows); n_features];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_features {
                return Err(ModelError::Dimension {
                    expected: n_features,
                    got: row.len(),
                });
            }
            for (f, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::NonFinite { row: r, feature: f });
                }
                columns[f].push(v);
            }
        }
        let order = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n_rows as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(Presorted {
            columns,
            order,
            n_rows,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub lambda: f64,
    pub min_child_weight: f64,
}

/// Best split found for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// `GL²/(HL+λ) + GR²/(HR+λ) − G²/(H+λ)`.
    pub gain: f64,
}

pub(crate) fn split_gain(gl: f64, hl: f64, g: f64, h: f64, lambda: f64) -> f64 {
    let (gr, hr) = (g - gl, h - hl);
    gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

const NONE: u32 = u32::MAX;

/// Grows one tree.
///
/// Rows with `h == 0` take no part. `allowed(node_id)` returns the feature
/// mask for a node (`None` for all features); `leaf_value(node_id, rows)`
/// sets each leaf's value from its rows.
pub(crate) fn grow_tree(
    data: &Presorted,
    g: &[f64],
    h: &[f64],
    params: GrowParams,
    allowed: &mut dyn FnMut(usize) -> Option<Vec<bool>>,
    leaf_value: &mut dyn FnMut(usize, &[u32]) -> f64,
) -> Tree {
    let n_features = data.columns.len();
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
    let mut node_of_row: Vec<u32> = h.iter().map(|&w| if w > 0.0 { 0 } else { NONE }).collect();
    let mut frontier: Vec<usize> = vec![0];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of_node = vec![NONE; nodes.len()];
        for (s, &node) in frontier.iter().enumerate() {
            slot_of_node[node] = s as u32;
        }
        let n_slots = frontier.len();
        let (mut g_tot, mut h_tot) = (vec![0.0; n_slots], vec![0.0; n_slots]);
        for r in 0..data.n_rows {
            let node = node_of_row[r];
            if node != NONE && slot_of_node[node as usize] != NONE {
                let s = slot_of_node[node as usize] as usize;
                g_tot[s] += g[r];
                h_tot[s] += h[r];
            }
        }
        let masks: Vec<Option<Vec<bool>>> = frontier.iter().map(|&n| allowed(n)).collect();
        let mut best: Vec<Option<SplitCandidate>> = vec![None; n_slots];
        let (mut gl, mut hl) = (vec![0.0; n_slots], vec![0.0; n_slots]);
        let mut last = vec![f64::NAN; n_slots];
        for f in 0..n_features {
            let wanted: Vec<bool> = masks.iter().map(|m| m.as_ref().map_or(true, |m| m[f])).collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            gl.iter_mut().for_each(|v| *v = 0.0);
            hl.iter_mut().for_each(|v| *v = 0.0);
            last.iter_mut().for_each(|v| *v = f64::NAN);
            let col = &data.columns[f];
            for &r in &data.order[f] {
                let r = r as usize;
                let node = node_of_row[r];
                if node == NONE {
                    continue;
                }
                let s = slot_of_node[node as usize];
                if s == NONE || !wanted[s as usize] {
                    continue;
                }
                let s = s as usize;
                let x = col[r];
                if !last[s].is_nan() && x != last[s] {
                    let hr = h_tot[s] - hl[s];
                    if hl[s] >= params.min_child_weight && hr >= params.min_child_weight {
                        let gain = split_gain(gl[s], hl[s], g_tot[s], h_tot[s], params.lambda);
                        if gain > 0.0 && best[s].map_or(true, |b| gain > b.gain) {
                            best[s] = Some(SplitCandidate {
                                feature: f,
                                threshold: midpoint(last[s], x),
                                gain,
                            });
                        }
                    }
                }
                gl[s] += g[r];
                hl[s] += h[r];
                last[s] = x;
            }
        }

        let mut next = Vec::new();
        let mut child_of_slot: Vec<Option<(usize, usize)>> = vec![None; n_slots];
        for (s, &node) in frontier.iter().enumerate() {
            if let Some(c) = best[s] {
                let (left, right) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[node] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
                child_of_slot[s] = Some((left, right));
                next.extend([left, right]);
            }
        }
        for r in 0..data.n_rows {
            let node = node_of_row[r];
            if node == NONE {
                continue;
            }
            let s = slot_of_node[node as usize];
            if s == NONE {
                continue;
            }
            if let (Some((left, right)), Some(c)) = (child_of_slot[s as usize], best[s as usize]) {
                let goes_left = data.columns[c.feature][r] <= c.threshold;
                node_of_row[r] = if goes_left { left } else { right } as u32;
            }
        }
        frontier = next;
    }

    let mut rows_of_leaf: Vec<Vec<u32>> = vec![Vec::new(); nodes.len()];
    for (r, &node) in node_of_row.iter().enumerate() {
        if node != NONE {
            rows_of_leaf[node as usize].push(r as u32);
        }
    }
    for (i, rows) in rows_of_leaf.iter().enumerate() {
        if matches!(nodes[i], Node::Leaf { .. }) {
            nodes[i] = Node::Leaf {
                value: leaf_value(i, rows),
            };
        }
    }
    Tree { nodes }
}

/// Best root split of `rows` by the gain formula (λ and minimum child hessian as given).
pub fn best_split(
    rows: &[Vec<f64>],
    g: &[f64],
    h: &[f64],
    lambda: f64,
    min_child_weight: f64,
) -> Result<Option<SplitCandidate>, ModelError> {
    let n_features = rows.first().map_or(0, Vec::len);
    let data = Presorted::new(rows, n_features)?;
    let params = GrowParams {
        max_depth: 1,
        lambda,
        min_child_weight,
    };
    let tree = grow_tree(&data, g, h, params, &mut |_| None, &mut |_, _| 0.0);
    Ok(match tree.nodes[0] {
        Node::Split {
            feature, threshold, ..
        } => {
            let (mut gl, mut hl, mut gt, mut ht) = (0.0, 0.0, 0.0, 0.0);
            for (r, row) in rows.iter().enumerate() {
                if h[r] > 0.0 {
                    gt += g[r];
                    ht += h[r];
                    if row[feature] <= threshold {
                        gl += g[r];
                        hl += h[r];
                    }
                }
            }
            Some(SplitCandidate {
                feature,
                threshold,
                gain: split_gain(gl, hl, gt, ht, lambda),
            })
        }
        Node::Leaf { .. } => None,
    })
}
