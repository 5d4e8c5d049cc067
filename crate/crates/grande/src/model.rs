//! Dense tree-ensemble representation and the forward pass.
//!
//! Trees are complete binary trees of depth `d` stored as flat tensors:
//! per-node feature-selection logits and per-node per-feature thresholds,
//! plus per-leaf values and per-leaf weights. Splits are hard (rounded)
//! in the forward pass; the soft surrogate values are retained in the
//! trace so the backward pass can propagate gradients through the
//! straight-through operators.

use crate::error::{GrandeError, Result};
use serde::{Deserialize, Serialize};

/// Sentinel for feature-selection logits of masked features. Large enough
/// that hardmax can never pick a masked feature.
pub const MASKED_LOGIT: f64 = -1e9;

/// Depth guardrail: tensor sizes grow as 2^d.
pub const MAX_DEPTH: usize = 12;

/// Differentiable split surrogate applied before rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Sigmoid,
    Entmoid,
    Softsign,
}

impl Default for SplitKind {
    fn default() -> Self {
        SplitKind::Softsign
    }
}

impl SplitKind {
    /// Surrogate value in [0, 1].
    pub fn value(self, z: f64) -> f64 {
        match self {
            SplitKind::Sigmoid => sigmoid(z),
            SplitKind::Entmoid => entmoid(z),
            SplitKind::Softsign => 0.5 * (z / (1.0 + z.abs()) + 1.0),
        }
    }

    /// Derivative of the surrogate. Zero beyond the entmoid saturation
    /// bound (|z| >= 2), strictly positive everywhere for the other two.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            SplitKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            SplitKind::Entmoid => entmoid_derivative(z),
            SplitKind::Softsign => {
                let t = 1.0 + z.abs();
                0.5 / (t * t)
            }
        }
    }
}

/// Split surrogate value together with its derivative.
pub fn split_surrogate(z: f64, kind: SplitKind) -> (f64, f64) {
    (kind.value(z), kind.derivative(z))
}

/// Logistic function, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-class entmax-1.5 squashing. Saturates to exactly 0/1 at |z| >= 2.
fn entmoid(z: f64) -> f64 {
    let a = z.abs();
    if a >= 2.0 {
        return if z >= 0.0 { 1.0 } else { 0.0 };
    }
    let tau = (a + (8.0 - a * a).sqrt()) / 2.0;
    let y = 0.25 * (tau - a) * (tau - a);
    if z >= 0.0 {
        1.0 - y
    } else {
        y
    }
}

fn entmoid_derivative(z: f64) -> f64 {
    let a = z.abs();
    if a >= 2.0 {
        return 0.0;
    }
    let r = (8.0 - a * a).sqrt();
    let tau = (a + r) / 2.0;
    let dtau = 0.5 * (1.0 - a / r);
    // out(a) = 1 - 0.25 (tau - a)^2 on the positive side; even in z.
    -0.5 * (tau - a) * (dtau - 1.0)
}

/// Index of the winning entry for a hardmax over `logits`, ties broken by
/// lowest index. Returns `None` when every entry sits at the mask sentinel.
pub fn hardmax_index(logits: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v <= MASKED_LOGIT {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Hardmax with straight-through backward semantics (the gradient contract
/// is realized in the gradient engine; forward is a plain one-hot argmax).
pub fn hardmax_st(logits: &[f64]) -> Result<Vec<f64>> {
    let idx = hardmax_index(logits)
        .ok_or_else(|| GrandeError::Config("hardmax: all entries are masked".into()))?;
    let mut out = vec![0.0; logits.len()];
    out[idx] = 1.0;
    Ok(out)
}

/// Precomputed path functions for a complete tree of depth `d`: for every
/// leaf and depth, the breadth-first index of the internal node on the path
/// and which branch the path takes there (0 = the branch selected when the
/// split output is 1).
#[derive(Debug, Clone)]
pub struct PathTable {
    depth: usize,
    node_index: Vec<u32>,
    branch_side: Vec<u8>,
}

impl PathTable {
    /// Build the table. `depth` must lie in 1..=12.
    pub fn new(depth: usize) -> Result<Self> {
        if depth < 1 || depth > MAX_DEPTH {
            return Err(GrandeError::Config(format!(
                "tree depth must be in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        let n_leaves = 1usize << depth;
        let mut node_index = Vec::with_capacity(n_leaves * depth);
        let mut branch_side = Vec::with_capacity(n_leaves * depth);
        for leaf in 0..n_leaves {
            let mut node = 0u32;
            for j in 1..=depth {
                let bit = ((leaf >> (depth - j)) & 1) as u8;
                node_index.push(node);
                branch_side.push(bit);
                node = 2 * node + 1 + bit as u32;
            }
        }
        Ok(PathTable {
            depth,
            node_index,
            branch_side,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    /// Internal-node index (breadth-first) preceding `leaf` at depth `j` (1-based).
    pub fn node_index(&self, leaf: usize, j: usize) -> usize {
        self.node_index[leaf * self.depth + (j - 1)] as usize
    }

    /// Branch indicator for `leaf` at depth `j`: 0 when the path follows the
    /// split-output-1 branch, 1 otherwise.
    pub fn branch_side(&self, leaf: usize, j: usize) -> u8 {
        self.branch_side[leaf * self.depth + (j - 1)]
    }
}

/// All trainable tensors of the ensemble, stored flat.
///
/// Shapes: `index_logits` and `thresholds` are `E x M x n` with
/// `M = 2^d - 1` internal nodes per tree; `leaf_values` and `leaf_weights`
/// are `E x 2^d`; `feature_masks` is `E x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParameters {
    pub depth: usize,
    pub n_estimators: usize,
    pub n_features: usize,
    pub index_logits: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub leaf_values: Vec<f64>,
    pub leaf_weights: Vec<f64>,
    pub feature_masks: Vec<bool>,
}

impl EnsembleParameters {
    pub fn n_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    /// Offset of the per-feature block for node `m` of tree `e`.
    pub fn node_offset(&self, e: usize, m: usize) -> usize {
        (e * self.n_nodes() + m) * self.n_features
    }

    pub fn leaf_offset(&self, e: usize, leaf: usize) -> usize {
        e * self.n_leaves() + leaf
    }

    pub fn mask_offset(&self, e: usize) -> usize {
        e * self.n_features
    }

    /// Hardmax feature selection for one node.
    pub fn selected_feature(&self, e: usize, m: usize) -> Result<usize> {
        let off = self.node_offset(e, m);
        hardmax_index(&self.index_logits[off..off + self.n_features]).ok_or_else(|| {
            GrandeError::Config(format!("tree {e} node {m}: all feature logits masked"))
        })
    }

    /// Hardmax feature selection for every node, `E x M`, computed once per
    /// batch (the selection does not depend on the sample).
    pub fn select_features(&self) -> Result<Vec<u32>> {
        let m_nodes = self.n_nodes();
        let mut out = Vec::with_capacity(self.n_estimators * m_nodes);
        for e in 0..self.n_estimators {
            for m in 0..m_nodes {
                out.push(self.selected_feature(e, m)? as u32);
            }
        }
        Ok(out)
    }

    /// Check tensor shapes, finiteness and that each tree keeps at least one
    /// unmasked feature.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_nodes();
        let l = self.n_leaves();
        let (e, n) = (self.n_estimators, self.n_features);
        if self.depth < 1 || self.depth > MAX_DEPTH {
            return Err(GrandeError::Config(format!("depth {} out of range", self.depth)));
        }
        if e == 0 || n == 0 {
            return Err(GrandeError::Config("need at least one estimator and one feature".into()));
        }
        if self.index_logits.len() != e * m * n
            || self.thresholds.len() != e * m * n
            || self.leaf_values.len() != e * l
            || self.leaf_weights.len() != e * l
            || self.feature_masks.len() != e * n
        {
            return Err(GrandeError::Model("parameter tensor shape mismatch".into()));
        }
        for v in self
            .index_logits
            .iter()
            .chain(&self.thresholds)
            .chain(&self.leaf_values)
            .chain(&self.leaf_weights)
        {
            if !v.is_finite() {
                return Err(GrandeError::Numeric("non-finite parameter value".into()));
            }
        }
        for tree in 0..e {
            if !self.feature_masks[self.mask_offset(tree)..self.mask_offset(tree) + n]
                .iter()
                .any(|&b| b)
            {
                return Err(GrandeError::Config(format!("tree {tree}: empty feature mask")));
            }
        }
        Ok(())
    }
}

/// Per-sample forward quantities cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub n_samples: usize,
    pub n_trees: usize,
    pub depth: usize,
    /// Hardmax feature selection per (tree, node), `E x M`.
    pub selected_features: Vec<u32>,
    /// Selected leaf per (sample, tree).
    pub leaf_index: Vec<u32>,
    /// `iota . x - iota . tau` at each path node, `(sample, tree, depth)`.
    pub path_z: Vec<f64>,
    /// Soft surrogate value at each path node.
    pub path_soft: Vec<f64>,
    /// Chosen leaf weight (pre-softmax) per (sample, tree).
    pub raw_weight: Vec<f64>,
    /// Post-softmax estimator weights per (sample, tree); 0 for inactive trees.
    pub weights: Vec<f64>,
    /// Per-tree leaf logit g_e per (sample, tree).
    pub tree_pred: Vec<f64>,
    /// Ensemble logit per sample.
    pub logit: Vec<f64>,
    /// Dropout activity mask used for this batch.
    pub active: Vec<bool>,
}

impl ForwardTrace {
    fn idx(&self, sample: usize, tree: usize) -> usize {
        sample * self.n_trees + tree
    }

    pub fn leaf(&self, sample: usize, tree: usize) -> usize {
        self.leaf_index[self.idx(sample, tree)] as usize
    }

    /// Hard split bit taken at depth `j` (1-based): 1 means the split output
    /// was 1 (the branch with side indicator 0).
    pub fn hard_bit(&self, sample: usize, tree: usize, j: usize) -> u8 {
        let leaf = self.leaf(sample, tree);
        1 - (((leaf >> (self.depth - j)) & 1) as u8)
    }
}

/// Full forward pass over a batch. `x` is row-major `n_samples x n_features`.
/// `active` deactivates trees for the batch (dropout); `None` means all active.
pub fn forward_batch(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    kind: SplitKind,
    active: Option<&[bool]>,
) -> Result<ForwardTrace> {
    let n = params.n_features;
    if x.len() % n != 0 {
        return Err(GrandeError::Data(format!(
            "input width not a multiple of n_features = {n}"
        )));
    }
    let n_samples = x.len() / n;
    let e_cnt = params.n_estimators;
    let d = params.depth;
    let m_nodes = params.n_nodes();
    let active_vec: Vec<bool> = match active {
        Some(a) => {
            if a.len() != e_cnt {
                return Err(GrandeError::Internal("dropout mask length mismatch".into()));
            }
            if !a.iter().any(|&b| b) {
                return Err(GrandeError::Config("all trees are dropout-masked".into()));
            }
            a.to_vec()
        }
        None => vec![true; e_cnt],
    };
    let selected_features = params.select_features()?;

    let mut trace = ForwardTrace {
        n_samples,
        n_trees: e_cnt,
        depth: d,
        selected_features,
        leaf_index: vec![0; n_samples * e_cnt],
        path_z: vec![0.0; n_samples * e_cnt * d],
        path_soft: vec![0.0; n_samples * e_cnt * d],
        raw_weight: vec![0.0; n_samples * e_cnt],
        weights: vec![0.0; n_samples * e_cnt],
        tree_pred: vec![0.0; n_samples * e_cnt],
        logit: vec![0.0; n_samples],
        active: active_vec,
    };

    for s in 0..n_samples {
        let row = &x[s * n..(s + 1) * n];
        let base = s * e_cnt;
        for e in 0..e_cnt {
            if !trace.active[e] {
                continue;
            }
            let mut node = 0usize;
            let mut leaf = 0usize;
            for j in 0..d {
                let f = trace.selected_features[e * m_nodes + node] as usize;
                let z = row[f] - params.thresholds[params.node_offset(e, node) + f];
                let soft = kind.value(z);
                let k = (base + e) * d + j;
                trace.path_z[k] = z;
                trace.path_soft[k] = soft;
                // Round half up: split output 1 selects the branch with side 0.
                let bit = if soft >= 0.5 { 0 } else { 1 };
                leaf = (leaf << 1) | bit;
                node = 2 * node + 1 + bit;
            }
            trace.leaf_index[base + e] = leaf as u32;
            trace.raw_weight[base + e] = params.leaf_weights[params.leaf_offset(e, leaf)];
            trace.tree_pred[base + e] = params.leaf_values[params.leaf_offset(e, leaf)];
        }
        // Softmax over the active trees' chosen weights.
        softmax_masked(
            &trace.raw_weight[base..base + e_cnt],
            &trace.active,
            &mut trace.weights[base..base + e_cnt],
        );
        let mut logit = 0.0;
        for e in 0..e_cnt {
            logit += trace.weights[base + e] * trace.tree_pred[base + e];
        }
        trace.logit[s] = logit;
    }
    let _ = table; // path structure is implicit in the bit routing above
    Ok(trace)
}

/// Numerically stable softmax over the entries where `active` is true;
/// inactive entries get weight 0.
pub fn softmax_masked(raw: &[f64], active: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in raw.iter().enumerate() {
        if active[i] && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for i in 0..raw.len() {
        if active[i] {
            let e = (raw[i] - max).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Forward pass for a single sample.
pub fn ensemble_forward(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    kind: SplitKind,
) -> Result<(f64, ForwardTrace)> {
    if x.len() != params.n_features {
        return Err(GrandeError::Data(format!(
            "expected {} features, got {}",
            params.n_features,
            x.len()
        )));
    }
    let trace = forward_batch(params, table, x, kind, None)?;
    Ok((trace.logit[0], trace))
}

/// Probability of the positive class for one sample.
pub fn predict_proba(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    kind: SplitKind,
) -> Result<f64> {
    let (logit, _) = ensemble_forward(params, table, x, kind)?;
    Ok(sigmoid(logit))
}

/// Post-softmax estimator weights for one sample.
pub fn instance_weights(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    kind: SplitKind,
    active: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if x.len() != params.n_features {
        return Err(GrandeError::Data("feature width mismatch".into()));
    }
    let trace = forward_batch(params, table, x, kind, active)?;
    Ok(trace.weights)
}

/// Single split node: hardmax the feature logits, apply the surrogate to
/// `iota . x - iota . tau`, round with straight-through semantics.
/// Returns (hard, soft).
pub fn node_split(
    x: &[f64],
    node_index_logits: &[f64],
    node_thresholds: &[f64],
    kind: SplitKind,
) -> Result<(u8, f64)> {
    if x.len() != node_index_logits.len() || x.len() != node_thresholds.len() {
        return Err(GrandeError::Data("node_split: dimension mismatch".into()));
    }
    let f = hardmax_index(node_index_logits)
        .ok_or_else(|| GrandeError::Config("node_split: all feature logits masked".into()))?;
    let soft = kind.value(x[f] - node_thresholds[f]);
    let hard = if soft >= 0.5 { 1 } else { 0 };
    Ok((hard, soft))
}

/// Leaf membership vector for tree `e`. With `hard`, split outputs are
/// rounded and exactly one entry is 1; otherwise the soft products are
/// returned (they sum to 1 across leaves).
pub fn leaf_indicator(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    e: usize,
    kind: SplitKind,
    hard: bool,
) -> Result<Vec<f64>> {
    if e >= params.n_estimators {
        return Err(GrandeError::Data(format!("tree index {e} out of range")));
    }
    let d = table.depth();
    let n_leaves = table.n_leaves();
    // Split value per internal node, computed once.
    let mut split = vec![0.0; params.n_nodes()];
    for m in 0..params.n_nodes() {
        let f = params.selected_feature(e, m)?;
        let z = x[f] - params.thresholds[params.node_offset(e, m) + f];
        let s = kind.value(z);
        split[m] = if hard {
            if s >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            s
        };
    }
    let mut out = vec![0.0; n_leaves];
    for leaf in 0..n_leaves {
        let mut prod = 1.0;
        for j in 1..=d {
            let m = table.node_index(leaf, j);
            let p = table.branch_side(leaf, j) as f64;
            prod *= (1.0 - p) * split[m] + p * (1.0 - split[m]);
        }
        out[leaf] = prod;
    }
    Ok(out)
}

/// Leaf logit of tree `e` for one sample, under hard splits.
pub fn tree_predict(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    e: usize,
    kind: SplitKind,
) -> Result<f64> {
    let membership = leaf_indicator(params, table, x, e, kind, true)?;
    let mut out = 0.0;
    for (leaf, &m) in membership.iter().enumerate() {
        if m != 0.0 {
            out += params.leaf_values[params.leaf_offset(e, leaf)] * m;
        }
    }
    Ok(out)
}
