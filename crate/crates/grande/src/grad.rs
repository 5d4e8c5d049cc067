//! Hand-derived reverse-mode gradients under straight-through semantics.
//!
//! The training backward (`backward_batch`) follows the chain rule with the
//! straight-through rules: rounding and hardmax backpropagate as the
//! identity, so gradients reach the split surrogate through the hard split
//! bits. With hard memberships, the derivative of a tree output with respect
//! to a path node's split collapses to a difference between the selected
//! leaf and the counterfactual leaf that hard routing would reach had that
//! one split flipped.
//!
//! `fd_check` validates the algebra against central finite differences of a
//! fully-soft forward (rounding disabled, feature selections frozen). Index
//! logits enter the true function piecewise-constantly, so they are checked
//! only for the pass-through contract: the analytic gradient must equal the
//! finite difference of the surrogate composed with the frozen selection
//! relaxed to a real vector.
//!
//! Batch accumulation is a plain sample-order sum, so results are
//! deterministic for a fixed batch.

use crate::error::{GrandeError, Result};
use crate::model::{EnsembleParameters, ForwardTrace, PathTable, SplitKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Gradients for all four parameter groups, same shapes as the parameters.
/// Values are sums over the batch; callers average before an optimizer step.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub index_logits: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub leaf_values: Vec<f64>,
    pub leaf_weights: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &EnsembleParameters) -> Self {
        GradientSet {
            index_logits: vec![0.0; params.index_logits.len()],
            thresholds: vec![0.0; params.thresholds.len()],
            leaf_values: vec![0.0; params.leaf_values.len()],
            leaf_weights: vec![0.0; params.leaf_weights.len()],
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self
            .index_logits
            .iter_mut()
            .chain(&mut self.thresholds)
            .chain(&mut self.leaf_values)
            .chain(&mut self.leaf_weights)
        {
            *v *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.index_logits
            .iter()
            .chain(&self.thresholds)
            .chain(&self.leaf_values)
            .chain(&self.leaf_weights)
            .all(|v| v.is_finite())
    }
}

/// Reverse pass over a batch. `loss_grads` holds d(loss)/d(logit) per sample;
/// `tree_sample_active[s * E + e] = false` excludes sample `s` from tree `e`'s
/// gradients (data-subset regularization). Dropout-masked trees (inactive in
/// the trace) receive no gradient. Returns sums over the batch.
pub fn backward_batch(
    params: &EnsembleParameters,
    table: &PathTable,
    x: &[f64],
    trace: &ForwardTrace,
    loss_grads: &[f64],
    tree_sample_active: Option<&[bool]>,
    kind: SplitKind,
) -> Result<GradientSet> {
    let n = params.n_features;
    let e_cnt = params.n_estimators;
    let d = params.depth;
    let m_nodes = params.n_nodes();
    let n_samples = trace.n_samples;
    if x.len() != n_samples * n || loss_grads.len() != n_samples {
        return Err(GrandeError::Internal("backward_batch: shape mismatch".into()));
    }
    if let Some(m) = tree_sample_active {
        if m.len() != n_samples * e_cnt {
            return Err(GrandeError::Internal("backward_batch: subset mask shape mismatch".into()));
        }
    }
    let _ = table;
    let sel = &trace.selected_features;
    let mut grads = GradientSet::zeros_like(params);

    for s in 0..n_samples {
        let gs = loss_grads[s];
        let row = &x[s * n..(s + 1) * n];
        let base = s * e_cnt;
        // Softmax Jacobian: d logit / d raw_w_e = w_e (g_e - logit).
        let ubar = gs * trace.logit[s];
        for e in 0..e_cnt {
            if !trace.active[e] {
                continue;
            }
            if let Some(m) = tree_sample_active {
                if !m[base + e] {
                    continue;
                }
            }
            let w_e = trace.weights[base + e];
            let dg = gs * w_e;
            let draw = w_e * (gs * trace.tree_pred[base + e] - ubar);
            let leaf = trace.leaf_index[base + e] as usize;
            let loff = params.leaf_offset(e, 0);
            grads.leaf_values[loff + leaf] += dg;
            grads.leaf_weights[loff + leaf] += draw;

            let mask = &params.feature_masks[params.mask_offset(e)..params.mask_offset(e) + n];
            let mut node = 0usize;
            for j in 0..d {
                let bit = (leaf >> (d - 1 - j)) & 1;
                let f = sel[e * m_nodes + node] as usize;
                let z = trace.path_z[(base + e) * d + j];

                // Counterfactual leaf: flip this split, hard-route the rest.
                let mut cf_leaf = ((leaf >> (d - j)) << 1) | (1 - bit);
                let mut cf_node = 2 * node + 1 + (1 - bit);
                for _ in (j + 1)..d {
                    let f2 = sel[e * m_nodes + cf_node] as usize;
                    let z2 = row[f2] - params.thresholds[params.node_offset(e, cf_node) + f2];
                    let b2 = if z2 >= 0.0 { 0 } else { 1 };
                    cf_leaf = (cf_leaf << 1) | b2;
                    cf_node = 2 * cf_node + 1 + b2;
                }

                let u = dg * (params.leaf_values[loff + leaf] - params.leaf_values[loff + cf_leaf])
                    + draw
                        * (params.leaf_weights[loff + leaf] - params.leaf_weights[loff + cf_leaf]);
                // Straight-through: d hard / d soft = 1; branch side flips the sign.
                let dh = (1.0 - 2.0 * bit as f64) * u;
                let dz = dh * kind.derivative(z);

                let noff = params.node_offset(e, node);
                grads.thresholds[noff + f] -= dz;
                for f2 in 0..n {
                    if mask[f2] {
                        grads.index_logits[noff + f2] +=
                            dz * (row[f2] - params.thresholds[noff + f2]);
                    }
                }
                node = 2 * node + 1 + bit;
            }
        }
    }
    Ok(grads)
}

/// Optional relaxation of one node's frozen feature selection: shifts that
/// node's pre-surrogate input by `delta * (x[feature] - tau[feature])`,
/// which is the exact effect of perturbing the relaxed one-hot selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectionRelax {
    pub tree: usize,
    pub node: usize,
    pub feature: usize,
    pub delta: f64,
}

/// Per-tree soft quantities for one sample: all-node split values, all-leaf
/// memberships, tree output and raw weight.
fn soft_tree_quantities(
    params: &EnsembleParameters,
    sel: &[u32],
    e: usize,
    row: &[f64],
    kind: SplitKind,
    relax: Option<SelectionRelax>,
    round_factors: bool,
    split: &mut [f64],
    deriv: &mut [f64],
    prefix: &mut [f64],
) -> (f64, f64) {
    let m_nodes = params.n_nodes();
    let n_leaves = params.n_leaves();
    for m in 0..m_nodes {
        let f = sel[e * m_nodes + m] as usize;
        let mut z = row[f] - params.thresholds[params.node_offset(e, m) + f];
        if let Some(r) = relax {
            if r.tree == e && r.node == m {
                z += r.delta * (row[r.feature] - params.thresholds[params.node_offset(e, m) + r.feature]);
            }
        }
        let s = kind.value(z);
        split[m] = if round_factors {
            if s >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            s
        };
        deriv[m] = kind.derivative(z);
    }
    // prefix[node] = product of branch factors from the root down to `node`.
    prefix[0] = 1.0;
    for m in 0..m_nodes {
        prefix[2 * m + 1] = prefix[m] * split[m];
        prefix[2 * m + 2] = prefix[m] * (1.0 - split[m]);
    }
    let mut g = 0.0;
    let mut w_raw = 0.0;
    let loff = params.leaf_offset(e, 0);
    for l in 0..n_leaves {
        let mu = prefix[m_nodes + l];
        g += params.leaf_values[loff + l] * mu;
        w_raw += params.leaf_weights[loff + l] * mu;
    }
    (g, w_raw)
}

/// Fully-soft forward over a batch: no rounding, frozen feature selections,
/// all trees active. Returns the per-sample ensemble logits.
pub fn soft_forward_batch(
    params: &EnsembleParameters,
    x: &[f64],
    kind: SplitKind,
    relax: Option<SelectionRelax>,
) -> Result<Vec<f64>> {
    let n = params.n_features;
    let e_cnt = params.n_estimators;
    let n_samples = x.len() / n;
    let sel = params.select_features()?;
    let m_nodes = params.n_nodes();
    let total = m_nodes + params.n_leaves();
    let mut split = vec![0.0; m_nodes];
    let mut deriv = vec![0.0; m_nodes];
    let mut prefix = vec![0.0; total];
    let mut logits = Vec::with_capacity(n_samples);
    let mut raw = vec![0.0; e_cnt];
    let mut preds = vec![0.0; e_cnt];
    let mut weights = vec![0.0; e_cnt];
    let active = vec![true; e_cnt];
    for s in 0..n_samples {
        let row = &x[s * n..(s + 1) * n];
        for e in 0..e_cnt {
            let (g, w_raw) = soft_tree_quantities(
                params, &sel, e, row, kind, relax, false, &mut split, &mut deriv, &mut prefix,
            );
            preds[e] = g;
            raw[e] = w_raw;
        }
        crate::model::softmax_masked(&raw, &active, &mut weights);
        logits.push(weights.iter().zip(&preds).map(|(w, p)| w * p).sum());
    }
    Ok(logits)
}

/// Exact gradient of the fully-soft forward (`round_factors = false`) or of
/// the straight-through hard forward (`round_factors = true`, in which case
/// the factor products use the rounded splits while the surrogate derivative
/// still comes from the soft value — the ST convention). Returns sums over
/// the batch.
pub fn soft_backward_batch(
    params: &EnsembleParameters,
    x: &[f64],
    loss_grads: &[f64],
    kind: SplitKind,
    round_factors: bool,
) -> Result<GradientSet> {
    let n = params.n_features;
    let e_cnt = params.n_estimators;
    let n_samples = x.len() / n;
    if loss_grads.len() != n_samples {
        return Err(GrandeError::Internal("soft_backward_batch: shape mismatch".into()));
    }
    let sel = params.select_features()?;
    let m_nodes = params.n_nodes();
    let n_leaves = params.n_leaves();
    let total = m_nodes + n_leaves;

    let mut grads = GradientSet::zeros_like(params);
    let mut split = vec![0.0; m_nodes];
    let mut deriv = vec![0.0; m_nodes];
    // Per-tree prefix products, kept for the backward sweep of the sample.
    let mut prefixes = vec![0.0; e_cnt * total];
    let mut value_sum = vec![0.0; total];
    let mut raw = vec![0.0; e_cnt];
    let mut preds = vec![0.0; e_cnt];
    let mut weights = vec![0.0; e_cnt];
    let mut splits_all = vec![0.0; e_cnt * m_nodes];
    let mut derivs_all = vec![0.0; e_cnt * m_nodes];
    let active = vec![true; e_cnt];

    for s in 0..n_samples {
        let gs = loss_grads[s];
        let row = &x[s * n..(s + 1) * n];
        for e in 0..e_cnt {
            let (g, w_raw) = soft_tree_quantities(
                params,
                &sel,
                e,
                row,
                kind,
                None,
                round_factors,
                &mut split,
                &mut deriv,
                &mut prefixes[e * total..(e + 1) * total],
            );
            splits_all[e * m_nodes..(e + 1) * m_nodes].copy_from_slice(&split);
            derivs_all[e * m_nodes..(e + 1) * m_nodes].copy_from_slice(&deriv);
            preds[e] = g;
            raw[e] = w_raw;
        }
        crate::model::softmax_masked(&raw, &active, &mut weights);
        let logit: f64 = weights.iter().zip(&preds).map(|(w, p)| w * p).sum();
        let ubar = gs * logit;

        for e in 0..e_cnt {
            let w_e = weights[e];
            let dg = gs * w_e;
            let draw = w_e * (gs * preds[e] - ubar);
            let loff = params.leaf_offset(e, 0);
            let prefix = &prefixes[e * total..(e + 1) * total];
            let split = &splits_all[e * m_nodes..(e + 1) * m_nodes];
            let deriv = &derivs_all[e * m_nodes..(e + 1) * m_nodes];

            // value_sum[node]: sum over leaves below of (dg*lambda + draw*W)
            // times the branch factors strictly below `node`.
            for l in 0..n_leaves {
                let c = dg * params.leaf_values[loff + l] + draw * params.leaf_weights[loff + l];
                value_sum[m_nodes + l] = c;
                grads.leaf_values[loff + l] += dg * prefix[m_nodes + l];
                grads.leaf_weights[loff + l] += draw * prefix[m_nodes + l];
            }
            for m in (0..m_nodes).rev() {
                value_sum[m] =
                    split[m] * value_sum[2 * m + 1] + (1.0 - split[m]) * value_sum[2 * m + 2];
            }
            let mask = &params.feature_masks[params.mask_offset(e)..params.mask_offset(e) + n];
            for m in 0..m_nodes {
                let ds = prefix[m] * (value_sum[2 * m + 1] - value_sum[2 * m + 2]);
                if ds == 0.0 {
                    continue;
                }
                let dz = ds * deriv[m];
                let f = sel[e * m_nodes + m] as usize;
                let noff = params.node_offset(e, m);
                grads.thresholds[noff + f] -= dz;
                for f2 in 0..n {
                    if mask[f2] {
                        grads.index_logits[noff + f2] +=
                            dz * (row[f2] - params.thresholds[noff + f2]);
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Plain binary cross-entropy on a logit; the checking loss for fd_check.
fn bce_with_logit(logit: f64, y: f64) -> (f64, f64) {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    let p = crate::model::sigmoid(logit);
    (softplus - y * logit, p - y)
}

fn soft_batch_loss(
    params: &EnsembleParameters,
    x: &[f64],
    y: &[f64],
    kind: SplitKind,
    relax: Option<SelectionRelax>,
) -> Result<f64> {
    let logits = soft_forward_batch(params, x, kind, relax)?;
    Ok(logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| bce_with_logit(l, t).0)
        .sum())
}

/// Max relative error of the analytic gradient against central finite
/// differences, per parameter group. For index logits the reported number
/// covers the pass-through contract only (see module docs).
#[derive(Debug, Clone, Serialize)]
pub struct FdCheckReport {
    pub thresholds: f64,
    pub leaf_values: f64,
    pub leaf_weights: f64,
    pub index_logits: f64,
    pub coordinates_checked: usize,
    pub epsilon: f64,
}

impl FdCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.thresholds
            .max(self.leaf_values)
            .max(self.leaf_weights)
            .max(self.index_logits)
    }
}

/// Compare the analytic soft-mode gradients with central finite differences
/// of the fully-soft batch loss. Perturbs every coordinate of thresholds,
/// leaf values and leaf weights; index logits are probed through the
/// relaxed frozen selection (masked features skipped).
pub fn fd_check(
    params: &EnsembleParameters,
    x: &[f64],
    y: &[f64],
    kind: SplitKind,
    epsilon: f64,
) -> Result<FdCheckReport> {
    if epsilon <= 0.0 {
        return Err(GrandeError::Config(format!("fd_check epsilon must be > 0, got {epsilon}")));
    }
    let logits = soft_forward_batch(params, x, kind, None)?;
    let loss_grads: Vec<f64> = logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| bce_with_logit(l, t).1)
        .collect();
    let analytic = soft_backward_batch(params, x, &loss_grads, kind, false)?;

    let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1.0);
    let mut checked = 0usize;

    let mut probe = params.clone();
    let mut max_thresholds = 0.0f64;
    for i in 0..params.thresholds.len() {
        probe.thresholds[i] = params.thresholds[i] + epsilon;
        let hi = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.thresholds[i] = params.thresholds[i] - epsilon;
        let lo = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.thresholds[i] = params.thresholds[i];
        let fd = (hi - lo) / (2.0 * epsilon);
        max_thresholds = max_thresholds.max(rel(analytic.thresholds[i], fd));
        checked += 1;
    }
    let mut max_leaf_values = 0.0f64;
    for i in 0..params.leaf_values.len() {
        probe.leaf_values[i] = params.leaf_values[i] + epsilon;
        let hi = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.leaf_values[i] = params.leaf_values[i] - epsilon;
        let lo = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.leaf_values[i] = params.leaf_values[i];
        let fd = (hi - lo) / (2.0 * epsilon);
        max_leaf_values = max_leaf_values.max(rel(analytic.leaf_values[i], fd));
        checked += 1;
    }
    let mut max_leaf_weights = 0.0f64;
    for i in 0..params.leaf_weights.len() {
        probe.leaf_weights[i] = params.leaf_weights[i] + epsilon;
        let hi = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.leaf_weights[i] = params.leaf_weights[i] - epsilon;
        let lo = soft_batch_loss(&probe, x, y, kind, None)?;
        probe.leaf_weights[i] = params.leaf_weights[i];
        let fd = (hi - lo) / (2.0 * epsilon);
        max_leaf_weights = max_leaf_weights.max(rel(analytic.leaf_weights[i], fd));
        checked += 1;
    }
    let mut max_index = 0.0f64;
    for e in 0..params.n_estimators {
        let mask = &params.feature_masks[params.mask_offset(e)..];
        for m in 0..params.n_nodes() {
            for f in 0..params.n_features {
                if !mask[f] {
                    continue;
                }
                let mk = |delta| SelectionRelax { tree: e, node: m, feature: f, delta };
                let hi = soft_batch_loss(params, x, y, kind, Some(mk(epsilon)))?;
                let lo = soft_batch_loss(params, x, y, kind, Some(mk(-epsilon)))?;
                let fd = (hi - lo) / (2.0 * epsilon);
                let idx = params.node_offset(e, m) + f;
                max_index = max_index.max(rel(analytic.index_logits[idx], fd));
                checked += 1;
            }
        }
    }
    Ok(FdCheckReport {
        thresholds: max_thresholds,
        leaf_values: max_leaf_values,
        leaf_weights: max_leaf_weights,
        index_logits: max_index,
        coordinates_checked: checked,
        epsilon,
    })
}

/// Deterministic fd_check case: E=4, d=3, n=5, batch of 16.
pub fn gradcheck_case(seed: u64) -> (EnsembleParameters, Vec<f64>, Vec<f64>) {
    let (e, d, n, batch) = (4usize, 3usize, 5usize, 16usize);
    let m = (1usize << d) - 1;
    let l = 1usize << d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EnsembleParameters {
        depth: d,
        n_estimators: e,
        n_features: n,
        index_logits: (0..e * m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        thresholds: (0..e * m * n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        leaf_values: (0..e * l).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        leaf_weights: (0..e * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        feature_masks: vec![true; e * n],
    };
    let x: Vec<f64> = (0..batch * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..batch).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    (params, x, y)
}

/// fd_check on the standard case with epsilon 1e-5.
pub fn run_gradcheck(seed: u64) -> Result<FdCheckReport> {
    let (params, x, y) = gradcheck_case(seed);
    fd_check(&params, &x, &y, SplitKind::Softsign, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_batch;

    fn small_params(seed: u64, e: usize, d: usize, n: usize) -> EnsembleParameters {
        let m = (1usize << d) - 1;
        let l = 1usize << d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnsembleParameters {
            depth: d,
            n_estimators: e,
            n_features: n,
            index_logits: (0..e * m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            thresholds: (0..e * m * n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            leaf_values: (0..e * l).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            leaf_weights: (0..e * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            feature_masks: vec![true; e * n],
        }
    }

    fn random_batch(seed: u64, n_samples: usize, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        (0..n_samples * n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn leaf_value_gradient_is_membership() {
        // E=1, depth=1: d logit / d lambda is the hard membership vector.
        let params = EnsembleParameters {
            depth: 1,
            n_estimators: 1,
            n_features: 1,
            index_logits: vec![1.0],
            thresholds: vec![0.0],
            leaf_values: vec![2.0, -1.0],
            leaf_weights: vec![0.3, 0.9],
            feature_masks: vec![true],
        };
        let table = PathTable::new(1).unwrap();
        let x = [1.0];
        let trace = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let g =
            backward_batch(&params, &table, &x, &trace, &[1.0], None, SplitKind::Softsign).unwrap();
        assert_eq!(g.leaf_values, vec![1.0, 0.0]);
        // Softmax over a single tree is constant 1: no weight gradient.
        assert_eq!(g.leaf_weights, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_loss_grads_give_zero_gradients() {
        let params = small_params(1, 3, 2, 4);
        let table = PathTable::new(2).unwrap();
        let x = random_batch(1, 8, 4);
        let trace = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let g = backward_batch(&params, &table, &x, &trace, &vec![0.0; 8], None, SplitKind::Softsign)
            .unwrap();
        assert!(g.index_logits.iter().all(|&v| v == 0.0));
        assert!(g.thresholds.iter().all(|&v| v == 0.0));
        assert!(g.leaf_values.iter().all(|&v| v == 0.0));
        assert!(g.leaf_weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_sample_doubles_contribution() {
        let params = small_params(2, 2, 2, 3);
        let table = PathTable::new(2).unwrap();
        let one = random_batch(2, 1, 3);
        let two: Vec<f64> = one.iter().chain(one.iter()).copied().collect();
        let t1 = forward_batch(&params, &table, &one, SplitKind::Softsign, None).unwrap();
        let t2 = forward_batch(&params, &table, &two, SplitKind::Softsign, None).unwrap();
        let g1 =
            backward_batch(&params, &table, &one, &t1, &[0.7], None, SplitKind::Softsign).unwrap();
        let g2 = backward_batch(&params, &table, &two, &t2, &[0.7, 0.7], None, SplitKind::Softsign)
            .unwrap();
        for (a, b) in g1.thresholds.iter().zip(&g2.thresholds) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        for (a, b) in g1.leaf_values.iter().zip(&g2.leaf_values) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_backward_matches_generic_product_rule() {
        // The efficient counterfactual-leaf formula must agree with the
        // generic product-rule sweep run on rounded factors.
        for seed in 0..5 {
            let params = small_params(seed, 3, 3, 4);
            let table = PathTable::new(3).unwrap();
            let x = random_batch(seed, 6, 4);
            let trace = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
            let loss_grads: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * i as f64).collect();
            let fast =
                backward_batch(&params, &table, &x, &trace, &loss_grads, None, SplitKind::Softsign)
                    .unwrap();
            let generic =
                soft_backward_batch(&params, &x, &loss_grads, SplitKind::Softsign, true).unwrap();
            for (a, b) in fast.thresholds.iter().zip(&generic.thresholds) {
                assert!((a - b).abs() < 1e-12, "thresholds diverge: {a} vs {b}");
            }
            for (a, b) in fast.index_logits.iter().zip(&generic.index_logits) {
                assert!((a - b).abs() < 1e-12, "index logits diverge: {a} vs {b}");
            }
            for (a, b) in fast.leaf_values.iter().zip(&generic.leaf_values) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in fast.leaf_weights.iter().zip(&generic.leaf_weights) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fd_check_passes_on_small_cases() {
        for seed in [0, 1, 2] {
            let report = run_gradcheck(seed).unwrap();
            assert!(
                report.thresholds < 1e-4
                    && report.leaf_values < 1e-4
                    && report.leaf_weights < 1e-4,
                "fd mismatch at seed {seed}: {report:?}"
            );
            assert!(report.index_logits < 1e-4, "pass-through contract violated: {report:?}");
        }
    }

    #[test]
    fn fd_check_rejects_bad_epsilon() {
        let (params, x, y) = gradcheck_case(0);
        assert!(fd_check(&params, &x, &y, SplitKind::Softsign, 0.0).is_err());
        assert!(fd_check(&params, &x, &y, SplitKind::Softsign, -1e-5).is_err());
    }

    #[test]
    fn loss_scaling_scales_gradients() {
        let params = small_params(4, 2, 2, 3);
        let table = PathTable::new(2).unwrap();
        let x = random_batch(4, 5, 3);
        let trace = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let lg: Vec<f64> = (0..5).map(|i| 0.2 * (i as f64 + 1.0)).collect();
        let lg2: Vec<f64> = lg.iter().map(|v| 2.0 * v).collect();
        let g1 = backward_batch(&params, &table, &x, &trace, &lg, None, SplitKind::Softsign).unwrap();
        let g2 =
            backward_batch(&params, &table, &x, &trace, &lg2, None, SplitKind::Softsign).unwrap();
        // Doubling is exact in binary floating point.
        for (a, b) in g1.thresholds.iter().zip(&g2.thresholds) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in g1.index_logits.iter().zip(&g2.index_logits) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn estimator_permutation_equivariance() {
        let params = small_params(5, 3, 2, 3);
        let table = PathTable::new(2).unwrap();
        let x = random_batch(5, 4, 3);
        let perm = [2usize, 0, 1];
        let m = params.n_nodes() * params.n_features;
        let l = params.n_leaves();
        let mut permuted = params.clone();
        for (new_e, &old_e) in perm.iter().enumerate() {
            permuted.index_logits[new_e * m..(new_e + 1) * m]
                .copy_from_slice(&params.index_logits[old_e * m..(old_e + 1) * m]);
            permuted.thresholds[new_e * m..(new_e + 1) * m]
                .copy_from_slice(&params.thresholds[old_e * m..(old_e + 1) * m]);
            permuted.leaf_values[new_e * l..(new_e + 1) * l]
                .copy_from_slice(&params.leaf_values[old_e * l..(old_e + 1) * l]);
            permuted.leaf_weights[new_e * l..(new_e + 1) * l]
                .copy_from_slice(&params.leaf_weights[old_e * l..(old_e + 1) * l]);
        }
        let lg = vec![0.6; 4];
        let t1 = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let g1 = backward_batch(&params, &table, &x, &t1, &lg, None, SplitKind::Softsign).unwrap();
        let t2 = forward_batch(&permuted, &table, &x, SplitKind::Softsign, None).unwrap();
        let g2 = backward_batch(&permuted, &table, &x, &t2, &lg, None, SplitKind::Softsign).unwrap();
        for (new_e, &old_e) in perm.iter().enumerate() {
            assert_eq!(
                &g2.thresholds[new_e * m..(new_e + 1) * m],
                &g1.thresholds[old_e * m..(old_e + 1) * m]
            );
            assert_eq!(
                &g2.leaf_values[new_e * l..(new_e + 1) * l],
                &g1.leaf_values[old_e * l..(old_e + 1) * l]
            );
        }
    }

    #[test]
    fn subset_masked_sample_contributes_nothing() {
        let params = small_params(6, 2, 2, 3);
        let table = PathTable::new(2).unwrap();
        let x = random_batch(6, 3, 3);
        let trace = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let lg = vec![0.5, -0.4, 0.8];
        // Exclude sample 1 from tree 0.
        let mut mask = vec![true; 3 * 2];
        mask[1 * 2 + 0] = false;
        let with_mask =
            backward_batch(&params, &table, &x, &trace, &lg, Some(&mask), SplitKind::Softsign)
                .unwrap();
        // Zeroing that sample's loss grad and restricting to tree 0 must match.
        let lg_zeroed = vec![0.5, 0.0, 0.8];
        let t_all = forward_batch(&params, &table, &x, SplitKind::Softsign, None).unwrap();
        let reference =
            backward_batch(&params, &table, &x, &t_all, &lg_zeroed, None, SplitKind::Softsign)
                .unwrap();
        let m = params.n_nodes() * params.n_features;
        // Tree 0's gradients agree with the run where sample 1 is absent.
        for i in 0..m {
            assert!((with_mask.thresholds[i] - reference.thresholds[i]).abs() < 1e-12);
        }
        let l = params.n_leaves();
        for i in 0..l {
            assert!((with_mask.leaf_values[i] - reference.leaf_values[i]).abs() < 1e-12);
        }
    }
}
