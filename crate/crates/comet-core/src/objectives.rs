//! Training losses.
//!
//! The mutual-information penalty is the CLUB sample estimator: a
//! variational Gaussian q(z̄|z) scores matched rows against all cross
//! pairings, giving an upper bound that the main networks minimize while
//! the alternating auxiliary step fits q by maximum likelihood. Cross-CPC
//! is InfoNCE over each modality's future semantic rows predicted from the
//! other modality's causal context. Reconstruction is plain MSE, and the
//! total loss is a unit-weighted sum with an optional plug-in slot for a
//! cross-modal matching term that is off by default.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::math;
use crate::numerics::layers::affine;
use crate::numerics::tape::{NodeId, Tape};

/// Soft bound on the variational log-variance.
const LOGVAR_LIMIT: f64 = 8.0;

/// Tape handles for one modality's conditional density q(z̄|z): a 2-layer
/// perceptron with mean and log-variance heads.
#[derive(Debug, Clone, Copy)]
pub struct VariationalNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub wmu: NodeId,
    pub bmu: NodeId,
    pub wlv: NodeId,
    pub blv: NodeId,
}

/// Mean and log-variance of q(·|z) per row. The log-variance is kept in
/// (−8, 8) by a scaled tanh, which bounds it like a clamp while staying
/// differentiable everywhere.
pub fn variational_forward(t: &mut Tape, z: NodeId, q: &VariationalNodes) -> (NodeId, NodeId) {
    let pre = affine(t, z, q.w1, q.b1);
    let h = t.elu(pre);
    let mu = affine(t, h, q.wmu, q.bmu);
    let raw = affine(t, h, q.wlv, q.blv);
    let squashed = t.scale(raw, 1.0 / LOGVAR_LIMIT);
    let tanhed = t.tanh(squashed);
    let lv = t.scale(tanhed, LOGVAR_LIMIT);
    (mu, lv)
}

/// CLUB bound from explicit per-row Gaussian parameters:
/// mean_i log q(z̄_i|z_i) − (1/N²) Σ_i Σ_j log q(z̄_j|z_i).
///
/// The log-variance and 2π terms cancel between the two parts, leaving
/// 0.5·(X/N² − P/N) with P the matched and X the all-pairs weighted square
/// sums; X is assembled from column statistics instead of an N×N sweep.
pub fn club_bound_from(t: &mut Tape, mu: NodeId, logvar: NodeId, zbar: NodeId) -> Result<NodeId> {
    let n = t.value(zbar).rows();
    if n < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "CLUB estimator needs at least 2 rows, got {n}"
        )));
    }
    let neg_lv = t.scale(logvar, -1.0);
    let prec = t.exp(neg_lv);

    let diff = t.sub(zbar, mu);
    let diff_sq = t.mul(diff, diff);
    let matched = t.mul(diff_sq, prec);
    let p = t.sum_all(matched);

    let zb_sq = t.mul(zbar, zbar);
    let s1 = t.col_sums(zbar);
    let s2 = t.col_sums(zb_sq);
    let term1_m = t.mul_row_broadcast(prec, s2);
    let term1 = t.sum_all(term1_m);
    let mu_prec = t.mul(mu, prec);
    let term2_m = t.mul_row_broadcast(mu_prec, s1);
    let term2 = t.sum_all(term2_m);
    let mu_sq = t.mul(mu, mu);
    let term3_m = t.mul(mu_sq, prec);
    let term3 = t.sum_all(term3_m);

    let t2 = t.scale(term2, -2.0);
    let t3 = t.scale(term3, n as f64);
    let x12 = t.add(term1, t2);
    let x = t.add(x12, t3);

    let nf = n as f64;
    let xs = t.scale(x, 0.5 / (nf * nf));
    let ps = t.scale(p, -0.5 / nf);
    Ok(t.add(xs, ps))
}

/// CLUB bound with q evaluated through its network. In the main training
/// pass the q parameters enter as constants, so minimizing this moves the
/// producers of `z` and `zbar` only.
pub fn club_upper_bound(
    t: &mut Tape,
    z: NodeId,
    zbar: NodeId,
    q: &VariationalNodes,
) -> Result<NodeId> {
    let (mu, lv) = variational_forward(t, z, q);
    club_bound_from(t, mu, lv, zbar)
}

/// Mean negative log-likelihood −(1/N)Σ log q(z̄_i|z_i), the auxiliary
/// objective that fits q between main steps.
pub fn club_aux_nll(t: &mut Tape, z: NodeId, zbar: NodeId, q: &VariationalNodes) -> NodeId {
    let (mu, lv) = variational_forward(t, z, q);
    let n = t.value(zbar).rows().max(1) as f64;
    let d = t.value(zbar).cols() as f64;
    let neg_lv = t.scale(lv, -1.0);
    let prec = t.exp(neg_lv);
    let diff = t.sub(zbar, mu);
    let diff_sq = t.mul(diff, diff);
    let matched = t.mul(diff_sq, prec);
    let p = t.sum_all(matched);
    let sl = t.sum_all(lv);
    let quad = t.add(p, sl);
    let scaled = t.scale(quad, 0.5 / n);
    t.add_scalar(scaled, 0.5 * d * math::LN_2PI)
}

/// Reference log-density matrix L_ij = log q(z̄_j | z_i) for a diagonal
/// Gaussian with per-row parameters. Quadratic in N — test oracle only.
pub fn gaussian_logq_matrix(mu: &Mat, logvar: &Mat, zbar: &Mat) -> Mat {
    let n = zbar.rows();
    Mat::from_fn(n, n, |i, j| {
        let mut acc = 0.0;
        for d in 0..zbar.cols() {
            let lv = logvar.at(i, d);
            let diff = zbar.at(j, d) - mu.at(i, d);
            acc += diff * diff * math::exp(-lv) + lv + math::LN_2PI;
        }
        -0.5 * acc
    })
}

/// CLUB estimator from a precomputed log-density matrix: mean of the
/// diagonal minus the mean of everything.
pub fn club_from_logq(logq: &Mat) -> Result<f64> {
    let n = logq.rows();
    if n < 2 || logq.cols() != n {
        return Err(CoreError::InvalidArgument(format!(
            "log-density matrix must be square with N ≥ 2, got {}x{}",
            logq.rows(),
            logq.cols()
        )));
    }
    let diag: f64 = (0..n).map(|i| logq.at(i, i)).sum();
    let all: f64 = logq.data().iter().sum();
    Ok(diag / n as f64 - all / (n * n) as f64)
}

/// InfoNCE over `k_steps` future predictions, optionally weighting each
/// (sequence, step) term.
///
/// `c_anchor` holds one context row per sequence; `candidates` holds the
/// shared candidate set, laid out so row `s·k_steps + (k−1)` is sequence
/// s's positive for step k (every other row acts as a negative for that
/// pair). `w_k[k−1]` maps context to the step-k prediction. `weights`, if
/// given, is batch × k_steps and multiplies each positive's log-score.
pub fn cross_cpc_loss(
    t: &mut Tape,
    c_anchor: NodeId,
    candidates: NodeId,
    w_k: &[NodeId],
    batch: usize,
    k_steps: usize,
    weights: Option<&Mat>,
) -> Result<NodeId> {
    let m = t.value(candidates).rows();
    if m < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "CPC candidate set needs at least 2 rows, got {m}"
        )));
    }
    if w_k.len() != k_steps || k_steps == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "expected {k_steps} projection matrices, got {}",
            w_k.len()
        )));
    }
    if t.value(c_anchor).rows() != batch || m < batch * k_steps {
        return Err(CoreError::DimensionMismatch(format!(
            "CPC shapes: {} context rows for batch {batch}, {m} candidates for {} positives",
            t.value(c_anchor).rows(),
            batch * k_steps
        )));
    }
    if let Some(w) = weights {
        if w.shape() != (batch, k_steps) {
            return Err(CoreError::DimensionMismatch(format!(
                "CPC weights must be {batch}x{k_steps}, got {:?}",
                w.shape()
            )));
        }
    }

    let mut acc: Option<NodeId> = None;
    for ki in 0..k_steps {
        let pred = t.matmul_tb(c_anchor, w_k[ki]);
        let logits = t.matmul_tb(pred, candidates);
        let lsm = t.log_softmax_rows(logits);
        let cols: Vec<usize> = (0..batch).map(|s| s * k_steps + ki).collect();
        let mut picked = t.take_per_row(lsm, cols);
        if let Some(w) = weights {
            let col = Mat::from_fn(batch, 1, |s, _| w.at(s, ki));
            let wc = t.constant(col);
            picked = t.mul(picked, wc);
        }
        let s = t.sum_all(picked);
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s),
        });
    }
    let total = acc.expect("k_steps ≥ 1");
    Ok(t.scale(total, -1.0 / (batch * k_steps) as f64))
}

/// Row indices of each sequence's anchor timestep in a batch-stacked
/// (batch·steps) × d matrix laid out sequence-major.
pub fn anchor_row_indices(batch: usize, steps: usize, t_anchor: usize) -> Result<Vec<usize>> {
    if t_anchor >= steps {
        return Err(CoreError::InvalidArgument(format!(
            "anchor timestep {t_anchor} outside sequence of {steps} steps"
        )));
    }
    Ok((0..batch).map(|s| s * steps + t_anchor).collect())
}

/// Row indices of the k-step futures after `t_anchor`, ordered so entry
/// s·k_steps + (k−1) addresses sequence s at timestep t_anchor + k — the
/// candidate layout [`cross_cpc_loss`] expects.
pub fn future_row_indices(
    batch: usize,
    steps: usize,
    t_anchor: usize,
    k_steps: usize,
) -> Result<Vec<usize>> {
    if t_anchor + k_steps >= steps {
        return Err(CoreError::InvalidArgument(format!(
            "anchor {t_anchor} with {k_steps} future steps overruns sequence of {steps}"
        )));
    }
    let mut out = Vec::with_capacity(batch * k_steps);
    for s in 0..batch {
        for k in 1..=k_steps {
            out.push(s * steps + t_anchor + k);
        }
    }
    Ok(out)
}

/// Mean squared error against a fixed target.
pub fn recon_loss(t: &mut Tape, xhat: NodeId, x: &Mat) -> NodeId {
    assert_eq!(t.value(xhat).shape(), x.shape(), "recon shapes must match");
    let target = t.constant(x.clone());
    let diff = t.sub(xhat, target);
    let sq = t.mul(diff, diff);
    t.mean_all(sq)
}

/// Per-component loss values for one training step, in reporting order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub recon: f64,
    pub commit: f64,
    pub cpc: f64,
    pub mi: f64,
    pub gate: f64,
    pub pmr: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("commit", self.commit),
            ("cpc", self.cpc),
            ("mi", self.mi),
            ("gate", self.gate),
            ("pmr", self.pmr),
        ]
    }
}

/// Per-component multipliers; unit by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub commit: f64,
    pub cpc: f64,
    pub mi: f64,
    pub gate: f64,
    pub pmr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            commit: 1.0,
            cpc: 1.0,
            mi: 1.0,
            gate: 1.0,
            pmr: 1.0,
        }
    }
}

/// Weighted sum of the components plus whatever a registered cross-modal
/// matching hook contributes (0 when absent). Any non-finite component is
/// an error naming the offender.
pub fn total_loss(
    c: &LossComponents,
    w: &LossWeights,
    cmcm_hook: Option<&dyn Fn() -> f64>,
) -> Result<f64> {
    let cmcm = cmcm_hook.map(|h| h()).unwrap_or(0.0);
    let parts = [
        ("recon", c.recon * w.recon),
        ("commit", c.commit * w.commit),
        ("cpc", c.cpc * w.cpc),
        ("cmcm", cmcm),
        ("mi", c.mi * w.mi),
        ("gate", c.gate * w.gate),
        ("pmr", c.pmr * w.pmr),
    ];
    let mut total = 0.0;
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!("loss component {name}")));
        }
        total += v;
    }
    Ok(total)
}
