//! Elastic weight consolidation over the shared adapter.
//!
//! After each stage the trainer estimates a diagonal Fisher information
//! for the consolidation scope — expert common paths plus the specific
//! paths of modalities seen so far — and anchors the current values. Later
//! stages pay Σ (λ/2)·F_i·(θ_i − θ*_i)² per snapshot, which slows drift
//! on weights that mattered without freezing them. The router and all
//! per-modality encoder/decoder stacks stay outside the scope.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::params::ParamSet;

/// Paths covered by consolidation: every expert's common trunk, and the
/// specific branches belonging to modalities in `seen`.
pub fn select_scope(params: &ParamSet, seen: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for (path, _) in params.iter() {
        if !path.starts_with("adapter.expert") {
            continue;
        }
        if path.contains(".common.") {
            out.push(path.to_string());
        } else if let Some(rest) = path.split(".specific.").nth(1) {
            let modality = rest.split('.').next().unwrap_or("");
            if seen.iter().any(|m| m == modality) {
                out.push(path.to_string());
            }
        }
    }
    out
}

/// One stage's consolidation record: diagonal Fisher estimates and the
/// parameter values they were taken at.
#[derive(Debug, Clone)]
pub struct FisherSnapshot {
    fisher: ParamSet,
    anchor: ParamSet,
    lambda: f64,
}

impl FisherSnapshot {
    pub fn new(fisher: ParamSet, anchor: ParamSet, lambda: f64) -> Result<Self> {
        if fisher.len() != anchor.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "Fisher covers {} paths but anchor covers {}",
                fisher.len(),
                anchor.len()
            )));
        }
        for (path, f) in fisher.iter() {
            let a = anchor.get(path)?;
            if f.shape() != a.shape() {
                return Err(CoreError::DimensionMismatch(format!(
                    "Fisher/anchor shape mismatch at {path}: {:?} vs {:?}",
                    f.shape(),
                    a.shape()
                )));
            }
        }
        Ok(FisherSnapshot {
            fisher,
            anchor,
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fisher(&self) -> &ParamSet {
        &self.fisher
    }

    pub fn anchor(&self) -> &ParamSet {
        &self.anchor
    }

    pub fn paths(&self) -> Vec<String> {
        self.fisher.paths()
    }
}

/// Quadratic penalty of `params` against one snapshot.
pub fn ewc_loss(params: &ParamSet, snap: &FisherSnapshot) -> Result<f64> {
    let mut total = 0.0;
    for (path, f) in snap.fisher.iter() {
        let theta = params.get(path)?;
        let anchor = snap.anchor.get(path)?;
        if theta.shape() != f.shape() {
            return Err(CoreError::DimensionMismatch(format!(
                "parameter {path} changed shape since consolidation: {:?} vs {:?}",
                theta.shape(),
                f.shape()
            )));
        }
        let mut acc = 0.0;
        for ((t, a), fi) in theta.data().iter().zip(anchor.data()).zip(f.data()) {
            let d = t - a;
            acc += fi * d * d;
        }
        total += 0.5 * snap.lambda * acc;
    }
    Ok(total)
}

/// Sum of [`ewc_loss`] over every snapshot accumulated so far.
pub fn ewc_loss_all(params: &ParamSet, snaps: &[FisherSnapshot]) -> Result<f64> {
    let mut total = 0.0;
    for snap in snaps {
        total += ewc_loss(params, snap)?;
    }
    Ok(total)
}

/// Adds the penalty gradient λ·F·(θ − θ*) for every snapshot into `grads`,
/// creating zero entries for scoped paths not present yet.
pub fn accumulate_ewc_grads(
    params: &ParamSet,
    snaps: &[FisherSnapshot],
    grads: &mut alloc::collections::BTreeMap<String, Mat>,
) -> Result<()> {
    for snap in snaps {
        for (path, f) in snap.fisher.iter() {
            let theta = params.get(path)?;
            let anchor = snap.anchor.get(path)?;
            let slot = grads
                .entry(path.to_string())
                .or_insert_with(|| Mat::zeros(theta.rows(), theta.cols()));
            if slot.shape() != theta.shape() {
                return Err(CoreError::DimensionMismatch(format!(
                    "gradient for {path} has shape {:?}, parameter {:?}",
                    slot.shape(),
                    theta.shape()
                )));
            }
            for (i, g) in slot.data_mut().iter_mut().enumerate() {
                *g += snap.lambda * f.data()[i] * (theta.data()[i] - anchor.data()[i]);
            }
        }
    }
    Ok(())
}

/// Running mean of squared per-example gradients for a fixed scope.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sums: ParamSet,
    count: usize,
}

impl FisherAccumulator {
    /// Starts an estimate over `scope` paths, shaped after `params`.
    pub fn new(params: &ParamSet, scope: &[String]) -> Result<Self> {
        let mut sums = ParamSet::new();
        for path in scope {
            let p = params.get(path)?;
            sums.insert(path, Mat::zeros(p.rows(), p.cols()));
        }
        Ok(FisherAccumulator { sums, count: 0 })
    }

    /// Folds in one example's gradient; scoped paths absent from `grads`
    /// contribute zero.
    pub fn accumulate(
        &mut self,
        grads: &alloc::collections::BTreeMap<String, Mat>,
    ) -> Result<()> {
        for (path, sum) in self.sums.iter_mut() {
            if let Some(g) = grads.get(path) {
                if g.shape() != sum.shape() {
                    return Err(CoreError::DimensionMismatch(format!(
                        "gradient for {path} has shape {:?}, accumulator {:?}",
                        g.shape(),
                        sum.shape()
                    )));
                }
                for (s, gi) in sum.data_mut().iter_mut().zip(g.data()) {
                    *s += gi * gi;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Closes the estimate into a snapshot anchored at the current values.
    pub fn finish(self, params: &ParamSet, lambda: f64) -> Result<FisherSnapshot> {
        if self.count == 0 {
            return Err(CoreError::EmptyInput("Fisher estimate over zero examples"));
        }
        let inv = 1.0 / self.count as f64;
        let mut fisher = ParamSet::new();
        let mut anchor = ParamSet::new();
        for (path, sum) in self.sums.iter() {
            let mut f = sum.clone();
            f.scale_in_place(inv);
            fisher.insert(path, f);
            anchor.insert(path, params.get(path)?.clone());
        }
        FisherSnapshot::new(fisher, anchor, lambda)
    }
}
