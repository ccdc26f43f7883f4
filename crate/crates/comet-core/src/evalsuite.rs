//! Evaluation metrics: code agreement, forgetting, zero-shot transfer,
//! retrieval recall, and codebook-sharing summaries.
//!
//! Everything here is deterministic given its inputs — the one trained
//! piece, the transfer probe, starts from zeros and runs fixed-step
//! full-batch gradient descent, so repeated calls agree bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::math;
use crate::numerics::layers::affine;
use crate::numerics::tape::Tape;
use crate::quantizer::ActivationStats;

/// Gradient steps for the zero-shot transfer probe.
const PROBE_STEPS: usize = 400;
/// Learning rate for the probe.
const PROBE_LR: f64 = 0.1;
/// Variance floor for probe feature standardization.
const PROBE_VAR_FLOOR: f64 = 1e-12;

/// Fraction of timesteps whose code index matches across two runs of the
/// same sequences through different modalities.
pub fn code_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(CoreError::EmptyInput("agreement over zero timesteps"));
    }
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "agreement inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.len() as f64)
}

/// Relative drop of a score across stages: (before − after) / before,
/// defined as 0 when there was nothing to lose. Negative values mean the
/// later stage improved the metric (backward transfer).
pub fn forgetting(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (before - after) / before
    }
}

/// Trains a linear softmax probe on one modality's code embeddings and
/// scores per-timestep accuracy on another's. Labels must be dense class
/// ids below `n_classes`.
pub fn zero_shot_transfer(
    train_e: &Mat,
    train_labels: &[usize],
    eval_e: &Mat,
    eval_labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if train_e.rows() == 0 || eval_e.rows() == 0 {
        return Err(CoreError::EmptyInput("transfer probe data"));
    }
    if train_e.rows() != train_labels.len() || eval_e.rows() != eval_labels.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "rows vs labels: {}/{} train, {}/{} eval",
            train_e.rows(),
            train_labels.len(),
            eval_e.rows(),
            eval_labels.len()
        )));
    }
    if train_e.cols() != eval_e.cols() {
        return Err(CoreError::DimensionMismatch(format!(
            "embedding widths differ: {} vs {}",
            train_e.cols(),
            eval_e.cols()
        )));
    }
    if n_classes < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "transfer needs ≥ 2 classes, got {n_classes}"
        )));
    }
    for &l in train_labels.iter().chain(eval_labels) {
        if l >= n_classes {
            return Err(CoreError::InvalidArgument(format!(
                "label {l} outside {n_classes} classes"
            )));
        }
    }

    // Standardize on train statistics so the probe is invariant to the
    // embedding scale; otherwise small-norm codebooks starve the fixed-rate
    // fit and the probe degenerates to the majority class.
    let d = train_e.cols();
    let mut mean = vec![0.0; d];
    for r in 0..train_e.rows() {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += train_e.at(r, j);
        }
    }
    for m in &mut mean {
        *m /= train_e.rows() as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..train_e.rows() {
        for (j, v) in var.iter_mut().enumerate() {
            let c = train_e.at(r, j) - mean[j];
            *v += c * c;
        }
    }
    let inv_sd: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / math::sqrt(v / train_e.rows() as f64 + PROBE_VAR_FLOOR))
        .collect();
    let standardize = |e: &Mat| Mat::from_fn(e.rows(), d, |r, j| (e.at(r, j) - mean[j]) * inv_sd[j]);
    let train_s = standardize(train_e);
    let eval_s = standardize(eval_e);

    let mut w = Mat::zeros(n_classes, d);
    let mut bias = Mat::zeros(1, n_classes);
    for _ in 0..PROBE_STEPS {
        let mut t = Tape::new();
        let wn = t.leaf(w.clone());
        let bn = t.leaf(bias.clone());
        let x = t.constant(train_s.clone());
        let logits = affine(&mut t, x, wn, bn);
        let lsm = t.log_softmax_rows(logits);
        let picked = t.take_per_row(lsm, train_labels.to_vec());
        let mean = t.mean_all(picked);
        let loss = t.scale(mean, -1.0);
        let grads = t.backward(loss);
        let gw = grads.get(wn).expect("probe weight gradient");
        let gb = grads.get(bn).expect("probe bias gradient");
        w.add_scaled(gw, -PROBE_LR);
        bias.add_scaled(gb, -PROBE_LR);
    }

    let mut hits = 0usize;
    for r in 0..eval_s.rows() {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let mut score = bias.at(0, c);
            for j in 0..d {
                score += w.at(c, j) * eval_s.at(r, j);
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == eval_labels[r] {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval_e.rows() as f64)
}

/// Per-class mean embedding rows (class c at row c). Every class below
/// `n_classes` must appear at least once.
pub fn class_mean_embeddings(e: &Mat, labels: &[usize], n_classes: usize) -> Result<Mat> {
    if e.rows() != labels.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} rows vs {} labels",
            e.rows(),
            labels.len()
        )));
    }
    let mut sums = Mat::zeros(n_classes, e.cols());
    let mut counts = alloc::vec![0usize; n_classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(CoreError::InvalidArgument(format!(
                "label {l} outside {n_classes} classes"
            )));
        }
        counts[l] += 1;
        for c in 0..e.cols() {
            sums.set(l, c, sums.at(l, c) + e.at(r, c));
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(CoreError::EmptyInput("a class has no embedding rows"));
        }
        let inv = 1.0 / n as f64;
        for c in 0..e.cols() {
            sums.set(l, c, sums.at(l, c) * inv);
        }
    }
    Ok(sums)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (math::sqrt(na) * math::sqrt(nb))
    }
}

/// Recall@k of class-aligned query rows against gallery rows by cosine
/// similarity. Ties rank the lower gallery index first, so results never
/// depend on sort internals.
pub fn retrieval_recall(query: &Mat, gallery: &Mat, k: usize) -> Result<f64> {
    if query.rows() == 0 {
        return Err(CoreError::EmptyInput("retrieval query set"));
    }
    if query.rows() != gallery.rows() || query.cols() != gallery.cols() {
        return Err(CoreError::DimensionMismatch(format!(
            "query {:?} vs gallery {:?}",
            query.shape(),
            gallery.shape()
        )));
    }
    if k == 0 || k > gallery.rows() {
        return Err(CoreError::InvalidArgument(format!(
            "recall@{k} over a gallery of {}",
            gallery.rows()
        )));
    }
    let mut hits = 0usize;
    for qi in 0..query.rows() {
        let target_sim = cosine(query.row(qi), gallery.row(qi));
        // Rank of the matching row: galleries beating it outright, plus
        // equal-similarity rows at lower indices.
        let mut rank = 0usize;
        for gi in 0..gallery.rows() {
            if gi == qi {
                continue;
            }
            let sim = cosine(query.row(qi), gallery.row(gi));
            if sim > target_sim || (sim == target_sim && gi < qi) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / query.rows() as f64)
}

/// Of the codes any modality effectively uses, the fraction claimed by at
/// least two modalities — the sharing signal the codebook exists for.
pub fn multimodal_fraction(stats: &ActivationStats) -> f64 {
    let active = stats.classes.iter().filter(|&&c| c >= 1).count();
    if active == 0 {
        return 0.0;
    }
    let shared = stats.classes.iter().filter(|&&c| c >= 2).count();
    shared as f64 / active as f64
}
