//! Pseudo-modality replay.
//!
//! During stage s ≥ 2 each mediator sequence is re-expressed as a code
//! sequence: every semantic row snaps to its global nearest entry of the
//! expanded codebook. Steps landing in the inherited prefix replay the
//! frozen teacher embedding at full weight; steps claimed by new codes use
//! the live embedding down-weighted by e⁻⁶, so the replay signal is
//! dominated by what the previous stages knew. The pseudo stream then
//! joins CPC against both live modalities in all four directions, with
//! each positive's log-score multiplied by the pseudo weight at its
//! timestep.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::numerics::tape::{NodeId, Tape};
use crate::objectives::cross_cpc_loss;
use crate::quantizer::{quantize, TeacherSnapshot, UnifiedCodebook};

/// Replay weight for steps that quantize into codes added after the
/// teacher snapshot: e⁻⁶.
pub const NEW_CODE_WEIGHT: f64 = 2.4787521766663585e-3;

/// One sequence re-expressed as codebook indices with per-step provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSequence {
    /// Nearest code per timestep, searched over the whole live codebook.
    pub indices: Vec<usize>,
    /// 1 for teacher-prefix codes, [`NEW_CODE_WEIGHT`] otherwise.
    pub weights: Vec<f64>,
    /// Whether each step resolved inside the inherited prefix.
    pub from_teacher: Vec<bool>,
}

/// Builds pseudo sequences for a batch-stacked semantic matrix
/// (batch·steps rows, sequence-major).
pub fn build_pseudo_batch(
    z: &Mat,
    batch: usize,
    cb: &UnifiedCodebook,
    teacher: &TeacherSnapshot,
) -> Result<Vec<PseudoSequence>> {
    if teacher.len() != cb.k1() {
        return Err(CoreError::InvalidArgument(format!(
            "teacher holds {} codes but codebook prefix is {}",
            teacher.len(),
            cb.k1()
        )));
    }
    if z.cols() != cb.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "semantic dim {} vs codebook dim {}",
            z.cols(),
            cb.dim()
        )));
    }
    if batch == 0 || z.rows() % batch != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "{} rows do not stack into {batch} sequences",
            z.rows()
        )));
    }
    let steps = z.rows() / batch;
    let q = quantize(z, cb)?;
    let mut out = Vec::with_capacity(batch);
    for s in 0..batch {
        let span = &q.indices[s * steps..(s + 1) * steps];
        let from_teacher: Vec<bool> = span.iter().map(|&i| i < cb.k1()).collect();
        let weights = from_teacher
            .iter()
            .map(|&t| if t { 1.0 } else { NEW_CODE_WEIGHT })
            .collect();
        out.push(PseudoSequence {
            indices: span.to_vec(),
            weights,
            from_teacher,
        });
    }
    Ok(out)
}

/// Embedding rows for the pseudo stream, batch-stacked to match `seqs`:
/// teacher-prefix steps read the frozen teacher codes, the rest read the
/// live codebook.
pub fn pseudo_embedding_rows(
    seqs: &[PseudoSequence],
    cb: &UnifiedCodebook,
    teacher: &TeacherSnapshot,
) -> Result<Mat> {
    if seqs.is_empty() {
        return Err(CoreError::EmptyInput("no pseudo sequences"));
    }
    let steps = seqs[0].indices.len();
    let mut out = Mat::zeros(seqs.len() * steps, cb.dim());
    for (s, seq) in seqs.iter().enumerate() {
        if seq.indices.len() != steps {
            return Err(CoreError::DimensionMismatch(format!(
                "sequence {s} has {} steps, expected {steps}",
                seq.indices.len()
            )));
        }
        for (t, (&idx, &from_t)) in seq.indices.iter().zip(&seq.from_teacher).enumerate() {
            let src = if from_t {
                teacher.codes().row(idx)
            } else {
                cb.codes().row(idx)
            };
            out.row_mut(s * steps + t).copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Fraction of pseudo steps that resolved to teacher-prefix codes.
pub fn teacher_fraction(seqs: &[PseudoSequence]) -> f64 {
    let total: usize = seqs.iter().map(|s| s.from_teacher.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = seqs
        .iter()
        .map(|s| s.from_teacher.iter().filter(|&&t| t).count())
        .sum();
    hits as f64 / total as f64
}

/// Pseudo weights at the positions CPC will score: entry (s, k−1) is
/// sequence s's weight at timestep t_anchor + k.
pub fn anchor_step_weights(
    seqs: &[PseudoSequence],
    t_anchor: usize,
    k_steps: usize,
) -> Result<Mat> {
    if seqs.is_empty() {
        return Err(CoreError::EmptyInput("no pseudo sequences"));
    }
    let steps = seqs[0].weights.len();
    if t_anchor + k_steps >= steps {
        return Err(CoreError::InvalidArgument(format!(
            "anchor {t_anchor} with {k_steps} future steps overruns sequence of {steps}"
        )));
    }
    Ok(Mat::from_fn(seqs.len(), k_steps, |s, k| {
        seqs[s].weights[t_anchor + k + 1]
    }))
}

/// Step-k projection heads for the four replay directions.
pub struct ReplayHeads<'a> {
    pub pseudo_to_b: &'a [NodeId],
    pub b_to_pseudo: &'a [NodeId],
    pub pseudo_to_c: &'a [NodeId],
    pub c_to_pseudo: &'a [NodeId],
}

/// Sum of the four weighted InfoNCE directions between the pseudo stream
/// and the two live modalities. All share one B×K weight matrix taken
/// from the pseudo sequence at the scored positions.
#[allow(clippy::too_many_arguments)]
pub fn pmr_cpc_loss(
    t: &mut Tape,
    ctx_pseudo: NodeId,
    ctx_b: NodeId,
    ctx_c: NodeId,
    cand_pseudo: NodeId,
    cand_b: NodeId,
    cand_c: NodeId,
    heads: &ReplayHeads<'_>,
    batch: usize,
    k_steps: usize,
    weights: &Mat,
) -> Result<NodeId> {
    let legs = [
        (ctx_pseudo, cand_b, heads.pseudo_to_b),
        (ctx_b, cand_pseudo, heads.b_to_pseudo),
        (ctx_pseudo, cand_c, heads.pseudo_to_c),
        (ctx_c, cand_pseudo, heads.c_to_pseudo),
    ];
    let mut total: Option<NodeId> = None;
    for (anchor, cand, w_k) in legs {
        let leg = cross_cpc_loss(t, anchor, cand, w_k, batch, k_steps, Some(weights))?;
        total = Some(match total {
            None => leg,
            Some(acc) => t.add(acc, leg),
        });
    }
    Ok(total.expect("four legs"))
}
