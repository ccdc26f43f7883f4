//! The staged training loop.
//!
//! One stage pairs the mediator with a partner modality. Per step the
//! main tape computes reconstruction, commitment, bidirectional CPC, the
//! CLUB penalty (q frozen), the gate-balance term, and — from stage 2 —
//! pseudo-modality replay; EWC gradients join analytically. Adam then
//! updates the networks, an auxiliary tape refits each modality's q on
//! the step's pre-update features, and the codebook absorbs the step via
//! the cross-attended MM-EMA rule. All randomness (shuffles, CPC anchor
//! positions) derives from the model seed, stage, epoch, and step, so a
//! rerun reproduces every update bit for bit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapter::gate_load_loss;
use crate::error::{CoreError, Result};
use crate::ewc::{
    accumulate_ewc_grads, ewc_loss_all, select_scope, FisherAccumulator, FisherSnapshot,
};
use crate::mat::Mat;
use crate::math;
use crate::model::{
    bind_pair_heads, bind_summarizer, bind_variational, forward_modality, GraphBinder, Model,
    PSEUDO_NAME,
};
use crate::numerics::layers::{cross_attention_mat, recurrent_summarize};
use crate::numerics::tape::{NodeId, Tape};
use crate::objectives::{
    anchor_row_indices, club_aux_nll, club_upper_bound, cross_cpc_loss, future_row_indices,
    recon_loss, total_loss, LossComponents, LossWeights,
};
use crate::pmr::{
    anchor_step_weights, build_pseudo_batch, pmr_cpc_loss, pseudo_embedding_rows,
    teacher_fraction, ReplayHeads,
};
use crate::quantizer::{commitment_loss, expand, mm_ema_update, Assignments};
use crate::rng;
use crate::synthgen::{PairSample, StageDataset};

/// Optimization constants for one run. Codebook constants (γ, ε_N) live
/// on the codebook itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    /// Commitment coefficient β.
    pub beta: f64,
    /// EWC strength λ.
    pub lambda: f64,
    pub batch_pairs: usize,
    pub epochs: usize,
    /// Training examples scored for each stage-end Fisher estimate.
    pub fisher_sample: usize,
    pub use_pmr: bool,
    pub use_gate_loss: bool,
    pub use_ewc: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            beta: 0.25,
            lambda: 100.0,
            batch_pairs: 32,
            epochs: 20,
            fisher_sample: 256,
            use_pmr: true,
            use_gate_loss: true,
            use_ewc: true,
        }
    }
}

/// What one stage trains: the pair, and how many codes to add on entry
/// (ignored for stage 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: usize,
    pub mediator: String,
    pub partner: String,
    pub k2: usize,
}

/// One training step's reported losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_recon: f64,
    pub loss_commit: f64,
    pub loss_cpc: f64,
    pub loss_mi: f64,
    pub loss_gate: f64,
    pub loss_pmr: f64,
    pub loss_ewc: f64,
    pub teacher_fraction: f64,
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow);
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) {}
}

/// Keeps every row in memory.
#[derive(Default)]
pub struct VecSink {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, row: &MetricsRow) {
        self.rows.push(*row);
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Mat,
    v: Mat,
    t: u64,
}

/// Adam with per-path moment slots; paths missing from an update keep
/// their state untouched.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    slots: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            slots: BTreeMap::new(),
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ParamSetRef<'_>,
        grads: &BTreeMap<String, Mat>,
    ) -> Result<()> {
        for (path, g) in grads {
            let theta = params.0.get_mut(path)?;
            if theta.shape() != g.shape() {
                return Err(CoreError::DimensionMismatch(format!(
                    "gradient for {path} has shape {:?}, parameter {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let slot = self.slots.entry(path.clone()).or_insert_with(|| Moments {
                m: Mat::zeros(g.rows(), g.cols()),
                v: Mat::zeros(g.rows(), g.cols()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - math::pow(ADAM_BETA1, slot.t as f64);
            let bc2 = 1.0 - math::pow(ADAM_BETA2, slot.t as f64);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = ADAM_BETA1 * slot.m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * slot.v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let step = self.lr * (m / bc1) / (math::sqrt(v / bc2) + ADAM_EPS);
                theta.data_mut()[i] -= step;
            }
        }
        Ok(())
    }
}

/// Thin newtype so [`AdamState::apply`] can take the parameter set without
/// committing to the concrete container in its signature.
pub struct ParamSetRef<'a>(pub &'a mut crate::params::ParamSet);

fn fisher_yates(order: &mut [usize], seed: u64) {
    let mut r = rng::stream(seed);
    for i in (1..order.len()).rev() {
        let j = ((rng::uniform(&mut r) * (i + 1) as f64) as usize).min(i);
        order.swap(i, j);
    }
}

/// Stacks one side of the sampled pairs into a (batch·steps)×d matrix,
/// sequence-major.
fn stack_side(samples: &[&PairSample], side_a: bool, steps: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(samples.len() * steps, d);
    for (s, sample) in samples.iter().enumerate() {
        let src = if side_a { &sample.x_a } else { &sample.x_b };
        for t in 0..steps {
            out.row_mut(s * steps + t).copy_from_slice(src.row(t));
        }
    }
    out
}

fn seq_block(src: &Mat, s: usize, steps: usize) -> Mat {
    Mat::from_fn(steps, src.cols(), |r, c| src.at(s * steps + r, c))
}

/// Feature values captured from the main tape for the auxiliary q step
/// and the codebook EMA update.
struct StepCapture {
    z_a: Mat,
    zbar_a: Mat,
    idx_a: Vec<usize>,
    z_b: Mat,
    zbar_b: Mat,
    idx_b: Vec<usize>,
}

/// Runs one stage end to end: expansion (stage ≥ 2), parameter creation,
/// the epoch loop, and the stage-end Fisher estimate. Only this stage's
/// dataset is reachable, which is what enforces the staged protocol.
pub fn run_stage(
    model: &mut Model,
    plan: &StagePlan,
    data: &StageDataset,
    hyper: &Hyper,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    if plan.stage == 0 {
        return Err(CoreError::InvalidArgument("stages are 1-based".into()));
    }
    if data.stage != plan.stage
        || data.mediator != plan.mediator
        || data.partner != plan.partner
    {
        return Err(CoreError::InvalidArgument(format!(
            "dataset is for stage {} ({} ↔ {}), plan wants stage {} ({} ↔ {})",
            data.stage, data.mediator, data.partner, plan.stage, plan.mediator, plan.partner
        )));
    }
    if data.d_raw != model.cfg.d_raw {
        return Err(CoreError::DimensionMismatch(format!(
            "dataset raw width {} vs model {}",
            data.d_raw, model.cfg.d_raw
        )));
    }
    if data.steps < model.cfg.k_steps + 1 {
        return Err(CoreError::InvalidArgument(format!(
            "sequences of {} steps cannot anchor {}-step CPC",
            data.steps, model.cfg.k_steps
        )));
    }

    if plan.stage >= 2 {
        let (grown, teacher) = expand(
            &model.codebook,
            plan.k2,
            rng::derive(model.seed, &[rng::str_tag("expand"), plan.stage as u64]),
        );
        model.codebook = grown;
        model.teacher = Some(teacher);
    }
    model.ensure_modality(&plan.mediator)?;
    model.ensure_modality(&plan.partner)?;
    model.ensure_pair(&plan.mediator, &plan.partner)?;
    if hyper.use_pmr && plan.stage >= 2 {
        model.ensure_pseudo(&plan.mediator)?;
        model.ensure_pseudo(&plan.partner)?;
    }

    let mut adam = AdamState::new(hyper.lr);
    let n = data.train.len();
    if hyper.epochs > 0 && n == 0 {
        return Err(CoreError::EmptyInput("stage training set"));
    }
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        fisher_yates(
            &mut order,
            rng::derive(
                model.seed,
                &[rng::str_tag("shuffle"), plan.stage as u64, epoch as u64],
            ),
        );
        for (step, chunk) in order.chunks(hyper.batch_pairs.max(1)).enumerate() {
            let samples: Vec<&PairSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let x_a = stack_side(&samples, true, data.steps, data.d_raw);
            let x_b = stack_side(&samples, false, data.steps, data.d_raw);
            let step_seed = rng::derive(
                model.seed,
                &[
                    rng::str_tag("step"),
                    plan.stage as u64,
                    epoch as u64,
                    step as u64,
                ],
            );
            let mut row = train_step(
                model,
                hyper,
                plan,
                &x_a,
                &x_b,
                samples.len(),
                data.steps,
                step_seed,
                &mut adam,
            )?;
            row.epoch = epoch;
            row.step = step;
            sink.record(&row);
        }
    }

    if hyper.use_ewc && !data.train.is_empty() {
        let snap = estimate_fisher(model, plan, data, hyper)?;
        model.fishers.push(snap);
    }
    Ok(())
}

/// Sums per-modality CLUB bounds, dropping (value and gradient) any bound
/// that is non-positive. Mutual information is non-negative, so a negative
/// estimate only reflects slack in the auxiliary fit; letting the encoder
/// chase it drives feature norms unboundedly without reducing dependence.
fn clamp_mi(t: &mut Tape, mia: NodeId, mib: NodeId) -> NodeId {
    let ga = if t.scalar_value(mia) > 0.0 {
        mia
    } else {
        t.scale(mia, 0.0)
    };
    let gb = if t.scalar_value(mib) > 0.0 {
        mib
    } else {
        t.scale(mib, 0.0)
    };
    t.add(ga, gb)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    hyper: &Hyper,
    plan: &StagePlan,
    x_a: &Mat,
    x_b: &Mat,
    batch: usize,
    steps: usize,
    step_seed: u64,
    adam: &mut AdamState,
) -> Result<MetricsRow> {
    let cfg = model.cfg;
    let k = cfg.k_steps;
    let anchor_count = steps - k;
    let mut ar = rng::stream(rng::derive(step_seed, &[rng::str_tag("anchor")]));
    let t_anchor =
        ((rng::uniform(&mut ar) * anchor_count as f64) as usize).min(anchor_count - 1);
    let med = plan.mediator.as_str();
    let par = plan.partner.as_str();
    let use_pmr = hyper.use_pmr && plan.stage >= 2 && model.teacher.is_some();

    let mut comps = LossComponents::default();
    let mut teacher_frac = 0.0;
    let (mut grad_map, capture) = {
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&model.params, |p: &str| !p.starts_with("q."));
        let fa = forward_modality(&mut t, &mut b, &cfg, &model.codebook, med, x_a, batch)?;
        let fb = forward_modality(&mut t, &mut b, &cfg, &model.codebook, par, x_b, batch)?;

        let ra = recon_loss(&mut t, fa.xhat, x_a);
        let rb = recon_loss(&mut t, fb.xhat, x_b);
        let recon = t.add(ra, rb);
        let ca = commitment_loss(&mut t, fa.z, &fa.quant.e_seq, hyper.beta);
        let cb = commitment_loss(&mut t, fb.z, &fb.quant.e_seq, hyper.beta);
        let commit = t.add(ca, cb);

        let a_idx = anchor_row_indices(batch, steps, t_anchor)?;
        let f_idx = future_row_indices(batch, steps, t_anchor, k)?;
        let ctx_a = t.gather_rows(fa.ctx, a_idx.clone());
        let ctx_b = t.gather_rows(fb.ctx, a_idx.clone());
        let cand_a = t.gather_rows(fa.z, f_idx.clone());
        let cand_b = t.gather_rows(fb.z, f_idx.clone());
        let h_ab = bind_pair_heads(&mut t, &mut b, med, par, k)?;
        let h_ba = bind_pair_heads(&mut t, &mut b, par, med, k)?;
        let l_ab = cross_cpc_loss(&mut t, ctx_a, cand_b, &h_ab, batch, k, None)?;
        let l_ba = cross_cpc_loss(&mut t, ctx_b, cand_a, &h_ba, batch, k, None)?;
        let cpc = t.add(l_ab, l_ba);

        let qa = bind_variational(&mut t, &mut b, med)?;
        let qb = bind_variational(&mut t, &mut b, par)?;
        let mia = club_upper_bound(&mut t, fa.z, fa.zbar, &qa)?;
        let mib = club_upper_bound(&mut t, fb.z, fb.zbar, &qb)?;
        let mi = t.add(mia, mib);
        let mi_eff = clamp_mi(&mut t, mia, mib);

        let mut total = t.add(recon, commit);
        total = t.add(total, cpc);
        total = t.add(total, mi_eff);

        comps.recon = t.scalar_value(recon);
        comps.commit = t.scalar_value(commit);
        comps.cpc = t.scalar_value(cpc);
        comps.mi = t.scalar_value(mi);

        if hyper.use_gate_loss {
            let ga = gate_load_loss(&mut t, fa.gates);
            let gb = gate_load_loss(&mut t, fb.gates);
            let gate = t.add(ga, gb);
            comps.gate = t.scalar_value(gate);
            total = t.add(total, gate);
        }

        if use_pmr {
            let teacher = model.teacher.as_ref().expect("checked above");
            let z_med = t.value(fa.z).clone();
            let seqs = build_pseudo_batch(&z_med, batch, &model.codebook, teacher)?;
            teacher_frac = teacher_fraction(&seqs);
            let pe = pseudo_embedding_rows(&seqs, &model.codebook, teacher)?;
            let pe_n = t.constant(pe);
            let sum_p = bind_summarizer(&mut t, &mut b, PSEUDO_NAME)?;
            let ctx_p_full = recurrent_summarize(&mut t, pe_n, batch, steps, &sum_p);
            let ctx_p = t.gather_rows(ctx_p_full, a_idx.clone());
            let cand_p = t.gather_rows(pe_n, f_idx.clone());
            let weights = anchor_step_weights(&seqs, t_anchor, k)?;
            let h_pm = bind_pair_heads(&mut t, &mut b, PSEUDO_NAME, med, k)?;
            let h_mp = bind_pair_heads(&mut t, &mut b, med, PSEUDO_NAME, k)?;
            let h_pp = bind_pair_heads(&mut t, &mut b, PSEUDO_NAME, par, k)?;
            let h_pr = bind_pair_heads(&mut t, &mut b, par, PSEUDO_NAME, k)?;
            let heads = ReplayHeads {
                pseudo_to_b: &h_pm,
                b_to_pseudo: &h_mp,
                pseudo_to_c: &h_pp,
                c_to_pseudo: &h_pr,
            };
            let pmr_node = pmr_cpc_loss(
                &mut t, ctx_p, ctx_a, ctx_b, cand_p, cand_a, cand_b, &heads, batch, k, &weights,
            )?;
            comps.pmr = t.scalar_value(pmr_node);
            total = t.add(total, pmr_node);
        }

        // Finiteness gate: names the offending component on failure.
        total_loss(&comps, &LossWeights::default(), None)?;

        let grads = t.backward(total);
        let map = b.gradient_map(&grads);
        let capture = StepCapture {
            z_a: t.value(fa.z).clone(),
            zbar_a: t.value(fa.zbar).clone(),
            idx_a: fa.quant.indices.clone(),
            z_b: t.value(fb.z).clone(),
            zbar_b: t.value(fb.zbar).clone(),
            idx_b: fb.quant.indices.clone(),
        };
        (map, capture)
    };

    let mut ewc_val = 0.0;
    if hyper.use_ewc && !model.fishers.is_empty() {
        ewc_val = ewc_loss_all(&model.params, &model.fishers)?;
        if !ewc_val.is_finite() {
            return Err(CoreError::NonFinite("loss component ewc".into()));
        }
        accumulate_ewc_grads(&model.params, &model.fishers, &mut grad_map)?;
    }
    adam.apply(&mut ParamSetRef(&mut model.params), &grad_map)?;

    // Auxiliary pass: refit each q on this step's pre-update features.
    let qmap = {
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&model.params, |p: &str| p.starts_with("q."));
        let za = t.constant(capture.z_a.clone());
        let zba = t.constant(capture.zbar_a.clone());
        let qa = bind_variational(&mut t, &mut b, med)?;
        let nla = club_aux_nll(&mut t, za, zba, &qa);
        let zb = t.constant(capture.z_b.clone());
        let zbb = t.constant(capture.zbar_b.clone());
        let qb = bind_variational(&mut t, &mut b, par)?;
        let nlb = club_aux_nll(&mut t, zb, zbb, &qb);
        let aux = t.add(nla, nlb);
        if !t.scalar_value(aux).is_finite() {
            return Err(CoreError::NonFinite("aux q likelihood".into()));
        }
        let grads = t.backward(aux);
        b.gradient_map(&grads)
    };
    adam.apply(&mut ParamSetRef(&mut model.params), &qmap)?;

    // Codebook step: per-sequence cross attention, then MM-EMA.
    {
        let d = cfg.d_sem;
        let mut r_b = Mat::zeros(batch * steps, d);
        let mut r_a = Mat::zeros(batch * steps, d);
        for s in 0..batch {
            let za_s = seq_block(&capture.z_a, s, steps);
            let zb_s = seq_block(&capture.z_b, s, steps);
            let rb_s = cross_attention_mat(&za_s, &zb_s)?;
            let ra_s = cross_attention_mat(&zb_s, &za_s)?;
            for t in 0..steps {
                r_b.row_mut(s * steps + t).copy_from_slice(rb_s.row(t));
                r_a.row_mut(s * steps + t).copy_from_slice(ra_s.row(t));
            }
        }
        mm_ema_update(
            &mut model.codebook,
            Assignments {
                z: &capture.z_a,
                indices: &capture.idx_a,
            },
            Assignments {
                z: &capture.z_b,
                indices: &capture.idx_b,
            },
            &r_b,
            &r_a,
        )?;
    }

    Ok(MetricsRow {
        stage: plan.stage,
        epoch: 0,
        step: 0,
        loss_recon: comps.recon,
        loss_commit: comps.commit,
        loss_cpc: comps.cpc,
        loss_mi: comps.mi,
        loss_gate: comps.gate,
        loss_pmr: comps.pmr,
        loss_ewc: ewc_val,
        teacher_fraction: teacher_frac,
    })
}

/// Diagonal Fisher over the consolidation scope, scored on single-pair
/// examples with the task objective (reconstruction + commitment + CPC +
/// CLUB; no gate, replay, or EWC terms).
fn estimate_fisher(
    model: &Model,
    plan: &StagePlan,
    data: &StageDataset,
    hyper: &Hyper,
) -> Result<FisherSnapshot> {
    let scope = select_scope(&model.params, &model.modalities);
    let scope_set: BTreeSet<&str> = scope.iter().map(|s| s.as_str()).collect();
    let mut acc = FisherAccumulator::new(&model.params, &scope)?;
    let cfg = model.cfg;
    let k = cfg.k_steps;
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    fisher_yates(
        &mut order,
        rng::derive(
            model.seed,
            &[rng::str_tag("fisher"), plan.stage as u64],
        ),
    );
    let take = hyper.fisher_sample.min(n);
    for (i, &idx) in order[..take].iter().enumerate() {
        let sample = &data.train[idx];
        let mut ar = rng::stream(rng::derive(
            model.seed,
            &[rng::str_tag("fisher-anchor"), plan.stage as u64, i as u64],
        ));
        let anchor_count = data.steps - k;
        let t_anchor =
            ((rng::uniform(&mut ar) * anchor_count as f64) as usize).min(anchor_count - 1);

        let mut t = Tape::new();
        let mut b = GraphBinder::new(&model.params, |p: &str| scope_set.contains(p));
        let fa = forward_modality(
            &mut t,
            &mut b,
            &cfg,
            &model.codebook,
            &plan.mediator,
            &sample.x_a,
            1,
        )?;
        let fb = forward_modality(
            &mut t,
            &mut b,
            &cfg,
            &model.codebook,
            &plan.partner,
            &sample.x_b,
            1,
        )?;
        let ra = recon_loss(&mut t, fa.xhat, &sample.x_a);
        let rb = recon_loss(&mut t, fb.xhat, &sample.x_b);
        let ca = commitment_loss(&mut t, fa.z, &fa.quant.e_seq, hyper.beta);
        let cb = commitment_loss(&mut t, fb.z, &fb.quant.e_seq, hyper.beta);
        let a_idx = anchor_row_indices(1, data.steps, t_anchor)?;
        let f_idx = future_row_indices(1, data.steps, t_anchor, k)?;
        let ctx_a = t.gather_rows(fa.ctx, a_idx.clone());
        let ctx_b = t.gather_rows(fb.ctx, a_idx);
        let cand_a = t.gather_rows(fa.z, f_idx.clone());
        let cand_b = t.gather_rows(fb.z, f_idx);
        let h_ab = bind_pair_heads(&mut t, &mut b, &plan.mediator, &plan.partner, k)?;
        let h_ba = bind_pair_heads(&mut t, &mut b, &plan.partner, &plan.mediator, k)?;
        let l_ab = cross_cpc_loss(&mut t, ctx_a, cand_b, &h_ab, 1, k, None)?;
        let l_ba = cross_cpc_loss(&mut t, ctx_b, cand_a, &h_ba, 1, k, None)?;
        let qa = bind_variational(&mut t, &mut b, &plan.mediator)?;
        let qb = bind_variational(&mut t, &mut b, &plan.partner)?;
        let mia = club_upper_bound(&mut t, fa.z, fa.zbar, &qa)?;
        let mib = club_upper_bound(&mut t, fb.z, fb.zbar, &qb)?;
        let mi_eff = clamp_mi(&mut t, mia, mib);

        let mut total = t.add(ra, rb);
        for part in [ca, cb, l_ab, l_ba, mi_eff] {
            total = t.add(total, part);
        }
        if !t.scalar_value(total).is_finite() {
            return Err(CoreError::NonFinite("Fisher scoring objective".into()));
        }
        let grads = t.backward(total);
        acc.accumulate(&b.gradient_map(&grads))?;
    }
    acc.finish(&model.params, hyper.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodebookConfig, ModelConfig};
    use crate::synthgen::{generate_stage_dataset, ModalityRenderer, StageSpec};
    use alloc::string::ToString;
    use alloc::vec;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_raw: 6,
            d_sem: 4,
            d_spec: 3,
            d_ctx: 5,
            hidden: 8,
            n_experts: 3,
            k_steps: 2,
            use_specific: true,
        }
    }

    fn tiny_cb() -> CodebookConfig {
        CodebookConfig {
            k: 8,
            ..CodebookConfig::default()
        }
    }

    fn tiny_hyper() -> Hyper {
        Hyper {
            lr: 3e-3,
            batch_pairs: 4,
            epochs: 2,
            fisher_sample: 4,
            ..Hyper::default()
        }
    }

    fn renderers(mods: &[&str], seed: u64) -> BTreeMap<String, ModalityRenderer> {
        let mut map = BTreeMap::new();
        for (i, m) in mods.iter().enumerate() {
            map.insert(
                m.to_string(),
                ModalityRenderer::new(m, 6, 6, 2, 0.1, seed + i as u64).unwrap(),
            );
        }
        map
    }

    fn stage_data(stage: usize, mediator: &str, partner: &str, pool: Vec<usize>, seed: u64) -> StageDataset {
        let spec = StageSpec {
            stage,
            mediator: mediator.to_string(),
            partner: partner.to_string(),
            pool,
            n_train: 8,
            n_eval: 4,
            steps: 6,
            p_stay: 0.6,
        };
        let r = renderers(&["alpha", "beta", "gamma"], 100);
        generate_stage_dataset(&spec, &r, seed).unwrap()
    }

    fn plan(stage: usize, mediator: &str, partner: &str) -> StagePlan {
        StagePlan {
            stage,
            mediator: mediator.to_string(),
            partner: partner.to_string(),
            k2: 4,
        }
    }

    #[test]
    fn stage_one_trains_and_records_metrics() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 7).unwrap();
        let data = stage_data(1, "alpha", "beta", vec![0, 1, 2], 55);
        let hyper = tiny_hyper();
        let mut sink = VecSink::default();
        run_stage(&mut m, &plan(1, "alpha", "beta"), &data, &hyper, &mut sink).unwrap();

        // 8 samples, batches of 4, 2 epochs.
        assert_eq!(sink.rows.len(), 4);
        for row in &sink.rows {
            assert_eq!(row.stage, 1);
            assert_eq!(row.loss_pmr, 0.0);
            assert_eq!(row.loss_ewc, 0.0);
            assert_eq!(row.teacher_fraction, 0.0);
            assert!(row.loss_recon.is_finite() && row.loss_recon > 0.0);
            assert!(row.loss_cpc.is_finite());
        }
        assert_eq!(sink.rows[0].epoch, 0);
        assert_eq!(sink.rows[3].epoch, 1);
        assert_eq!(sink.rows[3].step, 1);
        // Stage end estimated a Fisher over both modalities' scope.
        assert_eq!(m.fishers.len(), 1);
        assert!(m.fishers[0]
            .paths()
            .iter()
            .any(|p| p.contains(".specific.beta.")));
        assert!(m.teacher.is_none());
    }

    #[test]
    fn reported_recon_drops_over_training() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 11).unwrap();
        let data = stage_data(1, "alpha", "beta", vec![0, 1, 2], 66);
        let hyper = Hyper {
            epochs: 30,
            use_ewc: false,
            ..tiny_hyper()
        };
        let mut sink = VecSink::default();
        run_stage(&mut m, &plan(1, "alpha", "beta"), &data, &hyper, &mut sink).unwrap();
        let first: f64 = sink.rows[..2].iter().map(|r| r.loss_recon).sum::<f64>() / 2.0;
        let last_rows = &sink.rows[sink.rows.len() - 2..];
        let last: f64 = last_rows.iter().map(|r| r.loss_recon).sum::<f64>() / 2.0;
        assert!(
            last < first,
            "reconstruction did not improve: {first} → {last}"
        );
    }

    #[test]
    fn stage_two_expands_consolidates_and_replays() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 13).unwrap();
        let hyper = tiny_hyper();
        let d1 = stage_data(1, "alpha", "beta", vec![0, 1, 2], 70);
        run_stage(&mut m, &plan(1, "alpha", "beta"), &d1, &hyper, &mut NullSink).unwrap();
        assert_eq!(m.codebook.len(), 8);

        let d2 = stage_data(2, "alpha", "gamma", vec![1, 2, 3, 4], 71);
        let mut sink = VecSink::default();
        run_stage(&mut m, &plan(2, "alpha", "gamma"), &d2, &hyper, &mut sink).unwrap();
        assert_eq!(m.codebook.len(), 12);
        assert_eq!(m.codebook.k1(), 8);
        let teacher = m.teacher.as_ref().unwrap();
        assert_eq!(teacher.len(), 8);
        assert!(m.params.contains("ctx.pseudo.wu"));
        assert!(m.params.contains("cpc.pseudo2gamma.w1"));
        assert_eq!(m.fishers.len(), 2);
        for row in &sink.rows {
            assert!(row.loss_pmr.is_finite());
            assert!(row.loss_ewc >= 0.0);
            assert!((0.0..=1.0).contains(&row.teacher_fraction));
        }
        // EWC must start engaging once parameters drift.
        assert!(sink.rows.iter().any(|r| r.loss_ewc > 0.0));
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut m = Model::new(tiny_cfg(), &tiny_cb(), 17).unwrap();
            let hyper = tiny_hyper();
            let d1 = stage_data(1, "alpha", "beta", vec![0, 1, 2], 80);
            run_stage(&mut m, &plan(1, "alpha", "beta"), &d1, &hyper, &mut NullSink).unwrap();
            let d2 = stage_data(2, "alpha", "gamma", vec![1, 2, 3], 81);
            let mut sink = VecSink::default();
            run_stage(&mut m, &plan(2, "alpha", "gamma"), &d2, &hyper, &mut sink).unwrap();
            (m, sink.rows)
        };
        let (m1, rows1) = run();
        let (m2, rows2) = run();
        assert_eq!(rows1, rows2);
        for (path, v) in m1.params.iter() {
            assert_eq!(v, m2.params.get(path).unwrap(), "{path}");
        }
        assert_eq!(m1.codebook.codes(), m2.codebook.codes());
        assert_eq!(m1.codebook.counts(), m2.codebook.counts());
    }

    #[test]
    fn zero_epochs_changes_nothing_but_still_consolidates() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 19).unwrap();
        m.ensure_modality("alpha").unwrap();
        m.ensure_modality("beta").unwrap();
        let before = m.params.clone();
        let codes_before = m.codebook.codes().clone();
        let data = stage_data(1, "alpha", "beta", vec![0, 1, 2], 90);
        let hyper = Hyper {
            epochs: 0,
            ..tiny_hyper()
        };
        let mut sink = VecSink::default();
        run_stage(&mut m, &plan(1, "alpha", "beta"), &data, &hyper, &mut sink).unwrap();
        assert!(sink.rows.is_empty());
        for (path, v) in before.iter() {
            assert_eq!(v, m.params.get(path).unwrap(), "{path}");
        }
        assert_eq!(*m.codebook.codes(), codes_before);
        // The Fisher estimate runs regardless — it reads, never writes.
        assert_eq!(m.fishers.len(), 1);
    }

    #[test]
    fn zero_lr_and_unit_gamma_freeze_all_state() {
        let cb = CodebookConfig {
            gamma: 1.0,
            ..tiny_cb()
        };
        let mut m = Model::new(tiny_cfg(), &cb, 23).unwrap();
        m.ensure_modality("alpha").unwrap();
        m.ensure_modality("beta").unwrap();
        m.ensure_pair("alpha", "beta").unwrap();
        let before = m.params.clone();
        let codes_before = m.codebook.codes().clone();
        let data = stage_data(1, "alpha", "beta", vec![0, 1, 2], 91);
        let hyper = Hyper {
            lr: 0.0,
            epochs: 1,
            use_ewc: false,
            ..tiny_hyper()
        };
        run_stage(&mut m, &plan(1, "alpha", "beta"), &data, &hyper, &mut NullSink).unwrap();
        for (path, v) in before.iter() {
            assert_eq!(v, m.params.get(path).unwrap(), "{path}");
        }
        assert_eq!(*m.codebook.codes(), codes_before);
    }

    #[test]
    fn ablation_flags_suppress_their_terms() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 29).unwrap();
        let hyper = Hyper {
            use_pmr: false,
            use_gate_loss: false,
            use_ewc: false,
            ..tiny_hyper()
        };
        let d1 = stage_data(1, "alpha", "beta", vec![0, 1, 2], 92);
        run_stage(&mut m, &plan(1, "alpha", "beta"), &d1, &hyper, &mut NullSink).unwrap();
        let d2 = stage_data(2, "alpha", "gamma", vec![1, 2, 3], 93);
        let mut sink = VecSink::default();
        run_stage(&mut m, &plan(2, "alpha", "gamma"), &d2, &hyper, &mut sink).unwrap();
        assert!(m.fishers.is_empty());
        assert!(!m.params.contains("ctx.pseudo.wu"));
        for row in &sink.rows {
            assert_eq!(row.loss_pmr, 0.0);
            assert_eq!(row.loss_gate, 0.0);
            assert_eq!(row.loss_ewc, 0.0);
            assert_eq!(row.teacher_fraction, 0.0);
        }
        // Expansion is part of the protocol, not an ablation.
        assert_eq!(m.codebook.len(), 12);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let mut m = Model::new(tiny_cfg(), &tiny_cb(), 31).unwrap();
        let data = stage_data(1, "alpha", "beta", vec![0, 1, 2], 94);
        let wrong = plan(1, "alpha", "gamma");
        assert!(run_stage(&mut m, &wrong, &data, &tiny_hyper(), &mut NullSink).is_err());
        let wrong_stage = plan(2, "alpha", "beta");
        assert!(run_stage(&mut m, &wrong_stage, &data, &tiny_hyper(), &mut NullSink).is_err());
    }
}
