//! Shared discrete codebook.
//!
//! Codes are learned by multi-modal EMA — counts `N_i` and volumes `o_i`
//! decay by γ and absorb both modalities' assigned features together with
//! their cross-attention intermediaries; a code's vector is always the
//! ratio `o_i / N_i`. Between stages the codebook is replicated and grown
//! by `K2` fresh rows, and the pre-growth state is snapshotted as an
//! immutable teacher for pseudo-modality replay.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::numerics::tape::{NodeId, Tape};
use crate::rng::{derive, normal, str_tag, stream};

/// Counts below this are treated as dead: the `e = o/N` division is skipped
/// so near-zero denominators cannot blow up a code vector.
pub const DEFAULT_EPS_N: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedCodebook {
    /// K × D code vectors e_i.
    codes: Mat,
    /// EMA assignment counts N_i.
    counts: Vec<f64>,
    /// K × D EMA feature volumes o_i.
    volumes: Mat,
    gamma: f64,
    eps_n: f64,
    /// Frozen-prefix size carried from the previous stage; 0 in stage 1.
    k1: usize,
}

/// Immutable copy of a previous stage's final codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    codes: Mat,
}

impl TeacherSnapshot {
    pub fn codes(&self) -> &Mat {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn from_codes(codes: Mat) -> Self {
        TeacherSnapshot { codes }
    }
}

/// One modality's batch of features with their assigned code indices.
#[derive(Debug, Clone, Copy)]
pub struct Assignments<'a> {
    pub z: &'a Mat,
    pub indices: &'a [usize],
}

/// Result of nearest-code lookup for a feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// Rows are the selected code vectors.
    pub e_seq: Mat,
    /// Per-row squared distance to the selected code.
    pub dist_sq: Vec<f64>,
}

impl UnifiedCodebook {
    /// Fresh stage-1 codebook: codes drawn from N(0, init_scale²), counts
    /// seeded at ε_N with matching volumes so `e = o/N` holds from step 0.
    pub fn new(
        k: usize,
        d: usize,
        gamma: f64,
        init_scale: f64,
        eps_n: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "codebook needs k ≥ 1 and d ≥ 1, got {k}, {d}"
            )));
        }
        if !(0.0..1.0).contains(&gamma) && gamma != 1.0 {
            return Err(CoreError::InvalidArgument(format!(
                "decay factor must lie in (0,1], got {gamma}"
            )));
        }
        let mut r = stream(derive(seed, &[str_tag("codebook")]));
        let codes = Mat::from_fn(k, d, |_, _| normal(&mut r) * init_scale);
        let mut volumes = codes.clone();
        volumes.scale_in_place(eps_n);
        Ok(UnifiedCodebook {
            codes,
            counts: alloc::vec![eps_n; k],
            volumes,
            gamma,
            eps_n,
            k1: 0,
        })
    }

    /// Reassemble a codebook from serialized state. Consistency of `e` with
    /// `o/N` is the trainer's invariant, not re-derived here, so loading
    /// reproduces saved state bit-exactly.
    pub fn from_parts(
        codes: Mat,
        counts: Vec<f64>,
        volumes: Mat,
        gamma: f64,
        eps_n: f64,
        k1: usize,
    ) -> Result<Self> {
        if counts.len() != codes.rows() || volumes.shape() != codes.shape() {
            return Err(CoreError::DimensionMismatch(format!(
                "codebook parts disagree: {} codes, {} counts, volumes {:?}",
                codes.rows(),
                counts.len(),
                volumes.shape()
            )));
        }
        if k1 > codes.rows() {
            return Err(CoreError::InvalidArgument(format!(
                "frozen prefix {k1} exceeds codebook size {}",
                codes.rows()
            )));
        }
        Ok(UnifiedCodebook {
            codes,
            counts,
            volumes,
            gamma,
            eps_n,
            k1,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eps_n(&self) -> f64 {
        self.eps_n
    }

    pub fn codes(&self) -> &Mat {
        &self.codes
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn volumes(&self) -> &Mat {
        &self.volumes
    }
}

/// Nearest code per row of `z`; ties go to the lowest index.
pub fn quantize(z: &Mat, cb: &UnifiedCodebook) -> Result<Quantized> {
    if cb.is_empty() {
        return Err(CoreError::EmptyInput("codebook"));
    }
    if z.cols() != cb.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "features have {} dims, codebook has {}",
            z.cols(),
            cb.dim()
        )));
    }
    let mut indices = Vec::with_capacity(z.rows());
    let mut dist_sq = Vec::with_capacity(z.rows());
    let mut e_seq = Mat::zeros(z.rows(), cb.dim());
    for t in 0..z.rows() {
        let row = z.row(t);
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..cb.len() {
            let d = cb.codes.row_dist_sq(i, row);
            if d < best.0 {
                best = (d, i);
            }
        }
        indices.push(best.1);
        dist_sq.push(best.0);
        e_seq.row_mut(t).copy_from_slice(cb.codes.row(best.1));
    }
    Ok(Quantized {
        indices,
        e_seq,
        dist_sq,
    })
}

/// Selected codes as a tape node whose backward pass routes gradients
/// straight to `z` (the codebook itself never receives gradients).
pub fn straight_through_codes(t: &mut Tape, z: NodeId, q: &Quantized) -> NodeId {
    t.straight_through(z, q.e_seq.clone())
}

/// β · mean_t ‖z_t − stopgrad(e_t)‖². `e_seq` enters as a constant, so the
/// gradient flows to `z` only.
pub fn commitment_loss(t: &mut Tape, z: NodeId, e_seq: &Mat, beta: f64) -> NodeId {
    let rows = e_seq.rows().max(1);
    let e = t.constant(e_seq.clone());
    let diff = t.sub(z, e);
    let sq = t.mul(diff, diff);
    let total = t.sum_all(sq);
    t.scale(total, beta / rows as f64)
}

/// One multi-modal EMA step over both modalities' assignments.
///
/// `r_b` rows are the cross-attention intermediaries aligned with
/// modality-a rows (queried by a over b), and symmetrically for `r_a`.
/// Per code: N_i ← γN_i + (1−γ)(n_i^a + n_i^b),
/// o_i ← γo_i + (1−γ)[Σ (z^a+r^b)/2 + Σ (z^b+r^a)/2], then e_i = o_i/N_i
/// wherever N_i exceeds ε_N.
pub fn mm_ema_update(
    cb: &mut UnifiedCodebook,
    a: Assignments,
    b: Assignments,
    r_b: &Mat,
    r_a: &Mat,
) -> Result<()> {
    if r_b.shape() != a.z.shape() || r_a.shape() != b.z.shape() {
        return Err(CoreError::DimensionMismatch(format!(
            "intermediaries misaligned: r_b {:?} vs z_a {:?}, r_a {:?} vs z_b {:?}",
            r_b.shape(),
            a.z.shape(),
            r_a.shape(),
            b.z.shape()
        )));
    }
    for (which, asn) in [("a", &a), ("b", &b)] {
        if asn.indices.len() != asn.z.rows() {
            return Err(CoreError::DimensionMismatch(format!(
                "modality {which}: {} indices for {} rows",
                asn.indices.len(),
                asn.z.rows()
            )));
        }
        if asn.z.cols() != cb.dim() {
            return Err(CoreError::DimensionMismatch(format!(
                "modality {which}: feature dim {} vs codebook dim {}",
                asn.z.cols(),
                cb.dim()
            )));
        }
        if let Some(&bad) = asn.indices.iter().find(|&&i| i >= cb.len()) {
            return Err(CoreError::InvalidArgument(format!(
                "modality {which}: code index {bad} out of range {}",
                cb.len()
            )));
        }
    }

    let k = cb.len();
    let d = cb.dim();
    let mut n_new = alloc::vec![0.0; k];
    let mut sums = Mat::zeros(k, d);
    for (asn, r) in [(&a, r_b), (&b, r_a)] {
        for (row, &i) in asn.indices.iter().enumerate() {
            n_new[i] += 1.0;
            let dst = sums.row_mut(i);
            for ((s, &zv), &rv) in dst.iter_mut().zip(asn.z.row(row)).zip(r.row(row)) {
                *s += 0.5 * (zv + rv);
            }
        }
    }

    let (g, g1) = (cb.gamma, 1.0 - cb.gamma);
    for i in 0..k {
        cb.counts[i] = g * cb.counts[i] + g1 * n_new[i];
        let vol = cb.volumes.row_mut(i);
        for (o, &s) in vol.iter_mut().zip(sums.row(i)) {
            *o = g * *o + g1 * s;
        }
        if cb.counts[i] > cb.eps_n {
            let n = cb.counts[i];
            let code = cb.codes.row_mut(i);
            for (e, &o) in code.iter_mut().zip(cb.volumes.row(i)) {
                *e = o / n;
            }
        }
    }
    Ok(())
}

/// Replicate `prev` and append `k2` fresh codes drawn around the mean of
/// its active codes; returns the grown codebook plus an immutable teacher
/// snapshot of `prev`. The first `prev.len()` rows (codes, counts, volumes)
/// are carried over bit-exactly.
pub fn expand(
    prev: &UnifiedCodebook,
    k2: usize,
    init_seed: u64,
) -> (UnifiedCodebook, TeacherSnapshot) {
    let snapshot = TeacherSnapshot {
        codes: prev.codes.clone(),
    };
    let (k1, d) = (prev.len(), prev.dim());
    let mut codes = Mat::zeros(k1 + k2, d);
    let mut volumes = Mat::zeros(k1 + k2, d);
    let mut counts = alloc::vec![0.0; k1 + k2];
    for i in 0..k1 {
        codes.row_mut(i).copy_from_slice(prev.codes.row(i));
        volumes.row_mut(i).copy_from_slice(prev.volumes.row(i));
        counts[i] = prev.counts[i];
    }

    if k2 > 0 {
        let mut rows: Vec<usize> = (0..k1).filter(|&i| prev.counts[i] > prev.eps_n).collect();
        if rows.is_empty() {
            rows = (0..k1).collect();
        }
        let mut mean = alloc::vec![0.0; d];
        for &i in &rows {
            for (m, &v) in mean.iter_mut().zip(prev.codes.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows.len() as f64;
        }
        let mut var = 0.0;
        for &i in &rows {
            var += prev.codes.row_dist_sq(i, &mean);
        }
        let sigma = crate::math::sqrt(var / (rows.len() * d) as f64).max(1e-3);

        let mut r = stream(derive(init_seed, &[str_tag("expand")]));
        for i in k1..k1 + k2 {
            let row = codes.row_mut(i);
            for (x, &m) in row.iter_mut().zip(&mean) {
                *x = m + sigma * normal(&mut r);
            }
            counts[i] = prev.eps_n;
            let vol = volumes.row_mut(i);
            let code = codes.row(i);
            for (o, &e) in vol.iter_mut().zip(code) {
                *o = prev.eps_n * e;
            }
        }
    }

    (
        UnifiedCodebook {
            codes,
            counts,
            volumes,
            gamma: prev.gamma,
            eps_n: prev.eps_n,
            k1,
        },
        snapshot,
    )
}

/// Per-code activation classes over one or more modalities' quantized runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub modalities: Vec<String>,
    /// counts[code][modality].
    pub counts: Vec<Vec<u64>>,
    /// Number of modalities whose count exceeds τ_act · that modality's
    /// total timesteps.
    pub classes: Vec<usize>,
}

/// `runs` maps each modality to the concatenated code indices of its
/// evaluation pass; `tau` is the effective-activation fraction (a code
/// counts for a modality once it exceeds `tau` of that modality's steps).
pub fn activation_stats(k: usize, runs: &[(&str, &[usize])], tau: f64) -> Result<ActivationStats> {
    if runs.is_empty() {
        return Err(CoreError::EmptyInput("activation runs"));
    }
    let mut counts = alloc::vec![alloc::vec![0u64; runs.len()]; k];
    for (m, (_, indices)) in runs.iter().enumerate() {
        for &i in *indices {
            if i >= k {
                return Err(CoreError::InvalidArgument(format!(
                    "code index {i} out of range {k}"
                )));
            }
            counts[i][m] += 1;
        }
    }
    let classes = (0..k)
        .map(|i| {
            runs.iter()
                .enumerate()
                .filter(|(m, (_, indices))| counts[i][*m] as f64 > tau * indices.len() as f64)
                .count()
        })
        .collect();
    Ok(ActivationStats {
        modalities: runs.iter().map(|(m, _)| m.to_string()).collect(),
        counts,
        classes,
    })
}
