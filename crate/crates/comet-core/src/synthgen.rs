//! Synthetic paired-modality data with known ground-truth semantics.
//!
//! A stage dataset is a set of sequence pairs. Both sequences in a pair are
//! rendered from the same `SemanticScript` (a Markov walk over category
//! ids), each through its own `ModalityRenderer`: a fixed random category
//! embedding plus modality-specific AR(1) nuisance structure plus Gaussian
//! noise. Because the script is known exactly, cross-modal code agreement
//! and forgetting can be measured without any learned probe.
//!
//! Everything here is a pure function of (spec, seed).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::rng::{derive, normal, str_tag, stream};

/// AR(1) persistence of the nuisance latent.
const NUISANCE_RHO: f64 = 0.8;
/// Per-dimension standard deviation of the projected nuisance signal.
const NUISANCE_SCALE: f64 = 0.5;
/// Attempts to draw a category embedding matrix satisfying the pairwise
/// separation requirement before giving up.
const EMBEDDING_DRAWS: usize = 16;

/// Markov category walk: with probability `p_stay` the previous category is
/// kept, otherwise the next category is drawn uniformly from the whole pool
/// (which may repeat the current one by chance).
pub fn generate_script(pool: &[usize], steps: usize, p_stay: f64, seed: u64) -> Result<Vec<usize>> {
    if pool.len() < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "script category pool needs at least 2 categories, got {}",
            pool.len()
        )));
    }
    if steps < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "script length must be at least 2, got {steps}"
        )));
    }
    if !(0.0..=1.0).contains(&p_stay) {
        return Err(CoreError::InvalidArgument(format!(
            "p_stay must lie in [0,1], got {p_stay}"
        )));
    }
    let mut rng = stream(seed);
    let mut out = Vec::with_capacity(steps);
    let mut cur = pool[rng.gen_range(0..pool.len())];
    out.push(cur);
    for _ in 1..steps {
        if rng.gen_range(0.0..1.0) >= p_stay {
            cur = pool[rng.gen_range(0..pool.len())];
        }
        out.push(cur);
    }
    Ok(out)
}

/// Renders scripts into one modality's raw feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityRenderer {
    modality: String,
    /// C_total × D_raw category embeddings.
    m_cat: Mat,
    /// nuisance_dim × D_raw projection of the nuisance latent, pre-scaled.
    proj: Mat,
    nuisance_dim: usize,
    sigma_noise: f64,
}

impl ModalityRenderer {
    /// Embeddings are standard Gaussian rows, redrawn (deterministically)
    /// until every pair of rows is separated by more than 10·σ_noise.
    pub fn new(
        modality: &str,
        c_total: usize,
        d_raw: usize,
        nuisance_dim: usize,
        sigma_noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if c_total < 1 || d_raw < 1 {
            return Err(CoreError::InvalidArgument(format!(
                "renderer needs c_total ≥ 1 and d_raw ≥ 1, got {c_total}, {d_raw}"
            )));
        }
        if sigma_noise < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "noise scale must be nonnegative, got {sigma_noise}"
            )));
        }
        let min_dist = 10.0 * sigma_noise;
        let mut m_cat = None;
        for attempt in 0..EMBEDDING_DRAWS {
            let mut r = stream(derive(
                seed,
                &[str_tag("embed"), str_tag(modality), attempt as u64],
            ));
            let cand = Mat::from_fn(c_total, d_raw, |_, _| normal(&mut r));
            if min_pairwise_distance(&cand) > min_dist {
                m_cat = Some(cand);
                break;
            }
        }
        let m_cat = m_cat.ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "could not draw {c_total} embeddings separated by more than {min_dist} in {d_raw} dims"
            ))
        })?;
        let mut r = stream(derive(seed, &[str_tag("proj"), str_tag(modality)]));
        let col_scale = NUISANCE_SCALE / crate::math::sqrt(nuisance_dim.max(1) as f64);
        let proj = Mat::from_fn(nuisance_dim, d_raw, |_, _| normal(&mut r) * col_scale);
        Ok(ModalityRenderer {
            modality: String::from(modality),
            m_cat,
            proj,
            nuisance_dim,
            sigma_noise,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn d_raw(&self) -> usize {
        self.m_cat.cols()
    }

    pub fn category_embeddings(&self) -> &Mat {
        &self.m_cat
    }

    /// x_t = M_cat[script_t] + nuisance_t + ε_t. The nuisance latent is an
    /// AR(1) walk projected through this modality's fixed matrix; ε is
    /// i.i.d. Gaussian of scale σ_noise. Nuisance and noise use separate
    /// derived streams, so σ_noise = 0 leaves the nuisance unchanged.
    pub fn render(&self, script: &[usize], seed: u64) -> Result<Mat> {
        if script.is_empty() {
            return Err(CoreError::EmptyInput("render script"));
        }
        for &id in script {
            if id >= self.m_cat.rows() {
                return Err(CoreError::InvalidArgument(format!(
                    "category {id} has no embedding row (renderer {} holds {})",
                    self.modality,
                    self.m_cat.rows()
                )));
            }
        }
        let mut nuis_rng = stream(derive(seed, &[str_tag("nuis"), str_tag(&self.modality)]));
        let mut noise_rng = stream(derive(seed, &[str_tag("noise"), str_tag(&self.modality)]));

        let d = self.d_raw();
        let mut out = Mat::zeros(script.len(), d);
        let mut latent = alloc::vec![0.0; self.nuisance_dim];
        for v in latent.iter_mut() {
            *v = normal(&mut nuis_rng);
        }
        let innovation = crate::math::sqrt(1.0 - NUISANCE_RHO * NUISANCE_RHO);
        for (t, &id) in script.iter().enumerate() {
            if t > 0 {
                for v in latent.iter_mut() {
                    *v = NUISANCE_RHO * *v + innovation * normal(&mut nuis_rng);
                }
            }
            let row = out.row_mut(t);
            row.copy_from_slice(self.m_cat.row(id));
            for (u, &a) in latent.iter().enumerate() {
                for (x, &p) in row.iter_mut().zip(self.proj.row(u)) {
                    *x += a * p;
                }
            }
            if self.sigma_noise > 0.0 {
                for x in row.iter_mut() {
                    *x += self.sigma_noise * normal(&mut noise_rng);
                }
            }
        }
        Ok(out)
    }
}

fn min_pairwise_distance(m: &Mat) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in (i + 1)..m.rows() {
            let d = m.row_dist_sq(i, m.row(j));
            if d < best {
                best = d;
            }
        }
    }
    crate::math::sqrt(best)
}

/// One aligned pair of rendered sequences plus the script they share.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x_a: Mat,
    pub x_b: Mat,
    pub script: Vec<usize>,
}

/// Declarative description of one stage's data.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    /// 1-based stage index.
    pub stage: usize,
    /// Modality shared with every other stage.
    pub mediator: String,
    /// Modality introduced (or revisited) by this stage.
    pub partner: String,
    /// Category ids scripts may use; later stages mix their new range with
    /// the configured shared subset of stage-1 categories.
    pub pool: Vec<usize>,
    pub n_train: usize,
    pub n_eval: usize,
    pub steps: usize,
    pub p_stay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    pub stage: usize,
    pub mediator: String,
    pub partner: String,
    pub pool: Vec<usize>,
    pub steps: usize,
    pub d_raw: usize,
    pub seed: u64,
    pub train: Vec<PairSample>,
    pub eval: Vec<PairSample>,
}

/// Renders `n_train` + `n_eval` pairs for one stage. The mediator renderer
/// must come from the same shared map across stages, which is what keeps
/// the mediator's feature space identical over the whole run.
pub fn generate_stage_dataset(
    spec: &StageSpec,
    renderers: &BTreeMap<String, ModalityRenderer>,
    seed: u64,
) -> Result<StageDataset> {
    let med = renderers
        .get(&spec.mediator)
        .ok_or_else(|| CoreError::UnknownModality(spec.mediator.clone()))?;
    let par = renderers
        .get(&spec.partner)
        .ok_or_else(|| CoreError::UnknownModality(spec.partner.clone()))?;
    if med.modality() != spec.mediator {
        return Err(CoreError::InvalidArgument(format!(
            "mediator renderer is for {}, expected {}",
            med.modality(),
            spec.mediator
        )));
    }
    if med.d_raw() != par.d_raw() {
        return Err(CoreError::DimensionMismatch(format!(
            "renderers disagree on d_raw: {} vs {}",
            med.d_raw(),
            par.d_raw()
        )));
    }
    if spec.n_train == 0 {
        return Err(CoreError::EmptyInput("stage training pairs"));
    }

    let make_split = |split_tag: u64, n: usize| -> Result<Vec<PairSample>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let script_seed = derive(seed, &[spec.stage as u64, str_tag("script"), split_tag, i as u64]);
            let script = generate_script(&spec.pool, spec.steps, spec.p_stay, script_seed)?;
            let render_seed = derive(seed, &[spec.stage as u64, str_tag("render"), split_tag, i as u64]);
            let x_a = med.render(&script, render_seed)?;
            let x_b = par.render(&script, render_seed)?;
            out.push(PairSample { x_a, x_b, script });
        }
        Ok(out)
    };

    Ok(StageDataset {
        stage: spec.stage,
        mediator: spec.mediator.clone(),
        partner: spec.partner.clone(),
        pool: spec.pool.clone(),
        steps: spec.steps,
        d_raw: med.d_raw(),
        seed,
        train: make_split(0, spec.n_train)?,
        eval: make_split(1, spec.n_eval)?,
    })
}
