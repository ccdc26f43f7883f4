//! Model assembly: the parameter registry, deterministic initialization,
//! and the glue that binds parameters into a tape and runs one modality's
//! full forward pass.
//!
//! Parameters live in a flat [`ParamSet`] under dotted paths
//! (`enc.<mod>.front.w1`, `adapter.expert3.specific.<mod>.w`,
//! `cpc.<a>2<b>.w2`, …). Every path is initialized from an RNG stream
//! derived from the model seed and the path string alone, so creation
//! order — which depends on stage order — never changes a value.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::adapter::{adapter_forward, AdapterNodes, ExpertNodes};
use crate::encoders::{decode, encode, EncoderNodes, MlpNodes};
use crate::error::{CoreError, Result};
use crate::ewc::FisherSnapshot;
use crate::mat::Mat;
use crate::math;
use crate::numerics::layers::{recurrent_summarize, SummarizerNodes};
use crate::numerics::tape::{Gradients, NodeId, Tape};
use crate::objectives::VariationalNodes;
use crate::params::ParamSet;
use crate::quantizer::{
    quantize, straight_through_codes, Quantized, TeacherSnapshot, UnifiedCodebook,
    DEFAULT_EPS_N,
};
use crate::rng;

/// Stream owner name reserved for the replay pathway.
pub const PSEUDO_NAME: &str = "pseudo";

/// Network dimensions shared by every modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub d_sem: usize,
    pub d_spec: usize,
    pub d_ctx: usize,
    pub hidden: usize,
    pub n_experts: usize,
    pub k_steps: usize,
    /// When false, experts carry no modality-specific branch.
    pub use_specific: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_raw: 32,
            d_sem: 16,
            d_spec: 8,
            d_ctx: 32,
            hidden: 64,
            n_experts: 6,
            k_steps: 2,
            use_specific: true,
        }
    }
}

/// Initial codebook shape and EMA constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookConfig {
    pub k: usize,
    pub gamma: f64,
    pub eps_n: f64,
    pub init_scale: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            k: 64,
            gamma: 0.99,
            eps_n: DEFAULT_EPS_N,
            init_scale: 1.0,
        }
    }
}

/// The full trainable state: parameters, codebook, consolidation records,
/// and the set of modalities seen so far (in arrival order).
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub codebook: UnifiedCodebook,
    pub teacher: Option<TeacherSnapshot>,
    pub fishers: Vec<FisherSnapshot>,
    pub modalities: Vec<String>,
    pub seed: u64,
}

fn init_weight(seed: u64, path: &str, rows: usize, cols: usize) -> Mat {
    let mut r = rng::stream(rng::derive(seed, &[rng::str_tag("init"), rng::str_tag(path)]));
    let scale = 1.0 / math::sqrt(cols as f64);
    Mat::from_fn(rows, cols, |_, _| scale * rng::normal(&mut r))
}

impl Model {
    /// Fresh model with the shared adapter (router + expert trunks) and
    /// codebook in place; modalities are added as stages introduce them.
    pub fn new(cfg: ModelConfig, cb: &CodebookConfig, seed: u64) -> Result<Self> {
        let codebook = UnifiedCodebook::new(
            cb.k,
            cfg.d_sem,
            cb.gamma,
            cb.init_scale,
            cb.eps_n,
            rng::derive(seed, &[rng::str_tag("codebook")]),
        )?;
        let mut model = Model {
            cfg,
            params: ParamSet::new(),
            codebook,
            teacher: None,
            fishers: Vec::new(),
            modalities: Vec::new(),
            seed,
        };
        model.add_weight("adapter.router.w", cfg.n_experts, cfg.d_sem);
        model.add_bias("adapter.router.b", cfg.n_experts);
        for i in 0..cfg.n_experts {
            model.add_weight(&format!("adapter.expert{i}.common.w"), cfg.d_sem, cfg.d_sem);
            model.add_bias(&format!("adapter.expert{i}.common.b"), cfg.d_sem);
        }
        Ok(model)
    }

    fn add_weight(&mut self, path: &str, rows: usize, cols: usize) {
        if !self.params.contains(path) {
            self.params
                .insert(path, init_weight(self.seed, path, rows, cols));
        }
    }

    fn add_bias(&mut self, path: &str, dim: usize) {
        if !self.params.contains(path) {
            self.params.insert(path, Mat::zeros(1, dim));
        }
    }

    fn add_mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) {
        self.add_weight(&format!("{prefix}.w1"), hidden, d_in);
        self.add_bias(&format!("{prefix}.b1"), hidden);
        self.add_weight(&format!("{prefix}.w2"), d_out, hidden);
        self.add_bias(&format!("{prefix}.b2"), d_out);
    }

    fn add_summarizer(&mut self, owner: &str) {
        let cfg = self.cfg;
        let d_in = cfg.d_sem + cfg.d_ctx;
        self.add_weight(&format!("ctx.{owner}.wu"), cfg.d_ctx, d_in);
        self.add_bias(&format!("ctx.{owner}.bu"), cfg.d_ctx);
        self.add_weight(&format!("ctx.{owner}.wc"), cfg.d_ctx, d_in);
        self.add_bias(&format!("ctx.{owner}.bc"), cfg.d_ctx);
    }

    pub fn has_modality(&self, m: &str) -> bool {
        self.modalities.iter().any(|x| x == m)
    }

    /// Creates every per-modality parameter group if absent. Safe to call
    /// again — existing values are left untouched.
    pub fn ensure_modality(&mut self, m: &str) -> Result<()> {
        if m.is_empty() || m == PSEUDO_NAME || m.contains('.') {
            return Err(CoreError::UnknownModality(format!(
                "invalid modality name {m:?}"
            )));
        }
        if self.has_modality(m) {
            return Ok(());
        }
        let cfg = self.cfg;
        self.add_mlp(&format!("enc.{m}.front"), cfg.d_raw, cfg.hidden, cfg.d_sem);
        self.add_mlp(&format!("enc.{m}.spec"), cfg.d_raw, cfg.hidden, cfg.d_spec);
        self.add_mlp(
            &format!("enc.{m}.dec"),
            cfg.d_sem + cfg.d_spec,
            cfg.hidden,
            cfg.d_raw,
        );
        self.add_summarizer(m);
        self.add_weight(&format!("q.{m}.w1"), cfg.hidden, cfg.d_sem);
        self.add_bias(&format!("q.{m}.b1"), cfg.hidden);
        self.add_weight(&format!("q.{m}.wmu"), cfg.d_spec, cfg.hidden);
        self.add_bias(&format!("q.{m}.bmu"), cfg.d_spec);
        self.add_weight(&format!("q.{m}.wlv"), cfg.d_spec, cfg.hidden);
        self.add_bias(&format!("q.{m}.blv"), cfg.d_spec);
        if cfg.use_specific {
            for i in 0..cfg.n_experts {
                self.add_weight(
                    &format!("adapter.expert{i}.specific.{m}.w"),
                    cfg.d_sem,
                    cfg.d_sem,
                );
                self.add_bias(&format!("adapter.expert{i}.specific.{m}.b"), cfg.d_sem);
            }
        }
        self.modalities.push(m.to_string());
        Ok(())
    }

    /// Creates the step-k CPC heads for both directions of a pair.
    pub fn ensure_pair(&mut self, a: &str, b: &str) -> Result<()> {
        if a == b {
            return Err(CoreError::InvalidArgument(format!(
                "CPC pair needs two distinct streams, got {a:?} twice"
            )));
        }
        for m in [a, b] {
            if m != PSEUDO_NAME && !self.has_modality(m) {
                return Err(CoreError::UnknownModality(m.to_string()));
            }
        }
        let cfg = self.cfg;
        for (from, to) in [(a, b), (b, a)] {
            for k in 1..=cfg.k_steps {
                self.add_weight(&format!("cpc.{from}2{to}.w{k}"), cfg.d_sem, cfg.d_ctx);
            }
        }
        Ok(())
    }

    /// Creates the replay pathway: the pseudo stream's summarizer plus
    /// CPC heads between pseudo and `partner`.
    pub fn ensure_pseudo(&mut self, partner: &str) -> Result<()> {
        if !self.has_modality(partner) {
            return Err(CoreError::UnknownModality(partner.to_string()));
        }
        self.add_summarizer(PSEUDO_NAME);
        self.ensure_pair(PSEUDO_NAME, partner)
    }

    /// Code assignments and embeddings for a feature matrix, without any
    /// gradient bookkeeping. Rows are timesteps.
    pub fn quantize_features(&self, m: &str, x: &Mat) -> Result<Quantized> {
        if !self.has_modality(m) {
            return Err(CoreError::UnknownModality(m.to_string()));
        }
        if x.cols() != self.cfg.d_raw {
            return Err(CoreError::DimensionMismatch(format!(
                "raw width {} vs configured {}",
                x.cols(),
                self.cfg.d_raw
            )));
        }
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&self.params, |_| false);
        let enc = bind_encoder(&mut t, &mut b, m)?;
        let xc = t.constant(x.clone());
        let (h, _zbar) = encode(&mut t, xc, &enc);
        let ad = bind_adapter(&mut t, &mut b, &self.cfg, m)?;
        let (z, _gates) = adapter_forward(&mut t, h, &ad);
        quantize(t.value(z), &self.codebook)
    }

    /// Continuous shared-space rows for a feature matrix (encoder + adapter
    /// only), without any gradient bookkeeping. Rows are timesteps.
    pub fn semantic_features(&self, m: &str, x: &Mat) -> Result<Mat> {
        if !self.has_modality(m) {
            return Err(CoreError::UnknownModality(m.to_string()));
        }
        if x.cols() != self.cfg.d_raw {
            return Err(CoreError::DimensionMismatch(format!(
                "raw width {} vs configured {}",
                x.cols(),
                self.cfg.d_raw
            )));
        }
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&self.params, |_| false);
        let enc = bind_encoder(&mut t, &mut b, m)?;
        let xc = t.constant(x.clone());
        let (h, _zbar) = encode(&mut t, xc, &enc);
        let ad = bind_adapter(&mut t, &mut b, &self.cfg, m)?;
        let (z, _gates) = adapter_forward(&mut t, h, &ad);
        Ok(t.value(z).clone())
    }
}

/// Binds [`ParamSet`] entries into a tape on demand, as leaves when the
/// predicate approves and constants otherwise, caching one node per path.
pub struct GraphBinder<'a> {
    params: &'a ParamSet,
    cache: BTreeMap<String, NodeId>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a> GraphBinder<'a> {
    pub fn new(params: &'a ParamSet, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        GraphBinder {
            params,
            cache: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn node(&mut self, t: &mut Tape, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(path) {
            return Ok(id);
        }
        let value = self.params.get(path)?.clone();
        let id = if (self.trainable)(path) {
            t.leaf(value)
        } else {
            t.constant(value)
        };
        self.cache.insert(path.to_string(), id);
        Ok(id)
    }

    /// Gradients of the bound leaves, keyed by parameter path. Paths whose
    /// nodes never reached the loss are omitted.
    pub fn gradient_map(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (path, &id) in &self.cache {
            if let Some(g) = grads.get(id) {
                out.insert(path.clone(), g.clone());
            }
        }
        out
    }
}

fn bind_mlp(t: &mut Tape, b: &mut GraphBinder<'_>, prefix: &str) -> Result<MlpNodes> {
    Ok(MlpNodes {
        w1: b.node(t, &format!("{prefix}.w1"))?,
        b1: b.node(t, &format!("{prefix}.b1"))?,
        w2: b.node(t, &format!("{prefix}.w2"))?,
        b2: b.node(t, &format!("{prefix}.b2"))?,
    })
}

pub fn bind_encoder(t: &mut Tape, b: &mut GraphBinder<'_>, m: &str) -> Result<EncoderNodes> {
    Ok(EncoderNodes {
        front: bind_mlp(t, b, &format!("enc.{m}.front"))?,
        spec: bind_mlp(t, b, &format!("enc.{m}.spec"))?,
        dec: bind_mlp(t, b, &format!("enc.{m}.dec"))?,
    })
}

pub fn bind_summarizer(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    owner: &str,
) -> Result<SummarizerNodes> {
    Ok(SummarizerNodes {
        wu: b.node(t, &format!("ctx.{owner}.wu"))?,
        bu: b.node(t, &format!("ctx.{owner}.bu"))?,
        wc: b.node(t, &format!("ctx.{owner}.wc"))?,
        bc: b.node(t, &format!("ctx.{owner}.bc"))?,
    })
}

pub fn bind_variational(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    m: &str,
) -> Result<VariationalNodes> {
    Ok(VariationalNodes {
        w1: b.node(t, &format!("q.{m}.w1"))?,
        b1: b.node(t, &format!("q.{m}.b1"))?,
        wmu: b.node(t, &format!("q.{m}.wmu"))?,
        bmu: b.node(t, &format!("q.{m}.bmu"))?,
        wlv: b.node(t, &format!("q.{m}.wlv"))?,
        blv: b.node(t, &format!("q.{m}.blv"))?,
    })
}

pub fn bind_adapter(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    cfg: &ModelConfig,
    m: &str,
) -> Result<AdapterNodes> {
    let router = (
        b.node(t, "adapter.router.w")?,
        b.node(t, "adapter.router.b")?,
    );
    let mut experts = Vec::with_capacity(cfg.n_experts);
    for i in 0..cfg.n_experts {
        let specific = if cfg.use_specific {
            Some((
                b.node(t, &format!("adapter.expert{i}.specific.{m}.w"))?,
                b.node(t, &format!("adapter.expert{i}.specific.{m}.b"))?,
            ))
        } else {
            None
        };
        let common = (
            b.node(t, &format!("adapter.expert{i}.common.w"))?,
            b.node(t, &format!("adapter.expert{i}.common.b"))?,
        );
        experts.push(ExpertNodes { specific, common });
    }
    Ok(AdapterNodes { router, experts })
}

/// CPC heads for direction `from` → `to`, ordered k = 1..=k_steps.
pub fn bind_pair_heads(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    from: &str,
    to: &str,
    k_steps: usize,
) -> Result<Vec<NodeId>> {
    (1..=k_steps)
        .map(|k| b.node(t, &format!("cpc.{from}2{to}.w{k}")))
        .collect()
}

/// Every tape handle produced by one modality's forward pass.
pub struct ModalityForward {
    /// Pre-adapter semantic rows (router input).
    pub h: NodeId,
    /// Shared semantic rows out of the adapter.
    pub z: NodeId,
    /// Modality-specific rows.
    pub zbar: NodeId,
    /// Router gate rows.
    pub gates: NodeId,
    /// Code assignments of `z` under the current codebook.
    pub quant: Quantized,
    /// Quantized rows with the straight-through gradient path.
    pub ste: NodeId,
    /// Causal context rows over the continuous semantic stream.
    pub ctx: NodeId,
    /// Reconstruction of the raw input.
    pub xhat: NodeId,
}

/// Runs encoder → adapter → quantizer → summarizer → decoder for one
/// modality over a batch-stacked input (`batch` sequences, sequence-major
/// rows).
pub fn forward_modality(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    cfg: &ModelConfig,
    cb: &UnifiedCodebook,
    m: &str,
    x: &Mat,
    batch: usize,
) -> Result<ModalityForward> {
    if x.cols() != cfg.d_raw {
        return Err(CoreError::DimensionMismatch(format!(
            "raw width {} vs configured {}",
            x.cols(),
            cfg.d_raw
        )));
    }
    if batch == 0 || x.rows() % batch != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "{} rows do not stack into {batch} sequences",
            x.rows()
        )));
    }
    let steps = x.rows() / batch;
    let enc = bind_encoder(t, b, m)?;
    let xc = t.constant(x.clone());
    let (h, zbar) = encode(t, xc, &enc);
    let ad = bind_adapter(t, b, cfg, m)?;
    let (z, gates) = adapter_forward(t, h, &ad);
    let quant = quantize(t.value(z), cb)?;
    let ste = straight_through_codes(t, z, &quant);
    let sum = bind_summarizer(t, b, m)?;
    let ctx = recurrent_summarize(t, z, batch, steps, &sum);
    let xhat = decode(t, ste, zbar, &enc);
    Ok(ModalityForward {
        h,
        z,
        zbar,
        gates,
        quant,
        ste,
        ctx,
        xhat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
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

    fn small_cb() -> CodebookConfig {
        CodebookConfig {
            k: 8,
            ..CodebookConfig::default()
        }
    }

    #[test]
    fn new_model_holds_adapter_and_codebook_only() {
        let m = Model::new(small_cfg(), &small_cb(), 7).unwrap();
        // Router w+b, 3 experts × common w+b.
        assert_eq!(m.params.len(), 2 + 3 * 2);
        assert_eq!(m.codebook.len(), 8);
        assert_eq!(m.codebook.dim(), 4);
        assert!(m.modalities.is_empty());
        assert!(m.teacher.is_none());
    }

    #[test]
    fn ensure_modality_creates_expected_paths_once() {
        let mut m = Model::new(small_cfg(), &small_cb(), 7).unwrap();
        m.ensure_modality("alpha").unwrap();
        // 3 MLPs × 4 + summarizer 4 + q-net 6 + 3 experts × specific w+b.
        let per_modality = 12 + 4 + 6 + 6;
        assert_eq!(m.params.len(), 8 + per_modality);
        assert!(m.params.contains("enc.alpha.front.w1"));
        assert!(m.params.contains("enc.alpha.dec.w2"));
        assert!(m.params.contains("ctx.alpha.wc"));
        assert!(m.params.contains("q.alpha.wlv"));
        assert!(m.params.contains("adapter.expert2.specific.alpha.b"));
        assert_eq!(m.params.get("enc.alpha.front.w1").unwrap().shape(), (8, 6));
        assert_eq!(m.params.get("enc.alpha.dec.w1").unwrap().shape(), (8, 7));
        assert_eq!(m.params.get("ctx.alpha.wu").unwrap().shape(), (5, 9));

        let before = m.params.get("enc.alpha.front.w1").unwrap().clone();
        m.ensure_modality("alpha").unwrap();
        assert_eq!(m.params.len(), 8 + per_modality);
        assert_eq!(*m.params.get("enc.alpha.front.w1").unwrap(), before);
        assert_eq!(m.modalities, vec!["alpha".to_string()]);
    }

    #[test]
    fn initialization_is_independent_of_creation_order() {
        let mut ab = Model::new(small_cfg(), &small_cb(), 11).unwrap();
        ab.ensure_modality("alpha").unwrap();
        ab.ensure_modality("beta").unwrap();
        let mut ba = Model::new(small_cfg(), &small_cb(), 11).unwrap();
        ba.ensure_modality("beta").unwrap();
        ba.ensure_modality("alpha").unwrap();
        for (path, v) in ab.params.iter() {
            assert_eq!(v, ba.params.get(path).unwrap(), "{path}");
        }
        assert_eq!(ab.codebook.codes(), ba.codebook.codes());
    }

    #[test]
    fn different_paths_draw_different_weights() {
        let mut m = Model::new(small_cfg(), &small_cb(), 3).unwrap();
        m.ensure_modality("alpha").unwrap();
        m.ensure_modality("beta").unwrap();
        assert_ne!(
            m.params.get("enc.alpha.front.w1").unwrap(),
            m.params.get("enc.beta.front.w1").unwrap()
        );
        let w = m.params.get("enc.alpha.front.w1").unwrap();
        // Fan-in scaling: entries of an 8×6 weight should be O(1/√6).
        let max = w.data().iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
        assert!(max < 5.0 / math::sqrt(6.0), "max |w| = {max}");
        assert!(w.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn reserved_and_malformed_names_are_rejected() {
        let mut m = Model::new(small_cfg(), &small_cb(), 3).unwrap();
        assert!(m.ensure_modality("pseudo").is_err());
        assert!(m.ensure_modality("").is_err());
        assert!(m.ensure_modality("a.b").is_err());
        assert!(m.ensure_pair("alpha", "alpha").is_err());
        assert!(m.ensure_pair("alpha", "beta").is_err()); // not created yet
        assert!(m.ensure_pseudo("beta").is_err());
    }

    #[test]
    fn pair_and_pseudo_heads_cover_both_directions() {
        let mut m = Model::new(small_cfg(), &small_cb(), 3).unwrap();
        m.ensure_modality("alpha").unwrap();
        m.ensure_modality("beta").unwrap();
        m.ensure_pair("alpha", "beta").unwrap();
        for k in 1..=2 {
            assert!(m.params.contains(&format!("cpc.alpha2beta.w{k}")));
            assert!(m.params.contains(&format!("cpc.beta2alpha.w{k}")));
            assert_eq!(
                m.params.get(&format!("cpc.alpha2beta.w{k}")).unwrap().shape(),
                (4, 5)
            );
        }
        m.ensure_pseudo("beta").unwrap();
        assert!(m.params.contains("ctx.pseudo.wu"));
        assert!(m.params.contains("cpc.pseudo2beta.w1"));
        assert!(m.params.contains("cpc.beta2pseudo.w2"));
    }

    #[test]
    fn binder_caches_nodes_and_respects_trainability() {
        let mut m = Model::new(small_cfg(), &small_cb(), 5).unwrap();
        m.ensure_modality("alpha").unwrap();
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&m.params, |p: &str| p.starts_with("enc."));
        let a = b.node(&mut t, "enc.alpha.front.w1").unwrap();
        let again = b.node(&mut t, "enc.alpha.front.w1").unwrap();
        assert_eq!(a, again);
        let router = b.node(&mut t, "adapter.router.w").unwrap();
        assert!(t.requires_grad(a));
        assert!(!t.requires_grad(router));
        assert!(b.node(&mut t, "enc.alpha.missing").is_err());
    }

    #[test]
    fn forward_shapes_are_consistent_and_finite() {
        let cfg = small_cfg();
        let mut m = Model::new(cfg, &small_cb(), 9).unwrap();
        m.ensure_modality("alpha").unwrap();
        let (batch, steps) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_fn(batch * steps, cfg.d_raw, |_, _| rng.gen_range(-1.0..1.0));

        let mut t = Tape::new();
        let mut b = GraphBinder::new(&m.params, |_: &str| true);
        let f = forward_modality(&mut t, &mut b, &cfg, &m.codebook, "alpha", &x, batch).unwrap();
        assert_eq!(t.value(f.h).shape(), (12, cfg.d_sem));
        assert_eq!(t.value(f.z).shape(), (12, cfg.d_sem));
        assert_eq!(t.value(f.zbar).shape(), (12, cfg.d_spec));
        assert_eq!(t.value(f.gates).shape(), (12, cfg.n_experts));
        assert_eq!(t.value(f.ste).shape(), (12, cfg.d_sem));
        assert_eq!(t.value(f.ctx).shape(), (12, cfg.d_ctx));
        assert_eq!(t.value(f.xhat).shape(), (12, cfg.d_raw));
        assert_eq!(f.quant.indices.len(), 12);
        for id in [f.h, f.z, f.zbar, f.gates, f.ste, f.ctx, f.xhat] {
            assert!(t.value(id).all_finite());
        }
        // Straight-through values are exactly the selected codes.
        assert_eq!(*t.value(f.ste), f.quant.e_seq);
    }

    #[test]
    fn forward_is_deterministic_across_tapes() {
        let cfg = small_cfg();
        let mut m = Model::new(cfg, &small_cb(), 13).unwrap();
        m.ensure_modality("alpha").unwrap();
        let x = Mat::from_fn(8, cfg.d_raw, |r, c| ((r * 7 + c) % 5) as f64 * 0.3 - 0.6);

        let run = || {
            let mut t = Tape::new();
            let mut b = GraphBinder::new(&m.params, |_: &str| false);
            let f = forward_modality(&mut t, &mut b, &cfg, &m.codebook, "alpha", &x, 2).unwrap();
            (t.value(f.xhat).clone(), f.quant.indices.clone())
        };
        let (x1, i1) = run();
        let (x2, i2) = run();
        assert_eq!(x1, x2);
        assert_eq!(i1, i2);
    }

    #[test]
    fn common_only_experts_skip_specific_paths() {
        let cfg = ModelConfig {
            use_specific: false,
            ..small_cfg()
        };
        let mut m = Model::new(cfg, &small_cb(), 9).unwrap();
        m.ensure_modality("alpha").unwrap();
        assert!(!m
            .params
            .paths()
            .iter()
            .any(|p| p.contains(".specific.")));
        let x = Mat::from_fn(4, cfg.d_raw, |r, c| (r + c) as f64 * 0.1);
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&m.params, |_: &str| false);
        let f = forward_modality(&mut t, &mut b, &cfg, &m.codebook, "alpha", &x, 1).unwrap();
        assert!(t.value(f.z).all_finite());
    }

    #[test]
    fn quantize_features_matches_forward_assignments() {
        let cfg = small_cfg();
        let mut m = Model::new(cfg, &small_cb(), 21).unwrap();
        m.ensure_modality("alpha").unwrap();
        let x = Mat::from_fn(6, cfg.d_raw, |r, c| ((r * 3 + c) % 7) as f64 * 0.2 - 0.5);
        let q = m.quantize_features("alpha", &x).unwrap();

        let mut t = Tape::new();
        let mut b = GraphBinder::new(&m.params, |_: &str| false);
        let f = forward_modality(&mut t, &mut b, &cfg, &m.codebook, "alpha", &x, 2).unwrap();
        assert_eq!(q.indices, f.quant.indices);
        assert_eq!(q.e_seq, f.quant.e_seq);
        assert!(m.quantize_features("missing", &x).is_err());
    }

    #[test]
    fn gradient_map_covers_only_trainable_reached_paths() {
        let cfg = small_cfg();
        let mut m = Model::new(cfg, &small_cb(), 17).unwrap();
        m.ensure_modality("alpha").unwrap();
        let x = Mat::from_fn(4, cfg.d_raw, |r, c| (r as f64 - c as f64) * 0.15);

        let mut t = Tape::new();
        let mut b = GraphBinder::new(&m.params, |p: &str| !p.starts_with("q."));
        let f = forward_modality(&mut t, &mut b, &cfg, &m.codebook, "alpha", &x, 1).unwrap();
        let loss = {
            let sq = t.mul(f.xhat, f.xhat);
            t.mean_all(sq)
        };
        let grads = t.backward(loss);
        let map = b.gradient_map(&grads);
        assert!(map.contains_key("enc.alpha.front.w1"));
        assert!(map.contains_key("adapter.router.w"));
        assert!(map.contains_key("adapter.expert0.common.w"));
        assert!(!map.keys().any(|p| p.starts_with("q.")));
        // The summarizer feeds nothing into this loss, so even though it
        // was bound trainable its gradient never materializes.
        assert!(!map.contains_key("ctx.alpha.wu"));
        for (path, g) in &map {
            assert_eq!(g.shape(), m.params.get(path).unwrap().shape(), "{path}");
        }
    }
}
