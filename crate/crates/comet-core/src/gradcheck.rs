//! Registry of analytic-vs-finite-difference gradient checks.
//!
//! Every differentiable loss in the crate gets a named, seeded check that
//! builds a small random instance, runs the tape backward pass, and compares
//! each parameter coordinate against a central finite difference at
//! h = 1e-4. A coordinate passes when |a − f| ≤ max(1e-8, 1e-4·max(|a|, |f|));
//! a check passes when every coordinate of every instance does. The CLI
//! `grad-check` verb and the acceptance suite both drive [`run_all`].

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_forward, gate_load_loss, AdapterNodes, ExpertNodes};
use crate::encoders::{decode, encode, EncoderNodes, MlpNodes};
use crate::ewc::{accumulate_ewc_grads, ewc_loss_all, FisherSnapshot};
use crate::mat::Mat;
use crate::model::{
    bind_adapter, bind_encoder, bind_pair_heads, bind_summarizer, bind_variational,
    CodebookConfig, GraphBinder, Model, ModelConfig,
};
use crate::numerics::fd::fd_gradient_slice;
use crate::numerics::layers::recurrent_summarize;
use crate::numerics::tape::{Gradients, NodeId, Tape};
use crate::objectives::{
    anchor_row_indices, club_aux_nll, club_upper_bound, cross_cpc_loss, future_row_indices,
    recon_loss, VariationalNodes,
};
use crate::params::ParamSet;
use crate::pmr::{pmr_cpc_loss, ReplayHeads, NEW_CODE_WEIGHT};
use crate::quantizer::{commitment_loss, quantize, UnifiedCodebook, DEFAULT_EPS_N};
use crate::rng;

/// Central-difference step shared by every check.
pub const FD_STEP: f64 = 1e-4;
/// Relative tolerance of the pass criterion.
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor below which coordinates are compared additively.
pub const ABS_FLOOR: f64 = 1e-8;
/// Random instances drawn per registered check; 10 checks × 3 instances
/// keeps the suite above the 20-instance bar with margin.
pub const INSTANCES_PER_CASE: usize = 3;

/// Result of one registered check over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Instances evaluated.
    pub instances: usize,
    /// Worst coordinate deviation divided by its tolerance; ≤ 1 passes.
    pub worst: f64,
    pub pass: bool,
}

/// Evaluates one instance at a flat parameter vector, returning the loss
/// and the analytic gradient in the same layout.
pub type CaseEval = Box<dyn FnMut(&[f64]) -> (f64, Vec<f64>)>;

/// Builds a seeded instance: the base point and its evaluator.
pub type CaseBuilder = fn(u64) -> (Vec<f64>, CaseEval);

/// Per-coordinate comparison; returns (pass, worst deviation / tolerance).
pub fn check_vectors(analytic: &[f64], fd: &[f64]) -> (bool, f64) {
    if analytic.len() != fd.len() {
        return (false, f64::INFINITY);
    }
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.iter().zip(fd.iter()) {
        let tol = ABS_FLOOR.max(REL_TOL * a.abs().max(f.abs()));
        let ratio = (a - f).abs() / tol;
        if ratio > worst {
            worst = ratio;
        }
    }
    (worst <= 1.0, worst)
}

/// Runs one registered check over `instances` derived seeds.
pub fn run_case(
    name: &'static str,
    builder: CaseBuilder,
    seed: u64,
    instances: usize,
) -> CheckOutcome {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let instance_seed = rng::derive(seed, &[rng::str_tag(name), i as u64]);
        let (x0, mut eval) = builder(instance_seed);
        let (_, analytic) = eval(&x0);
        let mut value_only = |x: &[f64]| eval(x).0;
        let fd = fd_gradient_slice(&mut value_only, &x0, FD_STEP);
        let (_, ratio) = check_vectors(&analytic, &fd);
        if ratio > worst {
            worst = ratio;
        }
    }
    CheckOutcome {
        name,
        instances,
        worst,
        pass: worst <= 1.0,
    }
}

/// All registered checks, in report order.
pub fn registry() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("encoders.encode_norm", case_encode_norm as CaseBuilder),
        ("encoders.recon", case_recon),
        ("adapter.moe_gate", case_moe_gate),
        ("objectives.club_bound", case_club_bound),
        ("objectives.club_aux", case_club_aux),
        ("objectives.cpc", case_cpc),
        ("quantizer.commitment", case_commitment),
        ("ewc.penalty", case_ewc_penalty),
        ("pmr.weighted_cpc", case_pmr_weighted_cpc),
        ("model.end_to_end", case_end_to_end),
    ]
}

/// Runs every registered check whose name starts with `filter` (all when
/// `None`), each over [`INSTANCES_PER_CASE`] derived instances.
pub fn run_all(seed: u64, filter: Option<&str>) -> Vec<CheckOutcome> {
    registry()
        .into_iter()
        .filter(|(name, _)| filter.map_or(true, |f| name.starts_with(f)))
        .map(|(name, builder)| run_case(name, builder, seed, INSTANCES_PER_CASE))
        .collect()
}

/// Harness sensitivity probe: evaluates one real instance with the analytic
/// gradient's sign flipped. Must report failure — a harness that lets a
/// sign error through would pass anything.
pub fn sign_flip_probe(seed: u64) -> CheckOutcome {
    let (x0, mut eval) = case_commitment(rng::derive(seed, &[rng::str_tag("sign-flip")]));
    let (_, analytic) = eval(&x0);
    let flipped: Vec<f64> = analytic.iter().map(|g| -g).collect();
    let mut value_only = |x: &[f64]| eval(x).0;
    let fd = fd_gradient_slice(&mut value_only, &x0, FD_STEP);
    let (pass, worst) = check_vectors(&flipped, &fd);
    CheckOutcome {
        name: "probe.sign_flip",
        instances: 1,
        worst,
        pass,
    }
}

// ---------------------------------------------------------------------------
// Flat-vector plumbing shared by the standalone cases.

fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng::normal(r))
}

/// Draws a random matrix per shape and returns the concatenated base point.
fn random_base(r: &mut ChaCha8Rng, shapes: &[(usize, usize)], scale: f64) -> Vec<f64> {
    let total: usize = shapes.iter().map(|(rr, cc)| rr * cc).sum();
    let mut x0 = Vec::with_capacity(total);
    for &(rows, cols) in shapes {
        x0.extend(rand_mat(r, rows, cols, scale).into_data());
    }
    x0
}

/// Splits a flat vector back into matrices of the given shapes.
fn unpack(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Mat> {
    let mut mats = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(rows, cols) in shapes {
        let n = rows * cols;
        let m = Mat::from_vec(rows, cols, flat[off..off + n].to_vec())
            .expect("shape table matches flat length");
        mats.push(m);
        off += n;
    }
    assert_eq!(off, flat.len(), "flat vector longer than shape table");
    mats
}

/// Registers every matrix as a tape leaf, in order.
fn leaf_all(t: &mut Tape, mats: Vec<Mat>) -> Vec<NodeId> {
    mats.into_iter().map(|m| t.leaf(m)).collect()
}

/// Concatenates leaf gradients in registration order; zeros for leaves the
/// loss does not reach.
fn collect_grads(t: &Tape, g: &Gradients, leaves: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in leaves {
        match g.get(id) {
            Some(m) => out.extend_from_slice(m.data()),
            None => out.extend(core::iter::repeat(0.0).take(t.value(id).len())),
        }
    }
    out
}

/// Shapes of a two-layer MLP `input → hidden → output` in node order.
fn mlp_shapes(input: usize, hidden: usize, output: usize) -> [(usize, usize); 4] {
    [(hidden, input), (1, hidden), (output, hidden), (1, output)]
}

fn mlp_nodes(ids: &[NodeId], at: usize) -> MlpNodes {
    MlpNodes {
        w1: ids[at],
        b1: ids[at + 1],
        w2: ids[at + 2],
        b2: ids[at + 3],
    }
}

// ---------------------------------------------------------------------------
// Standalone cases. Dimensions are intentionally small and mutually prime-ish
// so transposition mistakes cannot cancel.

/// ‖h‖² + ‖z̄‖² through the semantic and specific encoder branches.
fn case_encode_norm(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_raw, hidden, d_sem, d_spec) = (6, 5, 4, 3, 2);
    let mut r = rng::stream(seed);
    let x = rand_mat(&mut r, n, d_raw, 1.0);
    let mut shapes = Vec::new();
    shapes.extend(mlp_shapes(d_raw, hidden, d_sem));
    shapes.extend(mlp_shapes(d_raw, hidden, d_spec));
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let enc = EncoderNodes {
            front: mlp_nodes(&ids, 0),
            spec: mlp_nodes(&ids, 4),
            // The decoder is unused here; reuse the front nodes to satisfy
            // the struct without adding dead leaves.
            dec: mlp_nodes(&ids, 0),
        };
        let xc = t.constant(x.clone());
        let (h, zbar) = encode(&mut t, xc, &enc);
        let hh = t.mul(h, h);
        let hm = t.mean_all(hh);
        let zz = t.mul(zbar, zbar);
        let zm = t.mean_all(zz);
        let loss = t.add(hm, zm);
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// Reconstruction MSE through encode → decode (semantic rows stand in for
/// the quantized stream, so the path stays smooth).
fn case_recon(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_raw, hidden, d_sem, d_spec) = (6, 5, 4, 3, 2);
    let mut r = rng::stream(seed);
    let x = rand_mat(&mut r, n, d_raw, 1.0);
    let mut shapes = Vec::new();
    shapes.extend(mlp_shapes(d_raw, hidden, d_sem));
    shapes.extend(mlp_shapes(d_raw, hidden, d_spec));
    shapes.extend(mlp_shapes(d_sem + d_spec, hidden, d_raw));
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let enc = EncoderNodes {
            front: mlp_nodes(&ids, 0),
            spec: mlp_nodes(&ids, 4),
            dec: mlp_nodes(&ids, 8),
        };
        let xc = t.constant(x.clone());
        let (h, zbar) = encode(&mut t, xc, &enc);
        let xhat = decode(&mut t, h, zbar, &enc);
        let loss = recon_loss(&mut t, xhat, &x);
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// ‖z‖² + load-balance loss through the router softmax and both expert
/// branches (specific ∘ common).
fn case_moe_gate(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_sem, n_experts) = (6, 3, 2);
    let mut r = rng::stream(seed);
    let h = rand_mat(&mut r, n, d_sem, 1.0);
    let mut shapes = vec![(n_experts, d_sem), (1, n_experts)];
    for _ in 0..n_experts {
        shapes.extend([
            (d_sem, d_sem),
            (1, d_sem), // specific
            (d_sem, d_sem),
            (1, d_sem), // common
        ]);
    }
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let experts = (0..n_experts)
            .map(|e| ExpertNodes {
                specific: Some((ids[2 + 4 * e], ids[3 + 4 * e])),
                common: (ids[4 + 4 * e], ids[5 + 4 * e]),
            })
            .collect::<Vec<_>>();
        let ad = AdapterNodes {
            router: (ids[0], ids[1]),
            experts,
        };
        let hc = t.constant(h.clone());
        let (z, gates) = adapter_forward(&mut t, hc, &ad);
        let zz = t.mul(z, z);
        let zm = t.mean_all(zz);
        let gl = gate_load_loss(&mut t, gates);
        let loss = t.add(zm, gl);
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// CLUB upper bound with gradients flowing into both feature producers and
/// the variational net.
fn case_club_bound(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_in, d_z, d_zbar, hidden) = (6, 4, 3, 2, 5);
    let mut r = rng::stream(seed);
    let x1 = rand_mat(&mut r, n, d_in, 1.0);
    let x2 = rand_mat(&mut r, n, d_in, 1.0);
    let mut shapes = vec![(d_z, d_in), (d_zbar, d_in)];
    shapes.extend([
        (hidden, d_z),
        (1, hidden),
        (d_zbar, hidden),
        (1, d_zbar),
        (d_zbar, hidden),
        (1, d_zbar),
    ]);
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let q = VariationalNodes {
            w1: ids[2],
            b1: ids[3],
            wmu: ids[4],
            bmu: ids[5],
            wlv: ids[6],
            blv: ids[7],
        };
        let x1c = t.constant(x1.clone());
        let x2c = t.constant(x2.clone());
        let z = t.matmul_tb(x1c, ids[0]);
        let zbar = t.matmul_tb(x2c, ids[1]);
        let loss = club_upper_bound(&mut t, z, zbar, &q).expect("valid fixture");
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// Auxiliary Gaussian NLL with only the variational net trainable, matching
/// the training-time auxiliary pass.
fn case_club_aux(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_z, d_zbar, hidden) = (6, 3, 2, 5);
    let mut r = rng::stream(seed);
    let z = rand_mat(&mut r, n, d_z, 1.0);
    let zbar = rand_mat(&mut r, n, d_zbar, 1.0);
    let shapes = vec![
        (hidden, d_z),
        (1, hidden),
        (d_zbar, hidden),
        (1, d_zbar),
        (d_zbar, hidden),
        (1, d_zbar),
    ];
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let q = VariationalNodes {
            w1: ids[0],
            b1: ids[1],
            wmu: ids[2],
            bmu: ids[3],
            wlv: ids[4],
            blv: ids[5],
        };
        let zc = t.constant(z.clone());
        let zbc = t.constant(zbar.clone());
        let loss = club_aux_nll(&mut t, zc, zbc, &q);
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// InfoNCE with gradients into the context producer, candidate producer,
/// and every per-offset projection head.
fn case_cpc(seed: u64) -> (Vec<f64>, CaseEval) {
    let (batch, k_steps, d_ctx, d_z, d_in) = (3, 2, 3, 4, 5);
    let mut r = rng::stream(seed);
    let xc = rand_mat(&mut r, batch, d_in, 1.0);
    let xe = rand_mat(&mut r, batch * k_steps, d_in, 1.0);
    let shapes = vec![(d_ctx, d_in), (d_z, d_in), (d_z, d_ctx), (d_z, d_ctx)];
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let xcc = t.constant(xc.clone());
        let xec = t.constant(xe.clone());
        let c = t.matmul_tb(xcc, ids[0]);
        let cand = t.matmul_tb(xec, ids[1]);
        let heads = [ids[2], ids[3]];
        let loss = cross_cpc_loss(&mut t, c, cand, &heads, batch, k_steps, None)
            .expect("valid fixture");
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// Commitment loss toward the codes assigned at the base point. Assignments
/// are held fixed across evaluations because the implemented loss treats the
/// selected code as a constant (stop-gradient), keeping the checked function
/// smooth.
fn case_commitment(seed: u64) -> (Vec<f64>, CaseEval) {
    let (n, d_in, d_z, k) = (6, 4, 3, 5);
    let mut r = rng::stream(seed);
    let x = rand_mat(&mut r, n, d_in, 1.0);
    let shapes = vec![(d_z, d_in)];
    let x0 = random_base(&mut r, &shapes, 0.5);
    let cb = UnifiedCodebook::new(
        k,
        d_z,
        0.99,
        1.0,
        DEFAULT_EPS_N,
        rng::derive(seed, &[rng::str_tag("cb")]),
    )
    .expect("valid fixture");
    let z0 = x.matmul_tb(&unpack(&x0, &shapes)[0]);
    let e0 = quantize(&z0, &cb).expect("valid fixture").e_seq;
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let xc = t.constant(x.clone());
        let z = t.matmul_tb(xc, ids[0]);
        let loss = commitment_loss(&mut t, z, &e0, 0.25);
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

/// Quadratic consolidation penalty over two overlapping snapshots, analytic
/// gradient from the closed form λ·F·(θ − θ*).
fn case_ewc_penalty(seed: u64) -> (Vec<f64>, CaseEval) {
    let mut r = rng::stream(seed);
    // Path order is lexicographic to match ParamSet iteration.
    let paths = ["a.b", "a.w", "b.w"];
    let shapes = vec![(1, 3), (3, 2), (2, 2)];
    let x0 = random_base(&mut r, &shapes, 1.0);
    let snap_over = |idx: &[usize], lambda: f64, r: &mut ChaCha8Rng| {
        let mut fisher = ParamSet::new();
        let mut anchor = ParamSet::new();
        for &i in idx {
            let (rows, cols) = shapes[i];
            fisher.insert(
                paths[i],
                Mat::from_fn(rows, cols, |_, _| rng::normal(r).abs() + 0.1),
            );
            anchor.insert(paths[i], rand_mat(r, rows, cols, 1.0));
        }
        FisherSnapshot::new(fisher, anchor, lambda).expect("valid fixture")
    };
    let snaps = vec![
        snap_over(&[0, 1], 3.5, &mut r),
        snap_over(&[1, 2], 1.25, &mut r),
    ];
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut params = ParamSet::new();
        for (path, m) in paths.iter().zip(mats) {
            params.insert(path, m);
        }
        let loss = ewc_loss_all(&params, &snaps).expect("valid fixture");
        let mut gmap: BTreeMap<String, Mat> = BTreeMap::new();
        accumulate_ewc_grads(&params, &snaps, &mut gmap).expect("valid fixture");
        let mut grads = Vec::new();
        for (path, &(rows, cols)) in paths.iter().zip(shapes.iter()) {
            match gmap.get(*path) {
                Some(m) => grads.extend_from_slice(m.data()),
                None => grads.extend(core::iter::repeat(0.0).take(rows * cols)),
            }
        }
        (loss, grads)
    };
    (x0, Box::new(eval))
}

/// Four-direction weighted InfoNCE between a pseudo stream and two live
/// streams, with the prefix/new-code weight pattern on the positives.
fn case_pmr_weighted_cpc(seed: u64) -> (Vec<f64>, CaseEval) {
    let (batch, k_steps, d_ctx, d_z, d_in) = (2, 2, 3, 3, 4);
    let mut r = rng::stream(seed);
    let ctx_in: Vec<Mat> = (0..3).map(|_| rand_mat(&mut r, batch, d_in, 1.0)).collect();
    let cand_in: Vec<Mat> = (0..3)
        .map(|_| rand_mat(&mut r, batch * k_steps, d_in, 1.0))
        .collect();
    let weights = Mat::from_vec(
        batch,
        k_steps,
        vec![1.0, NEW_CODE_WEIGHT, NEW_CODE_WEIGHT, 1.0],
    )
    .expect("2x2 weights");
    let mut shapes = vec![(d_ctx, d_in); 3];
    shapes.extend(vec![(d_z, d_in); 3]);
    shapes.extend(vec![(d_z, d_ctx); 4 * k_steps]);
    let x0 = random_base(&mut r, &shapes, 0.5);
    let eval = move |flat: &[f64]| {
        let mats = unpack(flat, &shapes);
        let mut t = Tape::new();
        let ids = leaf_all(&mut t, mats);
        let mut ctx = Vec::new();
        for (i, m) in ctx_in.iter().enumerate() {
            let c = t.constant(m.clone());
            ctx.push(t.matmul_tb(c, ids[i]));
        }
        let mut cand = Vec::new();
        for (i, m) in cand_in.iter().enumerate() {
            let c = t.constant(m.clone());
            cand.push(t.matmul_tb(c, ids[3 + i]));
        }
        let head = |dir: usize| [ids[6 + 2 * dir], ids[7 + 2 * dir]];
        let (h0, h1, h2, h3) = (head(0), head(1), head(2), head(3));
        let heads = ReplayHeads {
            pseudo_to_b: &h0,
            b_to_pseudo: &h1,
            pseudo_to_c: &h2,
            c_to_pseudo: &h3,
        };
        let loss = pmr_cpc_loss(
            &mut t, ctx[0], ctx[1], ctx[2], cand[0], cand[1], cand[2], &heads, batch, k_steps,
            &weights,
        )
        .expect("valid fixture");
        let g = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&t, &g, &ids))
    };
    (x0, Box::new(eval))
}

// ---------------------------------------------------------------------------
// Whole-model case.

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_raw: 5,
        d_sem: 3,
        d_spec: 2,
        d_ctx: 3,
        hidden: 4,
        n_experts: 2,
        k_steps: 2,
        use_specific: true,
    };
    let cbc = CodebookConfig {
        k: 6,
        gamma: 0.99,
        eps_n: DEFAULT_EPS_N,
        init_scale: 1.0,
    };
    let mut m = Model::new(cfg, &cbc, seed).expect("valid fixture");
    m.ensure_modality("a").expect("valid fixture");
    m.ensure_modality("b").expect("valid fixture");
    m.ensure_pair("a", "b").expect("valid fixture");
    m
}

/// The composite smooth forward for one modality: encoder → adapter →
/// summarizer → decoder, with the semantic rows standing in for the
/// quantized stream. The straight-through estimator is intentionally not
/// the derivative of its forward map, so the whole-model FD check runs the
/// smooth data path and checks commitment against codes frozen at the base
/// point.
struct SmoothForward {
    z: NodeId,
    zbar: NodeId,
    gates: NodeId,
    ctx: NodeId,
    xhat: NodeId,
}

fn smooth_forward(
    t: &mut Tape,
    b: &mut GraphBinder<'_>,
    cfg: &ModelConfig,
    m: &str,
    x: &Mat,
    batch: usize,
) -> SmoothForward {
    let steps = x.rows() / batch;
    let enc = bind_encoder(t, b, m).expect("valid fixture");
    let xc = t.constant(x.clone());
    let (h, zbar) = encode(t, xc, &enc);
    let ad = bind_adapter(t, b, cfg, m).expect("valid fixture");
    let (z, gates) = adapter_forward(t, h, &ad);
    let sum = bind_summarizer(t, b, m).expect("valid fixture");
    let ctx = recurrent_summarize(t, z, batch, steps, &sum);
    let xhat = decode(t, z, zbar, &enc);
    SmoothForward {
        z,
        zbar,
        gates,
        ctx,
        xhat,
    }
}

/// One full stage-1-style objective (reconstruction + commitment +
/// bidirectional InfoNCE + CLUB + load balance) differentiated through every
/// parameter of a two-modality model at once, exercising the path binder and
/// gradient-map plumbing against FD over the whole flat vector.
fn case_end_to_end(seed: u64) -> (Vec<f64>, CaseEval) {
    let (batch, steps) = (2usize, 4usize);
    let model = small_model(seed);
    let mut r = rng::stream(rng::derive(seed, &[rng::str_tag("data")]));
    let x_a = rand_mat(&mut r, batch * steps, model.cfg.d_raw, 1.0);
    let x_b = rand_mat(&mut r, batch * steps, model.cfg.d_raw, 1.0);
    let t_anchor = 1usize;

    let layout: Vec<(String, usize, usize)> = model
        .params
        .paths()
        .into_iter()
        .map(|p| {
            let m = model.params.get(&p).expect("own path");
            (p, m.rows(), m.cols())
        })
        .collect();
    let mut x0 = Vec::new();
    for (path, _, _) in &layout {
        x0.extend_from_slice(model.params.get(path).expect("own path").data());
    }

    // Commitment targets assigned once at the base point; the implemented
    // loss stop-gradients the code vectors, so freezing them keeps the
    // checked function smooth and the gradient honest.
    let cfg = model.cfg;
    let base_codes = |x: &Mat, m: &str| {
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&model.params, |_| false);
        let f = smooth_forward(&mut t, &mut b, &cfg, m, x, batch);
        quantize(t.value(f.z), &model.codebook)
            .expect("valid fixture")
            .e_seq
    };
    let e0_a = base_codes(&x_a, "a");
    let e0_b = base_codes(&x_b, "b");

    let eval = move |flat: &[f64]| {
        let mut params = ParamSet::new();
        let mut off = 0;
        for (path, rows, cols) in &layout {
            let n = rows * cols;
            params.insert(
                path,
                Mat::from_vec(*rows, *cols, flat[off..off + n].to_vec())
                    .expect("layout matches flat length"),
            );
            off += n;
        }
        let mut t = Tape::new();
        let mut b = GraphBinder::new(&params, |_| true);
        let fa = smooth_forward(&mut t, &mut b, &cfg, "a", &x_a, batch);
        let fb = smooth_forward(&mut t, &mut b, &cfg, "b", &x_b, batch);

        let ra = recon_loss(&mut t, fa.xhat, &x_a);
        let rb = recon_loss(&mut t, fb.xhat, &x_b);
        let ca = commitment_loss(&mut t, fa.z, &e0_a, 0.25);
        let cb = commitment_loss(&mut t, fb.z, &e0_b, 0.25);

        let a_idx = anchor_row_indices(batch, steps, t_anchor).expect("valid fixture");
        let f_idx =
            future_row_indices(batch, steps, t_anchor, cfg.k_steps).expect("valid fixture");
        let ctx_a = t.gather_rows(fa.ctx, a_idx.clone());
        let ctx_b = t.gather_rows(fb.ctx, a_idx);
        let cand_a = t.gather_rows(fa.z, f_idx.clone());
        let cand_b = t.gather_rows(fb.z, f_idx);
        let h_ab = bind_pair_heads(&mut t, &mut b, "a", "b", cfg.k_steps).expect("valid fixture");
        let h_ba = bind_pair_heads(&mut t, &mut b, "b", "a", cfg.k_steps).expect("valid fixture");
        let l_ab = cross_cpc_loss(&mut t, ctx_a, cand_b, &h_ab, batch, cfg.k_steps, None)
            .expect("valid fixture");
        let l_ba = cross_cpc_loss(&mut t, ctx_b, cand_a, &h_ba, batch, cfg.k_steps, None)
            .expect("valid fixture");

        let qa = bind_variational(&mut t, &mut b, "a").expect("valid fixture");
        let qb = bind_variational(&mut t, &mut b, "b").expect("valid fixture");
        let mia = club_upper_bound(&mut t, fa.z, fa.zbar, &qa).expect("valid fixture");
        let mib = club_upper_bound(&mut t, fb.z, fb.zbar, &qb).expect("valid fixture");

        let ga = gate_load_loss(&mut t, fa.gates);
        let gb = gate_load_loss(&mut t, fb.gates);

        let mut total = t.add(ra, rb);
        for part in [ca, cb, l_ab, l_ba, mia, mib, ga, gb] {
            total = t.add(total, part);
        }
        let grads = t.backward(total);
        let gmap = b.gradient_map(&grads);
        let mut flat_g = Vec::with_capacity(flat.len());
        for (path, rows, cols) in &layout {
            match gmap.get(path) {
                Some(m) => flat_g.extend_from_slice(m.data()),
                None => flat_g.extend(core::iter::repeat(0.0).take(rows * cols)),
            }
        }
        (t.scalar_value(total), flat_g)
    };
    (x0, Box::new(eval))
}
