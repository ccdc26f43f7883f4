//! Continual mixture-of-experts adapter.
//!
//! Every expert is an affine pair: a per-modality specific layer followed
//! by a common layer shared by all modalities routed through that expert.
//! A softmax router mixes all experts densely per timestep, and the load
//! balancing loss penalizes column loads that stray from the uniform
//! ideal.

use crate::numerics::layers::affine;
use crate::numerics::tape::{NodeId, Tape};

/// Tape handles for one expert. `specific` is absent when the adapter runs
/// in common-only mode (the specific-layer ablation).
#[derive(Debug, Clone, Copy)]
pub struct ExpertNodes {
    pub specific: Option<(NodeId, NodeId)>,
    pub common: (NodeId, NodeId),
}

#[derive(Debug, Clone)]
pub struct AdapterNodes {
    /// (weight, bias) of the gate's linear layer.
    pub router: (NodeId, NodeId),
    pub experts: alloc::vec::Vec<ExpertNodes>,
}

/// common(specific_m(h)) — specific first, common last, so expert outputs
/// live in the shared space.
pub fn expert_forward(t: &mut Tape, h: NodeId, e: &ExpertNodes) -> NodeId {
    let s = match e.specific {
        Some((w, b)) => affine(t, h, w, b),
        None => h,
    };
    affine(t, s, e.common.0, e.common.1)
}

/// Dense MoE combination: z_t = Σ_i G_i(h_t)·E_i(h_t). Returns the mixed
/// features and the gate matrix (rows sum to 1).
pub fn adapter_forward(t: &mut Tape, h: NodeId, a: &AdapterNodes) -> (NodeId, NodeId) {
    assert!(!a.experts.is_empty(), "adapter needs at least one expert");
    let logits = affine(t, h, a.router.0, a.router.1);
    let gates = t.softmax_rows(logits);
    let mut z = None;
    for (i, e) in a.experts.iter().enumerate() {
        let out = expert_forward(t, h, e);
        let gi = t.slice_cols(gates, i, i + 1);
        let contrib = t.mul_col_broadcast(out, gi);
        z = Some(match z {
            None => contrib,
            Some(acc) => t.add(acc, contrib),
        });
    }
    (z.expect("at least one expert"), gates)
}

/// Load-balancing loss over a B×O gate matrix: (1/O) Σ_j (L_j/I − 1)² with
/// column loads L_j = Σ_i G_ij and ideal load I = B/O.
pub fn gate_load_loss(t: &mut Tape, gates: NodeId) -> NodeId {
    let (b, o) = t.value(gates).shape();
    assert!(b >= 1, "gate matrix needs at least one row");
    let loads = t.col_sums(gates);
    let scaled = t.scale(loads, o as f64 / b as f64);
    let dev = t.add_scalar(scaled, -1.0);
    let sq = t.mul(dev, dev);
    let total = t.sum_all(sq);
    t.scale(total, 1.0 / o as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::numerics::fd::fd_gradient_slice;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye(t: &mut Tape, n: usize) -> NodeId {
        t.leaf(Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }))
    }

    fn zeros(t: &mut Tape, r: usize, c: usize) -> NodeId {
        t.leaf(Mat::zeros(r, c))
    }

    #[test]
    fn identity_expert_is_identity() {
        let mut t = Tape::new();
        let e = ExpertNodes {
            specific: Some((eye(&mut t, 3), zeros(&mut t, 1, 3))),
            common: (eye(&mut t, 3), zeros(&mut t, 1, 3)),
        };
        let h = t.constant(Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap());
        let out = expert_forward(&mut t, h, &e);
        assert_eq!(t.value(out), t.value(h));
    }

    #[test]
    fn expert_composition_order_is_specific_then_common() {
        // specific = 2·I, common = I with bias 1: (1,1) → (3,3).
        let mut t = Tape::new();
        let two = t.leaf(Mat::from_fn(2, 2, |r, c| if r == c { 2.0 } else { 0.0 }));
        let e = ExpertNodes {
            specific: Some((two, zeros(&mut t, 1, 2))),
            common: (eye(&mut t, 2), t.leaf(Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap())),
        };
        let h = t.constant(Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap());
        let out = expert_forward(&mut t, h, &e);
        assert_eq!(t.value(out).row(0), &[3.0, 3.0]);
    }

    #[test]
    fn common_layer_shared_specific_layers_private() {
        // Two modalities route through the same expert: the common node is
        // reused, each modality brings its own specific node. Backward of
        // one modality's loss must reach the shared common weight but not
        // the other modality's specific weight.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let common = (
            t.leaf(Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))),
            t.leaf(Mat::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0))),
        );
        let spec_x = (
            t.leaf(Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))),
            zeros(&mut t, 1, 2),
        );
        let spec_y = (
            t.leaf(Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))),
            zeros(&mut t, 1, 2),
        );
        let h = t.constant(Mat::from_vec(1, 2, vec![0.7, -0.3]).unwrap());
        let out_x = expert_forward(&mut t, h, &ExpertNodes { specific: Some(spec_x), common });
        let out_y = expert_forward(&mut t, h, &ExpertNodes { specific: Some(spec_y), common });
        assert_ne!(t.value(out_x), t.value(out_y));

        let sq = t.mul(out_y, out_y);
        let loss_y = t.sum_all(sq);
        let grads = t.backward(loss_y);
        assert!(grads.get(common.0).is_some(), "common weight reached");
        assert!(grads.get(spec_y.0).is_some(), "own specific reached");
        assert!(grads.get(spec_x.0).is_none(), "other specific untouched");
    }

    #[test]
    fn single_expert_passes_through_with_unit_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let e = ExpertNodes {
            specific: Some((
                t.leaf(Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0))),
                zeros(&mut t, 1, 3),
            )),
            common: (eye(&mut t, 3), zeros(&mut t, 1, 3)),
        };
        let a = AdapterNodes {
            router: (zeros(&mut t, 1, 3), zeros(&mut t, 1, 1)),
            experts: vec![e],
        };
        let h = t.constant(Mat::from_vec(2, 3, vec![0.3, 0.6, -0.1, 1.0, 0.0, 0.5]).unwrap());
        let (z, gates) = adapter_forward(&mut t, h, &a);
        let direct = expert_forward(&mut t, h, &a.experts[0]);
        assert_eq!(t.value(z), t.value(direct));
        assert!(t.value(gates).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn convex_combination_of_scalar_experts() {
        // Bias-only experts outputting 4 and 8; router bias (0, ln 3)
        // makes the gates exactly (0.25, 0.75) → mixed output 7.
        let mut t = Tape::new();
        let mk = |t: &mut Tape, v: f64| ExpertNodes {
            specific: Some((zeros(t, 1, 1), zeros(t, 1, 1))),
            common: (zeros(t, 1, 1), t.leaf(Mat::scalar(v))),
        };
        let e1 = mk(&mut t, 4.0);
        let e2 = mk(&mut t, 8.0);
        let a = AdapterNodes {
            router: (
                zeros(&mut t, 2, 1),
                t.leaf(Mat::from_vec(1, 2, vec![0.0, crate::math::ln(3.0)]).unwrap()),
            ),
            experts: vec![e1, e2],
        };
        let h = t.constant(Mat::scalar(0.0));
        let (z, gates) = adapter_forward(&mut t, h, &a);
        assert!((t.value(gates).at(0, 0) - 0.25).abs() < 1e-12);
        assert!((t.value(gates).at(0, 1) - 0.75).abs() < 1e-12);
        assert!((t.value(z).at(0, 0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_router_selects_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let mk = |t: &mut Tape, rng: &mut ChaCha8Rng| ExpertNodes {
            specific: Some((
                t.leaf(Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))),
                zeros(t, 1, 2),
            )),
            common: (
                t.leaf(Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))),
                zeros(t, 1, 2),
            ),
        };
        let e1 = mk(&mut t, &mut rng);
        let e2 = mk(&mut t, &mut rng);
        let a = AdapterNodes {
            router: (
                zeros(&mut t, 2, 2),
                t.leaf(Mat::from_vec(1, 2, vec![1000.0, 0.0]).unwrap()),
            ),
            experts: vec![e1, e2],
        };
        let h = t.constant(Mat::from_vec(1, 2, vec![0.4, -0.9]).unwrap());
        let (z, gates) = adapter_forward(&mut t, h, &a);
        let only = expert_forward(&mut t, h, &a.experts[0]);
        for (got, want) in t.value(z).data().iter().zip(t.value(only).data()) {
            assert!((got - want).abs() < 1e-9);
        }
        let g = t.value(gates);
        assert!((g.at(0, 0) - 1.0).abs() < 1e-9);
        // Rows always sum to 1.
        assert!((g.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gate_load_loss_oracle_cases() {
        // Perfect balance → 0.
        let mut t = Tape::new();
        let g = t.constant(Mat::from_vec(3, 3, vec![1.0 / 3.0; 9]).unwrap());
        let l = gate_load_loss(&mut t, g);
        assert!(t.scalar_value(l).abs() < 1e-15);

        // B=2, O=2, both rows on expert 0: loads (2,0), ideal 1 → 1.0.
        let mut t = Tape::new();
        let g = t.constant(Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = gate_load_loss(&mut t, g);
        assert!((t.scalar_value(l) - 1.0).abs() < 1e-12);

        // B=4, O=2, rows all (0.75, 0.25): loads (3,1), ideal 2 → 0.25.
        let mut t = Tape::new();
        let g = t.constant(Mat::from_vec(4, 2, vec![[0.75, 0.25]; 4].concat()).unwrap());
        let l = gate_load_loss(&mut t, g);
        assert!((t.scalar_value(l) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gate_load_loss_nonnegative_and_zero_only_at_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..5);
            let mut g = Mat::zeros(rows, cols);
            for r in 0..rows {
                let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (c, v) in raw.iter().enumerate() {
                    g.set(r, c, v / s);
                }
            }
            let loads: Vec<f64> = (0..cols)
                .map(|c| (0..rows).map(|r| g.at(r, c)).sum())
                .collect();
            let ideal = rows as f64 / cols as f64;
            let balanced = loads.iter().all(|l| (l - ideal).abs() < 1e-12);
            let mut t = Tape::new();
            let gn = t.constant(g);
            let l = gate_load_loss(&mut t, gn);
            let v = t.scalar_value(l);
            assert!(v >= 0.0);
            assert_eq!(v < 1e-12, balanced);
        }
    }

    #[test]
    fn adapter_and_gate_gradients_match_fd() {
        // One flat vector covering router + two experts (specific+common),
        // loss = mean(z²) + gate load loss.
        let (d, o) = (3, 2);
        let sizes = [
            o * d,
            o, // router w, b
            d * d,
            d,
            d * d,
            d, // expert 1 specific, common
            d * d,
            d,
            d * d,
            d, // expert 2
        ];
        let total: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flat0: Vec<f64> = (0..total).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let h = Mat::from_fn(5, d, |_, _| rng.gen_range(-1.0..1.0));

        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let mut at = 0;
            let mut take = |t: &mut Tape, rows: usize, cols: usize| {
                let m = Mat::from_vec(rows, cols, flat[at..at + rows * cols].to_vec()).unwrap();
                at += rows * cols;
                t.leaf(m)
            };
            let router = (take(&mut t, o, d), take(&mut t, 1, o));
            let mut experts = Vec::new();
            for _ in 0..o {
                let specific = Some((take(&mut t, d, d), take(&mut t, 1, d)));
                let common = (take(&mut t, d, d), take(&mut t, 1, d));
                experts.push(ExpertNodes { specific, common });
            }
            let ids: Vec<NodeId> = {
                let mut v = vec![router.0, router.1];
                for e in &experts {
                    let (sw, sb) = e.specific.unwrap();
                    v.extend([sw, sb, e.common.0, e.common.1]);
                }
                v
            };
            let a = AdapterNodes { router, experts };
            let hn = t.constant(h.clone());
            let (z, gates) = adapter_forward(&mut t, hn, &a);
            let sq = t.mul(z, z);
            let fit = t.mean_all(sq);
            let bal = gate_load_loss(&mut t, gates);
            let loss = t.add(fit, bal);
            let grads = t.backward(loss);
            let mut g = Vec::new();
            for id in ids {
                g.extend_from_slice(grads.get(id).unwrap().data());
            }
            (t.scalar_value(loss), g)
        };
        let (_, analytic) = run(&flat0);
        let fd = fd_gradient_slice(&mut |f: &[f64]| run(f).0, &flat0, 1e-4);
        for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
            let tol = 1e-8_f64.max(1e-4 * a.abs().max(f.abs()));
            assert!((a - f).abs() <= tol, "coord {i}: {a} vs {f}");
        }
    }
}
