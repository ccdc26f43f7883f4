//! Shared differentiable building blocks: affine maps, stabilized softmax,
//! the gated recurrent summarizer that produces causal context vectors, and
//! scaled dot-product cross-attention.
//!
//! Weight convention throughout the crate: a weight matrix is stored
//! `d_out × d_in`, a bias as a `1 × d_out` row. Batched activations are
//! row-major `n × d`, so a layer computes `x · Wᵀ + b`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::numerics::tape::{softmax_into, NodeId, Tape};

/// x · Wᵀ + b over a batch of row vectors.
pub fn affine(t: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let h = t.matmul_tb(x, w);
    t.add_row_broadcast(h, b)
}

/// W·x + b for a single vector, with shape validation. The batched tape
/// version above is the hot path; this is the reference form.
pub fn affine_vec(w: &Mat, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "affine: weight is {}x{} but input has {} entries",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    if w.rows() != b.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "affine: weight has {} outputs but bias has {}",
            w.rows(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let acc: f64 = w.row(r).iter().zip(x).map(|(wv, xv)| wv * xv).sum();
        out.push(acc + b[r]);
    }
    Ok(out)
}

/// Max-stabilized softmax of one vector.
pub fn softmax_vec(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(CoreError::EmptyInput("softmax input"));
    }
    let mut out = alloc::vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

/// Tape nodes for the gated recurrent cell's four parameters.
///
/// `wu`/`bu` drive the update gate, `wc`/`bc` the candidate state; both
/// weights are `d_ctx × (d_in + d_ctx)` over the concatenated
/// `[input, previous state]`.
#[derive(Debug, Clone, Copy)]
pub struct SummarizerNodes {
    pub wu: NodeId,
    pub bu: NodeId,
    pub wc: NodeId,
    pub bc: NodeId,
}

/// Causal context vectors over `batch` stacked sequences of `steps` rows.
///
/// Input rows are laid out sequence-major: row `s·steps + t` is step `t` of
/// sequence `s`; the output uses the same layout with the context width.
/// The state starts at zero and advances by
/// `h_t = (1−u_t)⊙h_{t−1} + u_t⊙tanh(W_c[x_t,h_{t−1}]+b_c)` with update
/// gate `u_t = σ(W_u[x_t,h_{t−1}]+b_u)`, so row `s·steps + t` depends only
/// on steps `0..=t` of sequence `s`.
pub fn recurrent_summarize(
    t: &mut Tape,
    z: NodeId,
    batch: usize,
    steps: usize,
    p: &SummarizerNodes,
) -> NodeId {
    assert!(batch >= 1 && steps >= 1, "empty summarizer input");
    assert_eq!(
        t.value(z).rows(),
        batch * steps,
        "summarizer input rows must be batch·steps"
    );
    let d_ctx = t.value(p.wu).rows();
    let mut h = t.constant(Mat::zeros(batch, d_ctx));
    let mut per_step = Vec::with_capacity(steps);
    for step in 0..steps {
        let rows: Vec<usize> = (0..batch).map(|s| s * steps + step).collect();
        let xt = t.gather_rows(z, rows);
        let cat = t.concat_cols(xt, h);
        let pre_u = affine(t, cat, p.wu, p.bu);
        let u = t.sigmoid(pre_u);
        let pre_c = affine(t, cat, p.wc, p.bc);
        let cand = t.tanh(pre_c);
        // h + u ⊙ (cand − h) == (1−u)⊙h + u⊙cand
        let diff = t.sub(cand, h);
        let delta = t.mul(u, diff);
        h = t.add(h, delta);
        per_step.push(h);
    }
    // per_step is step-major (steps blocks of `batch` rows); restore the
    // sequence-major layout of the input.
    let stacked = t.concat_rows(&per_step);
    let order: Vec<usize> = (0..batch * steps)
        .map(|k| {
            let (s, step) = (k / steps, k % steps);
            step * batch + s
        })
        .collect();
    t.gather_rows(stacked, order)
}

/// Scaled dot-product attention: each query row attends over all key_value
/// rows; output has the query's length and the key_value width.
pub fn cross_attention(t: &mut Tape, query: NodeId, key_value: NodeId) -> NodeId {
    let d = t.value(query).cols();
    assert_eq!(
        d,
        t.value(key_value).cols(),
        "cross_attention feature dims must match"
    );
    let scores = t.matmul_tb(query, key_value);
    let scaled = t.scale(scores, 1.0 / crate::math::sqrt(d as f64));
    let attn = t.softmax_rows(scaled);
    t.matmul(attn, key_value)
}

/// Value-only cross-attention for paths that never need gradients
/// (the codebook EMA intermediaries).
pub fn cross_attention_mat(query: &Mat, key_value: &Mat) -> Result<Mat> {
    if key_value.rows() == 0 {
        return Err(CoreError::EmptyInput("cross_attention key_value"));
    }
    if query.cols() != key_value.cols() {
        return Err(CoreError::DimensionMismatch(format!(
            "cross_attention: query width {} vs key_value width {}",
            query.cols(),
            key_value.cols()
        )));
    }
    let inv_sqrt_d = 1.0 / crate::math::sqrt(query.cols() as f64);
    let mut scores = query.matmul_tb(key_value);
    scores.scale_in_place(inv_sqrt_d);
    let mut attn = Mat::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        softmax_into(scores.row(r), attn.row_mut(r));
    }
    Ok(attn.matmul(key_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::numerics::fd::fd_gradient_slice;
    use alloc::vec;

    #[test]
    fn affine_vec_identity_zero_and_hand_case() {
        let id = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(affine_vec(&id, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), [3.0, 4.0]);

        let w = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(affine_vec(&w, &[1.0], &[3.0, 4.0]).unwrap(), [12.0]);

        let zero = Mat::zeros(1, 2);
        assert_eq!(affine_vec(&zero, &[5.0], &[-7.0, 9.0]).unwrap(), [5.0]);
    }

    #[test]
    fn affine_vec_rejects_bad_shapes() {
        let w = Mat::zeros(2, 3);
        assert!(matches!(
            affine_vec(&w, &[0.0, 0.0], &[1.0, 2.0]),
            Err(CoreError::DimensionMismatch(_))
        ));
        assert!(matches!(
            affine_vec(&w, &[0.0], &[1.0, 2.0, 3.0]),
            Err(CoreError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn softmax_vec_contract_cases() {
        let even = softmax_vec(&[0.0, 0.0]).unwrap();
        assert!((even[0] - 0.5).abs() < 1e-12 && (even[1] - 0.5).abs() < 1e-12);

        let skew = softmax_vec(&[math::ln(2.0), 0.0]).unwrap();
        assert!((skew[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((skew[1] - 1.0 / 3.0).abs() < 1e-12);

        let big = softmax_vec(&[1000.0, 0.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!(big[0] > 1.0 - 1e-12 && big[1] < 1e-12);

        assert!(matches!(softmax_vec(&[]), Err(CoreError::EmptyInput(_))));
    }

    #[test]
    fn softmax_vec_shift_invariant_and_normalized() {
        let v = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let a = softmax_vec(&v).unwrap();
        let b = softmax_vec(&shifted).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn summarizer_output(z: &Mat, batch: usize, steps: usize, weights: [f64; 6]) -> Mat {
        let [a1, a2, bu, c1, c2, bc] = weights;
        let mut t = Tape::new();
        let zn = t.constant(z.clone());
        let p = SummarizerNodes {
            wu: t.leaf(Mat::from_vec(1, 2, vec![a1, a2]).unwrap()),
            bu: t.leaf(Mat::row_vec(vec![bu])),
            wc: t.leaf(Mat::from_vec(1, 2, vec![c1, c2]).unwrap()),
            bc: t.leaf(Mat::row_vec(vec![bc])),
        };
        let out = recurrent_summarize(&mut t, zn, batch, steps, &p);
        t.value(out).clone()
    }

    #[test]
    fn summarizer_matches_hand_unrolled_two_steps() {
        let (x0, x1) = (0.7, -0.4);
        let w = [0.3, -0.2, 0.1, 0.5, 0.25, -0.05];
        let [a1, a2, bu, c1, c2, bc] = w;
        let sig = |x: f64| 1.0 / (1.0 + math::exp(-x));

        let u0 = sig(a1 * x0 + bu);
        let h0 = u0 * math::tanh(c1 * x0 + bc);
        let u1 = sig(a1 * x1 + a2 * h0 + bu);
        let h1 = (1.0 - u1) * h0 + u1 * math::tanh(c1 * x1 + c2 * h0 + bc);

        let z = Mat::from_vec(2, 1, vec![x0, x1]).unwrap();
        let out = summarizer_output(&z, 1, 2, w);
        assert!((out.at(0, 0) - h0).abs() < 1e-12, "{} vs {h0}", out.at(0, 0));
        assert!((out.at(1, 0) - h1).abs() < 1e-12, "{} vs {h1}", out.at(1, 0));
    }

    #[test]
    fn summarizer_zero_weights_zero_state_stays_at_zero() {
        let z = Mat::from_vec(3, 1, vec![1.0, -2.0, 3.0]).unwrap();
        let out = summarizer_output(&z, 1, 3, [0.0; 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summarizer_is_strictly_causal() {
        let w = [0.4, 0.3, -0.1, 0.2, -0.3, 0.05];
        let base = Mat::from_vec(8, 1, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]).unwrap();
        let mut bumped = base.clone();
        // Perturb step 2 and 3 of both stacked sequences (steps = 4).
        for s in 0..2 {
            for step in 2..4 {
                let r = s * 4 + step;
                bumped.set(r, 0, bumped.at(r, 0) + 10.0);
            }
        }
        let a = summarizer_output(&base, 2, 4, w);
        let b = summarizer_output(&bumped, 2, 4, w);
        for s in 0..2 {
            for step in 0..2 {
                let r = s * 4 + step;
                assert_eq!(a.at(r, 0).to_bits(), b.at(r, 0).to_bits());
            }
            for step in 2..4 {
                let r = s * 4 + step;
                assert_ne!(a.at(r, 0).to_bits(), b.at(r, 0).to_bits());
            }
        }
    }

    #[test]
    fn summarizer_gradient_matches_fd() {
        let z = Mat::from_vec(4, 1, vec![0.3, -0.5, 0.8, 0.1]).unwrap();
        let flat0 = [0.3, -0.2, 0.1, 0.5, 0.25, -0.05];
        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let zn = t.constant(z.clone());
            let p = SummarizerNodes {
                wu: t.leaf(Mat::from_vec(1, 2, vec![flat[0], flat[1]]).unwrap()),
                bu: t.leaf(Mat::row_vec(vec![flat[2]])),
                wc: t.leaf(Mat::from_vec(1, 2, vec![flat[3], flat[4]]).unwrap()),
                bc: t.leaf(Mat::row_vec(vec![flat[5]])),
            };
            let c = recurrent_summarize(&mut t, zn, 2, 2, &p);
            let sq = t.mul(c, c);
            let loss = t.sum_all(sq);
            let grads = t.backward(loss);
            let mut flatg = Vec::new();
            for id in [p.wu, p.bu, p.wc, p.bc] {
                flatg.extend_from_slice(grads.get(id).unwrap().data());
            }
            (t.scalar_value(loss), flatg)
        };
        let (_, analytic) = run(&flat0);
        let fd = fd_gradient_slice(&mut |f: &[f64]| run(f).0, &flat0, 1e-4);
        for (a, f) in analytic.iter().zip(&fd) {
            let tol = 1e-8_f64.max(1e-4 * a.abs().max(f.abs()));
            assert!((a - f).abs() <= tol, "{a} vs {f}");
        }
    }

    #[test]
    fn attention_single_key_returns_that_value() {
        let q = Mat::from_vec(3, 2, vec![5.0, -1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let kv = Mat::from_vec(1, 2, vec![0.7, -0.3]).unwrap();
        let out = cross_attention_mat(&q, &kv).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), kv.row(0));
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        // Two key rows that are identical give equal scores; any value rows
        // then mix uniformly. Here keys==values so output = midpoint.
        let q = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let kv = Mat::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let out = cross_attention_mat(&q, &kv).unwrap();
        assert!((out.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((out.at(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_two_key_weights_match_direct_softmax() {
        let q = Mat::from_vec(1, 2, vec![1.0, 0.5]).unwrap();
        let kv = Mat::from_vec(2, 2, vec![0.8, -0.2, -0.4, 0.6]).unwrap();
        let d = 2.0;
        let s0 = (1.0 * 0.8 + 0.5 * -0.2) / math::sqrt(d);
        let s1 = (1.0 * -0.4 + 0.5 * 0.6) / math::sqrt(d);
        let w0 = 1.0 / (1.0 + math::exp(-(s0 - s1))); // 2-way softmax
        let out = cross_attention_mat(&q, &kv).unwrap();
        for c in 0..2 {
            let want = w0 * kv.at(0, c) + (1.0 - w0) * kv.at(1, c);
            assert!((out.at(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_and_mismatched_inputs() {
        let q = Mat::zeros(2, 3);
        assert!(matches!(
            cross_attention_mat(&q, &Mat::zeros(0, 3)),
            Err(CoreError::EmptyInput(_))
        ));
        assert!(matches!(
            cross_attention_mat(&q, &Mat::zeros(2, 4)),
            Err(CoreError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn attention_tape_and_mat_versions_agree() {
        let q = Mat::from_vec(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap();
        let kv = Mat::from_vec(4, 3, vec![
            0.3, 0.1, -0.2, 0.8, -0.9, 0.4, -0.5, 0.2, 0.6, 0.0, 0.7, -0.1,
        ])
        .unwrap();
        let direct = cross_attention_mat(&q, &kv).unwrap();
        let mut t = Tape::new();
        let qn = t.constant(q);
        let kvn = t.constant(kv);
        let out = cross_attention(&mut t, qn, kvn);
        for (a, b) in t.value(out).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
