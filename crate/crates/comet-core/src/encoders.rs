//! Per-modality encoders and decoder.
//!
//! Each modality owns three small perceptrons: the semantic front (feeds
//! the adapter), the specific encoder (captures what the shared space
//! should not), and the decoder that rebuilds raw features from a
//! quantized code and the specific features. All are per-timestep maps —
//! a batch of sequences is just a stack of rows.

use crate::numerics::layers::affine;
use crate::numerics::tape::{NodeId, Tape};

/// Tape handles for one 2-layer perceptron (affine → ELU → affine).
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn mlp2(t: &mut Tape, x: NodeId, p: &MlpNodes) -> NodeId {
    let h = affine(t, x, p.w1, p.b1);
    let a = t.elu(h);
    affine(t, a, p.w2, p.b2)
}

/// Tape handles for one modality's encoder stack.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    /// Φ_front: D_raw → D_sem, feeds the adapter.
    pub front: MlpNodes,
    /// Ψ: D_raw → D_spec.
    pub spec: MlpNodes,
    /// Decoder: (D_code + D_spec) → D_raw.
    pub dec: MlpNodes,
}

/// x (n×D_raw) → (h: n×D_sem pre-adapter semantic, z̄: n×D_spec specific).
pub fn encode(t: &mut Tape, x: NodeId, enc: &EncoderNodes) -> (NodeId, NodeId) {
    (mlp2(t, x, &enc.front), mlp2(t, x, &enc.spec))
}

/// Reconstruct raw features from per-timestep [e_t ‖ z̄_t].
pub fn decode(t: &mut Tape, e_seq: NodeId, zbar: NodeId, enc: &EncoderNodes) -> NodeId {
    assert_eq!(
        t.value(e_seq).rows(),
        t.value(zbar).rows(),
        "decode inputs must share a timestep count"
    );
    let cat = t.concat_cols(e_seq, zbar);
    mlp2(t, cat, &enc.dec)
}
