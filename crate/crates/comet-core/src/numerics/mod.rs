//! Differentiable computation: a reverse-mode tape over `Mat`, shared layer
//! builders (affine, softmax, gated recurrent summarizer, cross-attention),
//! and the independent finite-difference oracle that every analytic gradient
//! in the repository is validated against.

pub mod fd;
pub mod layers;
pub mod tape;

pub use fd::{fd_gradient_slice, finite_difference_gradient};
pub use layers::{
    affine, affine_vec, cross_attention, cross_attention_mat, recurrent_summarize, softmax_vec,
    SummarizerNodes,
};
pub use tape::{Gradients, NodeId, Tape};
