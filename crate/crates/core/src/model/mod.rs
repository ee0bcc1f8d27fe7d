//! The three-branch (series / temporal / spatial) attention transformer.
//!
//! Each window enters as three streams: the raw `w x n` values, the `w x w`
//! temporal state matrix and the `n x n` spatial state matrix. Every stream
//! is embedded to `d` channels, passed through `K` post-norm layers of
//! multi-head attention plus feed-forward, and projected back to its input
//! shape by an output head.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_KIND};
pub use config::{Branch, ModelConfig};
pub use forward::{
    affine, branch_attention, embed, forward_tape, layer_forward, mad_attention,
    AssociationMaps, Bound, ForwardOutput, ForwardVars, LayerMapVars, LayerMaps, Streams,
};
pub use gradcheck::check_total_loss;
pub use params::{
    Affine, AttentionParams, BranchLayer, Encoder, LayerLayout, Layout, ModelState, Norm,
};
