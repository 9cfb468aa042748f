//! Minimal dense-tensor math with reverse-mode autodiff and Adam — just
//! enough for the flow and encoder networks in this crate.

pub mod adam;
pub mod mlp;
pub mod params;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use mlp::{mlp_call_count, CtxProjection, Init, Mlp};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
