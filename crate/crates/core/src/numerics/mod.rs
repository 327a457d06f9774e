//! Dense `f64` tensors with a tape-based reverse-mode engine.

pub mod gradcheck;
pub mod graph;
mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var, GELU_COEFF};
pub use tensor::{cosine_similarity, Tensor};
