//! Dense-tensor math and reverse-mode differentiation.

pub mod tape;
pub mod tensor;

pub use tape::{sigmoid, Tape, ValueId};
pub use tensor::{clip_global_norm, Tensor};
