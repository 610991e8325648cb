//! Bidirectional attentional LSTM encoder-decoder with a bidirectional
//! beam search, trained with a γ-weighted joint forward/backward loss.

pub mod check;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod recurrent;
pub mod rouge;
pub mod training;

pub use data::{Example, SyntheticTask, Vocab};
pub use decoding::{BeamConfig, Hypothesis};
pub use error::{Error, Result};
pub use model::{count_parameters, ModelConfig, ModelParams};
pub use training::{AdagradState, TrainConfig};
pub use numerics::{Tape, Tensor, ValueId};
pub use recurrent::{Direction, LstmParams, LstmState};

/// Padding id, never predicted or scored.
pub const PAD_ID: usize = 0;
/// Unknown-token id.
pub const UNK_ID: usize = 1;
/// Start-of-sequence sentinel; terminal symbol of the backward decoder.
pub const START_ID: usize = 2;
/// End-of-sequence sentinel; terminal symbol of the forward decoder.
pub const STOP_ID: usize = 3;
/// Ids below this value are reserved and excluded from data tokens.
pub const RESERVED_TOKENS: usize = 4;
