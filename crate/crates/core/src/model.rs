//! Bidirectional encoder, attention, and the two cross-initialized
//! attentional decoders.
//!
//! The encoder runs one LSTM in each direction over the (optionally
//! reversed) source. The forward decoder is seeded with the backward
//! encoder's final state and the backward decoder with the forward
//! encoder's final state. Each decoder step feeds the previous context
//! vector into the LSTM input, attends over the concatenated encoder
//! states with its post-step hidden state, and projects
//! `[h; context; embedded context token]` to a log-distribution.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, ValueId};
use crate::recurrent::{embed, lstm_step, run_sequence, BoundLstm, Direction, LstmParams, TapedState};
use crate::{RESERVED_TOKENS, START_ID, STOP_ID};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameter count reported for the original 50k-vocab model this
/// implementation is based on; that model additionally carries copy and
/// coverage parameters that are out of scope here, so the figure is for
/// side-by-side comparison, not equality.
pub const REFERENCE_PARAM_COUNT: u64 = 34_434_722;

/// Architecture dimensions and sequence limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Hidden size per direction.
    pub hidden_dim: usize,
    pub attention_dim: usize,
    /// Reverse the source token order before encoding.
    pub reverse_source: bool,
    pub max_source_len: usize,
    pub max_target_len: usize,
    /// Use one attention parameter set for both decoders.
    pub share_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            vocab_size: 50_000,
            embedding_dim: 128,
            hidden_dim: 256,
            attention_dim: 512,
            reverse_source: true,
            max_source_len: 400,
            max_target_len: 100,
            share_attention: false,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and synthetic tasks.
    pub fn toy(vocab_size: usize, embedding_dim: usize, hidden_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embedding_dim,
            hidden_dim,
            attention_dim: 2 * hidden_dim,
            reverse_source: true,
            max_source_len: 400,
            max_target_len: 100,
            share_attention: false,
        }
    }

    /// Decoder LSTM input width: embedded token plus fed-back context.
    pub fn decoder_input_dim(&self) -> usize {
        self.embedding_dim + 2 * self.hidden_dim
    }

    /// Output projection input width: `[h; context; embedded token]`.
    pub fn output_feature_dim(&self) -> usize {
        3 * self.hidden_dim + self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must exceed the {RESERVED_TOKENS} reserved ids, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Attention parameters for one decoder direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    /// `[A, H]` applied to the decoder hidden state.
    pub query_weights: Tensor,
    /// `[A, 2H]` applied to each encoder memory vector.
    pub memory_weights: Tensor,
    /// `[A]` score vector.
    pub score: Tensor,
    /// `[A]` bias inside the tanh.
    pub bias: Tensor,
}

impl AttnParams {
    fn init<R: rand::Rng>(config: &ModelConfig, scale: f64, rng: &mut R) -> AttnParams {
        let (a, h) = (config.attention_dim, config.hidden_dim);
        AttnParams {
            query_weights: Tensor::uniform(&[a, h], scale, rng),
            memory_weights: Tensor::uniform(&[a, 2 * h], scale, rng),
            score: Tensor::uniform(&[a], scale, rng),
            bias: Tensor::zeros(&[a]),
        }
    }

}

/// Vocabulary projection for one decoder direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputParams {
    /// `[V, 3H+E]`
    pub weights: Tensor,
    /// `[V]`
    pub bias: Tensor,
}

impl OutputParams {
    fn init<R: rand::Rng>(config: &ModelConfig, scale: f64, rng: &mut R) -> OutputParams {
        OutputParams {
            weights: Tensor::uniform(&[config.vocab_size, config.output_feature_dim()], scale, rng),
            bias: Tensor::zeros(&[config.vocab_size]),
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `[V, E]`, shared by the encoder and both decoders.
    pub embedding: Tensor,
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    pub dec_fwd: LstmParams,
    pub dec_bwd: LstmParams,
    pub attn_fwd: AttnParams,
    pub attn_bwd: AttnParams,
    pub out_fwd: OutputParams,
    pub out_bwd: OutputParams,
}

/// Default initialization scale for all weight matrices.
pub const INIT_SCALE: f64 = 0.1;

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> ModelParams {
        ModelParams::init_with_scale(config, seed, INIT_SCALE)
    }

    pub fn init_with_scale(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        let mut params = ModelParams {
            embedding: Tensor::uniform(&[config.vocab_size, e], scale, &mut rng),
            enc_fwd: LstmParams::init(h, e, scale, &mut rng),
            enc_bwd: LstmParams::init(h, e, scale, &mut rng),
            dec_fwd: LstmParams::init(h, config.decoder_input_dim(), scale, &mut rng),
            dec_bwd: LstmParams::init(h, config.decoder_input_dim(), scale, &mut rng),
            attn_fwd: AttnParams::init(config, scale, &mut rng),
            attn_bwd: AttnParams::init(config, scale, &mut rng),
            out_fwd: OutputParams::init(config, scale, &mut rng),
            out_bwd: OutputParams::init(config, scale, &mut rng),
        };
        if config.share_attention {
            params.attn_bwd = params.attn_fwd.clone();
        }
        params
    }

    pub fn zeros(config: &ModelConfig) -> ModelParams {
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        ModelParams {
            embedding: Tensor::zeros(&[config.vocab_size, e]),
            enc_fwd: LstmParams::zeros(h, e),
            enc_bwd: LstmParams::zeros(h, e),
            dec_fwd: LstmParams::zeros(h, config.decoder_input_dim()),
            dec_bwd: LstmParams::zeros(h, config.decoder_input_dim()),
            attn_fwd: AttnParams {
                query_weights: Tensor::zeros(&[config.attention_dim, h]),
                memory_weights: Tensor::zeros(&[config.attention_dim, 2 * h]),
                score: Tensor::zeros(&[config.attention_dim]),
                bias: Tensor::zeros(&[config.attention_dim]),
            },
            attn_bwd: AttnParams {
                query_weights: Tensor::zeros(&[config.attention_dim, h]),
                memory_weights: Tensor::zeros(&[config.attention_dim, 2 * h]),
                score: Tensor::zeros(&[config.attention_dim]),
                bias: Tensor::zeros(&[config.attention_dim]),
            },
            out_fwd: OutputParams {
                weights: Tensor::zeros(&[config.vocab_size, config.output_feature_dim()]),
                bias: Tensor::zeros(&[config.vocab_size]),
            },
            out_bwd: OutputParams {
                weights: Tensor::zeros(&[config.vocab_size, config.output_feature_dim()]),
                bias: Tensor::zeros(&[config.vocab_size]),
            },
        }
    }

    /// Named tensors in a fixed order; checkpointing, clipping, and the
    /// optimizer all iterate in this order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("embedding", &self.embedding),
            ("enc_fwd.input_weights", &self.enc_fwd.input_weights),
            ("enc_fwd.recurrent_weights", &self.enc_fwd.recurrent_weights),
            ("enc_fwd.bias", &self.enc_fwd.bias),
            ("enc_bwd.input_weights", &self.enc_bwd.input_weights),
            ("enc_bwd.recurrent_weights", &self.enc_bwd.recurrent_weights),
            ("enc_bwd.bias", &self.enc_bwd.bias),
            ("dec_fwd.input_weights", &self.dec_fwd.input_weights),
            ("dec_fwd.recurrent_weights", &self.dec_fwd.recurrent_weights),
            ("dec_fwd.bias", &self.dec_fwd.bias),
            ("dec_bwd.input_weights", &self.dec_bwd.input_weights),
            ("dec_bwd.recurrent_weights", &self.dec_bwd.recurrent_weights),
            ("dec_bwd.bias", &self.dec_bwd.bias),
            ("attn_fwd.query_weights", &self.attn_fwd.query_weights),
            ("attn_fwd.memory_weights", &self.attn_fwd.memory_weights),
            ("attn_fwd.score", &self.attn_fwd.score),
            ("attn_fwd.bias", &self.attn_fwd.bias),
            ("attn_bwd.query_weights", &self.attn_bwd.query_weights),
            ("attn_bwd.memory_weights", &self.attn_bwd.memory_weights),
            ("attn_bwd.score", &self.attn_bwd.score),
            ("attn_bwd.bias", &self.attn_bwd.bias),
            ("out_fwd.weights", &self.out_fwd.weights),
            ("out_fwd.bias", &self.out_fwd.bias),
            ("out_bwd.weights", &self.out_bwd.weights),
            ("out_bwd.bias", &self.out_bwd.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("embedding", &mut self.embedding),
            ("enc_fwd.input_weights", &mut self.enc_fwd.input_weights),
            ("enc_fwd.recurrent_weights", &mut self.enc_fwd.recurrent_weights),
            ("enc_fwd.bias", &mut self.enc_fwd.bias),
            ("enc_bwd.input_weights", &mut self.enc_bwd.input_weights),
            ("enc_bwd.recurrent_weights", &mut self.enc_bwd.recurrent_weights),
            ("enc_bwd.bias", &mut self.enc_bwd.bias),
            ("dec_fwd.input_weights", &mut self.dec_fwd.input_weights),
            ("dec_fwd.recurrent_weights", &mut self.dec_fwd.recurrent_weights),
            ("dec_fwd.bias", &mut self.dec_fwd.bias),
            ("dec_bwd.input_weights", &mut self.dec_bwd.input_weights),
            ("dec_bwd.recurrent_weights", &mut self.dec_bwd.recurrent_weights),
            ("dec_bwd.bias", &mut self.dec_bwd.bias),
            ("attn_fwd.query_weights", &mut self.attn_fwd.query_weights),
            ("attn_fwd.memory_weights", &mut self.attn_fwd.memory_weights),
            ("attn_fwd.score", &mut self.attn_fwd.score),
            ("attn_fwd.bias", &mut self.attn_fwd.bias),
            ("attn_bwd.query_weights", &mut self.attn_bwd.query_weights),
            ("attn_bwd.memory_weights", &mut self.attn_bwd.memory_weights),
            ("attn_bwd.score", &mut self.attn_bwd.score),
            ("attn_bwd.bias", &mut self.attn_bwd.bias),
            ("out_fwd.weights", &mut self.out_fwd.weights),
            ("out_fwd.bias", &mut self.out_fwd.bias),
            ("out_bwd.weights", &mut self.out_bwd.weights),
            ("out_bwd.bias", &mut self.out_bwd.bias),
        ]
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let expected = ModelParams::zeros(config);
        for ((name, t), (_, e)) in self.tensors().iter().zip(expected.tensors()) {
            if t.shape() != e.shape() {
                return Err(Error::InvalidConfig(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
            t.check_finite(name)?;
        }
        Ok(())
    }
}

/// Exact count of scalar learnables under this architecture.
pub fn count_parameters(config: &ModelConfig) -> u64 {
    let v = config.vocab_size as u64;
    let e = config.embedding_dim as u64;
    let h = config.hidden_dim as u64;
    let a = config.attention_dim as u64;
    let lstm = |input: u64| 4 * h * input + 4 * h * h + 4 * h;
    let attn = a * h + a * 2 * h + a + a;
    let out = v * (3 * h + e) + v;
    let attn_sets = if config.share_attention { 1 } else { 2 };
    v * e + 2 * lstm(e) + 2 * lstm(e + 2 * h) + attn_sets * attn + 2 * out
}

/// Model parameters bound onto a tape as leaves.
pub struct BoundParams {
    pub embedding: ValueId,
    pub enc_fwd: BoundLstm,
    pub enc_bwd: BoundLstm,
    pub dec_fwd: BoundLstm,
    pub dec_bwd: BoundLstm,
    pub attn_fwd: BoundAttn,
    pub attn_bwd: BoundAttn,
    pub out_fwd: BoundOutput,
    pub out_bwd: BoundOutput,
}

#[derive(Clone, Copy)]
pub struct BoundAttn {
    pub query_weights: ValueId,
    pub memory_weights: ValueId,
    pub score: ValueId,
    pub bias: ValueId,
}

#[derive(Clone, Copy)]
pub struct BoundOutput {
    pub weights: ValueId,
    pub bias: ValueId,
}

impl BoundAttn {
    fn bind(tape: &mut Tape, p: &AttnParams) -> Result<BoundAttn> {
        Ok(BoundAttn {
            query_weights: tape.leaf(&p.query_weights)?,
            memory_weights: tape.leaf(&p.memory_weights)?,
            score: tape.leaf(&p.score)?,
            bias: tape.leaf(&p.bias)?,
        })
    }

    fn grads(&self, tape: &Tape) -> AttnParams {
        AttnParams {
            query_weights: tape.grad_or_zeros(self.query_weights),
            memory_weights: tape.grad_or_zeros(self.memory_weights),
            score: tape.grad_or_zeros(self.score),
            bias: tape.grad_or_zeros(self.bias),
        }
    }
}

impl BoundOutput {
    fn bind(tape: &mut Tape, p: &OutputParams) -> Result<BoundOutput> {
        Ok(BoundOutput {
            weights: tape.leaf(&p.weights)?,
            bias: tape.leaf(&p.bias)?,
        })
    }

    fn grads(&self, tape: &Tape) -> OutputParams {
        OutputParams {
            weights: tape.grad_or_zeros(self.weights),
            bias: tape.grad_or_zeros(self.bias),
        }
    }
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, config: &ModelConfig) -> Result<BoundParams> {
        params.validate(config)?;
        let attn_fwd = BoundAttn::bind(tape, &params.attn_fwd)?;
        // With shared attention both directions read (and write
        // gradients through) the forward leaves.
        let attn_bwd = if config.share_attention {
            attn_fwd
        } else {
            BoundAttn::bind(tape, &params.attn_bwd)?
        };
        Ok(BoundParams {
            embedding: tape.leaf(&params.embedding)?,
            enc_fwd: BoundLstm::bind(tape, &params.enc_fwd)?,
            enc_bwd: BoundLstm::bind(tape, &params.enc_bwd)?,
            dec_fwd: BoundLstm::bind(tape, &params.dec_fwd)?,
            dec_bwd: BoundLstm::bind(tape, &params.dec_bwd)?,
            attn_fwd,
            attn_bwd,
            out_fwd: BoundOutput::bind(tape, &params.out_fwd)?,
            out_bwd: BoundOutput::bind(tape, &params.out_bwd)?,
        })
    }

    /// Gradients of the last backward sweep in ModelParams layout.
    /// With shared attention the combined gradient sits in `attn_fwd`
    /// and `attn_bwd` is zero.
    pub fn gradients(&self, tape: &Tape, config: &ModelConfig) -> ModelParams {
        let attn_fwd = self.attn_fwd.grads(tape);
        let attn_bwd = if config.share_attention {
            AttnParams {
                query_weights: Tensor::zeros(self.attn_fwd_shape(tape, |a| a.query_weights)),
                memory_weights: Tensor::zeros(self.attn_fwd_shape(tape, |a| a.memory_weights)),
                score: Tensor::zeros(self.attn_fwd_shape(tape, |a| a.score)),
                bias: Tensor::zeros(self.attn_fwd_shape(tape, |a| a.bias)),
            }
        } else {
            self.attn_bwd.grads(tape)
        };
        ModelParams {
            embedding: tape.grad_or_zeros(self.embedding),
            enc_fwd: self.enc_fwd.grads(tape),
            enc_bwd: self.enc_bwd.grads(tape),
            dec_fwd: self.dec_fwd.grads(tape),
            dec_bwd: self.dec_bwd.grads(tape),
            attn_fwd,
            attn_bwd,
            out_fwd: self.out_fwd.grads(tape),
            out_bwd: self.out_bwd.grads(tape),
        }
    }

    fn attn_fwd_shape<'t>(&self, tape: &'t Tape, f: impl Fn(&BoundAttn) -> ValueId) -> &'t [usize] {
        tape.value(f(&self.attn_fwd)).shape()
    }

    pub fn dec(&self, direction: Direction) -> &BoundLstm {
        match direction {
            Direction::Forward => &self.dec_fwd,
            Direction::Backward => &self.dec_bwd,
        }
    }

    pub fn attn(&self, direction: Direction) -> &BoundAttn {
        match direction {
            Direction::Forward => &self.attn_fwd,
            Direction::Backward => &self.attn_bwd,
        }
    }

    pub fn out(&self, direction: Direction) -> &BoundOutput {
        match direction {
            Direction::Forward => &self.out_fwd,
            Direction::Backward => &self.out_bwd,
        }
    }
}

/// Per-position encoder states plus the concatenated attention memory.
pub struct EncoderOutput {
    pub fwd_states: Vec<TapedState>,
    pub bwd_states: Vec<TapedState>,
    /// Per-position `[2H]` vectors `[fwd_h; bwd_h]`.
    pub memory: Vec<ValueId>,
    /// `[2H, T]` matrix with `memory[j]` as column `j`.
    pub memory_matrix: ValueId,
    pub final_fwd: TapedState,
    pub final_bwd: TapedState,
}

impl EncoderOutput {
    pub fn source_len(&self) -> usize {
        self.memory.len()
    }
}

/// Runs both directional encoder passes. With `reverse_source` the
/// token order is reversed before embedding; all outputs align to the
/// reversed order.
pub fn encode(
    tape: &mut Tape,
    token_ids: &[usize],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<EncoderOutput> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput("encode"));
    }
    if token_ids.len() > config.max_source_len {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            limit: config.max_source_len,
        });
    }
    let ordered: Vec<usize> = if config.reverse_source {
        token_ids.iter().rev().copied().collect()
    } else {
        token_ids.to_vec()
    };
    let inputs = embed(tape, &ordered, bound.embedding)?;
    let zero = TapedState::from_state(tape, &crate::recurrent::LstmState::zeros(config.hidden_dim))?;
    let (fwd_states, final_fwd) =
        run_sequence(tape, &inputs, &zero, &bound.enc_fwd, Direction::Forward)?;
    let (bwd_states, final_bwd) =
        run_sequence(tape, &inputs, &zero, &bound.enc_bwd, Direction::Backward)?;
    let memory: Vec<ValueId> = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(f, b)| tape.concat(&[f.h, b.h]))
        .collect::<Result<_>>()?;
    let memory_matrix = tape.stack_cols(&memory)?;
    Ok(EncoderOutput {
        fwd_states,
        bwd_states,
        memory,
        memory_matrix,
        final_fwd,
        final_bwd,
    })
}

/// Cross-initialization: the forward decoder starts from the backward
/// encoder's final state, the backward decoder from the forward one's.
pub fn init_decoders(enc: &EncoderOutput) -> (TapedState, TapedState) {
    (enc.final_bwd, enc.final_fwd)
}

/// Encoder memory pre-projected for one attention parameter set:
/// `W_mem · M + b` as `[A, T]`, shared by every decoder step.
pub struct AttnMemory {
    pub projected: ValueId,
}

pub fn project_memory(tape: &mut Tape, enc: &EncoderOutput, attn: &BoundAttn) -> Result<AttnMemory> {
    let proj = tape.matmul(attn.memory_weights, enc.memory_matrix)?;
    let projected = tape.add_col_broadcast(proj, attn.bias)?;
    Ok(AttnMemory { projected })
}

/// Attention with a precomputed memory projection: energies
/// `e_j = score · tanh(W_q·h + proj_j)`, softmax weights, and the
/// weighted memory average as context.
pub fn attend_with(
    tape: &mut Tape,
    dec_hidden: ValueId,
    enc: &EncoderOutput,
    proj: &AttnMemory,
    attn: &BoundAttn,
) -> Result<(ValueId, ValueId)> {
    let query = tape.matmul(attn.query_weights, dec_hidden)?;
    let pre = tape.add_col_broadcast(proj.projected, query)?;
    let act = tape.tanh(pre)?;
    let act_t = tape.transpose(act)?;
    let energies = tape.matmul(act_t, attn.score)?;
    let alpha = tape.softmax(energies)?;
    let context = tape.matmul(enc.memory_matrix, alpha)?;
    Ok((alpha, context))
}

/// Attention distribution and context vector for one decoder state.
pub fn attend(
    tape: &mut Tape,
    dec_state: &TapedState,
    enc: &EncoderOutput,
    attn: &BoundAttn,
) -> Result<(ValueId, ValueId)> {
    let proj = project_memory(tape, enc, attn)?;
    attend_with(tape, dec_state.h, enc, &proj, attn)
}

/// Everything a decoder step emits.
pub struct DecoderStepOutput {
    /// Log-distribution over the vocabulary.
    pub log_dist: ValueId,
    pub new_state: TapedState,
    /// Attention distribution over source positions.
    pub alpha: ValueId,
    /// `[2H]` context vector.
    pub context: ValueId,
}

/// One decoder step: LSTM over `[embed(y_ctx); prev_context]`,
/// attention from the post-step state, then the output projection.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step(
    tape: &mut Tape,
    direction: Direction,
    y_ctx: usize,
    state: &TapedState,
    prev_context: ValueId,
    enc: &EncoderOutput,
    proj: &AttnMemory,
    bound: &BoundParams,
) -> Result<DecoderStepOutput> {
    let emb = tape.row(bound.embedding, y_ctx)?;
    let x = tape.concat(&[emb, prev_context])?;
    let new_state = lstm_step(tape, x, state, bound.dec(direction))?;
    let (alpha, context) = attend_with(tape, new_state.h, enc, proj, bound.attn(direction))?;
    let out = bound.out(direction);
    let features = tape.concat(&[new_state.h, context, emb])?;
    let logits = tape.matmul(out.weights, features)?;
    let logits = tape.add(logits, out.bias)?;
    let log_dist = tape.log_softmax(logits)?;
    Ok(DecoderStepOutput {
        log_dist,
        new_state,
        alpha,
        context,
    })
}

/// Encoder output, both attention projections, decoder initial states,
/// and the zero initial context, ready for teacher forcing or search.
pub struct DecodeSetup {
    pub enc: EncoderOutput,
    pub proj_fwd: AttnMemory,
    pub proj_bwd: AttnMemory,
    pub init_fwd: TapedState,
    pub init_bwd: TapedState,
    pub zero_context: ValueId,
}

impl DecodeSetup {
    pub fn init(&self, direction: Direction) -> TapedState {
        match direction {
            Direction::Forward => self.init_fwd,
            Direction::Backward => self.init_bwd,
        }
    }

    pub fn proj(&self, direction: Direction) -> &AttnMemory {
        match direction {
            Direction::Forward => &self.proj_fwd,
            Direction::Backward => &self.proj_bwd,
        }
    }
}

pub fn prepare_decode(
    tape: &mut Tape,
    token_ids: &[usize],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<DecodeSetup> {
    let enc = encode(tape, token_ids, bound, config)?;
    let proj_fwd = project_memory(tape, &enc, &bound.attn_fwd)?;
    let proj_bwd = project_memory(tape, &enc, &bound.attn_bwd)?;
    let (init_fwd, init_bwd) = init_decoders(&enc);
    let zero_context = tape.leaf(&Tensor::zeros(&[2 * config.hidden_dim]))?;
    Ok(DecodeSetup {
        enc,
        proj_fwd,
        proj_bwd,
        init_fwd,
        init_bwd,
        zero_context,
    })
}

/// Teacher-forced per-position log-probability nodes for the reference
/// target. `per_token[t]` is log p(y_t) under the given direction. With
/// `include_terminator` an extra node for the direction's end sentinel
/// (STOP after the last forward step, START after the last backward
/// step) is appended.
pub fn teacher_forced_logprobs(
    tape: &mut Tape,
    direction: Direction,
    target: &[usize],
    setup: &DecodeSetup,
    bound: &BoundParams,
    config: &ModelConfig,
    include_terminator: bool,
) -> Result<Vec<ValueId>> {
    if target.is_empty() {
        return Err(Error::EmptyInput("teacher_forced_logprobs"));
    }
    if target.len() > config.max_target_len {
        return Err(Error::SequenceTooLong {
            len: target.len(),
            limit: config.max_target_len,
        });
    }
    for &t in target {
        if t >= config.vocab_size {
            return Err(Error::VocabIdOutOfRange {
                id: t,
                vocab_size: config.vocab_size,
            });
        }
    }
    let len = target.len();
    let mut per_token: Vec<Option<ValueId>> = vec![None; len + usize::from(include_terminator)];
    let mut state = setup.init(direction);
    let mut context = setup.zero_context;
    let proj = setup.proj(direction);

    // (context token, predicted token, slot) triples in generation order.
    let mut steps: Vec<(usize, usize, usize)> = Vec::with_capacity(len + 1);
    match direction {
        Direction::Forward => {
            for t in 0..len {
                let ctx = if t == 0 { START_ID } else { target[t - 1] };
                steps.push((ctx, target[t], t));
            }
            if include_terminator {
                steps.push((target[len - 1], STOP_ID, len));
            }
        }
        Direction::Backward => {
            for t in (0..len).rev() {
                let ctx = if t == len - 1 { STOP_ID } else { target[t + 1] };
                steps.push((ctx, target[t], t));
            }
            if include_terminator {
                steps.push((target[0], START_ID, len));
            }
        }
    }
    for (ctx, predicted, slot) in steps {
        let out = decoder_step(tape, direction, ctx, &state, context, &setup.enc, proj, bound)?;
        per_token[slot] = Some(tape.slice(out.log_dist, predicted, 1)?);
        state = out.new_state;
        context = out.context;
    }
    Ok(per_token.into_iter().map(|s| s.expect("all slots filled")).collect())
}

/// Teacher-forced log-probability of the reference target under one
/// decoder direction. Returns the total and the per-position values.
pub fn sequence_logprob(
    direction: Direction,
    target: &[usize],
    source: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let setup = prepare_decode(&mut tape, source, &bound, config)?;
    let nodes = teacher_forced_logprobs(&mut tape, direction, target, &setup, &bound, config, false)?;
    let per_token: Vec<f64> = nodes
        .iter()
        .map(|n| tape.value(*n).item())
        .collect::<Result<_>>()?;
    Ok((per_token.iter().sum(), per_token))
}

/// Sum of the forward and backward teacher-forced log-probabilities.
pub fn joint_logprob(
    target: &[usize],
    source: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    let (fwd, _) = sequence_logprob(Direction::Forward, target, source, params, config)?;
    let (bwd, _) = sequence_logprob(Direction::Backward, target, source, params, config)?;
    Ok(fwd + bwd)
}
