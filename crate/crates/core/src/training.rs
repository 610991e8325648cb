//! Joint-loss training: γ-weighted forward/backward teacher-forced
//! losses, Adagrad with gradient clipping, and the training loop with
//! periodic validation, early stopping, and best-checkpoint retention.

use crate::data::{make_batches, Batch, Example};
use crate::error::{Error, Result};
use crate::model::{
    decoder_step, prepare_decode, teacher_forced_logprobs, BoundParams, ModelConfig, ModelParams,
};
use crate::numerics::{clip_global_norm, Tape};
use crate::recurrent::Direction;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the forward directional loss.
    pub gamma: f64,
    pub learning_rate: f64,
    pub initial_accumulator: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub eval_every_steps: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience_evals: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            gamma: 0.7,
            learning_rate: 0.15,
            initial_accumulator: 0.1,
            max_grad_norm: 2.0,
            batch_size: 32,
            eval_every_steps: 200,
            patience_evals: 5,
            max_steps: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("initial_accumulator", self.initial_accumulator),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every_steps", self.eval_every_steps),
            ("max_steps", self.max_steps),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One squared-gradient accumulator per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdagradState {
    pub accumulators: ModelParams,
}

impl AdagradState {
    pub fn new(config: &ModelConfig, initial_accumulator: f64) -> AdagradState {
        let mut accumulators = ModelParams::zeros(config);
        for (_, t) in accumulators.tensors_mut() {
            for v in t.data_mut() {
                *v = initial_accumulator;
            }
        }
        AdagradState { accumulators }
    }
}

/// Per scalar: `acc += g²; θ -= lr·g/√acc`. No extra epsilon; the
/// initial accumulator plays that role.
pub fn adagrad_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdagradState,
    learning_rate: f64,
) -> Result<()> {
    for (((name, theta), (_, g)), (_, acc)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.accumulators.tensors_mut())
    {
        if theta.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adagrad_step",
                lhs: theta.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((t, &gv), a) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(acc.data_mut())
        {
            *a += gv * gv;
            *t -= learning_rate * gv / a.sqrt();
        }
        theta.check_finite(name)?;
    }
    Ok(())
}

fn directional_loss_nodes(
    tape: &mut Tape,
    direction: Direction,
    batch: &Batch,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<Vec<crate::ValueId>> {
    let mut per_example = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (source, target) = batch.example(i);
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data(format!(
                "example {i} in batch is entirely padding"
            )));
        }
        let setup = prepare_decode(tape, source, bound, config)?;
        let nodes =
            teacher_forced_logprobs(tape, direction, target, &setup, bound, config, true)?;
        let stacked = tape.concat(&nodes)?;
        let total = tape.sum(stacked)?;
        // Negative per-token mean; the terminator counts as a position.
        per_example.push(tape.scale(total, -1.0 / nodes.len() as f64)?);
    }
    Ok(per_example)
}

/// Loss values and parameter gradients for one batch under the joint
/// objective `loss = γ·l_fwd + (1-γ)·l_bwd`, each directional loss a
/// per-token (terminator included) negative mean averaged over the
/// batch.
pub struct BatchGradients {
    pub loss: f64,
    pub l_fwd: f64,
    pub l_bwd: f64,
    pub grads: ModelParams,
}

fn batch_loss_graph(
    batch: &Batch,
    params: &ModelParams,
    config: &ModelConfig,
    gamma: f64,
) -> Result<(Tape, BoundParams, crate::ValueId, f64, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_loss"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let fwd_nodes = directional_loss_nodes(&mut tape, Direction::Forward, batch, &bound, config)?;
    let bwd_nodes = directional_loss_nodes(&mut tape, Direction::Backward, batch, &bound, config)?;
    let fwd_stack = tape.concat(&fwd_nodes)?;
    let l_fwd = tape.mean(fwd_stack)?;
    let bwd_stack = tape.concat(&bwd_nodes)?;
    let l_bwd = tape.mean(bwd_stack)?;
    let fwd_term = tape.scale(l_fwd, gamma)?;
    let bwd_term = tape.scale(l_bwd, 1.0 - gamma)?;
    let loss = tape.add(fwd_term, bwd_term)?;
    let loss_v = tape.value(loss).item()?;
    let l_fwd_v = tape.value(l_fwd).item()?;
    let l_bwd_v = tape.value(l_bwd).item()?;
    Ok((tape, bound, loss, loss_v, l_fwd_v, l_bwd_v))
}

/// Forward-only joint loss: `(loss, l_fwd, l_bwd)`.
pub fn batch_loss(
    batch: &Batch,
    params: &ModelParams,
    config: &ModelConfig,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    let (_, _, _, loss, l_fwd, l_bwd) = batch_loss_graph(batch, params, config, gamma)?;
    Ok((loss, l_fwd, l_bwd))
}

/// Joint loss plus gradients from one backward sweep.
pub fn batch_gradients(
    batch: &Batch,
    params: &ModelParams,
    config: &ModelConfig,
    gamma: f64,
) -> Result<BatchGradients> {
    let (mut tape, bound, loss_node, loss, l_fwd, l_bwd) =
        batch_loss_graph(batch, params, config, gamma)?;
    tape.backward(loss_node)?;
    Ok(BatchGradients {
        loss,
        l_fwd,
        l_bwd,
        grads: bound.gradients(&tape, config),
    })
}

/// Mean joint loss over a dataset, batched in order without shuffling.
pub fn evaluate_loss(
    examples: &[Example],
    params: &ModelParams,
    config: &ModelConfig,
    gamma: f64,
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluate_loss"));
    }
    let mut totals = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<Example> = chunk.to_vec();
        let batch = make_batches(&refs, refs.len(), 0)?.remove(0);
        let (l, lf, lb) = batch_loss(&batch, params, config, gamma)?;
        let w = chunk.len() as f64;
        totals.0 += l * w;
        totals.1 += lf * w;
        totals.2 += lb * w;
        n += chunk.len();
    }
    let n = n as f64;
    Ok((totals.0 / n, totals.1 / n, totals.2 / n))
}

/// Fraction of target positions where the teacher-forced forward
/// decoder's argmax equals the reference token.
pub fn token_accuracy(
    examples: &[Example],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("token_accuracy"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, config)?;
        let setup = prepare_decode(&mut tape, &ex.source, &bound, config)?;
        let mut state = setup.init_fwd;
        let mut context = setup.zero_context;
        for (t, &y) in ex.target.iter().enumerate() {
            let ctx = if t == 0 { crate::START_ID } else { ex.target[t - 1] };
            let out = decoder_step(
                &mut tape,
                Direction::Forward,
                ctx,
                &state,
                context,
                &setup.enc,
                &setup.proj_fwd,
                &bound,
            )?;
            let dist = tape.value(out.log_dist).data();
            let argmax = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if argmax == y {
                correct += 1;
            }
            total += 1;
            state = out.new_state;
            context = out.context;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// One training-log record; serialized as a tab-separated line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// "train" or "val".
    pub split: &'static str,
    pub loss: f64,
    pub l_fwd: f64,
    pub l_bwd: f64,
    pub grad_norm: f64,
}

impl LogRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            self.step, self.split, self.loss, self.l_fwd, self.l_bwd, self.grad_norm
        )
    }
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "step\tsplit\tloss\tl_fwd\tl_bwd\tgrad_norm");
    for r in records {
        let _ = writeln!(out, "{}", r.to_tsv());
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    /// Patience exhausted on the validation loss.
    EarlyStopped,
    /// Non-finite loss or gradient; the best parameters so far are
    /// retained.
    Diverged { step: usize, reason: String },
}

pub struct TrainOutcome {
    /// Parameters at the best validation loss (initial parameters if
    /// no evaluation completed).
    pub best_params: ModelParams,
    pub best_val_loss: f64,
    pub final_params: ModelParams,
    pub steps: usize,
    pub stopped: StopReason,
    pub log: Vec<LogRecord>,
}

/// Runs the loop: batch gradients → global-norm clip → Adagrad step,
/// with validation every `eval_every_steps`. The best-so-far
/// checkpoint is written to `checkpoint_path` after each improving
/// evaluation. Divergence stops the run and retains the best
/// parameters.
pub fn train(
    initial: ModelParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_data: &[Example],
    val_data: &[Example],
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    initial.validate(model_config)?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let mut params = initial;
    let mut best_params = params.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut opt = AdagradState::new(model_config, train_config.initial_accumulator);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut bad_evals = 0usize;
    let mut stopped = StopReason::MaxSteps;
    let mut epoch = 0u64;

    'outer: while step < train_config.max_steps {
        let batches = make_batches(
            train_data,
            train_config.batch_size,
            train_config.seed.wrapping_add(epoch),
        )?;
        epoch += 1;
        for batch in &batches {
            let result = batch_gradients(batch, &params, model_config, train_config.gamma);
            let mut bg = match result {
                Ok(bg) if bg.loss.is_finite() => bg,
                Ok(bg) => {
                    stopped = StopReason::Diverged {
                        step,
                        reason: format!("non-finite loss {}", bg.loss),
                    };
                    break 'outer;
                }
                Err(e) => match e {
                    Error::NonFinite { .. } => {
                        stopped = StopReason::Diverged {
                            step,
                            reason: e.to_string(),
                        };
                        break 'outer;
                    }
                    other => return Err(other),
                },
            };
            let mut named = bg.grads.tensors_mut();
            let grad_norm = match clip_global_norm(&mut named, train_config.max_grad_norm) {
                Ok(n) => n,
                Err(e) => {
                    stopped = StopReason::Diverged {
                        step,
                        reason: e.to_string(),
                    };
                    break 'outer;
                }
            };
            drop(named);
            adagrad_step(&mut params, &bg.grads, &mut opt, train_config.learning_rate)?;
            step += 1;
            log.push(LogRecord {
                step,
                split: "train",
                loss: bg.loss,
                l_fwd: bg.l_fwd,
                l_bwd: bg.l_bwd,
                grad_norm,
            });

            if step % train_config.eval_every_steps == 0 {
                let (vl, vf, vb) = evaluate_loss(
                    val_data,
                    &params,
                    model_config,
                    train_config.gamma,
                    train_config.batch_size,
                )?;
                log.push(LogRecord {
                    step,
                    split: "val",
                    loss: vl,
                    l_fwd: vf,
                    l_bwd: vb,
                    grad_norm: 0.0,
                });
                if vl < best_val_loss {
                    best_val_loss = vl;
                    best_params = params.clone();
                    bad_evals = 0;
                    if let Some(path) = checkpoint_path {
                        crate::checkpoint::save(path, model_config, &best_params)?;
                    }
                } else {
                    bad_evals += 1;
                    if bad_evals > train_config.patience_evals {
                        stopped = StopReason::EarlyStopped;
                        break 'outer;
                    }
                }
            }
            if step >= train_config.max_steps {
                break;
            }
        }
    }

    // If no evaluation ever completed, fall back to the final state —
    // unless the run diverged, in which case the last good (possibly
    // initial) parameters stand as they are.
    if best_val_loss.is_infinite() && !matches!(stopped, StopReason::Diverged { .. }) {
        let (vl, vf, vb) = evaluate_loss(
            val_data,
            &params,
            model_config,
            train_config.gamma,
            train_config.batch_size,
        )?;
        log.push(LogRecord {
            step,
            split: "val",
            loss: vl,
            l_fwd: vf,
            l_bwd: vb,
            grad_norm: 0.0,
        });
        best_val_loss = vl;
        best_params = params.clone();
        if let Some(path) = checkpoint_path {
            crate::checkpoint::save(path, model_config, &best_params)?;
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_val_loss,
        final_params: params,
        steps: step,
        stopped,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticTask};
    use crate::numerics::Tensor;

    fn toy_config() -> ModelConfig {
        ModelConfig::toy(14, 6, 5)
    }

    fn toy_batch(config: &ModelConfig, n: usize, seed: u64) -> Batch {
        let examples =
            gen_synthetic(SyntheticTask::Copy, n, 2, 5, config.vocab_size, seed).unwrap();
        make_batches(&examples, n, 0).unwrap().remove(0)
    }

    #[test]
    fn adagrad_closed_form_single_scalar() {
        let config = ModelConfig::toy(5, 1, 1);
        let mut params = ModelParams::zeros(&config);
        let mut grads = ModelParams::zeros(&config);
        grads.embedding.data_mut()[0] = 1.0;
        let before = params.embedding.data()[0];
        let mut state = AdagradState::new(&config, 0.1);
        adagrad_step(&mut params, &grads, &mut state, 0.15).unwrap();
        let delta = params.embedding.data()[0] - before;
        assert!((delta - (-0.15 / 1.1f64.sqrt())).abs() < 1e-12);
        assert!((state.accumulators.embedding.data()[0] - 1.1).abs() < 1e-15);
        // Other parameters saw zero gradient and are unchanged.
        assert_eq!(params.out_fwd.weights, Tensor::zeros(params.out_fwd.weights.shape()));
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let config = toy_config();
        let mut params = ModelParams::init(&config, 1);
        let reference = params.clone();
        let grads = ModelParams::zeros(&config);
        let mut state = AdagradState::new(&config, 0.1);
        let state_before = state.clone();
        adagrad_step(&mut params, &grads, &mut state, 0.15).unwrap();
        assert_eq!(params, reference);
        assert_eq!(state, state_before);
    }

    #[test]
    fn repeated_identical_gradient_shrinks_step() {
        let config = ModelConfig::toy(5, 1, 1);
        let mut params = ModelParams::zeros(&config);
        let mut grads = ModelParams::zeros(&config);
        grads.embedding.data_mut()[0] = 0.7;
        let mut state = AdagradState::new(&config, 0.1);
        adagrad_step(&mut params, &grads, &mut state, 0.15).unwrap();
        let first = params.embedding.data()[0].abs();
        let before = params.embedding.data()[0];
        adagrad_step(&mut params, &grads, &mut state, 0.15).unwrap();
        let second = (params.embedding.data()[0] - before).abs();
        assert!(second < first);
    }

    #[test]
    fn accumulators_are_nondecreasing() {
        let config = toy_config();
        let mut params = ModelParams::init(&config, 2);
        let mut state = AdagradState::new(&config, 0.1);
        let batch = toy_batch(&config, 4, 3);
        let mut prev = state.clone();
        for _ in 0..3 {
            let bg = batch_gradients(&batch, &params, &config, 0.7).unwrap();
            adagrad_step(&mut params, &bg.grads, &mut state, 0.15).unwrap();
            for ((_, a), (_, p)) in state
                .accumulators
                .tensors()
                .iter()
                .zip(prev.accumulators.tensors())
            {
                for (av, pv) in a.data().iter().zip(p.data()) {
                    assert!(av >= pv);
                }
            }
            prev = state.clone();
        }
    }

    #[test]
    fn loss_identity_across_gammas() {
        let config = toy_config();
        let params = ModelParams::init(&config, 4);
        let batch = toy_batch(&config, 3, 5);
        let (_, l_fwd, l_bwd) = batch_loss(&batch, &params, &config, 0.5).unwrap();
        for gamma in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let (loss, lf, lb) = batch_loss(&batch, &params, &config, gamma).unwrap();
            assert_eq!(lf, l_fwd);
            assert_eq!(lb, l_bwd);
            assert_eq!(loss, gamma * lf + (1.0 - gamma) * lb);
        }
        let (loss1, lf, _) = batch_loss(&batch, &params, &config, 1.0).unwrap();
        assert_eq!(loss1, lf);
        let (loss0, _, lb) = batch_loss(&batch, &params, &config, 0.0).unwrap();
        assert_eq!(loss0, lb);
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let config = toy_config();
        let params = ModelParams::zeros(&config);
        let batch = toy_batch(&config, 1, 6);
        let (loss, lf, lb) = batch_loss(&batch, &params, &config, 0.7).unwrap();
        let expected = (config.vocab_size as f64).ln();
        assert!((lf - expected).abs() < 1e-12);
        assert!((lb - expected).abs() < 1e-12);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let config = toy_config();
        let params = ModelParams::zeros(&config);
        let batch = Batch {
            sources: vec![],
            source_lens: vec![],
            targets: vec![],
            target_lens: vec![],
            target_mask: vec![],
        };
        assert!(batch_loss(&batch, &params, &config, 0.7).is_err());
    }

    #[test]
    fn all_padding_example_is_an_error() {
        let config = toy_config();
        let params = ModelParams::zeros(&config);
        let mut batch = toy_batch(&config, 2, 7);
        batch.target_lens[1] = 0;
        let err = batch_loss(&batch, &params, &config, 0.7).unwrap_err();
        assert!(err.to_string().contains("padding"));
    }

    #[test]
    fn gradients_match_loss_finite_differences_spot_check() {
        let config = ModelConfig::toy(8, 3, 3);
        let mut params = ModelParams::init(&config, 8);
        let batch = toy_batch(&config, 2, 9);
        let bg = batch_gradients(&batch, &params, &config, 0.7).unwrap();
        // Probe a handful of coordinates across different tensors.
        let probes = [("embedding", 5usize), ("dec_bwd.bias", 2), ("out_fwd.weights", 17)];
        for (name, idx) in probes {
            let analytic = bg
                .grads
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .data()[idx];
            let h = 1e-5;
            let mut eval_at = |delta: f64| {
                for (n, t) in params.tensors_mut() {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                }
                let (l, _, _) = batch_loss(&batch, &params, &config, 0.7).unwrap();
                for (n, t) in params.tensors_mut() {
                    if n == name {
                        t.data_mut()[idx] -= delta;
                    }
                }
                l
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic} vs fd {fd}");
        }
    }

    fn tiny_run(seed: u64, patience: usize, max_steps: usize) -> TrainOutcome {
        let config = ModelConfig::toy(12, 4, 4);
        let train_data = gen_synthetic(SyntheticTask::Copy, 24, 2, 4, 12, 100).unwrap();
        let val_data = gen_synthetic(SyntheticTask::Copy, 8, 2, 4, 12, 101).unwrap();
        let tc = TrainConfig {
            batch_size: 8,
            eval_every_steps: 3,
            patience_evals: patience,
            max_steps,
            seed,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(&config, seed);
        train(params, &config, &tc, &train_data, &val_data, None).unwrap()
    }

    #[test]
    fn seeded_twin_runs_are_bit_identical() {
        let a = tiny_run(5, 2, 12);
        let b = tiny_run(5, 2, 12);
        assert_eq!(a.log, b.log);
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.final_params, b.final_params);
        let c = tiny_run(6, 2, 12);
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn post_clip_norm_is_bounded_every_step() {
        let out = tiny_run(7, 5, 15);
        assert!(out.log.iter().any(|r| r.split == "train"));
        // The logged norm is pre-clip; re-verify the bound by clipping
        // a fresh gradient below.
        let config = ModelConfig::toy(12, 4, 4);
        let params = ModelParams::init_with_scale(&config, 3, 1.0);
        let batch = toy_batch(&config, 4, 11);
        let mut bg = batch_gradients(&batch, &params, &config, 0.7).unwrap();
        let mut named = bg.grads.tensors_mut();
        clip_global_norm(&mut named, 2.0).unwrap();
        drop(named);
        let total: f64 = bg.grads.tensors().iter().map(|(_, t)| t.sq_norm()).sum();
        assert!(total.sqrt() <= 2.0 + 1e-12);
    }

    #[test]
    fn patience_zero_stops_at_first_non_improving_eval() {
        let out = tiny_run(9, 0, 1000);
        match out.stopped {
            StopReason::EarlyStopped => {
                let evals: Vec<&LogRecord> =
                    out.log.iter().filter(|r| r.split == "val").collect();
                // The last evaluation did not improve on the best.
                assert!(evals.last().unwrap().loss >= out.best_val_loss);
            }
            StopReason::MaxSteps => panic!("expected early stop before 1000 steps"),
            StopReason::Diverged { .. } => panic!("unexpected divergence"),
        }
    }

    #[test]
    fn divergence_retains_last_good_params() {
        let config = ModelConfig::toy(12, 4, 4);
        let train_data = gen_synthetic(SyntheticTask::Copy, 16, 2, 4, 12, 100).unwrap();
        let val_data = gen_synthetic(SyntheticTask::Copy, 8, 2, 4, 12, 101).unwrap();
        let tc = TrainConfig {
            batch_size: 8,
            eval_every_steps: 2,
            max_steps: 200,
            seed: 1,
            ..TrainConfig::default()
        };
        // Finite but astronomically scaled parameters overflow the
        // very first matrix product, so the run diverges immediately
        // and the initial parameters are what survives.
        let params = ModelParams::init_with_scale(&config, 1, 1e200);
        let initial = params.clone();
        let out = train(params, &config, &tc, &train_data, &val_data, None).unwrap();
        assert!(matches!(out.stopped, StopReason::Diverged { .. }));
        assert_eq!(out.steps, 0);
        assert_eq!(out.best_params, initial);
    }

    #[test]
    fn checkpoint_written_at_best_eval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let config = ModelConfig::toy(12, 4, 4);
        let train_data = gen_synthetic(SyntheticTask::Copy, 16, 2, 4, 12, 100).unwrap();
        let val_data = gen_synthetic(SyntheticTask::Copy, 8, 2, 4, 12, 101).unwrap();
        let tc = TrainConfig {
            batch_size: 8,
            eval_every_steps: 2,
            patience_evals: 1,
            max_steps: 8,
            seed: 2,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(&config, 2);
        let out = train(params, &config, &tc, &train_data, &val_data, Some(&path)).unwrap();
        let (loaded_config, loaded_params) = crate::checkpoint::load(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded_params, out.best_params);
    }

    #[test]
    fn log_round_trips_through_tsv() {
        let r = LogRecord {
            step: 7,
            split: "train",
            loss: 1.25,
            l_fwd: 1.5,
            l_bwd: 0.5,
            grad_norm: 2.0,
        };
        let line = r.to_tsv();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], "7");
        assert_eq!(fields[1], "train");
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.25);
    }
}
