//! Self-contained verification battery: finite-difference gradient
//! checks, distribution validity, and search-vs-oracle equivalence.
//! The CLI `check` subcommand and the acceptance tests both run these.

use crate::data::{gen_synthetic, make_batches, SyntheticTask};
use crate::decoding::{bbs_decode, exhaustive_oracle, BeamConfig};
use crate::error::Result;
use crate::model::{decoder_step, prepare_decode, BoundParams, ModelConfig, ModelParams};
use crate::numerics::Tape;
use crate::recurrent::Direction;
use crate::training::{batch_gradients, batch_loss};
use crate::START_ID;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Worst relative error per tensor from a finite-difference probe.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(&'static str, f64)>,
    pub max_rel_err: f64,
}

fn probe_indices(len: usize, probes: usize) -> Vec<usize> {
    if len <= probes {
        return (0..len).collect();
    }
    (0..probes).map(|j| j * (len - 1) / (probes - 1)).collect()
}

/// Central-difference check of the joint-loss gradient, probing a few
/// spread-out coordinates in every parameter tensor.
pub fn gradient_check(
    config: &ModelConfig,
    seed: u64,
    source_len: usize,
    target_len: usize,
    gamma: f64,
    probes_per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut params = ModelParams::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let source: Vec<usize> = (0..source_len)
        .map(|_| rng.gen_range(crate::RESERVED_TOKENS..config.vocab_size))
        .collect();
    let target: Vec<usize> = (0..target_len)
        .map(|_| rng.gen_range(crate::RESERVED_TOKENS..config.vocab_size))
        .collect();
    let examples = vec![crate::Example { source, target }];
    let batch = make_batches(&examples, 1, 0)?.remove(0);
    let analytic = batch_gradients(&batch, &params, config, gamma)?.grads;

    let h = 1e-5;
    let mut per_tensor = Vec::new();
    let mut max_rel: f64 = 0.0;
    let names: Vec<&'static str> = analytic.tensors().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = analytic
            .tensors()
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .len();
        let mut worst: f64 = 0.0;
        for idx in probe_indices(len, probes_per_tensor) {
            let a = analytic
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .data()[idx];
            fn shift(params: &mut ModelParams, name: &str, idx: usize, delta: f64) {
                for (n, t) in params.tensors_mut() {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                }
            }
            shift(&mut params, name, idx, h);
            let (plus, _, _) = batch_loss(&batch, &params, config, gamma)?;
            shift(&mut params, name, idx, -2.0 * h);
            let (minus, _, _) = batch_loss(&batch, &params, config, gamma)?;
            shift(&mut params, name, idx, h);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: max_rel,
    })
}

/// Worst deviations from valid probability distributions over random
/// model/input draws: (token dist sum error, attention sum error,
/// most negative entry).
pub fn distribution_check(draws: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_token = 0.0f64;
    let mut worst_attn = 0.0f64;
    let mut most_negative = 0.0f64;
    for i in 0..draws {
        let vocab = rng.gen_range(6..14);
        let hidden = rng.gen_range(2..6);
        let config = ModelConfig::toy(vocab, rng.gen_range(2..6), hidden);
        let params = ModelParams::init_with_scale(&config, seed.wrapping_add(i as u64), 1.5);
        let src_len = rng.gen_range(1..6);
        let source: Vec<usize> = (0..src_len)
            .map(|_| rng.gen_range(crate::RESERVED_TOKENS..vocab))
            .collect();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, &config)?;
        let setup = prepare_decode(&mut tape, &source, &bound, &config)?;
        let direction = if i % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let out = decoder_step(
            &mut tape,
            direction,
            START_ID,
            &setup.init(direction),
            setup.zero_context,
            &setup.enc,
            setup.proj(direction),
            &bound,
        )?;
        let token_sum: f64 = tape.value(out.log_dist).data().iter().map(|l| l.exp()).sum();
        worst_token = worst_token.max((token_sum - 1.0).abs());
        let alpha = tape.value(out.alpha).data();
        let attn_sum: f64 = alpha.iter().sum();
        worst_attn = worst_attn.max((attn_sum - 1.0).abs());
        for &a in alpha {
            most_negative = most_negative.min(a);
        }
    }
    Ok((worst_token, worst_attn, most_negative))
}

/// Unpruned BBS against the exhaustive oracle on random toy models.
/// Returns the number of models whose outputs matched.
pub fn oracle_equivalence_check(
    models: usize,
    seed: u64,
    vocab_size: usize,
    max_steps: usize,
    gamma: f64,
) -> Result<usize> {
    let mut agreed = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..models {
        let config = ModelConfig::toy(vocab_size, 4, 3);
        let params = ModelParams::init_with_scale(&config, seed.wrapping_add(i as u64), 0.8);
        let src_len = rng.gen_range(1..5);
        let source: Vec<usize> = (0..src_len)
            .map(|_| rng.gen_range(crate::RESERVED_TOKENS..vocab_size))
            .collect();
        let cfg = BeamConfig {
            beam_size: usize::MAX,
            gamma,
            max_steps,
            length_normalize: true,
            forbid_unk: false,
        };
        let out = bbs_decode(&source, &params, &config, &cfg)?;
        let oracle = exhaustive_oracle(&source, &params, &config, gamma, max_steps)?;
        if out.best.tokens == oracle.best.tokens
            && (out.joint_score - oracle.best.score).abs() < 1e-12
        {
            agreed += 1;
        }
    }
    Ok(agreed)
}

/// Runs the full battery. `quick` shrinks the sample counts so the CLI
/// stays interactive; the acceptance tests use the full sizes.
pub fn run_checks(quick: bool) -> Vec<CheckResult> {
    let mut results = Vec::new();

    let grad = (|| {
        let config = ModelConfig {
            vocab_size: 12,
            embedding_dim: 8,
            hidden_dim: 10,
            attention_dim: 20,
            reverse_source: true,
            max_source_len: 400,
            max_target_len: 100,
            share_attention: false,
        };
        let probes = if quick { 3 } else { 5 };
        gradient_check(&config, 11, 5, 4, 0.7, probes)
    })();
    results.push(match grad {
        Ok(report) => CheckResult {
            name: "gradient_finite_difference",
            passed: report.max_rel_err < 1e-4,
            detail: format!("max relative error {:.3e} (tolerance 1e-4)", report.max_rel_err),
        },
        Err(e) => CheckResult {
            name: "gradient_finite_difference",
            passed: false,
            detail: e.to_string(),
        },
    });

    let draws = if quick { 100 } else { 1000 };
    results.push(match distribution_check(draws, 17) {
        Ok((token, attn, neg)) => CheckResult {
            name: "distribution_validity",
            passed: token < 1e-9 && attn < 1e-9 && neg >= 0.0,
            detail: format!(
                "{draws} draws: worst token-sum error {token:.3e}, attention-sum error {attn:.3e}, most negative entry {neg:.3e}"
            ),
        },
        Err(e) => CheckResult {
            name: "distribution_validity",
            passed: false,
            detail: e.to_string(),
        },
    });

    let models = if quick { 10 } else { 50 };
    results.push(match oracle_equivalence_check(models, 23, 6, 4, 0.7) {
        Ok(agreed) => CheckResult {
            name: "bbs_oracle_equivalence",
            passed: agreed == models,
            detail: format!("{agreed}/{models} unpruned decodes matched the exhaustive oracle"),
        },
        Err(e) => CheckResult {
            name: "bbs_oracle_equivalence",
            passed: false,
            detail: e.to_string(),
        },
    });

    let loss_identity = (|| -> Result<bool> {
        let config = ModelConfig::toy(10, 4, 3);
        let params = ModelParams::init(&config, 3);
        let examples = gen_synthetic(SyntheticTask::Copy, 3, 2, 4, 10, 5)?;
        let batch = make_batches(&examples, 3, 0)?.remove(0);
        let mut ok = true;
        for gamma in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let (loss, lf, lb) = batch_loss(&batch, &params, &config, gamma)?;
            ok &= loss == gamma * lf + (1.0 - gamma) * lb;
        }
        Ok(ok)
    })();
    results.push(match loss_identity {
        Ok(ok) => CheckResult {
            name: "loss_identity",
            passed: ok,
            detail: "loss == gamma*l_fwd + (1-gamma)*l_bwd at gamma in {0, 0.3, 0.5, 0.7, 1}".into(),
        },
        Err(e) => CheckResult {
            name: "loss_identity",
            passed: false,
            detail: e.to_string(),
        },
    });

    results
}
