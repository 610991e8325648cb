//! Unidirectional beam search, bidirectional beam search (BBS), and an
//! exhaustive-search oracle for certifying the searches on tiny
//! instances.
//!
//! Search-facing conventions:
//! - Generated tokens are stored in natural left-to-right order for
//!   both directions; backward hypotheses prepend.
//! - Sentinels never appear in stored tokens; a hypothesis finishes by
//!   emitting its direction's terminal (STOP forward, START backward),
//!   whose log-probability is kept separately in `terminal_logp`.
//! - The candidate alphabet is every vocabulary id except PAD, START,
//!   and STOP (UNK too when `forbid_unk` is set).
//! - Ties break by higher raw score, then lexicographically smaller
//!   token sequence, so runs are deterministic.

use crate::error::{Error, Result};
use crate::model::{
    decoder_step, prepare_decode, teacher_forced_logprobs, BoundParams, DecodeSetup, ModelConfig,
    ModelParams,
};
use crate::numerics::{Tape, Tensor};
use crate::recurrent::{Direction, LstmState, TapedState};
use crate::{PAD_ID, START_ID, STOP_ID, UNK_ID};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Weight on the forward score in the BBS joint objective.
    pub gamma: f64,
    pub max_steps: usize,
    /// Rank finished hypotheses by per-token score instead of raw sum.
    pub length_normalize: bool,
    pub forbid_unk: bool,
}

impl Default for BeamConfig {
    fn default() -> BeamConfig {
        BeamConfig {
            beam_size: 4,
            gamma: 0.7,
            max_steps: 100,
            length_normalize: true,
            forbid_unk: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig(
                "beam_size and max_steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// A finished search hypothesis, materialized off the search tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Natural left-to-right order, sentinels excluded.
    pub tokens: Vec<usize>,
    /// Aligned to `tokens`.
    pub per_token_logp: Vec<f64>,
    /// Sum of `per_token_logp`.
    pub cum_logp: f64,
    /// Log-probability of the terminal sentinel emission.
    pub terminal_logp: f64,
    pub finished: bool,
    /// Ranking score under the search's objective.
    pub score: f64,
    pub state: LstmState,
    pub context: Tensor,
}

impl Hypothesis {
    /// Raw directional total: token log-probs plus the terminal's.
    pub fn total_logp(&self) -> f64 {
        self.cum_logp + self.terminal_logp
    }
}

/// In-search hypothesis; `state`/`context` live on the search tape.
#[derive(Clone)]
struct SearchHyp {
    tokens: Vec<usize>,
    logps: Vec<f64>,
    cum: f64,
    terminal: f64,
    finished: bool,
    state: TapedState,
    context: crate::ValueId,
    /// Backward beam index that maximized this hypothesis's last
    /// pruning score (BBS forward phase only).
    bwd_pair: Option<usize>,
}

impl SearchHyp {
    fn total(&self) -> f64 {
        self.cum + self.terminal
    }

    fn materialize(&self, tape: &Tape, score: f64) -> Result<Hypothesis> {
        Ok(Hypothesis {
            tokens: self.tokens.clone(),
            per_token_logp: self.logps.clone(),
            cum_logp: self.cum,
            terminal_logp: self.terminal,
            finished: self.finished,
            score,
            state: self.state.to_state(tape),
            context: tape.value(self.context).clone(),
        })
    }
}

/// Descending by score, then raw total, then lexicographically
/// ascending tokens.
fn compare_ranked(a: (f64, f64, &[usize]), b: (f64, f64, &[usize])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.total_cmp(&a.1))
        .then_with(|| a.2.cmp(b.2))
}

fn candidate_alphabet(vocab_size: usize, forbid_unk: bool) -> Vec<usize> {
    (0..vocab_size)
        .filter(|&v| v != PAD_ID && v != START_ID && v != STOP_ID && !(forbid_unk && v == UNK_ID))
        .collect()
}

/// Precomputed suffix sums of one backward beam's per-token log-probs:
/// `sum_from(t)` is the total over natural-order positions `t..L`
/// (0-indexed) with the remaining length.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixScores {
    sums: Vec<f64>,
}

impl SuffixScores {
    pub fn new(per_token_logp: &[f64]) -> SuffixScores {
        let mut sums = vec![0.0; per_token_logp.len() + 1];
        for i in (0..per_token_logp.len()).rev() {
            sums[i] = per_token_logp[i] + sums[i + 1];
        }
        SuffixScores { sums }
    }

    pub fn len(&self) -> usize {
        self.sums.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(suffix sum, suffix length)` from position `t`; `(0, 0)` when
    /// the prefix has outgrown the backward sequence.
    pub fn sum_from(&self, t: usize) -> (f64, usize) {
        if t >= self.len() {
            (0.0, 0)
        } else {
            (self.sums[t], self.len() - t)
        }
    }
}

/// The per-step BBS objective for a forward prefix of `prefix_len`
/// tokens paired with one backward beam: each directional term is
/// normalized by its own token count, with a term dropped when its
/// length is zero.
pub fn bbs_joint_score(
    prefix_total: f64,
    prefix_len: usize,
    suffix: &SuffixScores,
    gamma: f64,
) -> f64 {
    let fwd = if prefix_len > 0 {
        prefix_total / prefix_len as f64
    } else {
        0.0
    };
    let (bwd_sum, bwd_len) = suffix.sum_from(prefix_len);
    let bwd = if bwd_len > 0 {
        bwd_sum / bwd_len as f64
    } else {
        0.0
    };
    gamma * fwd + (1.0 - gamma) * bwd
}

/// How candidates are scored for per-step pruning.
enum PruneRule<'a> {
    /// Raw cumulative log-probability (terminal included once
    /// finished); plain beam search.
    RawTotal,
    /// Eq.-17-style joint score, maximized over the retained backward
    /// beams; BBS forward phase.
    Joint {
        gamma: f64,
        suffixes: &'a [SuffixScores],
    },
}

fn prune_score(rule: &PruneRule, hyp: &SearchHyp) -> (f64, Option<usize>) {
    match rule {
        PruneRule::RawTotal => (hyp.total(), None),
        PruneRule::Joint { gamma, suffixes } => {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = None;
            for (i, suffix) in suffixes.iter().enumerate() {
                let s = bbs_joint_score(hyp.total(), hyp.tokens.len(), suffix, *gamma);
                if s > best {
                    best = s;
                    best_idx = Some(i);
                }
            }
            if best_idx.is_none() {
                best = bbs_joint_score(hyp.total(), hyp.tokens.len(), &SuffixScores::new(&[]), *gamma);
            }
            (best, best_idx)
        }
    }
}

/// Directional best-first search. Every finished hypothesis admitted
/// to the beam is retained in a pool even if later evicted, so larger
/// beams never lose solutions smaller beams found; the pool is pruned
/// to `beam_size` by the rule's score before returning. `expansions[t]`
/// counts candidate generations at output position `t+1`.
#[allow(clippy::too_many_arguments)]
fn search_impl(
    tape: &mut Tape,
    direction: Direction,
    setup: &DecodeSetup,
    bound: &BoundParams,
    config: &ModelConfig,
    beam_cfg: &BeamConfig,
    rule: PruneRule,
    expansions: &mut Vec<usize>,
) -> Result<Vec<SearchHyp>> {
    beam_cfg.validate()?;
    let alphabet = candidate_alphabet(config.vocab_size, beam_cfg.forbid_unk);
    if alphabet.is_empty() {
        return Err(Error::InvalidConfig(
            "vocabulary has no generatable tokens".into(),
        ));
    }
    let terminal = match direction {
        Direction::Forward => STOP_ID,
        Direction::Backward => START_ID,
    };
    let start_ctx = match direction {
        Direction::Forward => START_ID,
        Direction::Backward => STOP_ID,
    };
    let mut beam = vec![SearchHyp {
        tokens: Vec::new(),
        logps: Vec::new(),
        cum: 0.0,
        terminal: 0.0,
        finished: false,
        state: setup.init(direction),
        context: setup.zero_context,
        bwd_pair: None,
    }];
    let mut pool: Vec<SearchHyp> = Vec::new();
    let mut position = 0usize;
    while beam.iter().any(|h| !h.finished) {
        position += 1;
        if expansions.len() < position {
            expansions.resize(position, 0);
        }
        // (admitted-this-step flag, hypothesis)
        let mut candidates: Vec<(bool, SearchHyp)> =
            beam.iter().filter(|h| h.finished).map(|h| (false, h.clone())).collect();
        for hyp in beam.iter().filter(|h| !h.finished) {
            let ctx = match direction {
                Direction::Forward => hyp.tokens.last().copied().unwrap_or(start_ctx),
                Direction::Backward => hyp.tokens.first().copied().unwrap_or(start_ctx),
            };
            let out = decoder_step(
                tape,
                direction,
                ctx,
                &hyp.state,
                hyp.context,
                &setup.enc,
                setup.proj(direction),
                bound,
            )?;
            let dist = tape.value(out.log_dist).data().to_vec();
            if hyp.tokens.len() < beam_cfg.max_steps {
                for &v in &alphabet {
                    let mut ext = hyp.clone();
                    match direction {
                        Direction::Forward => {
                            ext.tokens.push(v);
                            ext.logps.push(dist[v]);
                        }
                        Direction::Backward => {
                            ext.tokens.insert(0, v);
                            ext.logps.insert(0, dist[v]);
                        }
                    }
                    ext.cum += dist[v];
                    ext.state = out.new_state;
                    ext.context = out.context;
                    candidates.push((false, ext));
                    expansions[position - 1] += 1;
                }
            }
            // Finishing is only offered to nonempty hypotheses.
            if !hyp.tokens.is_empty() {
                let mut done = hyp.clone();
                done.terminal = dist[terminal];
                done.finished = true;
                done.state = out.new_state;
                done.context = out.context;
                candidates.push((true, done));
                expansions[position - 1] += 1;
            }
        }
        // Prune: score every candidate, keep the top beam_size.
        let mut scored: Vec<(f64, Option<usize>, bool, SearchHyp)> = candidates
            .into_iter()
            .map(|(fresh, h)| {
                let (s, pair) = prune_score(&rule, &h);
                (s, pair, fresh, h)
            })
            .collect();
        scored.sort_by(|a, b| {
            compare_ranked((a.0, a.3.total(), &a.3.tokens), (b.0, b.3.total(), &b.3.tokens))
        });
        scored.truncate(beam_cfg.beam_size);
        beam = scored
            .into_iter()
            .map(|(_, pair, fresh, mut h)| {
                if pair.is_some() {
                    h.bwd_pair = pair;
                }
                if fresh {
                    pool.push(h.clone());
                }
                h
            })
            .collect();
    }
    if pool.is_empty() {
        return Err(Error::EmptyInput("beam produced no finished hypotheses"));
    }
    Ok(pool)
}

/// Keeps the `beam_size` best pool entries under the rule's score.
fn truncate_pool(rule: &PruneRule, beam_cfg: &BeamConfig, pool: Vec<SearchHyp>) -> Vec<SearchHyp> {
    let mut scored: Vec<(f64, SearchHyp)> = pool
        .into_iter()
        .map(|h| {
            let (s, pair) = prune_score(rule, &h);
            let mut h = h;
            if pair.is_some() {
                h.bwd_pair = pair;
            }
            (s, h)
        })
        .collect();
    scored.sort_by(|a, b| {
        compare_ranked((a.0, a.1.total(), &a.1.tokens), (b.0, b.1.total(), &b.1.tokens))
    });
    scored.truncate(beam_cfg.beam_size);
    scored.into_iter().map(|(_, h)| h).collect()
}

fn final_score(beam_cfg: &BeamConfig, hyp: &SearchHyp) -> f64 {
    if beam_cfg.length_normalize {
        hyp.total() / hyp.tokens.len() as f64
    } else {
        hyp.total()
    }
}

/// Directional beam search; returns finished hypotheses ranked by the
/// (optionally length-normalized) directional score.
pub fn beam_search(
    direction: Direction,
    source: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    beam_cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let setup = prepare_decode(&mut tape, source, &bound, config)?;
    let mut expansions = Vec::new();
    let finished = search_impl(
        &mut tape,
        direction,
        &setup,
        &bound,
        config,
        beam_cfg,
        PruneRule::RawTotal,
        &mut expansions,
    )?;
    rank_and_materialize(&tape, beam_cfg, finished)
}

fn rank_and_materialize(
    tape: &Tape,
    beam_cfg: &BeamConfig,
    finished: Vec<SearchHyp>,
) -> Result<Vec<Hypothesis>> {
    if finished.is_empty() {
        return Err(Error::EmptyInput("beam produced no finished hypotheses"));
    }
    let mut scored: Vec<(f64, SearchHyp)> = finished
        .into_iter()
        .map(|h| (final_score(beam_cfg, &h), h))
        .collect();
    scored.sort_by(|a, b| {
        compare_ranked((a.0, a.1.total(), &a.1.tokens), (b.0, b.1.total(), &b.1.tokens))
    });
    scored.truncate(beam_cfg.beam_size);
    scored
        .into_iter()
        .map(|(s, h)| h.materialize(tape, s))
        .collect()
}

/// Per-decode instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct BbsDiagnostics {
    /// Retained backward beams, best-ranked first (empty at γ=1).
    pub backward_beams: Vec<Hypothesis>,
    /// Candidate generations per output position across both phases
    /// and rescoring.
    pub expansions_per_position: Vec<usize>,
    /// Index into `backward_beams` that the winner last paired with.
    pub backward_beam_used: Option<usize>,
}

/// One decoded output under the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    /// Per-token forward score of the winner (terminal included).
    pub fwd_norm: f64,
    /// Per-token backward score of the winner; absent at γ=1 where the
    /// backward model is never consulted.
    pub bwd_norm: Option<f64>,
    /// γ·fwd_norm + (1-γ)·bwd_norm.
    pub joint_score: f64,
    pub diagnostics: BbsDiagnostics,
}

/// Bidirectional beam search: a backward beam pass, a forward pass
/// pruned by the joint per-step objective against the retained
/// backward beams, then a final ranking of finished forward hypotheses
/// by the complete-sequence joint score (backward side via teacher
/// forcing). At γ=1 the backward model is skipped entirely and this is
/// exactly forward beam search.
pub fn bbs_decode(
    source: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    beam_cfg: &BeamConfig,
) -> Result<DecodeOutput> {
    beam_cfg.validate()?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let setup = prepare_decode(&mut tape, source, &bound, config)?;
    let mut expansions = Vec::new();

    if beam_cfg.gamma == 1.0 {
        let finished = search_impl(
            &mut tape,
            Direction::Forward,
            &setup,
            &bound,
            config,
            beam_cfg,
            PruneRule::RawTotal,
            &mut expansions,
        )?;
        let ranked = rank_and_materialize(&tape, beam_cfg, finished)?;
        let best = ranked.into_iter().next().unwrap();
        let fwd_norm = best.total_logp() / best.tokens.len() as f64;
        return Ok(DecodeOutput {
            joint_score: fwd_norm,
            fwd_norm,
            bwd_norm: None,
            best,
            diagnostics: BbsDiagnostics {
                backward_beams: Vec::new(),
                expansions_per_position: expansions,
                backward_beam_used: None,
            },
        });
    }

    // Phase 1: backward beam search.
    let bwd_finished = search_impl(
        &mut tape,
        Direction::Backward,
        &setup,
        &bound,
        config,
        beam_cfg,
        PruneRule::RawTotal,
        &mut expansions,
    )?;
    let backward_beams = rank_and_materialize(&tape, beam_cfg, bwd_finished)?;
    let suffixes: Vec<SuffixScores> = backward_beams
        .iter()
        .map(|h| SuffixScores::new(&h.per_token_logp))
        .collect();

    // Phase 2: forward beam search pruned by the joint objective.
    let rule = PruneRule::Joint {
        gamma: beam_cfg.gamma,
        suffixes: &suffixes,
    };
    let fwd_pool = search_impl(
        &mut tape,
        Direction::Forward,
        &setup,
        &bound,
        config,
        beam_cfg,
        PruneRule::Joint {
            gamma: beam_cfg.gamma,
            suffixes: &suffixes,
        },
        &mut expansions,
    )?;
    let fwd_finished = truncate_pool(&rule, beam_cfg, fwd_pool);

    // Phase 3: rescore each finished forward hypothesis with the
    // backward model (teacher forced over its own tokens) and rank by
    // the complete-sequence joint score.
    let gamma = beam_cfg.gamma;
    let mut ranked: Vec<(f64, f64, f64, f64, SearchHyp)> = Vec::with_capacity(fwd_finished.len());
    for hyp in fwd_finished {
        let nodes = teacher_forced_logprobs(
            &mut tape,
            Direction::Backward,
            &hyp.tokens,
            &setup,
            &bound,
            config,
            true,
        )?;
        let mut bwd_total = 0.0;
        for n in &nodes {
            bwd_total += tape.value(*n).item()?;
        }
        for slot in expansions.iter_mut().take(hyp.tokens.len()) {
            *slot += 1;
        }
        let len = hyp.tokens.len() as f64;
        let fwd_norm = hyp.total() / len;
        let bwd_norm = bwd_total / len;
        let joint = gamma * fwd_norm + (1.0 - gamma) * bwd_norm;
        let raw = gamma * hyp.total() + (1.0 - gamma) * bwd_total;
        ranked.push((joint, raw, fwd_norm, bwd_norm, hyp));
    }
    ranked.sort_by(|a, b| compare_ranked((a.0, a.1, &a.4.tokens), (b.0, b.1, &b.4.tokens)));
    let (joint, _, fwd_norm, bwd_norm, winner) = ranked.into_iter().next().unwrap();
    let backward_beam_used = winner.bwd_pair;
    let best = winner.materialize(&tape, joint)?;
    Ok(DecodeOutput {
        best,
        fwd_norm,
        bwd_norm: Some(bwd_norm),
        joint_score: joint,
        diagnostics: BbsDiagnostics {
            backward_beams,
            expansions_per_position: expansions,
            backward_beam_used,
        },
    })
}

/// One scored sequence from the exhaustive oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    pub tokens: Vec<usize>,
    pub fwd_total: f64,
    pub bwd_total: f64,
    /// γ·fwd_total/len + (1-γ)·bwd_total/len.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub best: OracleEntry,
    /// Every evaluated sequence, in enumeration order.
    pub table: Vec<OracleEntry>,
}

/// Budget guard for [`exhaustive_oracle`].
pub const ORACLE_GUARD: u64 = 10_000_000;

/// Scores every candidate sequence of length `1..=max_len` with the
/// exact joint normalized objective (terminal emissions included in
/// each directional total, as in the searches) and returns the argmax
/// under the searches' tie-break order.
pub fn exhaustive_oracle(
    source: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    gamma: f64,
    max_len: usize,
) -> Result<OracleOutput> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }
    let alphabet = candidate_alphabet(config.vocab_size, false);
    let a = alphabet.len() as u64;
    let mut required = 0u64;
    let mut power = 1u64;
    for _ in 0..max_len {
        power = power.saturating_mul(a);
        required = required.saturating_add(power);
    }
    if required > ORACLE_GUARD {
        return Err(Error::OracleBudget {
            required,
            guard: ORACLE_GUARD,
        });
    }

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let setup = prepare_decode(&mut tape, source, &bound, config)?;
    let mut table = Vec::with_capacity(required as usize);
    let mut best: Option<OracleEntry> = None;
    let mut seq: Vec<usize> = Vec::new();
    enumerate(
        &mut seq,
        max_len,
        &alphabet,
        &mut |tokens, tape_ref: &mut Tape| {
            let fwd_nodes = teacher_forced_logprobs(
                tape_ref,
                Direction::Forward,
                tokens,
                &setup,
                &bound,
                config,
                true,
            )?;
            let bwd_nodes = teacher_forced_logprobs(
                tape_ref,
                Direction::Backward,
                tokens,
                &setup,
                &bound,
                config,
                true,
            )?;
            let mut fwd_total = 0.0;
            for n in &fwd_nodes {
                fwd_total += tape_ref.value(*n).item()?;
            }
            let mut bwd_total = 0.0;
            for n in &bwd_nodes {
                bwd_total += tape_ref.value(*n).item()?;
            }
            let len = tokens.len() as f64;
            let score = gamma * (fwd_total / len) + (1.0 - gamma) * (bwd_total / len);
            let raw = gamma * fwd_total + (1.0 - gamma) * bwd_total;
            let entry = OracleEntry {
                tokens: tokens.to_vec(),
                fwd_total,
                bwd_total,
                score,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    let braw = gamma * b.fwd_total + (1.0 - gamma) * b.bwd_total;
                    compare_ranked((entry.score, raw, &entry.tokens), (b.score, braw, &b.tokens))
                        == std::cmp::Ordering::Less
                }
            };
            if better {
                best = Some(entry.clone());
            }
            table.push(entry);
            Ok(())
        },
        &mut tape,
    )?;
    Ok(OracleOutput {
        best: best.expect("nonempty enumeration"),
        table,
    })
}

fn enumerate(
    seq: &mut Vec<usize>,
    max_len: usize,
    alphabet: &[usize],
    visit: &mut dyn FnMut(&[usize], &mut Tape) -> Result<()>,
    tape: &mut Tape,
) -> Result<()> {
    for &v in alphabet {
        seq.push(v);
        visit(seq, tape)?;
        if seq.len() < max_len {
            enumerate(seq, max_len, alphabet, visit, tape)?;
        }
        seq.pop();
    }
    Ok(())
}

/// One decode result as written to the line-delimited output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub tokens: Vec<usize>,
    pub text: String,
    pub joint_score: f64,
    pub fwd_score: f64,
    pub bwd_score: Option<f64>,
    pub backward_beam: Option<Vec<usize>>,
}

impl DecodeRecord {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Data(format!("decode record encode: {e}")))
    }

    pub fn from_json_line(line: &str) -> Result<DecodeRecord> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("decode record decode: {e}")))
    }
}
