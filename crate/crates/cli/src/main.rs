//! `bidirsum`: train, decode, and evaluate the bidirectional
//! summarization model, plus dataset generation and the verification
//! battery. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical failure.

mod config;

use bidirsum_core::check::run_checks;
use bidirsum_core::checkpoint;
use bidirsum_core::data::{gen_synthetic, load_pairs, write_pairs, SyntheticTask, Vocab};
use bidirsum_core::decoding::{bbs_decode, beam_search, BeamConfig, DecodeRecord};
use bidirsum_core::model::{count_parameters, ModelConfig, ModelParams, REFERENCE_PARAM_COUNT};
use bidirsum_core::recurrent::Direction;
use bidirsum_core::rouge::{rouge_l, rouge_n, RougeScore};
use bidirsum_core::training::{train, write_log};
use bidirsum_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "BIDIRSUM_OUT_DIR";

#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { exit_code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> CliError {
        CliError { exit_code: 2, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> CliError {
        CliError { exit_code: 3, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match &e {
            Error::InvalidConfig(_) => 1,
            Error::ShapeMismatch { .. }
            | Error::BadShape { .. }
            | Error::NonFinite { .. }
            | Error::OracleBudget { .. }
            | Error::Diverged { .. } => 3,
            _ => 2,
        };
        CliError { exit_code: code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "bidirsum", version, about = "Bidirectional abstractive summarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonConfig {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set model.hidden_dim=64.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default: $BIDIRSUM_OUT_DIR or ./bidirsum-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonConfig {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for kv in &self.sets {
            let Some((key, value)) = kv.split_once('=') else {
                return Err(CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("bidirsum-out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a TAB-separated source/target corpus.
    Train {
        #[command(flatten)]
        common: CommonConfig,
        /// Training corpus: one `source<TAB>target` pair per line.
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus in the same format.
        #[arg(long)]
        val: PathBuf,
        /// Existing vocabulary file; built from the training corpus
        /// when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Shortcut for --set train.gamma=...
        #[arg(long)]
        gamma: Option<f64>,
        /// Shortcut for --set train.seed=...
        #[arg(long)]
        seed: Option<u64>,
        /// Uniform init scale for fresh parameters.
        #[arg(long, default_value_t = 0.1)]
        init_scale: f64,
    },
    /// Decode sources with a trained checkpoint.
    Decode {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Input file: one source text per line (TAB-separated lines
        /// use the first field).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Decoder::Bbs)]
        decoder: Decoder,
        /// Shortcut for --set beam.beam_size=...
        #[arg(short = 'k', long)]
        beam_size: Option<usize>,
        /// Shortcut for --set beam.gamma=...
        #[arg(long)]
        gamma: Option<f64>,
        /// Shortcut for --set beam.max_steps=...
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score decode records against reference summaries with ROUGE.
    Eval {
        #[command(flatten)]
        common: CommonConfig,
        /// decode.jsonl produced by `decode`.
        #[arg(long)]
        hypotheses: PathBuf,
        /// References: plain lines, or TAB-separated lines using the
        /// second field.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Generate a synthetic dataset in the corpus format.
    Gen {
        #[command(flatten)]
        common: CommonConfig,
        /// copy, reverse, or anchor.
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the verification battery and print pass/fail per check.
    Check {
        /// Smaller sample counts for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
    /// Print the parameter count for a configuration alongside the
    /// reference figure.
    Params {
        #[command(flatten)]
        common: CommonConfig,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Decoder {
    /// Forward beam search with k=1.
    Greedy,
    /// Forward beam search.
    Beam,
    /// Bidirectional beam search.
    Bbs,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.exit_code);
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common, train, val, vocab, gamma, seed, init_scale } => {
            cmd_train(common, &train, &val, vocab.as_deref(), gamma, seed, init_scale)
        }
        Command::Decode { common, checkpoint, vocab, input, decoder, beam_size, gamma, max_steps } => {
            cmd_decode(common, &checkpoint, &vocab, &input, decoder, beam_size, gamma, max_steps)
        }
        Command::Eval { common, hypotheses, references, vocab } => {
            cmd_eval(common, &hypotheses, &references, &vocab)
        }
        Command::Gen { common, task, n, min_len, max_len, vocab_size, seed } => {
            cmd_gen(common, &task, n, min_len, max_len, vocab_size, seed)
        }
        Command::Check { quick } => cmd_check(quick),
        Command::Params { common } => cmd_params(common),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: CommonConfig,
    train_path: &Path,
    val_path: &Path,
    vocab_path: Option<&Path>,
    gamma: Option<f64>,
    seed: Option<u64>,
    init_scale: f64,
) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    if let Some(g) = gamma {
        cfg.train.gamma = g;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out_dir = common.out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out_dir.display())))?;

    let vocab = match vocab_path {
        Some(path) => Vocab::load(path)?,
        None => {
            let mut tokens = Vec::new();
            for line in read_lines(train_path)? {
                for field in line.split('\t') {
                    for token in field.split_whitespace() {
                        tokens.push(token.to_lowercase());
                    }
                }
            }
            Vocab::build(tokens.iter().map(String::as_str), cfg.model.vocab_size)?
        }
    };
    cfg.model.vocab_size = vocab.len();
    cfg.echo(&out_dir)?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    let train_pairs = load_pairs(train_path, &vocab, cfg.model.max_source_len, cfg.model.max_target_len)?;
    let val_pairs = load_pairs(val_path, &vocab, cfg.model.max_source_len, cfg.model.max_target_len)?;
    if train_pairs.skipped + val_pairs.skipped > 0 {
        eprintln!(
            "skipped {} malformed corpus lines",
            train_pairs.skipped + val_pairs.skipped
        );
    }

    let initial = ModelParams::init_with_scale(&cfg.model, cfg.train.seed, init_scale);
    let best_path = out_dir.join("best.ckpt");
    let outcome = train(
        initial,
        &cfg.model,
        &cfg.train,
        &train_pairs.examples,
        &val_pairs.examples,
        Some(&best_path),
    )?;
    checkpoint::save(&out_dir.join("final.ckpt"), &cfg.model, &outcome.final_params)?;
    if !best_path.exists() {
        checkpoint::save(&best_path, &cfg.model, &outcome.best_params)?;
    }
    write_log(&out_dir.join("train_log.tsv"), &outcome.log)?;
    println!(
        "trained {} steps ({:?}); best validation loss {:.6}; artifacts in {}",
        outcome.steps,
        outcome.stopped,
        outcome.best_val_loss,
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    common: CommonConfig,
    checkpoint_path: &Path,
    vocab_path: &Path,
    input_path: &Path,
    decoder: Decoder,
    beam_size: Option<usize>,
    gamma: Option<f64>,
    max_steps: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    if let Some(k) = beam_size {
        cfg.beam.beam_size = k;
    }
    if let Some(g) = gamma {
        cfg.beam.gamma = g;
    }
    if let Some(m) = max_steps {
        cfg.beam.max_steps = m;
    }
    let (model_config, params) = checkpoint::load(checkpoint_path)?;
    cfg.model = model_config;
    let out_dir = common.out_dir();
    cfg.echo(&out_dir)?;
    let vocab = Vocab::load(vocab_path)?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(CliError::data(format!(
            "vocabulary has {} entries but the checkpoint was trained with {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }

    let mut lines = String::new();
    for raw in read_lines(input_path)? {
        let text = raw.split('\t').next().unwrap_or("");
        let source = vocab.tokenize(text);
        if source.is_empty() {
            return Err(CliError::data(format!("input line tokenizes to nothing: {raw:?}")));
        }
        let record = decode_one(&source, &params, &cfg.model, &cfg.beam, decoder, &vocab)?;
        lines.push_str(&record.to_json_line()?);
        lines.push('\n');
    }
    let out_path = out_dir.join("decode.jsonl");
    std::fs::write(&out_path, lines)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", out_path.display())))?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn decode_one(
    source: &[usize],
    params: &ModelParams,
    model: &ModelConfig,
    beam: &BeamConfig,
    decoder: Decoder,
    vocab: &Vocab,
) -> Result<DecodeRecord, CliError> {
    match decoder {
        Decoder::Bbs => {
            let out = bbs_decode(source, params, model, beam)?;
            Ok(DecodeRecord {
                text: vocab.detokenize(&out.best.tokens)?,
                tokens: out.best.tokens,
                joint_score: out.joint_score,
                fwd_score: out.fwd_norm,
                bwd_score: out.bwd_norm,
                backward_beam: out
                    .diagnostics
                    .backward_beam_used
                    .map(|i| out.diagnostics.backward_beams[i].tokens.clone()),
            })
        }
        Decoder::Beam | Decoder::Greedy => {
            let mut fwd_cfg = beam.clone();
            fwd_cfg.gamma = 1.0;
            if decoder == Decoder::Greedy {
                fwd_cfg.beam_size = 1;
            }
            let best = beam_search(Direction::Forward, source, params, model, &fwd_cfg)?
                .into_iter()
                .next()
                .ok_or_else(|| CliError::numerical("beam search returned no hypotheses"))?;
            Ok(DecodeRecord {
                text: vocab.detokenize(&best.tokens)?,
                tokens: best.tokens,
                joint_score: best.score,
                fwd_score: best.score,
                bwd_score: None,
                backward_beam: None,
            })
        }
    }
}

fn cmd_eval(
    common: CommonConfig,
    hypotheses: &Path,
    references: &Path,
    vocab_path: &Path,
) -> Result<(), CliError> {
    let vocab = Vocab::load(vocab_path)?;
    let hyp_lines = read_lines(hypotheses)?;
    let ref_lines = read_lines(references)?;
    if hyp_lines.len() != ref_lines.len() {
        return Err(CliError::data(format!(
            "{} hypotheses vs {} references",
            hyp_lines.len(),
            ref_lines.len()
        )));
    }
    let out_dir = common.out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut report = String::from("pair\tr1_p\tr1_r\tr1_f1\tr2_p\tr2_r\tr2_f1\trl_p\trl_r\trl_f1\n");
    let mut sums = [RougeScore::ZERO; 3];
    let n = hyp_lines.len();
    for (i, (hyp_line, ref_line)) in hyp_lines.iter().zip(&ref_lines).enumerate() {
        let record = DecodeRecord::from_json_line(hyp_line)?;
        let reference_text = ref_line.split('\t').nth(1).unwrap_or(ref_line);
        let reference = vocab.tokenize(reference_text);
        let scores = [
            rouge_n(&record.tokens, &reference, 1),
            rouge_n(&record.tokens, &reference, 2),
            rouge_l(&record.tokens, &reference),
        ];
        let _ = write!(report, "{i}");
        for (sum, s) in sums.iter_mut().zip(&scores) {
            sum.precision += s.precision;
            sum.recall += s.recall;
            sum.f1 += s.f1;
            let _ = write!(report, "\t{:.6}\t{:.6}\t{:.6}", s.precision, s.recall, s.f1);
        }
        report.push('\n');
    }
    report.push_str("mean");
    for sum in &sums {
        let _ = write!(
            report,
            "\t{:.6}\t{:.6}\t{:.6}",
            sum.precision / n as f64,
            sum.recall / n as f64,
            sum.f1 / n as f64
        );
    }
    report.push('\n');
    let out_path = out_dir.join("rouge_report.tsv");
    std::fs::write(&out_path, &report)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", out_path.display())))?;
    println!(
        "R-1 F1 {:.4}  R-2 F1 {:.4}  R-L F1 {:.4}  ({n} pairs; report at {})",
        sums[0].f1 / n as f64,
        sums[1].f1 / n as f64,
        sums[2].f1 / n as f64,
        out_path.display()
    );
    Ok(())
}

fn cmd_gen(
    common: CommonConfig,
    task: &str,
    n: usize,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<(), CliError> {
    let task: SyntheticTask = task.parse()?;
    let out_dir = common.out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let examples = gen_synthetic(task, n, min_len, max_len, vocab_size, seed)?;
    let vocab = Vocab::numeric(vocab_size)?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    write_pairs(&out_dir.join("corpus.tsv"), &examples, &vocab)?;
    println!("wrote {n} {task} pairs to {}", out_dir.display());
    Ok(())
}

fn cmd_check(quick: bool) -> Result<(), CliError> {
    let results = run_checks(quick);
    let mut failed = 0usize;
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{}: {verdict} — {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn cmd_params(common: CommonConfig) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let count = count_parameters(&cfg.model);
    println!(
        "computed parameters: {count}\nreference figure:    {REFERENCE_PARAM_COUNT}\n\
         (the reference model additionally carries copy and coverage parameters that\n\
         this implementation omits, so the figures are side-by-side, not equal)"
    );
    Ok(())
}
