//! Run configuration: merged model/training/decoding settings resolved
//! from a flat `key=value` file plus command-line overrides. The fully
//! resolved form is echoed to the output directory before any work.

use crate::CliError;
use bidirsum_core::decoding::BeamConfig;
use bidirsum_core::model::ModelConfig;
use bidirsum_core::training::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("bad value {value:?} for key {key:?}")))
}

impl RunConfig {
    /// Applies one `key=value` setting; keys are namespaced as
    /// `model.*`, `train.*`, and `beam.*`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "model.vocab_size" => self.model.vocab_size = parse(key, value)?,
            "model.embedding_dim" => self.model.embedding_dim = parse(key, value)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, value)?,
            "model.attention_dim" => self.model.attention_dim = parse(key, value)?,
            "model.reverse_source" => self.model.reverse_source = parse(key, value)?,
            "model.max_source_len" => self.model.max_source_len = parse(key, value)?,
            "model.max_target_len" => self.model.max_target_len = parse(key, value)?,
            "model.share_attention" => self.model.share_attention = parse(key, value)?,
            "train.gamma" => self.train.gamma = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.initial_accumulator" => self.train.initial_accumulator = parse(key, value)?,
            "train.max_grad_norm" => self.train.max_grad_norm = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.eval_every_steps" => self.train.eval_every_steps = parse(key, value)?,
            "train.patience_evals" => self.train.patience_evals = parse(key, value)?,
            "train.max_steps" => self.train.max_steps = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "beam.beam_size" => self.beam.beam_size = parse(key, value)?,
            "beam.gamma" => self.beam.gamma = parse(key, value)?,
            "beam.max_steps" => self.beam.max_steps = parse(key, value)?,
            "beam.length_normalize" => self.beam.length_normalize = parse(key, value)?,
            "beam.forbid_unk" => self.beam.forbid_unk = parse(key, value)?,
            other => {
                return Err(CliError::usage(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Loads a flat `key=value` file (blank lines and `#` comments
    /// allowed) over the current values.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::usage(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The resolved configuration in the same `key=value` format,
    /// keys sorted.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "beam.beam_size={}", self.beam.beam_size);
        let _ = writeln!(s, "beam.forbid_unk={}", self.beam.forbid_unk);
        let _ = writeln!(s, "beam.gamma={}", self.beam.gamma);
        let _ = writeln!(s, "beam.length_normalize={}", self.beam.length_normalize);
        let _ = writeln!(s, "beam.max_steps={}", self.beam.max_steps);
        let _ = writeln!(s, "model.attention_dim={}", self.model.attention_dim);
        let _ = writeln!(s, "model.embedding_dim={}", self.model.embedding_dim);
        let _ = writeln!(s, "model.hidden_dim={}", self.model.hidden_dim);
        let _ = writeln!(s, "model.max_source_len={}", self.model.max_source_len);
        let _ = writeln!(s, "model.max_target_len={}", self.model.max_target_len);
        let _ = writeln!(s, "model.reverse_source={}", self.model.reverse_source);
        let _ = writeln!(s, "model.share_attention={}", self.model.share_attention);
        let _ = writeln!(s, "model.vocab_size={}", self.model.vocab_size);
        let _ = writeln!(s, "train.batch_size={}", self.train.batch_size);
        let _ = writeln!(s, "train.eval_every_steps={}", self.train.eval_every_steps);
        let _ = writeln!(s, "train.gamma={}", self.train.gamma);
        let _ = writeln!(s, "train.initial_accumulator={}", self.train.initial_accumulator);
        let _ = writeln!(s, "train.learning_rate={}", self.train.learning_rate);
        let _ = writeln!(s, "train.max_grad_norm={}", self.train.max_grad_norm);
        let _ = writeln!(s, "train.max_steps={}", self.train.max_steps);
        let _ = writeln!(s, "train.patience_evals={}", self.train.patience_evals);
        let _ = writeln!(s, "train.seed={}", self.train.seed);
        s
    }

    /// Writes the resolved configuration into `out_dir`.
    pub fn echo(&self, out_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", out_dir.display())))?;
        std::fs::write(out_dir.join("config.resolved"), self.render())
            .map_err(|e| CliError::data(format!("cannot write resolved config: {e}")))?;
        Ok(())
    }
}
