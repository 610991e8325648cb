//! Vocabulary, corpus ingestion, synthetic task generation, and
//! batching.
//!
//! Corpus format: one pair per line, `source<TAB>target`, whitespace
//! tokenized and lowercased at ingestion.

use crate::error::{Error, Result};
use crate::{PAD_ID, RESERVED_TOKENS, START_ID, STOP_ID, UNK_ID};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

/// Display strings for the reserved ids.
pub const RESERVED_STRINGS: [&str; RESERVED_TOKENS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token-to-id map with fixed reserved ids 0..3 (PAD, UNK, START, STOP).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// A numeric vocabulary for synthetic tasks: id `i ≥ 4` displays as
    /// `t{i}`.
    pub fn numeric(size: usize) -> Result<Vocab> {
        if size <= RESERVED_TOKENS {
            return Err(Error::InvalidConfig(format!(
                "vocab size must exceed {RESERVED_TOKENS}, got {size}"
            )));
        }
        let mut tokens: Vec<String> = RESERVED_STRINGS.iter().map(|s| s.to_string()).collect();
        tokens.extend((RESERVED_TOKENS..size).map(|i| format!("t{i}")));
        Ok(Vocab::from_tokens(tokens))
    }

    /// Keeps the `max_size - 4` most frequent tokens; frequency ties
    /// broken lexicographically.
    pub fn build<'a, I>(corpus_tokens: I, max_size: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= RESERVED_TOKENS {
            return Err(Error::InvalidConfig(format!(
                "max vocab size must exceed {RESERVED_TOKENS}, got {max_size}"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for tok in corpus_tokens {
            any = true;
            *counts.entry(tok).or_insert(0) += 1;
        }
        if !any {
            return Err(Error::EmptyInput("Vocab::build"));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED_TOKENS);
        let mut tokens: Vec<String> = RESERVED_STRINGS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token, UNK if absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::VocabIdOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// Lowercases and whitespace-splits, then maps through the vocab.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(&t.to_lowercase()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    /// One token per line; the first four lines must be the reserved
    /// strings.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let file = std::fs::File::open(path)?;
        let tokens: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()?;
        if tokens.len() <= RESERVED_TOKENS {
            return Err(Error::Data(format!(
                "vocabulary file {} holds {} tokens, need more than {RESERVED_TOKENS}",
                path.display(),
                tokens.len()
            )));
        }
        for (i, expected) in RESERVED_STRINGS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Data(format!(
                    "vocabulary file {}: line {} is {:?}, expected reserved token {:?}",
                    path.display(),
                    i + 1,
                    tokens[i],
                    expected
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// One source/target pair of token ids. Sentinels are never stored;
/// decoders add them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for &id in self.source.iter().chain(&self.target) {
            if id >= vocab_size {
                return Err(Error::VocabIdOutOfRange { id, vocab_size });
            }
            if id == PAD_ID || id == START_ID || id == STOP_ID {
                return Err(Error::Data(format!(
                    "reserved id {id} stored inside an example sequence"
                )));
            }
        }
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::EmptyInput("Example"));
        }
        Ok(())
    }
}

/// Result of corpus ingestion.
pub struct LoadedPairs {
    pub examples: Vec<Example>,
    /// Lines skipped for having no TAB or an empty side.
    pub skipped: usize,
}

/// Reads `source<TAB>target` lines, lowercased and whitespace
/// tokenized, truncating to the given caps. Malformed lines are
/// skipped and counted.
pub fn load_pairs(
    path: &Path,
    vocab: &Vocab,
    max_source_len: usize,
    max_target_len: usize,
) -> Result<LoadedPairs> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let Some((src, tgt)) = line.split_once('\t') else {
            skipped += 1;
            continue;
        };
        let mut source = vocab.tokenize(src);
        let mut target = vocab.tokenize(tgt);
        if source.is_empty() || target.is_empty() {
            skipped += 1;
            continue;
        }
        source.truncate(max_source_len);
        target.truncate(max_target_len);
        examples.push(Example { source, target });
    }
    Ok(LoadedPairs { examples, skipped })
}

/// Writes examples in the corpus format using the vocab's strings.
pub fn write_pairs(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        writeln!(
            out,
            "{}\t{}",
            vocab.detokenize(&ex.source)?,
            vocab.detokenize(&ex.target)?
        )?;
    }
    Ok(())
}

/// Synthetic verification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// target = source
    Copy,
    /// target = reversed source
    Reverse,
    /// target = [checksum] ++ first ⌈T/2⌉ source tokens ++ [checksum],
    /// checksum = (sum of source ids mod usable vocab) + 4. Both target
    /// ends depend on the entire source, so backward context helps.
    Anchor,
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<SyntheticTask> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "anchor" => Ok(SyntheticTask::Anchor),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic task {other:?}; expected copy, reverse, or anchor"
            ))),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Anchor => "anchor",
        })
    }
}

/// Target construction for one source under a task.
pub fn synthetic_target(task: SyntheticTask, source: &[usize], vocab_size: usize) -> Vec<usize> {
    match task {
        SyntheticTask::Copy => source.to_vec(),
        SyntheticTask::Reverse => source.iter().rev().copied().collect(),
        SyntheticTask::Anchor => {
            let usable = vocab_size - RESERVED_TOKENS;
            let checksum = RESERVED_TOKENS + source.iter().sum::<usize>() % usable;
            let half = source.len().div_ceil(2);
            let mut target = Vec::with_capacity(half + 2);
            target.push(checksum);
            target.extend_from_slice(&source[..half]);
            target.push(checksum);
            target
        }
    }
}

/// Deterministic synthetic dataset: source tokens uniform over the
/// non-reserved ids, lengths uniform over `min_len..=max_len`.
pub fn gen_synthetic(
    task: SyntheticTask,
    n: usize,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if vocab_size <= RESERVED_TOKENS {
        return Err(Error::InvalidConfig(format!(
            "vocab_size must exceed {RESERVED_TOKENS}, got {vocab_size}"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidConfig(format!(
            "bad length range {min_len}..={max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(min_len..=max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(RESERVED_TOKENS..vocab_size))
            .collect();
        let target = synthetic_target(task, &source, vocab_size);
        examples.push(Example { source, target });
    }
    Ok(examples)
}

/// Padded batch with lengths and a target mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch, max_src]`, PAD beyond each length.
    pub sources: Vec<Vec<usize>>,
    pub source_lens: Vec<usize>,
    /// `[batch, max_tgt]`, PAD beyond each length.
    pub targets: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
    /// 1.0 for real target tokens, 0.0 for padding.
    pub target_mask: Vec<Vec<f64>>,
}

impl Batch {
    fn from_examples(examples: &[&Example]) -> Batch {
        let max_src = examples.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let max_tgt = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let mut b = Batch {
            sources: Vec::with_capacity(examples.len()),
            source_lens: Vec::with_capacity(examples.len()),
            targets: Vec::with_capacity(examples.len()),
            target_lens: Vec::with_capacity(examples.len()),
            target_mask: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let mut src = ex.source.clone();
            src.resize(max_src, PAD_ID);
            let mut tgt = ex.target.clone();
            tgt.resize(max_tgt, PAD_ID);
            let mut mask = vec![1.0; ex.target.len()];
            mask.resize(max_tgt, 0.0);
            b.sources.push(src);
            b.source_lens.push(ex.source.len());
            b.targets.push(tgt);
            b.target_lens.push(ex.target.len());
            b.target_mask.push(mask);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Unpadded (source, target) slices for one row.
    pub fn example(&self, i: usize) -> (&[usize], &[usize]) {
        (
            &self.sources[i][..self.source_lens[i]],
            &self.targets[i][..self.target_lens[i]],
        )
    }
}

/// Shuffles (seeded) and partitions into padded batches.
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput("make_batches"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect())
}
