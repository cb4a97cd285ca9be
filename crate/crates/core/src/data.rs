//! Desk-scale datasets: a synthetic keyword-counting task, JSON Lines
//! ingestion and seeded batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;
use crate::numerics::RandomStream;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

impl Example {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.len() > config.seq_len {
            return Err(invalid(format!(
                "{} tokens exceed seq_len {}",
                self.tokens.len(),
                config.seq_len
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(invalid(format!(
                "token {t} is outside the vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.label >= config.num_classes {
            return Err(invalid(format!(
                "label {} is not below num_classes {}",
                self.label, config.num_classes
            )));
        }
        Ok(())
    }
}

/// Disjoint token groups of the keyword task. Ids 0 and 1 are the padding and
/// classification tokens; the rest is split into positive, negative and
/// neutral groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordTask {
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    pub neutral: Vec<u32>,
}

impl KeywordTask {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 4 {
            return Err(invalid(format!("keyword task needs a vocabulary of at least 4, got {vocab}")));
        }
        let rest = vocab as u32 - 2;
        let k = (rest / 3).max(1);
        Ok(Self {
            positive: (2..2 + k).collect(),
            negative: (2 + k..2 + 2 * k).collect(),
            neutral: (2 + 2 * k..vocab as u32).collect(),
        })
    }

    /// 1 iff positive tokens outnumber negative ones; ties give 0.
    pub fn label(&self, tokens: &[u32]) -> usize {
        let pos = tokens.iter().filter(|t| self.positive.contains(t)).count();
        let neg = tokens.iter().filter(|t| self.negative.contains(t)).count();
        usize::from(pos > neg)
    }
}

/// Generates `n` keyword examples with alternating labels, so the classes
/// differ in size by at most one. Each sequence starts with the
/// classification token; the positive-minus-negative count difference is
/// drawn from `1..=4` for label 1 and `-3..=0` for label 0.
pub fn gen_keyword_task(vocab: usize, seq_len: usize, n: usize, stream: &mut RandomStream) -> Result<Vec<Example>> {
    let task = KeywordTask::new(vocab)?;
    if seq_len < 6 {
        return Err(invalid(format!("keyword task needs seq_len of at least 6, got {seq_len}")));
    }
    let slots = seq_len - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let diff: i64 = if label == 1 {
            1 + stream.index(4) as i64
        } else {
            -(stream.index(4) as i64)
        };
        let len = if task.neutral.is_empty() {
            slots
        } else {
            slots / 2 + stream.index(slots - slots / 2 + 1)
        };
        let lo = (-diff).max(0);
        let hi = ((len as i64 - diff) / 2).max(lo);
        let n_neg = lo + stream.index((hi - lo + 1) as usize) as i64;
        let n_pos = n_neg + diff;
        let mut body: Vec<u32> = Vec::with_capacity(slots);
        for _ in 0..n_pos {
            body.push(task.positive[stream.index(task.positive.len())]);
        }
        for _ in 0..n_neg {
            body.push(task.negative[stream.index(task.negative.len())]);
        }
        while body.len() < len && !task.neutral.is_empty() {
            body.push(task.neutral[stream.index(task.neutral.len())]);
        }
        body.truncate(slots);
        stream.shuffle(&mut body);
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(CLS);
        tokens.extend(body);
        debug_assert_eq!(task.label(&tokens), label);
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// Reads one `{"tokens": [...], "label": k}` record per line, validating each
/// against `config`. Blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            file: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: Example = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        ex.validate(config).map_err(|e| err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(path: impl AsRef<Path>, data: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in data {
        serde_json::to_writer(&mut w, ex).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Index batches covering `0..n` exactly once, shuffled when a stream is
/// given.
pub fn batches(n: usize, batch_size: usize, stream: Option<&mut RandomStream>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(s) = stream {
        s.shuffle(&mut idx);
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
