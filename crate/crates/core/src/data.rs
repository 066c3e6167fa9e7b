//! Synthetic classification tasks.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShearsError};
use crate::linalg::Rng;
use crate::model::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the class of the unique most frequent token.
    MajorityToken,
    /// Label is the class of the token right after the key token
    /// (`vocab_size - 1`), which occurs exactly once.
    KeyLookup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::KeyLookup,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            seq_len: 8,
            vocab_size: 17,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ShearsError::InvalidArgument(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("task splits must be non-empty".into());
        }
        if self.n_classes == 0 || self.n_classes > self.vocab_size {
            return bad(format!(
                "n_classes {} must be in 1..={}",
                self.n_classes, self.vocab_size
            ));
        }
        match self.kind {
            TaskKind::MajorityToken if self.vocab_size < 2 || self.seq_len < 1 => {
                bad("majority task needs vocab >= 2".into())
            }
            TaskKind::KeyLookup if self.seq_len < 2 || self.vocab_size < 2 => {
                bad("key lookup needs seq_len >= 2 and vocab >= 2".into())
            }
            _ => Ok(()),
        }
    }

    pub fn key_token(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn class_of(&self, token: u32) -> u32 {
        token % self.n_classes as u32
    }
}

/// Labelled sequences of one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Batch {
            tokens,
            labels,
            seq_len: self.seq_len,
        }
    }

    /// Consecutive batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.select(c)).collect()
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            seq_len: self.seq_len,
            tokens: self.tokens[..n * self.seq_len].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// One `{"tokens": [...], "label": n}` record per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for i in 0..self.len() {
            let rec = Record {
                tokens: self.sequence(i).to_vec(),
                label: self.labels[i],
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")
                .map_err(|e| ShearsError::io("<dataset>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Dataset> {
        let mut out = Dataset {
            seq_len: 0,
            tokens: Vec::new(),
            labels: Vec::new(),
        };
        for line in r.lines() {
            let line = line.map_err(|e| ShearsError::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            if out.is_empty() {
                out.seq_len = rec.tokens.len();
            } else if rec.tokens.len() != out.seq_len {
                return Err(ShearsError::InvalidArgument("ragged dataset records".into()));
            }
            out.tokens.extend(rec.tokens);
            out.labels.push(rec.label);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<u32>,
    label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Label of one sequence by the task's definition; `None` if the sequence
/// is not a valid instance.
pub fn label_sequence(spec: &TaskSpec, seq: &[u32]) -> Option<u32> {
    match spec.kind {
        TaskKind::MajorityToken => {
            let mut counts = vec![0usize; spec.vocab_size];
            for &t in seq {
                counts[t as usize] += 1;
            }
            let max = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
            let (tok, _) = winners.next()?;
            if winners.next().is_some() {
                return None;
            }
            Some(spec.class_of(tok as u32))
        }
        TaskKind::KeyLookup => {
            let key = spec.key_token();
            let mut at = seq.iter().enumerate().filter(|(_, &t)| t == key);
            let (p, _) = at.next()?;
            if at.next().is_some() || p + 1 >= seq.len() {
                return None;
            }
            Some(spec.class_of(seq[p + 1]))
        }
    }
}

fn sample_sequence(spec: &TaskSpec, rng: &mut Rng) -> Vec<u32> {
    match spec.kind {
        TaskKind::MajorityToken => loop {
            let seq: Vec<u32> = (0..spec.seq_len)
                .map(|_| rng.below(spec.vocab_size) as u32)
                .collect();
            let planted = rng.below(spec.vocab_size) as u32;
            let mut seq = seq;
            // Plant the winner in about half the slots so most draws are accepted.
            for t in seq.iter_mut() {
                if rng.bernoulli(0.4) {
                    *t = planted;
                }
            }
            if label_sequence(spec, &seq).is_some() {
                return seq;
            }
        },
        TaskKind::KeyLookup => {
            let key = spec.key_token();
            let p = rng.below(spec.seq_len - 1);
            (0..spec.seq_len)
                .map(|i| {
                    if i == p {
                        key
                    } else {
                        rng.below(spec.vocab_size - 1) as u32
                    }
                })
                .collect()
        }
    }
}

fn generate_split(spec: &TaskSpec, n: usize, stream: u64) -> Dataset {
    let mut rng = Rng::with_stream(spec.seed, stream);
    let mut tokens = Vec::with_capacity(n * spec.seq_len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let seq = sample_sequence(spec, &mut rng);
        labels.push(label_sequence(spec, &seq).expect("sampled sequences are valid"));
        tokens.extend(seq);
    }
    Dataset {
        seq_len: spec.seq_len,
        tokens,
        labels,
    }
}

/// Train / validation / test splits, each drawn from its own RNG stream.
pub fn generate(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, spec.n_train, 101),
        val: generate_split(spec, spec.n_val, 102),
        test: generate_split(spec, spec.n_test, 103),
    })
}
