//! Record schemas and JSONL input/output.
//!
//! Three record shapes flow through the pipeline:
//! * [`PrivateRecord`] — a labeled multiple-choice item; never leaves the client.
//! * [`PerturbedRecord`] — id plus privatized question text only. The struct
//!   has no label or raw-question field, so leakage of either is a type
//!   error, and decoding rejects unknown keys, so a mislabeled payload that
//!   still carries `answer` or `question` is refused at the schema gate.
//! * [`SyntheticRecord`] — generated question/choices/answer/rationale.
//!   Provenance is carried in-band: synthetic ids are
//!   `<source id>#<attempt>`, keeping the serialized schema to exactly the
//!   five documented keys.

use crate::error::{Error, Result};
use crate::vocab::Vocab;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivateRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: String,
}

impl PrivateRecord {
    pub fn validate(&self) -> Result<()> {
        if self.choices.is_empty() {
            return Err(Error::Data(format!("record {}: empty choices", self.id)));
        }
        if !self.choices.contains(&self.answer) {
            return Err(Error::Data(format!(
                "record {}: answer {:?} not among choices",
                self.id, self.answer
            )));
        }
        Ok(())
    }

    /// Index of the correct choice (first match when choices repeat).
    pub fn answer_index(&self) -> usize {
        self.choices
            .iter()
            .position(|c| *c == self.answer)
            .expect("validated record")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedRecord {
    pub id: String,
    pub perturbed_question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: String,
    pub rationale: String,
}

impl SyntheticRecord {
    pub fn validate(&self) -> Result<()> {
        if self.choices.is_empty() {
            return Err(Error::Data(format!("record {}: empty choices", self.id)));
        }
        if !self.choices.contains(&self.answer) {
            return Err(Error::Data(format!(
                "record {}: answer {:?} not among choices",
                self.id, self.answer
            )));
        }
        if self.rationale.trim().is_empty() {
            return Err(Error::Data(format!("record {}: empty rationale", self.id)));
        }
        Ok(())
    }
}

/// Parse one JSON value per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_jsonl(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    fs::write(path, to_jsonl(items)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read and validate a private dataset.
pub fn load_private(path: &Path) -> Result<Vec<PrivateRecord>> {
    let records: Vec<PrivateRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Read and validate a synthetic dataset.
pub fn load_synthetic(path: &Path) -> Result<Vec<SyntheticRecord>> {
    let records: Vec<SyntheticRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// A tokenized training/scoring sequence:
/// `[bos] question .. [sep] target .. [eos]`, with `target_start` marking the
/// first position that counts as a prediction target (the separator itself is
/// prompt; the final `[eos]` is a target).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSeq {
    pub tokens: Vec<u32>,
    pub target_start: usize,
    pub truncated: bool,
}

impl EncodedSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of target positions (includes the closing `[eos]`).
    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.target_start
    }
}

/// Assemble a prompt+target sequence, clipping the question to `max_q` and
/// the target to `max_t` tokens. The clip keeps the sequence legal for the
/// model rather than erroring; callers that need a hard failure check the
/// `truncated` flag.
pub fn encode_pair(
    vocab: &Vocab,
    question: &str,
    target: &str,
    max_q: usize,
    max_t: usize,
) -> EncodedSeq {
    let mut q_ids = vocab.encode(question);
    let mut t_ids = vocab.encode(target);
    let truncated = q_ids.len() > max_q || t_ids.len() > max_t;
    q_ids.truncate(max_q);
    t_ids.truncate(max_t);
    let mut tokens = Vec::with_capacity(q_ids.len() + t_ids.len() + 3);
    tokens.push(vocab.bos());
    tokens.extend_from_slice(&q_ids);
    tokens.push(vocab.sep());
    let target_start = tokens.len();
    tokens.extend_from_slice(&t_ids);
    tokens.push(vocab.eos());
    EncodedSeq {
        tokens,
        target_start,
        truncated,
    }
}

/// The scoring prefix `[bos] question .. [sep]` used for choice ranking.
pub fn encode_prefix(vocab: &Vocab, question: &str) -> Vec<u32> {
    let mut tokens = vec![vocab.bos()];
    tokens.extend(vocab.encode(question));
    tokens.push(vocab.sep());
    tokens
}
