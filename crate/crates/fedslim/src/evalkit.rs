//! Multiple-choice evaluation and the closed toy worlds it runs on.
//!
//! A [`ToyWorld`] is a tiny, fully enumerable QA universe: key→value
//! lookup tables or cyclic color patterns. It serves three roles at once —
//! it generates the client's labeled dataset, it answers questions for the
//! deterministic generation stub (standing in for a backend model's world
//! knowledge), and it produces programmatic rationale text so distillation
//! has a rationale target. Scoring ranks each choice by mean per-token
//! log-likelihood under the model.

use crate::data::{encode_prefix, PrivateRecord};
use crate::error::{Error, Result};
use crate::model::{forward, TransformerModel};
use crate::num::{self, Real};
use crate::vocab::Vocab;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    KeyValueLookup,
    PatternCompletion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub family: TaskFamily,
    pub n_keys: usize,
    pub n_values: usize,
    pub choices_per_item: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            family: TaskFamily::KeyValueLookup,
            n_keys: 12,
            n_values: 8,
            choices_per_item: 4,
            seed: 0,
            n_train: 64,
            n_val: 32,
            n_test: 64,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.choices_per_item < 2 {
            return Err(Error::Data("toy task: need at least 2 choices per item".into()));
        }
        match self.family {
            TaskFamily::KeyValueLookup => {
                if self.n_keys == 0 || self.n_values < self.choices_per_item {
                    return Err(Error::Data(format!(
                        "toy task: {} values cannot fill {} distinct choices",
                        self.n_values, self.choices_per_item
                    )));
                }
            }
            TaskFamily::PatternCompletion => {
                if self.choices_per_item > COLORS.len() {
                    return Err(Error::Data(format!(
                        "toy task: at most {} pattern choices",
                        COLORS.len()
                    )));
                }
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Data("toy task: train and test splits must be non-empty".into()));
        }
        Ok(())
    }
}

const COLORS: [&str; 8] = ["red", "blue", "green", "gold", "pink", "gray", "teal", "navy"];
const KV_FRAME: [&str; 10] = [
    "key", "maps", "to", "which", "value", "because", "stores", "the", "answer", "is",
];
const PC_FRAME: [&str; 9] = [
    "pattern", "then", "which", "color", "because", "repeats", "next", "the", "is",
];

/// The ground truth behind a task family instance. Reconstructible from
/// (family, sizes, seed) alone, so the client and a generation stub on the
/// other side of the wire can hold the same world without ever exchanging
/// private records.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    family: TaskFamily,
    keys: Vec<String>,
    values: Vec<String>,
    /// Key index → value index (key-value family only).
    map: Vec<usize>,
}

impl ToyWorld {
    pub fn new(family: TaskFamily, n_keys: usize, n_values: usize, seed: u64) -> Self {
        let mut rng = num::rng_for(seed, "toy-world");
        let (keys, values, map) = match family {
            TaskFamily::KeyValueLookup => {
                let keys: Vec<String> = (0..n_keys).map(|i| format!("k{i}")).collect();
                let values: Vec<String> = (0..n_values).map(|i| format!("v{i}")).collect();
                let map: Vec<usize> = (0..n_keys).map(|_| rng.gen_range(0..n_values)).collect();
                (keys, values, map)
            }
            TaskFamily::PatternCompletion => {
                let colors: Vec<String> = COLORS.iter().map(|c| c.to_string()).collect();
                (Vec::new(), colors, Vec::new())
            }
        };
        ToyWorld {
            family,
            keys,
            values,
            map,
        }
    }

    pub fn family(&self) -> TaskFamily {
        self.family
    }

    /// Every word a well-formed question, choice, or rationale can contain.
    pub fn vocab_words(&self) -> Vec<String> {
        let frame: &[&str] = match self.family {
            TaskFamily::KeyValueLookup => &KV_FRAME,
            TaskFamily::PatternCompletion => &PC_FRAME,
        };
        let mut words: Vec<String> = frame.iter().map(|w| w.to_string()).collect();
        words.extend(self.keys.iter().cloned());
        words.extend(self.values.iter().cloned());
        words
    }

    /// Draw one labeled item.
    pub fn sample_item<G: Rng>(&self, choices_per_item: usize, rng: &mut G) -> (String, Vec<String>, String) {
        match self.family {
            TaskFamily::KeyValueLookup => {
                let k = rng.gen_range(0..self.keys.len());
                let answer = self.values[self.map[k]].clone();
                let question = format!("key {} maps to which value", self.keys[k]);
                let choices = self.build_choices(&answer, choices_per_item, rng);
                (question, choices, answer)
            }
            TaskFamily::PatternCompletion => {
                let period = 2 + rng.gen_range(0..2usize);
                let mut stem: Vec<&str> = Vec::with_capacity(period);
                while stem.len() < period {
                    let c = self.values[rng.gen_range(0..self.values.len())].as_str();
                    if !stem.contains(&c) {
                        stem.push(c);
                    }
                }
                // Show two full cycles; the continuation restarts the cycle.
                let shown: Vec<&str> = stem.iter().chain(stem.iter()).copied().collect();
                let answer = stem[0].to_string();
                let question = format!("pattern {} then which color", shown.join(" "));
                let choices = self.build_choices(&answer, choices_per_item, rng);
                (question, choices, answer)
            }
        }
    }

    fn build_choices<G: Rng>(&self, answer: &str, n: usize, rng: &mut G) -> Vec<String> {
        let mut choices: Vec<String> = vec![answer.to_string()];
        while choices.len() < n {
            let c = &self.values[rng.gen_range(0..self.values.len())];
            if !choices.contains(c) {
                choices.push(c.clone());
            }
        }
        // Move the answer to a random slot so position carries no signal.
        let slot = rng.gen_range(0..n);
        choices.swap(0, slot);
        choices
    }

    /// Ground-truth answer for a well-formed question, None when the text
    /// doesn't parse (perturbed questions usually don't).
    pub fn answer_for(&self, question: &str) -> Option<String> {
        let toks: Vec<&str> = question.split_whitespace().collect();
        match self.family {
            TaskFamily::KeyValueLookup => {
                if let ["key", k, "maps", "to", "which", "value"] = toks.as_slice() {
                    let ki = self.keys.iter().position(|key| key == k)?;
                    Some(self.values[self.map[ki]].clone())
                } else {
                    None
                }
            }
            TaskFamily::PatternCompletion => {
                if toks.len() < 5 || toks[0] != "pattern" {
                    return None;
                }
                let end = toks.len().checked_sub(3)?;
                if toks[end..] != ["then", "which", "color"] {
                    return None;
                }
                let shown = &toks[1..end];
                if shown.is_empty() {
                    return None;
                }
                // Smallest period consistent with the shown tokens.
                let period = (1..=shown.len())
                    .find(|&p| shown.iter().enumerate().all(|(i, t)| *t == shown[i % p]))?;
                if !shown.iter().all(|t| self.values.iter().any(|v| v == t)) {
                    return None;
                }
                Some(shown[shown.len() % period].to_string())
            }
        }
    }

    /// Deterministic explanation text for a (question, answer) pair.
    pub fn rationale_for(&self, question: &str, answer: &str) -> String {
        match self.family {
            TaskFamily::KeyValueLookup => {
                let key = question
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("key");
                format!("because key {key} stores {answer} the answer is {answer}")
            }
            TaskFamily::PatternCompletion => {
                let toks: Vec<&str> = question.split_whitespace().collect();
                let shown: &[&str] = if toks.len() > 4 { &toks[1..toks.len() - 3] } else { &[] };
                let stem = &shown[..(shown.len() / 2).clamp(shown.len().min(1), 3)];
                format!(
                    "because the pattern repeats {} the next color is {answer}",
                    stem.join(" ")
                )
            }
        }
    }
}

/// A generated task: the world plus disjoint labeled splits.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub world: ToyWorld,
    pub train: Vec<PrivateRecord>,
    pub val: Vec<PrivateRecord>,
    pub test: Vec<PrivateRecord>,
}

impl ToyTask {
    /// Vocabulary covering the world plus the control tokens.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.world.vocab_words())
    }
}

pub fn make_toy_task(spec: &ToyTaskSpec) -> Result<ToyTask> {
    spec.validate()?;
    let world = ToyWorld::new(spec.family, spec.n_keys, spec.n_values, spec.seed);
    let tag = match spec.family {
        TaskFamily::KeyValueLookup => "kv",
        TaskFamily::PatternCompletion => "pc",
    };
    let make_split = |name: &str, n: usize| -> Vec<PrivateRecord> {
        let mut rng = num::rng_for(spec.seed, &format!("toy-split-{name}"));
        (0..n)
            .map(|i| {
                let (question, choices, answer) = world.sample_item(spec.choices_per_item, &mut rng);
                PrivateRecord {
                    id: format!("{tag}-{name}-{i}"),
                    question,
                    choices,
                    answer,
                }
            })
            .collect()
    };
    Ok(ToyTask {
        train: make_split("train", spec.n_train),
        val: make_split("val", spec.n_val),
        test: make_split("test", spec.n_test),
        world,
    })
}

/// Labelled world samples, for evaluation sets owned by whoever holds the
/// world (e.g. server-side validation during bootstrap).
pub fn world_eval_set(
    world: &ToyWorld,
    n: usize,
    choices_per_item: usize,
    seed: u64,
) -> Vec<PrivateRecord> {
    let mut rng = num::rng_for(seed, "world-eval");
    (0..n)
        .map(|i| {
            let (question, choices, answer) = world.sample_item(choices_per_item, &mut rng);
            PrivateRecord {
                id: format!("world-eval-{i}"),
                question,
                choices,
                answer,
            }
        })
        .collect()
}

/// Mean per-token log-likelihood of `choice` as a continuation of `prefix`.
pub fn score_choice<R: Real>(
    model: &TransformerModel<R>,
    prefix: &[u32],
    choice: &[u32],
) -> Result<f64> {
    if choice.is_empty() {
        return Err(Error::Data("score: empty choice token sequence".into()));
    }
    if prefix.is_empty() {
        return Err(Error::Data("score: empty prefix".into()));
    }
    let mut seq = Vec::with_capacity(prefix.len() + choice.len());
    seq.extend_from_slice(prefix);
    seq.extend_from_slice(choice);
    // The last choice token is never fed back in; it is only predicted.
    let input = &seq[..seq.len() - 1];
    if input.len() > model.config.max_seq_len {
        return Err(Error::Data(format!(
            "score: sequence of {} exceeds max length {}",
            input.len(),
            model.config.max_seq_len
        )));
    }
    let trace = forward(model, input, false)?;
    let v = model.config.vocab_size;
    let mut total = 0.0f64;
    for (j, &tok) in choice.iter().enumerate() {
        let row_idx = prefix.len() + j - 1;
        let row = &trace.logits[row_idx * v..(row_idx + 1) * v];
        total += row[tok as usize].to_f64() - num::log_sum_exp(row);
    }
    Ok(total / choice.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub accuracy: f64,
    pub n: usize,
    pub per_item: Vec<ItemScore>,
}

/// Score every item: predict argmax of per-choice scores (ties to the
/// lowest index), compare against the labeled answer.
pub fn evaluate<R: Real>(
    model: &TransformerModel<R>,
    records: &[PrivateRecord],
    vocab: &Vocab,
    dataset: &str,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let mut per_item = Vec::with_capacity(records.len());
    let mut hits = 0usize;
    for rec in records {
        rec.validate()?;
        let prefix = encode_prefix(vocab, &rec.question);
        let mut scores = Vec::with_capacity(rec.choices.len());
        for choice in &rec.choices {
            let toks = vocab.encode(choice);
            scores.push(score_choice(model, &prefix, &toks)?);
        }
        let predicted = num::argmax(&scores);
        let correct = rec.answer_index();
        if predicted == correct {
            hits += 1;
        }
        per_item.push(ItemScore {
            id: rec.id.clone(),
            scores,
            predicted,
            correct,
        });
    }
    Ok(EvalResult {
        dataset: dataset.to_string(),
        accuracy: hits as f64 / records.len() as f64,
        n: records.len(),
        per_item,
    })
}
