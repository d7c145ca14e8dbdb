//! Layer pruning by block influence: score how much each block actually
//! changes its hidden states over teacher-forced synthetic sequences, then
//! drop the least influential layers. Includes the sequence-order baseline
//! that always removes the deepest layers.

use crate::data::{encode_pair, SyntheticRecord};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, TransformerModel};
use crate::num::{self, Real};
use crate::vocab::Vocab;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Which continuation is teacher-forced after the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiTarget {
    /// Question ⊕ answer text.
    Label,
    /// Question ⊕ rationale text.
    Rationale,
}

/// Which token rows enter the expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionSet {
    /// Every position of the teacher-forced sequence.
    #[default]
    All,
    /// Only positions at or after the continuation start.
    TargetOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiOptions {
    pub max_question_len: usize,
    pub max_target_len: usize,
    pub positions: PositionSet,
}

impl Default for BiOptions {
    fn default() -> Self {
        BiOptions {
            max_question_len: 64,
            max_target_len: 128,
            positions: PositionSet::All,
        }
    }
}

/// Streaming accumulator for per-layer mean cosines, pooled over every
/// contributing (sample, position) row.
#[derive(Debug, Clone)]
pub struct BiAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
    /// Rows skipped because one side had zero norm.
    pub excluded_rows: u64,
}

impl BiAccumulator {
    pub fn new(n_layers: usize) -> Self {
        BiAccumulator {
            sums: vec![0.0; n_layers],
            counts: vec![0; n_layers],
            excluded_rows: 0,
        }
    }

    pub fn add_trace<R: Real>(&mut self, trace: &ForwardTrace<R>, from_row: usize) -> Result<()> {
        let hidden = trace
            .hidden
            .as_ref()
            .ok_or_else(|| Error::Usage("block influence: trace captured no hidden states".into()))?;
        if hidden.len() != self.sums.len() + 1 {
            return Err(Error::Usage(format!(
                "block influence: trace has {} boundaries, accumulator expects {}",
                hidden.len(),
                self.sums.len() + 1
            )));
        }
        let d = trace.d_model;
        for layer in 0..self.sums.len() {
            let (x_in, x_out) = (&hidden[layer], &hidden[layer + 1]);
            let rows = x_in.len() / d;
            for t in from_row..rows {
                let a = &x_in[t * d..(t + 1) * d];
                let b = &x_out[t * d..(t + 1) * d];
                if num::sumsq(a) == 0.0 || num::sumsq(b) == 0.0 {
                    self.excluded_rows += 1;
                    continue;
                }
                self.sums[layer] += num::cosine(a, b);
                self.counts[layer] += 1;
            }
        }
        Ok(())
    }

    /// BI per layer: 1 − mean cosine. A layer with no valid rows at all is
    /// degenerate.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(layer, (&s, &c))| {
                if c == 0 {
                    Err(Error::Numeric(format!(
                        "block influence: no valid rows at layer index {layer}"
                    )))
                } else {
                    Ok(1.0 - s / c as f64)
                }
            })
            .collect()
    }
}

/// Per-layer block influence of a single captured forward pass.
pub fn layer_cosine_bi<R: Real>(trace: &ForwardTrace<R>) -> Result<(Vec<f64>, u64)> {
    let hidden = trace
        .hidden
        .as_ref()
        .ok_or_else(|| Error::Usage("block influence: trace captured no hidden states".into()))?;
    if hidden.len() < 2 {
        return Err(Error::Usage("block influence: trace has no layers".into()));
    }
    let mut acc = BiAccumulator::new(hidden.len() - 1);
    acc.add_trace(trace, 0)?;
    Ok((acc.finalize()?, acc.excluded_rows))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiStats {
    pub bi: Vec<f64>,
    pub samples: usize,
    pub excluded_rows: u64,
    pub truncated: u64,
}

/// Expected block influence over a dataset, teacher-forcing the chosen
/// continuation after each question.
pub fn compute_bi<R: Real>(
    model: &TransformerModel<R>,
    records: &[SyntheticRecord],
    vocab: &Vocab,
    target: BiTarget,
    options: &BiOptions,
) -> Result<BiStats> {
    if records.is_empty() {
        return Err(Error::Data("block influence: empty dataset".into()));
    }
    let mut acc = BiAccumulator::new(model.n_live_layers());
    let mut truncated = 0u64;
    for rec in records {
        rec.validate()?;
        let text = match target {
            BiTarget::Label => rec.answer.as_str(),
            BiTarget::Rationale => rec.rationale.as_str(),
        };
        let seq = encode_pair(
            vocab,
            &rec.question,
            text,
            options.max_question_len,
            options.max_target_len,
        );
        let mut tokens = seq.tokens.as_slice();
        let mut was_truncated = seq.truncated;
        if tokens.len() > model.config.max_seq_len {
            tokens = &tokens[..model.config.max_seq_len];
            was_truncated = true;
        }
        if was_truncated {
            truncated += 1;
        }
        let from_row = match options.positions {
            PositionSet::All => 0,
            PositionSet::TargetOnly => seq.target_start.min(tokens.len()),
        };
        let trace = forward(model, tokens, true)?;
        acc.add_trace(&trace, from_row)?;
    }
    Ok(BiStats {
        bi: acc.finalize()?,
        samples: records.len(),
        excluded_rows: acc.excluded_rows,
        truncated,
    })
}

/// Element-wise sum of the two influence facets.
pub fn combine_bi(bi_label: &[f64], bi_rationale: &[f64]) -> Result<Vec<f64>> {
    if bi_label.len() != bi_rationale.len() {
        return Err(Error::Usage(format!(
            "block influence: component length mismatch {} vs {}",
            bi_label.len(),
            bi_rationale.len()
        )));
    }
    Ok(bi_label
        .iter()
        .zip(bi_rationale)
        .map(|(&a, &b)| a + b)
        .collect())
}

/// Depth-order baseline: strictly decreasing importance with depth, so the
/// deepest layers are always pruned first.
pub fn seq_importance(n_layers: usize) -> Vec<f64> {
    (0..n_layers).map(|i| (n_layers - i) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMetric {
    Bi,
    Seq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Layer ids to remove, ascending.
    pub remove: Vec<usize>,
    pub ratio: f64,
    pub metric: PruneMetric,
}

/// Select the `round(ratio × L)` lowest-scoring layers. Ties prefer the
/// deeper layer.
pub fn plan_pruning(
    scores: &[f64],
    layer_ids: &[usize],
    ratio: f64,
    metric: PruneMetric,
) -> Result<PruningPlan> {
    if scores.len() != layer_ids.len() {
        return Err(Error::Usage(format!(
            "pruning: {} scores for {} layers",
            scores.len(),
            layer_ids.len()
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Usage(format!("pruning: ratio {ratio} outside [0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("pruning: non-finite influence score".into()));
    }
    let n = scores.len();
    let k = (ratio * n as f64).round() as usize;
    if k >= n {
        return Err(Error::Data(format!(
            "pruning: removing {k} of {n} layers leaves nothing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(b.cmp(&a))
    });
    let mut remove: Vec<usize> = order[..k].iter().map(|&i| layer_ids[i]).collect();
    remove.sort_unstable();
    Ok(PruningPlan { remove, ratio, metric })
}

/// Apply a plan, returning the smaller model.
pub fn prune<R: Real>(model: &TransformerModel<R>, plan: &PruningPlan) -> Result<TransformerModel<R>> {
    crate::model::remove_layers(model, &plan.remove)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiRow {
    pub layer_id: usize,
    pub bi_label: f64,
    pub bi_rationale: f64,
    pub bi_combined: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiReport {
    pub rows: Vec<BiRow>,
    pub sample_count: usize,
    pub target_note: String,
    pub excluded_rows: u64,
    pub truncated_sequences: u64,
}

impl BiReport {
    pub fn new(layer_ids: &[usize], label: &BiStats, rationale: &BiStats) -> Result<Self> {
        if label.bi.len() != layer_ids.len() || rationale.bi.len() != layer_ids.len() {
            return Err(Error::Usage("influence report: length mismatch".into()));
        }
        let combined = combine_bi(&label.bi, &rationale.bi)?;
        let rows = layer_ids
            .iter()
            .zip(label.bi.iter().zip(rationale.bi.iter().zip(&combined)))
            .map(|(&layer_id, (&l, (&r, &c)))| BiRow {
                layer_id,
                bi_label: l,
                bi_rationale: r,
                bi_combined: c,
            })
            .collect();
        Ok(BiReport {
            rows,
            sample_count: label.samples,
            target_note: format!(
                "label = answer text, rationale = explanation text, teacher-forced over {} synthetic records",
                label.samples
            ),
            excluded_rows: label.excluded_rows + rationale.excluded_rows,
            truncated_sequences: label.truncated + rationale.truncated,
        })
    }

    pub fn combined(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bi_combined).collect()
    }

    /// Fixed-width table, one row per layer.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8}  {:>12}  {:>12}  {:>12}", "layer_id", "bi_label", "bi_rationale", "bi_combined");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:>12.6}  {:>12.6}  {:>12.6}",
                r.layer_id, r.bi_label, r.bi_rationale, r.bi_combined
            );
        }
        let _ = writeln!(out, "# samples: {}; {}", self.sample_count, self.target_note);
        if self.excluded_rows > 0 || self.truncated_sequences > 0 {
            let _ = writeln!(
                out,
                "# excluded zero-norm rows: {}; truncated sequences: {}",
                self.excluded_rows, self.truncated_sequences
            );
        }
        out
    }
}
