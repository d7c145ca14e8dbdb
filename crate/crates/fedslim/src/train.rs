//! Two-stage recovery training: multi-task distillation on synthetic data
//! (answer and rationale streams, equally weighted) and label-only
//! fine-tuning on private data. Both run the same deterministic loop —
//! shuffled epochs, whole-batch gradient accumulation, one AdamW step per
//! batch.

use crate::data::{encode_pair, PrivateRecord, SyntheticRecord};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::model::{seq_loss_and_grads, AdamW, GradBuf, OptState, TransformerModel};
use crate::num::{self, Real};
use crate::vocab::Vocab;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Log (and evaluate, when an eval set is given) every this many steps;
    /// 0 logs only the final step.
    pub eval_every: usize,
    pub max_question_len: usize,
    pub max_target_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-5,
            max_steps: 300,
            seed: 0,
            eval_every: 50,
            max_question_len: 64,
            max_target_len: 128,
        }
    }
}

impl TrainConfig {
    /// `max_steps` of zero is allowed and makes training a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("train: batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Usage(format!(
                "train: learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.max_question_len == 0 || self.max_target_len == 0 {
            return Err(Error::Usage("train: length limits must be at least 1".into()));
        }
        Ok(())
    }
}

/// One teacher-forced sequence; the loss covers positions from
/// `target_start` on.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

impl TaskExample {
    pub fn masked_positions(&self) -> usize {
        self.tokens.len() - self.target_start
    }
}

/// Encode question ⊕ target under the configured limits, clipped to the
/// model's window. Rejects sequences whose target is clipped away entirely.
pub fn make_task_example(
    vocab: &Vocab,
    question: &str,
    target: &str,
    config: &TrainConfig,
    max_seq_len: usize,
) -> Result<TaskExample> {
    let seq = encode_pair(
        vocab,
        question,
        target,
        config.max_question_len,
        config.max_target_len,
    );
    let mut tokens = seq.tokens;
    if tokens.len() > max_seq_len {
        tokens.truncate(max_seq_len);
    }
    if seq.target_start >= tokens.len() {
        return Err(Error::Data(format!(
            "train: question {question:?} fills the whole window; no room for target tokens"
        )));
    }
    Ok(TaskExample {
        tokens,
        target_start: seq.target_start,
    })
}

/// The two task streams of one optimizer step. An empty rationale stream
/// means the rationale task is disabled, not that the batch is malformed.
#[derive(Debug, Clone, Default)]
pub struct MultiTaskBatch {
    pub label: Vec<TaskExample>,
    pub rationale: Vec<TaskExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub label: f64,
    pub rationale: f64,
}

/// Mean masked cross-entropy per stream; total = label + rationale. The
/// returned gradients are for the total.
pub fn multitask_loss<R: Real>(
    model: &TransformerModel<R>,
    batch: &MultiTaskBatch,
    grads: &mut GradBuf,
) -> Result<LossBreakdown> {
    if batch.label.is_empty() {
        return Err(Error::Usage("train: batch has no label examples".into()));
    }
    let label = stream_loss(model, &batch.label, grads)?;
    let rationale = if batch.rationale.is_empty() {
        0.0
    } else {
        stream_loss(model, &batch.rationale, grads)?
    };
    Ok(LossBreakdown {
        total: label + rationale,
        label,
        rationale,
    })
}

/// Pooled mean masked cross-entropy of one stream, accumulating gradients.
fn stream_loss<R: Real>(
    model: &TransformerModel<R>,
    examples: &[TaskExample],
    grads: &mut GradBuf,
) -> Result<f64> {
    let total_masked: usize = examples.iter().map(|e| e.masked_positions()).sum();
    if total_masked == 0 {
        return Err(Error::Usage("train: stream has no target positions".into()));
    }
    let scale = 1.0 / total_masked as f64;
    let mut sum_ce = 0.0;
    for ex in examples {
        let n = ex.tokens.len();
        let inputs = &ex.tokens[..n - 1];
        let targets = &ex.tokens[1..];
        let mask: Vec<bool> = (1..n).map(|p| p >= ex.target_start).collect();
        let (ce, _) = seq_loss_and_grads(model, inputs, targets, &mask, scale, grads)?;
        sum_ce += ce;
    }
    Ok(sum_ce * scale)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub total: f64,
    pub label: f64,
    pub rationale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

pub type TrainLog = Vec<LogEntry>;

struct Pools {
    /// Aligned by record: rationale[i] (when present) explains label[i].
    label: Vec<TaskExample>,
    rationale: Option<Vec<TaskExample>>,
}

/// Shuffled-epoch batch loop shared by both training stages.
fn train_loop<R: Real>(
    model: &mut TransformerModel<R>,
    pools: &Pools,
    config: &TrainConfig,
    eval_set: Option<&[PrivateRecord]>,
    vocab: &Vocab,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<TrainLog> {
    config.validate()?;
    if pools.label.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    let n = pools.label.len();
    let optimizer = AdamW::with_lr(config.learning_rate);
    let mut state = OptState::new(model);
    let mut grads = GradBuf::zeros_like(model);
    let mut log = TrainLog::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force a shuffle before the first batch
    let mut epoch = 0u64;

    for step in 1..=config.max_steps {
        let mut batch = MultiTaskBatch::default();
        for _ in 0..config.batch_size {
            if cursor >= n {
                let mut rng = num::rng_for(config.seed, &format!("train-epoch-{epoch}"));
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            let idx = order[cursor];
            cursor += 1;
            batch.label.push(pools.label[idx].clone());
            if let Some(rat) = &pools.rationale {
                batch.rationale.push(rat[idx].clone());
            }
        }
        grads.zero();
        let loss = multitask_loss(model, &batch, &mut grads)?;
        optimizer.step(model, &grads, &mut state)?;

        let last = step == config.max_steps;
        if last || (config.eval_every > 0 && step % config.eval_every == 0) {
            let eval_accuracy = match eval_set {
                Some(records) => Some(evaluate(model, records, vocab, "eval")?.accuracy),
                None => None,
            };
            let entry = LogEntry {
                step,
                total: loss.total,
                label: loss.label,
                rationale: loss.rationale,
                eval_accuracy,
            };
            on_log(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

/// Server-side distillation over synthetic records: answer and rationale
/// streams interleaved one-to-one (each batch record contributes both),
/// or answer-only when `with_rationale` is off.
pub fn retrain_server<R: Real>(
    model: &mut TransformerModel<R>,
    records: &[SyntheticRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    with_rationale: bool,
    eval_set: Option<&[PrivateRecord]>,
) -> Result<TrainLog> {
    retrain_server_with(model, records, vocab, config, with_rationale, eval_set, |_| {})
}

/// [`retrain_server`] with a callback invoked at every logged step, for
/// progress reporting while the loop runs.
pub fn retrain_server_with<R: Real>(
    model: &mut TransformerModel<R>,
    records: &[SyntheticRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    with_rationale: bool,
    eval_set: Option<&[PrivateRecord]>,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainLog> {
    if records.is_empty() {
        return Err(Error::Data("train: empty synthetic dataset".into()));
    }
    let max_seq = model.config.max_seq_len;
    let mut label = Vec::with_capacity(records.len());
    let mut rationale = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        label.push(make_task_example(vocab, &rec.question, &rec.answer, config, max_seq)?);
        if with_rationale {
            rationale.push(make_task_example(vocab, &rec.question, &rec.rationale, config, max_seq)?);
        }
    }
    let pools = Pools {
        label,
        rationale: with_rationale.then_some(rationale),
    };
    train_loop(model, &pools, config, eval_set, vocab, &mut on_log)
}

/// Client-side fine-tuning on private records: label objective only.
pub fn finetune_client<R: Real>(
    model: &mut TransformerModel<R>,
    records: &[PrivateRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    eval_set: Option<&[PrivateRecord]>,
) -> Result<TrainLog> {
    finetune_client_with(model, records, vocab, config, eval_set, |_| {})
}

/// [`finetune_client`] with a per-logged-step callback.
pub fn finetune_client_with<R: Real>(
    model: &mut TransformerModel<R>,
    records: &[PrivateRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    eval_set: Option<&[PrivateRecord]>,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainLog> {
    if records.is_empty() {
        return Err(Error::Data("train: empty private dataset".into()));
    }
    let max_seq = model.config.max_seq_len;
    let mut label = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        label.push(make_task_example(vocab, &rec.question, &rec.answer, config, max_seq)?);
    }
    let pools = Pools {
        label,
        rationale: None,
    };
    train_loop(model, &pools, config, eval_set, vocab, &mut on_log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{make_toy_task, ToyTask, ToyTaskSpec};
    use crate::model::{checkpoint_bytes, init_model, ModelConfig};

    fn fixture() -> (ToyTask, Vocab, Vec<SyntheticRecord>) {
        let task = make_toy_task(&ToyTaskSpec {
            n_train: 24,
            n_val: 8,
            seed: 19,
            ..Default::default()
        })
        .unwrap();
        let vocab = task.vocab();
        let synthetic: Vec<SyntheticRecord> = task
            .train
            .iter()
            .map(|r| SyntheticRecord {
                id: format!("{}#0", r.id),
                question: r.question.clone(),
                choices: r.choices.clone(),
                answer: r.answer.clone(),
                rationale: task.world.rationale_for(&r.question, &r.answer),
            })
            .collect();
        (task, vocab, synthetic)
    }

    fn small_model(vocab: &Vocab, seed: u64) -> TransformerModel<f32> {
        init_model(
            ModelConfig {
                vocab_size: vocab.len(),
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 48,
            },
            seed,
        )
        .unwrap()
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 3e-3,
            max_steps: steps,
            seed: 7,
            eval_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(TrainConfig::default().validate().is_ok());
        for steps in [300, 6400] {
            let cfg = TrainConfig { max_steps: steps, ..Default::default() };
            assert!(cfg.validate().is_ok());
        }
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_target_len: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn total_is_exactly_label_plus_rationale() {
        let (_, vocab, synthetic) = fixture();
        let model = small_model(&vocab, 1);
        let cfg = quick_config(1);
        let batch = MultiTaskBatch {
            label: synthetic[..3]
                .iter()
                .map(|r| make_task_example(&vocab, &r.question, &r.answer, &cfg, 48).unwrap())
                .collect(),
            rationale: synthetic[..3]
                .iter()
                .map(|r| make_task_example(&vocab, &r.question, &r.rationale, &cfg, 48).unwrap())
                .collect(),
        };
        let mut grads = GradBuf::zeros_like(&model);
        let loss = multitask_loss(&model, &batch, &mut grads).unwrap();
        assert_eq!(loss.total, loss.label + loss.rationale);
        assert!(loss.label > 0.0 && loss.rationale > 0.0);
    }

    #[test]
    fn disabled_rationale_stream_collapses_to_label_loss() {
        let (_, vocab, synthetic) = fixture();
        let model = small_model(&vocab, 1);
        let cfg = quick_config(1);
        let label: Vec<TaskExample> = synthetic[..4]
            .iter()
            .map(|r| make_task_example(&vocab, &r.question, &r.answer, &cfg, 48).unwrap())
            .collect();
        let batch = MultiTaskBatch { label, rationale: vec![] };
        let mut grads = GradBuf::zeros_like(&model);
        let loss = multitask_loss(&model, &batch, &mut grads).unwrap();
        assert_eq!(loss.total, loss.label);
        assert_eq!(loss.rationale, 0.0);
    }

    #[test]
    fn symmetric_streams_give_equal_terms() {
        let (_, vocab, synthetic) = fixture();
        let model = small_model(&vocab, 1);
        let cfg = quick_config(1);
        let examples: Vec<TaskExample> = synthetic[..3]
            .iter()
            .map(|r| make_task_example(&vocab, &r.question, &r.answer, &cfg, 48).unwrap())
            .collect();
        let batch = MultiTaskBatch {
            label: examples.clone(),
            rationale: examples,
        };
        let mut grads = GradBuf::zeros_like(&model);
        let loss = multitask_loss(&model, &batch, &mut grads).unwrap();
        assert_eq!(loss.label, loss.rationale);
    }

    #[test]
    fn empty_label_stream_is_an_error() {
        let (_, vocab, _) = fixture();
        let model = small_model(&vocab, 1);
        let mut grads = GradBuf::zeros_like(&model);
        assert!(multitask_loss(&model, &MultiTaskBatch::default(), &mut grads).is_err());
    }

    #[test]
    fn loss_ignores_labels_at_masked_positions() {
        let (_, vocab, synthetic) = fixture();
        let model = small_model(&vocab, 1).cast::<f64>();
        let cfg = quick_config(1);
        let ex = make_task_example(&vocab, &synthetic[0].question, &synthetic[0].answer, &cfg, 48).unwrap();
        let n = ex.tokens.len();
        let inputs = &ex.tokens[..n - 1];
        let targets: Vec<u32> = ex.tokens[1..].to_vec();
        let mask: Vec<bool> = (1..n).map(|p| p >= ex.target_start).collect();
        let mut scrambled = targets.clone();
        for (j, t) in scrambled.iter_mut().enumerate() {
            if !mask[j] {
                *t = (*t + 1) % vocab.len() as u32;
            }
        }
        let mut g1 = GradBuf::zeros_like(&model);
        let mut g2 = GradBuf::zeros_like(&model);
        let (l1, _) = seq_loss_and_grads(&model, inputs, &targets, &mask, 1.0, &mut g1).unwrap();
        let (l2, _) = seq_loss_and_grads(&model, inputs, &scrambled, &mask, 1.0, &mut g2).unwrap();
        assert_eq!(l1, l2);
        let names: Vec<String> = g1.names().map(|s| s.to_string()).collect();
        for name in names {
            assert_eq!(g1.get(&name), g2.get(&name), "{name}");
        }
    }

    /// Central finite differences against the multi-task gradient on an
    /// all-f64 model.
    #[test]
    fn multitask_gradient_matches_finite_differences() {
        let (_, vocab, synthetic) = fixture();
        let model = small_model(&vocab, 5).cast::<f64>();
        let cfg = quick_config(1);
        let batch = MultiTaskBatch {
            label: synthetic[..2]
                .iter()
                .map(|r| make_task_example(&vocab, &r.question, &r.answer, &cfg, 48).unwrap())
                .collect(),
            rationale: synthetic[..2]
                .iter()
                .map(|r| make_task_example(&vocab, &r.question, &r.rationale, &cfg, 48).unwrap())
                .collect(),
        };
        let mut grads = GradBuf::zeros_like(&model);
        let loss = multitask_loss(&model, &batch, &mut grads).unwrap();
        assert!(loss.total.is_finite());

        let h = 1e-4;
        for name in ["layers.0.wq", "layers.1.w2", "tok_emb", "ln_f.g"] {
            let len = model.param(name).unwrap().data.len();
            for &i in &[0usize, len / 2, len - 1] {
                let mut probe = model.clone();
                let eval = |m: &TransformerModel<f64>| -> f64 {
                    let mut g = GradBuf::zeros_like(m);
                    multitask_loss(m, &batch, &mut g).unwrap().total
                };
                probe.param_mut(name).unwrap().data[i] += h;
                let hi = eval(&probe);
                probe.param_mut(name).unwrap().data[i] -= 2.0 * h;
                let lo = eval(&probe);
                let fd = (hi - lo) / (2.0 * h);
                let analytic = grads.get(name).unwrap()[i];
                let denom = analytic.abs().max(fd.abs()).max(1e-12);
                let rel = (analytic - fd).abs() / denom;
                assert!(
                    rel <= 1e-4 || (analytic - fd).abs() <= 1e-7,
                    "{name}[{i}]: analytic {analytic} vs fd {fd} (rel {rel:.3e})"
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (task, vocab, synthetic) = fixture();
        let cfg = quick_config(30);
        let run = || {
            let mut model = small_model(&vocab, 3);
            let log = retrain_server(&mut model, &synthetic, &vocab, &cfg, true, Some(&task.val)).unwrap();
            (checkpoint_bytes(&model, None, Default::default()).unwrap(), log)
        };
        let (bytes_a, log_a) = run();
        let (bytes_b, log_b) = run();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(
            serde_json::to_string(&log_a).unwrap(),
            serde_json::to_string(&log_b).unwrap()
        );
        let final_entry = log_a.last().unwrap();
        assert_eq!(final_entry.step, 30);
        assert!(final_entry.eval_accuracy.is_some());

        // Early loss vs late loss on a longer eval cadence.
        let cfg_logged = TrainConfig { eval_every: 1, ..quick_config(30) };
        let mut model = small_model(&vocab, 3);
        let log = retrain_server(&mut model, &synthetic, &vocab, &cfg_logged, true, None).unwrap();
        assert_eq!(log.len(), 30);
        for e in &log {
            assert!((e.total - (e.label + e.rationale)).abs() < 1e-6);
        }
        assert!(log.last().unwrap().total < log[0].total, "no learning happened");
    }

    #[test]
    fn finetune_matches_rationale_disabled_retraining() {
        let (task, vocab, _) = fixture();
        let cfg = quick_config(5);
        // Same records dressed as synthetic (rationale ignored by both paths).
        let as_synth: Vec<SyntheticRecord> = task
            .train
            .iter()
            .map(|r| SyntheticRecord {
                id: format!("{}#0", r.id),
                question: r.question.clone(),
                choices: r.choices.clone(),
                answer: r.answer.clone(),
                rationale: "x".into(),
            })
            .collect();
        let mut a = small_model(&vocab, 11);
        let log_a = retrain_server(&mut a, &as_synth, &vocab, &cfg, false, None).unwrap();
        let mut b = small_model(&vocab, 11);
        let log_b = finetune_client(&mut b, &task.train, &vocab, &cfg, None).unwrap();
        assert_eq!(
            checkpoint_bytes(&a, None, Default::default()).unwrap(),
            checkpoint_bytes(&b, None, Default::default()).unwrap()
        );
        for (ea, eb) in log_a.iter().zip(&log_b) {
            assert_eq!(ea.total, eb.total);
            assert_eq!(ea.rationale, 0.0);
        }
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let (task, vocab, _) = fixture();
        let mut model = small_model(&vocab, 2);
        let before = checkpoint_bytes(&model, None, Default::default()).unwrap();
        let log = finetune_client(&mut model, &task.train, &vocab, &quick_config(0), None).unwrap();
        assert!(log.is_empty());
        assert_eq!(before, checkpoint_bytes(&model, None, Default::default()).unwrap());
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let (_, vocab, _) = fixture();
        let mut model = small_model(&vocab, 2);
        assert!(retrain_server(&mut model, &[], &vocab, &quick_config(1), true, None).is_err());
        assert!(finetune_client(&mut model, &[], &vocab, &quick_config(1), None).is_err());
    }
}
