//! Synthetic data generation: prompt a backend to invent a fresh question
//! per perturbed record, answer it three times, keep it only when all three
//! answers agree, then attach an explanation.

pub mod backend;
pub mod parse;
pub mod template;

pub use backend::{stub_dataset, DisagreePlan, HttpBackend, HttpBackendConfig, LlmBackend, WorldStub};
pub use template::{render_prompt, Template, TemplateKind, TemplateSet};

use crate::data::{PerturbedRecord, SyntheticRecord};
use crate::error::{Error, Result};
use parse::{letter_to_index, parse_answer_letter, parse_question_reply, truncate_rationale};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use template::choices_literal;

pub const QUESTION_TEMPERATURE: f64 = 0.7;
/// Sampling temperature for the agreement votes; nonzero on purpose so a
/// real backend can actually disagree with itself.
pub const ANSWER_TEMPERATURE: f64 = 0.7;
pub const RATIONALE_TEMPERATURE: f64 = 0.0;
pub const CONSISTENCY_SAMPLES: usize = 3;
pub const DEFAULT_ATTEMPT_CAP_FACTOR: usize = 4;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Accepted records per source record.
    pub ratio: usize,
    /// Attempt budget as a multiple of the target count.
    pub attempt_cap_factor: usize,
    pub templates: TemplateSet,
}

impl SynthOptions {
    pub fn new(ratio: usize) -> Self {
        SynthOptions {
            ratio,
            attempt_cap_factor: DEFAULT_ATTEMPT_CAP_FACTOR,
            templates: TemplateSet::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub attempts: usize,
    pub accepted: usize,
    pub rejected_disagreement: usize,
    pub rejected_malformed: usize,
    /// Rationales kept despite a missing "<end>" sentinel.
    pub rationale_missing_sentinel: usize,
}

impl GenerationReport {
    /// Every attempt ends accepted or rejected, exactly once.
    pub fn is_consistent(&self) -> bool {
        self.accepted + self.rejected_disagreement + self.rejected_malformed == self.attempts
    }
}

enum Attempt {
    Accepted { record: SyntheticRecord, missing_sentinel: bool },
    Malformed,
    Disagreed,
}

/// Generate until `ratio × |perturbed|` records are accepted or the attempt
/// budget runs out, cycling through the perturbed records with replacement.
/// A short run is not an error; the report shows the shortfall.
pub fn synthesize(
    backend: &dyn LlmBackend,
    perturbed: &[PerturbedRecord],
    options: &SynthOptions,
) -> Result<(Vec<SyntheticRecord>, GenerationReport)> {
    if perturbed.is_empty() {
        return Err(Error::Data("synthesize: empty perturbed dataset".into()));
    }
    if options.ratio == 0 {
        return Err(Error::Usage("synthesize: ratio must be at least 1".into()));
    }
    if options.attempt_cap_factor == 0 {
        return Err(Error::Usage("synthesize: attempt cap factor must be at least 1".into()));
    }
    let target = options.ratio * perturbed.len();
    let cap = options.attempt_cap_factor * target;
    let mut report = GenerationReport {
        requested: target,
        ..Default::default()
    };
    let mut records = Vec::with_capacity(target);
    let mut per_source_uses = vec![0u64; perturbed.len()];
    let mut call_index = 0u64;

    while report.accepted < target && report.attempts < cap {
        let source_idx = report.attempts % perturbed.len();
        report.attempts += 1;
        let source = &perturbed[source_idx];
        let use_idx = per_source_uses[source_idx];
        per_source_uses[source_idx] += 1;
        match attempt_one(backend, source, use_idx, options, &mut call_index)? {
            Attempt::Accepted { record, missing_sentinel } => {
                if missing_sentinel {
                    report.rationale_missing_sentinel += 1;
                }
                records.push(record);
                report.accepted += 1;
            }
            Attempt::Malformed => report.rejected_malformed += 1,
            Attempt::Disagreed => report.rejected_disagreement += 1,
        }
    }
    debug_assert!(report.is_consistent());
    Ok((records, report))
}

fn attempt_one(
    backend: &dyn LlmBackend,
    source: &PerturbedRecord,
    use_idx: u64,
    options: &SynthOptions,
    call_index: &mut u64,
) -> Result<Attempt> {
    let mut next = || {
        let i = *call_index;
        *call_index += 1;
        i
    };

    // 1. Fresh question, seeded by the perturbed text. The source record
    //    carries no choices, so the given list renders empty.
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("question", source.perturbed_question.clone());
    values.insert("choices", "[]".into());
    let prompt = options.templates.question.render(&values)?;
    let reply = backend.complete(&prompt, QUESTION_TEMPERATURE, next())?;
    let (question, choices) = match parse_question_reply(&reply) {
        Ok(parsed) => parsed,
        Err(_) => return Ok(Attempt::Malformed),
    };
    if choices.len() < 2 || choices.len() > 26 {
        return Ok(Attempt::Malformed);
    }

    // 2. Three answer votes; unanimity or rejection.
    let choices_text = choices_literal(&choices)?;
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("question", question.clone());
    values.insert("choices", choices_text.clone());
    let prompt = options.templates.answer.render(&values)?;
    let mut letters = Vec::with_capacity(CONSISTENCY_SAMPLES);
    for _ in 0..CONSISTENCY_SAMPLES {
        let reply = backend.complete(&prompt, ANSWER_TEMPERATURE, next())?;
        match parse_answer_letter(&reply) {
            Ok(letter) => letters.push(letter),
            Err(_) => return Ok(Attempt::Malformed),
        }
    }
    if letters.iter().any(|&l| l != letters[0]) {
        return Ok(Attempt::Disagreed);
    }
    let answer_idx = letter_to_index(letters[0]);
    if answer_idx >= choices.len() {
        return Ok(Attempt::Malformed);
    }
    let answer = choices[answer_idx].clone();

    // 3. Rationale for the agreed answer.
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("question", question.clone());
    values.insert("choices.text", choices_text);
    values.insert(
        "choices.text[choices.label.index(answerKey)]",
        format!("'{answer}'"),
    );
    let prompt = options.templates.rationale.render(&values)?;
    let reply = backend.complete(&prompt, RATIONALE_TEMPERATURE, next())?;
    let (rationale, had_sentinel) = truncate_rationale(&reply);
    if rationale.is_empty() {
        return Ok(Attempt::Malformed);
    }

    let record = SyntheticRecord {
        id: format!("{}#{}", source.id, use_idx),
        question,
        choices,
        answer,
        rationale,
    };
    record.validate()?;
    Ok(Attempt::Accepted {
        record,
        missing_sentinel: !had_sentinel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_jsonl;
    use crate::evalkit::{TaskFamily, ToyWorld};
    use std::collections::BTreeSet;

    fn perturbed(n: usize) -> Vec<PerturbedRecord> {
        (0..n)
            .map(|i| PerturbedRecord {
                id: format!("p{i}"),
                perturbed_question: format!("noise words {i} about keys"),
            })
            .collect()
    }

    fn stub() -> WorldStub {
        WorldStub::new(ToyWorld::new(TaskFamily::KeyValueLookup, 12, 8, 7), 21)
    }

    #[test]
    fn accepting_stub_hits_the_target_exactly() {
        let sources = perturbed(10);
        let (records, report) = synthesize(&stub(), &sources, &SynthOptions::new(2)).unwrap();
        assert_eq!(records.len(), 20);
        assert_eq!(
            report,
            GenerationReport {
                requested: 20,
                attempts: 20,
                accepted: 20,
                ..Default::default()
            }
        );
        let mut ids = BTreeSet::new();
        for r in &records {
            r.validate().unwrap();
            assert!(ids.insert(r.id.clone()), "dup id {}", r.id);
            let (src, _) = r.id.split_once('#').unwrap();
            assert!(sources.iter().any(|s| s.id == src));
        }
    }

    #[test]
    fn default_ratio_eight_times_the_sources() {
        let (records, report) = synthesize(&stub(), &perturbed(5), &SynthOptions::new(8)).unwrap();
        assert_eq!(records.len(), 40);
        assert!(report.is_consistent());
    }

    #[test]
    fn output_is_byte_identical_across_runs() {
        let sources = perturbed(6);
        let opts = SynthOptions::new(3);
        let (a, _) = synthesize(&stub(), &sources, &opts).unwrap();
        let (b, _) = synthesize(&stub(), &sources, &opts).unwrap();
        assert_eq!(to_jsonl(&a).unwrap(), to_jsonl(&b).unwrap());
    }

    #[test]
    fn always_disagreeing_stub_exhausts_the_cap_empty_handed() {
        let backend = stub().with_disagreement(DisagreePlan::Always);
        let (records, report) = synthesize(&backend, &perturbed(4), &SynthOptions::new(2)).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.attempts, 4 * 8);
        assert_eq!(report.rejected_disagreement, 32);
        assert_eq!(report.accepted, 0);
        assert!(report.is_consistent());
    }

    #[test]
    fn disagreement_on_k_questions_costs_exactly_k_records() {
        let marked: BTreeSet<u64> = [1u64, 4].into_iter().collect();
        let backend = stub().with_disagreement(DisagreePlan::OnQuestions(marked));
        let mut opts = SynthOptions::new(1);
        opts.attempt_cap_factor = 1; // one attempt per source, no refill
        let (records, report) = synthesize(&backend, &perturbed(6), &opts).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(report.attempts, 6);
        assert_eq!(report.rejected_disagreement, 2);
        assert_eq!(report.rejected_malformed, 0);
        assert!(report.is_consistent());
    }

    struct Garbage;
    impl LlmBackend for Garbage {
        fn complete(&self, _p: &str, _t: f64, _ci: u64) -> crate::Result<String> {
            Ok("free-form nonsense with no structure".into())
        }
        fn describe(&self) -> String {
            "garbage".into()
        }
    }

    #[test]
    fn malformed_replies_are_counted_not_fatal() {
        let (records, report) = synthesize(&Garbage, &perturbed(3), &SynthOptions::new(1)).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.rejected_malformed, report.attempts);
        assert_eq!(report.attempts, 12);
    }

    struct Broken;
    impl LlmBackend for Broken {
        fn complete(&self, _p: &str, _t: f64, _ci: u64) -> crate::Result<String> {
            Err(Error::Backend("boom".into()))
        }
        fn describe(&self) -> String {
            "broken".into()
        }
    }

    #[test]
    fn transport_failures_abort_the_run() {
        let err = synthesize(&Broken, &perturbed(2), &SynthOptions::new(1)).unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
    }

    #[test]
    fn degenerate_inputs_are_usage_or_data_errors() {
        assert!(matches!(
            synthesize(&stub(), &[], &SynthOptions::new(1)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            synthesize(&stub(), &perturbed(1), &SynthOptions::new(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn answers_teach_the_stubs_world() {
        // Every accepted record must agree with the world's ground truth —
        // this is what makes the synthetic set learnable.
        let world = ToyWorld::new(TaskFamily::KeyValueLookup, 12, 8, 7);
        let (records, _) = synthesize(&stub(), &perturbed(8), &SynthOptions::new(2)).unwrap();
        for r in &records {
            assert_eq!(world.answer_for(&r.question).as_deref(), Some(r.answer.as_str()));
            assert!(!r.rationale.contains("<end>"));
        }
    }
}
