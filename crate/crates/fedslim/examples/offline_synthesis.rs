//! Generate training data from perturbed questions without network access.
//!
//! The world stub plays the role of a large instruction-following model: it
//! invents related questions, answers them, and writes a short rationale.
//! Generations where the stub's answer disagrees with its own re-answer are
//! rejected, which is demonstrated here with a plan that forces the first
//! two calls to disagree.

use fedslim::data::PerturbedRecord;
use fedslim::evalkit::{TaskFamily, ToyWorld};
use fedslim::synth::{synthesize, DisagreePlan, SynthOptions, WorldStub};

fn main() -> fedslim::Result<()> {
    let world = ToyWorld::new(TaskFamily::KeyValueLookup, 10, 6, 5);
    let perturbed: Vec<PerturbedRecord> = (0..4)
        .map(|i| PerturbedRecord {
            id: format!("client-{i}"),
            perturbed_question: format!("lookup key k{}", i + 1),
        })
        .collect();

    let backend = WorldStub::new(world.clone(), 99).with_choices_per_item(4);
    let options = SynthOptions::new(3);
    let (records, report) = synthesize(&backend, &perturbed, &options)?;

    println!("accepted {} of {} attempts", report.accepted, report.attempts);
    let r = &records[0];
    println!("\nfirst synthetic record:");
    println!("  question:  {}", r.question);
    println!("  choices:   {:?}", r.choices);
    println!("  answer:    {}", r.answer);
    println!("  rationale: {}", r.rationale);

    // Same run, but the stub disagrees with itself on the first two calls.
    let noisy = WorldStub::new(world, 99)
        .with_choices_per_item(4)
        .with_disagreement(DisagreePlan::OnQuestions([0, 1].into_iter().collect()));
    let (_, report) = synthesize(&noisy, &perturbed, &options)?;
    println!(
        "\nwith forced disagreement: accepted {}, rejected {} (of {} attempts)",
        report.accepted, report.rejected_disagreement, report.attempts
    );
    assert!(report.is_consistent());
    Ok(())
}
