//! Score transformer layers by how much they change the hidden state.
//!
//! A layer whose output stays close (in cosine) to its input contributes
//! little and is the first candidate for removal. Influence is measured
//! twice — teacher-forcing the answer and teacher-forcing the rationale —
//! and the two are combined for the pruning decision.

use fedslim::config::ModelShape;
use fedslim::evalkit::{TaskFamily, ToyWorld};
use fedslim::prune::{compute_bi, plan_pruning, BiOptions, BiReport, BiTarget, PruneMetric};
use fedslim::synth::stub_dataset;
use fedslim::train::{retrain_server, TrainConfig};
use fedslim::vocab::Vocab;
use fedslim::{data::SyntheticRecord, model::init_model};

fn main() -> fedslim::Result<()> {
    let world = ToyWorld::new(TaskFamily::KeyValueLookup, 8, 6, 21);
    let vocab = Vocab::new(world.vocab_words());
    let records: Vec<SyntheticRecord> = stub_dataset(&world, 48, 4, 13)
        .into_iter()
        .enumerate()
        .map(|(i, (question, choices, answer))| {
            let rationale = world.rationale_for(&question, &answer);
            SyntheticRecord { id: format!("s{i}"), question, choices, answer, rationale }
        })
        .collect();

    let shape = ModelShape { d_model: 32, n_layers: 4, n_heads: 2, d_ff: 64, max_seq_len: 48 };
    let mut model = init_model::<f32>(shape.to_model_config(vocab.len()), 5)?;

    // Influence on an untrained model is noise; give it a short warm-up.
    let train = TrainConfig { batch_size: 8, learning_rate: 1e-3, max_steps: 60, seed: 5, eval_every: 0, ..Default::default() };
    retrain_server(&mut model, &records, &vocab, &train, true, None)?;

    let options = BiOptions::default();
    let label = compute_bi(&model, &records, &vocab, BiTarget::Label, &options)?;
    let rationale = compute_bi(&model, &records, &vocab, BiTarget::Rationale, &options)?;
    let report = BiReport::new(&model.layer_ids, &label, &rationale)?;

    println!("layer  label    rationale  combined");
    for row in &report.rows {
        println!(
            "{:>5}  {:.5}  {:.5}    {:.5}",
            row.layer_id, row.bi_label, row.bi_rationale, row.bi_combined
        );
    }

    let combined: Vec<f64> = report.rows.iter().map(|r| r.bi_combined).collect();
    let plan = plan_pruning(&combined, &model.layer_ids, 0.5, PruneMetric::Bi)?;
    println!("\npruning half the depth removes layers {:?}", plan.remove);
    Ok(())
}
