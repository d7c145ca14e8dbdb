//! Remove low-influence layers, then distill the accuracy back.
//!
//! Trains a small dense model, drops half of its depth by influence score,
//! and retrains the survivor on synthetic records with both the answer and
//! rationale objectives. Accuracy is reported at each stage. Takes around
//! fifteen seconds.

use fedslim::config::PipelineConfig;
use fedslim::evalkit::{evaluate, TaskFamily, ToyTaskSpec};
use fedslim::pipeline::{bootstrap, world_records};
use fedslim::prune::{compute_bi, plan_pruning, prune, BiOptions, BiReport, BiTarget, PruneMetric};
use fedslim::train::{retrain_server, TrainConfig};

fn main() -> fedslim::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 17;
    cfg.task = ToyTaskSpec {
        family: TaskFamily::KeyValueLookup,
        n_keys: 8,
        n_values: 5,
        choices_per_item: 3,
        seed: 2,
        n_train: 24,
        n_val: 12,
        n_test: 24,
    };
    cfg.model.d_model = 32;
    cfg.model.n_layers = 4;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 64;
    cfg.model.max_seq_len = 48;
    cfg.bootstrap.n_records = 128;
    cfg.bootstrap.train = TrainConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        max_steps: 150,
        seed: 0,
        eval_every: 0,
        ..Default::default()
    };

    println!("training the dense model ({} layers)...", cfg.model.n_layers);
    let setup = bootstrap(&cfg)?;
    let dense_acc = evaluate(&setup.dense, &setup.task.test, &setup.vocab, "test")?.accuracy;

    let synthetic = world_records(&setup.task.world, 128, 3, 23);
    let options = BiOptions::default();
    let label = compute_bi(&setup.dense, &synthetic, &setup.vocab, BiTarget::Label, &options)?;
    let rationale = compute_bi(&setup.dense, &synthetic, &setup.vocab, BiTarget::Rationale, &options)?;
    let report = BiReport::new(&setup.dense.layer_ids, &label, &rationale)?;
    let combined: Vec<f64> = report.rows.iter().map(|r| r.bi_combined).collect();

    let plan = plan_pruning(&combined, &setup.dense.layer_ids, 0.5, PruneMetric::Bi)?;
    let mut small = prune(&setup.dense, &plan)?;
    let pruned_acc = evaluate(&small, &setup.task.test, &setup.vocab, "test")?.accuracy;

    println!("retraining the pruned model...");
    let retrain = TrainConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        max_steps: 120,
        seed: 1,
        eval_every: 0,
        ..Default::default()
    };
    retrain_server(&mut small, &synthetic, &setup.vocab, &retrain, true, None)?;
    let recovered_acc = evaluate(&small, &setup.task.test, &setup.vocab, "test")?.accuracy;

    println!("\nremoved layers {:?}", plan.remove);
    println!(
        "parameters: {} -> {}",
        setup.dense.param_count(),
        small.param_count()
    );
    println!("dense accuracy:     {dense_acc:.3}");
    println!("pruned, no retrain: {pruned_acc:.3}");
    println!("after distillation: {recovered_acc:.3}");
    Ok(())
}
