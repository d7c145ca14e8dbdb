//! The whole pipeline in one process: perturb, synthesize, prune, retrain,
//! fine-tune. Prints the accuracy at every stage. The same configuration
//! run over a socket (see `federated_roundtrip`) produces byte-identical
//! artifacts.

use fedslim::config::PipelineConfig;
use fedslim::evalkit::{TaskFamily, ToyTaskSpec};
use fedslim::pipeline::run_pipeline;
use fedslim::train::TrainConfig;

fn main() -> fedslim::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 41;
    cfg.task = ToyTaskSpec {
        family: TaskFamily::KeyValueLookup,
        n_keys: 6,
        n_values: 5,
        choices_per_item: 3,
        seed: 8,
        n_train: 16,
        n_val: 8,
        n_test: 16,
    };
    cfg.model.d_model = 32;
    cfg.model.n_layers = 4;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 64;
    cfg.model.max_seq_len = 48;
    let quick = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        max_steps: 60,
        seed: 0,
        eval_every: 0,
        ..Default::default()
    };
    cfg.bootstrap.n_records = 64;
    cfg.bootstrap.train = TrainConfig { max_steps: 150, ..quick.clone() };
    cfg.privacy.epsilon = 3.0;
    cfg.synth.ratio = 4;
    cfg.prune.ratio = 0.25;
    cfg.train.server = quick.clone();
    cfg.train.client = TrainConfig { max_steps: 30, ..quick };

    let out = run_pipeline(&cfg, &mut |e| {
        if let Some(note) = e.note {
            println!("[{}] {note}", e.phase);
        }
    })?;

    println!("\nsynthesis: {} accepted / {} attempts", out.server.synth_report.accepted, out.server.synth_report.attempts);
    println!("removed layers: {:?}", out.server.plan.remove);
    println!(
        "parameters: {} -> {}",
        out.setup.dense.param_count(),
        out.server.model.param_count()
    );
    println!("\ndense:          {:.3}", out.dense_accuracy);
    println!("pruned:         {:.3}", out.pruned_accuracy);
    println!("retrained:      {:.3}", out.client.pre_accuracy);
    println!("fine-tuned:     {:.3}", out.client.final_accuracy);
    Ok(())
}
