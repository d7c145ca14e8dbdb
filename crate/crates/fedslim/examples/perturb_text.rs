//! Token-level differential privacy on toy-task questions.
//!
//! Builds a key→value lookup task, derives an embedding table from a freshly
//! initialized model, and perturbs the private train split at several
//! epsilons. Smaller epsilon means more tokens get replaced.

use fedslim::dp::{compute_sensitivity, EmbeddingTable, PrivacyBudget, SensitivityMode};
use fedslim::evalkit::{make_toy_task, TaskFamily, ToyTaskSpec};
use fedslim::model::init_model;
use fedslim::num::rng_for;

fn main() -> fedslim::Result<()> {
    let spec = ToyTaskSpec {
        family: TaskFamily::KeyValueLookup,
        n_keys: 12,
        n_values: 8,
        choices_per_item: 4,
        seed: 7,
        n_train: 24,
        n_val: 8,
        n_test: 8,
    };
    let task = make_toy_task(&spec)?;
    let vocab = task.vocab();

    let config = fedslim::config::ModelShape::default().to_model_config(vocab.len());
    let model = init_model::<f32>(config, 42)?;
    let table = EmbeddingTable::from_model(&model)?;
    let delta = compute_sensitivity(&table, SensitivityMode::Exact);
    println!("vocab {} tokens, sensitivity {delta:.4}", vocab.len());

    for epsilon in [0.5, 3.0, 10.0] {
        let budget = PrivacyBudget::new(epsilon, delta)?;
        let mut rng = rng_for(1, "perturb-demo");
        let perturbed = fedslim::dp::perturb_dataset(&task.train, &vocab, budget, &table, &mut rng)?;

        // Fraction of tokens that survived perturbation unchanged.
        let mut kept = 0usize;
        let mut total = 0usize;
        for (orig, pert) in task.train.iter().zip(&perturbed) {
            let a = vocab.encode(&orig.question);
            let b = vocab.encode(&pert.perturbed_question);
            assert_eq!(a.len(), b.len(), "perturbation is token-for-token");
            kept += a.iter().zip(&b).filter(|(x, y)| x == y).count();
            total += a.len();
        }
        println!("\nepsilon = {epsilon}");
        println!("  tokens kept: {kept}/{total} ({:.0}%)", 100.0 * kept as f64 / total as f64);
        println!("  original:  {}", task.train[0].question);
        println!("  perturbed: {}", perturbed[0].perturbed_question);
    }
    Ok(())
}
