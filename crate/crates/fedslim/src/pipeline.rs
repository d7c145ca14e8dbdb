//! End-to-end orchestration.
//!
//! The run decomposes into four phases that the command-line tools, the
//! wire protocol, and the in-process loopback all share:
//!
//!   1. [`bootstrap`] — build the task fixture and train a dense model on
//!      world data (server side);
//!   2. [`perturb_phase`] — replace question tokens under the privacy
//!      budget (client side);
//!   3. [`server_phase`] — synthesize records from the perturbed questions,
//!      score layer influence, prune, and retrain (server side);
//!   4. [`client_phase`] — fine-tune the returned model on private records
//!      and evaluate (client side).
//!
//! Every stochastic step draws its generator from `seed` plus a fixed phase
//! label, so running the phases in one process or across a socket produces
//! byte-identical artifacts from the same configuration.

use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, PipelineConfig};
use crate::data::{PerturbedRecord, PrivateRecord, SyntheticRecord};
use crate::dp::{self, EmbeddingTable, PrivacyBudget};
use crate::error::Result;
use crate::evalkit::{evaluate, make_toy_task, world_eval_set, ToyTask, ToyWorld};
use crate::model::{init_model, TransformerModel};
use crate::num;
use crate::prune::{compute_bi, plan_pruning, prune, seq_importance, BiReport, BiTarget, PruneMetric, PruningPlan};
use crate::synth::{
    synthesize, stub_dataset, DisagreePlan, HttpBackend, LlmBackend, SynthOptions, TemplateSet,
    WorldStub, GenerationReport,
};
use crate::train::{finetune_client, retrain_server_with, TrainConfig, TrainLog};
use crate::vocab::Vocab;

/// One progress tick, suitable for logging or the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub phase: String,
    pub step: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProgressEvent {
    fn done(phase: &str, note: String) -> Self {
        ProgressEvent {
            phase: phase.into(),
            step: 1,
            total: 1,
            loss: None,
            note: Some(note),
        }
    }
}

/// Task fixture plus the dense model trained on it.
pub struct DeskSetup {
    pub task: ToyTask,
    pub vocab: Vocab,
    pub dense: TransformerModel<f32>,
    pub bootstrap_log: TrainLog,
}

/// World samples dressed as synthetic records, with programmatic rationales.
pub fn world_records(world: &ToyWorld, n: usize, choices_per_item: usize, seed: u64) -> Vec<SyntheticRecord> {
    stub_dataset(world, n, choices_per_item, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (question, choices, answer))| {
            let rationale = world.rationale_for(&question, &answer);
            SyntheticRecord {
                id: format!("world-{i}"),
                question,
                choices,
                answer,
                rationale,
            }
        })
        .collect()
}

fn train_config_for(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// Build the task and train the dense model on world data. The evaluation
/// split used during bootstrap is sampled from the world by the server, not
/// taken from the client's data.
pub fn bootstrap(cfg: &PipelineConfig) -> Result<DeskSetup> {
    cfg.validate()?;
    let task = make_toy_task(&cfg.task)?;
    let vocab = task.vocab();
    let model_config = cfg.model.to_model_config(vocab.len());
    let mut dense = init_model::<f32>(model_config, cfg.phase_seed("init"))?;

    let records = world_records(
        &task.world,
        cfg.bootstrap.n_records,
        cfg.task.choices_per_item,
        cfg.phase_seed("bootstrap-data"),
    );
    let eval = world_eval_set(
        &task.world,
        cfg.task.n_val.max(1),
        cfg.task.choices_per_item,
        cfg.phase_seed("bootstrap-val"),
    );
    let train_config = train_config_for(&cfg.bootstrap.train, cfg.phase_seed("bootstrap"));
    let bootstrap_log = crate::train::retrain_server(
        &mut dense,
        &records,
        &vocab,
        &train_config,
        cfg.bootstrap.with_rationale,
        Some(&eval),
    )?;
    Ok(DeskSetup {
        task,
        vocab,
        dense,
        bootstrap_log,
    })
}

/// Client-side perturbation of private questions.
pub fn perturb_phase(
    cfg: &PipelineConfig,
    records: &[PrivateRecord],
    vocab: &Vocab,
    table: &EmbeddingTable,
) -> Result<Vec<PerturbedRecord>> {
    let delta = dp::compute_sensitivity(table, cfg.privacy.sensitivity);
    let budget = PrivacyBudget::new(cfg.privacy.epsilon, delta)?;
    let mut rng = num::rng_for(cfg.seed, "perturb");
    dp::perturb_dataset(records, vocab, budget, table, &mut rng)
}

/// Construct the configured generation backend.
pub fn make_backend(cfg: &PipelineConfig) -> Result<Box<dyn LlmBackend>> {
    match cfg.synth.backend {
        BackendKind::Stub => {
            let world = ToyWorld::new(
                cfg.task.family,
                cfg.task.n_keys,
                cfg.task.n_values,
                cfg.task.seed,
            );
            let mut stub = WorldStub::new(world, cfg.phase_seed("synth"))
                .with_choices_per_item(cfg.synth.stub.choices_per_item);
            if cfg.synth.stub.disagree_first > 0 {
                stub = stub.with_disagreement(DisagreePlan::OnQuestions(
                    (0..cfg.synth.stub.disagree_first).collect(),
                ));
            }
            Ok(Box::new(stub))
        }
        BackendKind::Http => Ok(Box::new(HttpBackend::new(cfg.synth.http.clone())?)),
    }
}

/// Prompt templates from the configured directory, or the built-in set.
pub fn load_templates(cfg: &PipelineConfig) -> Result<TemplateSet> {
    match &cfg.synth.template_dir {
        Some(dir) => TemplateSet::from_dir(dir),
        None => Ok(TemplateSet::default()),
    }
}

pub fn synth_options(cfg: &PipelineConfig) -> Result<SynthOptions> {
    Ok(SynthOptions {
        ratio: cfg.synth.ratio,
        attempt_cap_factor: cfg.synth.attempt_cap_factor,
        templates: load_templates(cfg)?,
    })
}

/// Everything the server produces for one client.
pub struct ServerArtifacts {
    pub synthetic: Vec<SyntheticRecord>,
    pub synth_report: GenerationReport,
    pub bi: BiReport,
    pub plan: PruningPlan,
    /// Pruned-and-retrained model.
    pub model: TransformerModel<f32>,
    pub retrain_log: TrainLog,
}

/// Server side: synthesize → influence → prune → retrain. Emits progress
/// ticks as work completes; the retraining stage ticks at every logged step.
pub fn server_phase(
    cfg: &PipelineConfig,
    dense: &TransformerModel<f32>,
    vocab: &Vocab,
    perturbed: &[PerturbedRecord],
    backend: &dyn LlmBackend,
    progress: &mut dyn FnMut(ProgressEvent),
) -> Result<ServerArtifacts> {
    let options = synth_options(cfg)?;
    let (synthetic, synth_report) = synthesize(backend, perturbed, &options)?;
    progress(ProgressEvent::done(
        "synthesize",
        format!(
            "{} records from {} attempts",
            synth_report.accepted, synth_report.attempts
        ),
    ));

    let bi_options = cfg.prune.bi_options();
    let label = compute_bi(dense, &synthetic, vocab, BiTarget::Label, &bi_options)?;
    let rationale = compute_bi(dense, &synthetic, vocab, BiTarget::Rationale, &bi_options)?;
    let layer_ids: Vec<usize> = (0..dense.config.n_layers).collect();
    let bi = BiReport::new(&layer_ids, &label, &rationale)?;
    progress(ProgressEvent::done(
        "block-influence",
        format!("{} layers scored over {} records", layer_ids.len(), synthetic.len()),
    ));

    let scores = match cfg.prune.metric {
        PruneMetric::Bi => bi.combined(),
        PruneMetric::Seq => seq_importance(dense.config.n_layers),
    };
    let plan = plan_pruning(&scores, &layer_ids, cfg.prune.ratio, cfg.prune.metric)?;
    let mut model = prune(dense, &plan)?;
    progress(ProgressEvent::done(
        "prune",
        format!("removed layers {:?}", plan.remove),
    ));

    let train_config = train_config_for(&cfg.train.server, cfg.phase_seed("retrain"));
    let total = train_config.max_steps;
    let retrain_log = retrain_server_with(
        &mut model,
        &synthetic,
        vocab,
        &train_config,
        cfg.train.with_rationale,
        None,
        |entry| {
            progress(ProgressEvent {
                phase: "retrain".into(),
                step: entry.step,
                total,
                loss: Some(entry.total),
                note: None,
            })
        },
    )?;

    Ok(ServerArtifacts {
        synthetic,
        synth_report,
        bi,
        plan,
        model,
        retrain_log,
    })
}

/// What the client ends up with.
pub struct ClientArtifacts {
    pub model: TransformerModel<f32>,
    /// Test accuracy of the model as received, before fine-tuning.
    pub pre_accuracy: f64,
    /// Test accuracy after fine-tuning on private records.
    pub final_accuracy: f64,
    pub finetune_log: TrainLog,
}

/// Client side: evaluate the received model, fine-tune on private records,
/// evaluate again.
pub fn client_phase(
    cfg: &PipelineConfig,
    mut model: TransformerModel<f32>,
    task: &ToyTask,
    vocab: &Vocab,
) -> Result<ClientArtifacts> {
    let pre_accuracy = evaluate(&model, &task.test, vocab, "test")?.accuracy;
    let train_config = train_config_for(&cfg.train.client, cfg.phase_seed("finetune"));
    let finetune_log = finetune_client(&mut model, &task.train, vocab, &train_config, Some(&task.val))?;
    let final_accuracy = evaluate(&model, &task.test, vocab, "test")?.accuracy;
    Ok(ClientArtifacts {
        model,
        pre_accuracy,
        final_accuracy,
        finetune_log,
    })
}

/// Accuracy bundle plus every intermediate artifact from a loopback run.
pub struct PipelineOutcome {
    pub dense_accuracy: f64,
    /// Pruned model before any retraining — the recovery baseline.
    pub pruned_accuracy: f64,
    pub setup: DeskSetup,
    pub perturbed: Vec<PerturbedRecord>,
    pub server: ServerArtifacts,
    pub client: ClientArtifacts,
}

/// Run all phases in one process. Identical configuration produces the
/// same artifacts a socket run would.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    progress: &mut dyn FnMut(ProgressEvent),
) -> Result<PipelineOutcome> {
    let setup = bootstrap(cfg)?;
    let dense_accuracy = evaluate(&setup.dense, &setup.task.test, &setup.vocab, "test")?.accuracy;

    let table = EmbeddingTable::from_model(&setup.dense)?;
    let perturbed = perturb_phase(cfg, &setup.task.train, &setup.vocab, &table)?;

    let backend = make_backend(cfg)?;
    let server = server_phase(cfg, &setup.dense, &setup.vocab, &perturbed, backend.as_ref(), progress)?;

    let pruned_only = prune(&setup.dense, &server.plan)?;
    let pruned_accuracy = evaluate(&pruned_only, &setup.task.test, &setup.vocab, "test")?.accuracy;

    let client = client_phase(cfg, server.model.clone(), &setup.task, &setup.vocab)?;

    Ok(PipelineOutcome {
        dense_accuracy,
        pruned_accuracy,
        setup,
        perturbed,
        server,
        client,
    })
}

/// Small but complete configuration for fast in-crate tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> PipelineConfig {
    use crate::config::StubConfig;
    use crate::evalkit::{TaskFamily, ToyTaskSpec};

    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.task = ToyTaskSpec {
        family: TaskFamily::KeyValueLookup,
        n_keys: 6,
        n_values: 5,
        choices_per_item: 3,
        seed: 3,
        n_train: 8,
        n_val: 4,
        n_test: 8,
    };
    cfg.model.d_model = 16;
    cfg.model.n_layers = 4;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.max_seq_len = 32;
    cfg.bootstrap.n_records = 16;
    cfg.bootstrap.train.max_steps = 4;
    cfg.bootstrap.train.batch_size = 4;
    cfg.bootstrap.train.eval_every = 0;
    cfg.synth.ratio = 2;
    cfg.synth.stub = StubConfig {
        choices_per_item: 3,
        disagree_first: 0,
    };
    cfg.prune.ratio = 0.25;
    cfg.train.server.max_steps = 4;
    cfg.train.server.batch_size = 4;
    cfg.train.server.eval_every = 0;
    cfg.train.client.max_steps = 4;
    cfg.train.client.batch_size = 4;
    cfg.train.client.eval_every = 0;
    cfg
}
