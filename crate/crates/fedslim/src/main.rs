//! Command-line front end. All real work lives in the library; this file
//! resolves configuration (flag > environment > file > default), moves
//! artifacts between disk and the phase functions, and maps failures onto
//! stable exit codes: 1 usage, 2 data, 3 transport, 4 numeric.

use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedslim::config::{BackendKind, Overrides, PipelineConfig};
use fedslim::data::{load_private, load_synthetic, read_jsonl, write_jsonl, PerturbedRecord};
use fedslim::dp::{EmbeddingSource, EmbeddingTable};
use fedslim::error::{Error, ErrorLine, Result};
use fedslim::evalkit::{evaluate, make_toy_task, ToyTask};
use fedslim::model::{
    load_checkpoint, load_embedding, save_checkpoint, save_embedding, CheckpointExtra,
    TransformerModel,
};
use fedslim::pipeline::{
    bootstrap, make_backend, perturb_phase, run_pipeline, synth_options, ProgressEvent,
};
use fedslim::proto::{run_client, serve, ServeOptions};
use fedslim::prune::{
    compute_bi, plan_pruning, prune, seq_importance, BiReport, BiTarget, PruneMetric,
};
use fedslim::train::{finetune_client, retrain_server, TrainConfig};
use fedslim::vocab::Vocab;

const F_PERTURBED: &str = "perturbed.jsonl";
const F_SYNTHETIC: &str = "synthetic.jsonl";
const F_SYNTH_REPORT: &str = "synth_report.json";
const F_BI_JSON: &str = "bi_report.json";
const F_BI_TEXT: &str = "bi_report.txt";
const F_DENSE: &str = "dense.ckpt";
const F_EMBEDDING: &str = "embedding.ckpt";
const F_PRUNED: &str = "pruned.ckpt";
const F_RETRAINED: &str = "retrained.ckpt";
const F_FINAL: &str = "final.ckpt";
const F_RETRAIN_LOG: &str = "retrain_log.jsonl";
const F_FINETUNE_LOG: &str = "finetune_log.jsonl";
const F_PROGRESS: &str = "progress.jsonl";
const F_METRICS: &str = "metrics.json";

#[derive(Parser)]
#[command(
    name = "fedslim",
    version,
    about = "Federated compression of small decoder-only language models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; overrides file and environment.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; overrides file and environment.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, mut extra: Overrides) -> Result<PipelineConfig> {
        extra.seed = self.seed.or(extra.seed);
        extra.output_dir = self.out_dir.clone().or(extra.output_dir.take());
        PipelineConfig::resolve(self.config.as_deref(), &extra)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Replace private question tokens under the privacy budget
    Perturb(PerturbArgs),
    /// Generate annotated records from perturbed questions
    Synth(SynthArgs),
    /// Score per-layer influence of a model over a dataset
    Bi(BiArgs),
    /// Remove the lowest-scoring layers from a checkpoint
    Prune(PruneArgs),
    /// Retrain a pruned model on annotated records (recovery stage)
    Distill(DistillArgs),
    /// Fine-tune a model on labelled records (data-owner stage)
    Finetune(FinetuneArgs),
    /// Multiple-choice accuracy of a checkpoint
    Eval(EvalArgs),
    /// Run the compression service
    Serve(ServeArgs),
    /// Run the data-owner side against a service
    Client(ClientArgs),
    /// Run every phase in one process
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    common: Common,
    /// Privacy budget per question.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Labelled records (JSONL); defaults to the task's train split.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Embedding table checkpoint for the utility function.
    #[arg(long, value_name = "FILE")]
    embedding: Option<PathBuf>,
    /// Model checkpoint supplying the embedding when no table is given.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Output path; defaults to <out_dir>/perturbed.jsonl.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Records to generate per input record.
    #[arg(long)]
    ratio: Option<usize>,
    /// Generation backend: stub or http.
    #[arg(long)]
    backend: Option<String>,
    /// Perturbed records (JSONL); defaults to <out_dir>/perturbed.jsonl.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Output path; defaults to <out_dir>/synthetic.jsonl.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BiArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint to score; defaults to paths.model or a bootstrap.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Annotated records (JSONL); defaults to <out_dir>/synthetic.jsonl.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Report path; defaults to <out_dir>/bi_report.json (plus .txt).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint to shrink.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Fraction of layers to remove.
    #[arg(long)]
    ratio: Option<f64>,
    /// Layer scoring: bi (influence report) or seq (depth order).
    #[arg(long)]
    metric: Option<String>,
    /// Influence report for metric=bi; defaults to <out_dir>/bi_report.json.
    #[arg(long, value_name = "FILE")]
    bi: Option<PathBuf>,
    /// Output path; defaults to <out_dir>/pruned.ckpt.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    /// Pruned checkpoint; defaults to <out_dir>/pruned.ckpt.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Annotated records (JSONL); defaults to <out_dir>/synthetic.jsonl.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Training steps; overrides train.server.max_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output path; defaults to <out_dir>/retrained.ckpt.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to fine-tune; defaults to <out_dir>/retrained.ckpt.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Labelled records (JSONL); defaults to the task's train split.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Training steps; overrides train.client.max_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output path; defaults to <out_dir>/final.ckpt.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to <out_dir>/final.ckpt.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Labelled records (JSONL); defaults to the task's test split.
    #[arg(long, value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Metrics path; defaults to <out_dir>/metrics.json.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    /// Stop after this many sessions (default: serve forever).
    #[arg(long)]
    max_sessions: Option<u64>,
}

#[derive(Args)]
struct ClientArgs {
    #[command(flatten)]
    common: Common,
    /// Service address.
    #[arg(long)]
    addr: String,
    /// Embedding table checkpoint for local perturbation.
    #[arg(long, value_name = "FILE")]
    embedding: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Privacy budget per question.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Synthetic records per private record.
    #[arg(long)]
    synth_ratio: Option<usize>,
    /// Fraction of layers to remove.
    #[arg(long)]
    prune_ratio: Option<f64>,
    /// Generation backend: stub or http.
    #[arg(long)]
    backend: Option<String>,
}

fn parse_backend(s: &str) -> Result<BackendKind> {
    match s {
        "stub" => Ok(BackendKind::Stub),
        "http" => Ok(BackendKind::Http),
        other => Err(Error::Usage(format!("--backend: expected stub or http, got {other:?}"))),
    }
}

fn parse_metric(s: &str) -> Result<PruneMetric> {
    match s {
        "bi" => Ok(PruneMetric::Bi),
        "seq" => Ok(PruneMetric::Seq),
        other => Err(Error::Usage(format!("--metric: expected bi or seq, got {other:?}"))),
    }
}

// ---------------------------------------------------------------- plumbing

fn ensure_out_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.output_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", cfg.paths.output_dir.display())))
}

fn out_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

/// Sidecar recording what produced an artifact: subcommand, seed, and the
/// fully resolved configuration. No timestamps — artifacts stay
/// byte-reproducible.
fn write_sidecar(artifact: &Path, produced_by: &str, cfg: &PipelineConfig) -> Result<()> {
    let meta = json!({
        "produced_by": produced_by,
        "seed": cfg.seed,
        "config": cfg,
    });
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    let path = artifact.with_file_name(name);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// The model a subcommand operates on: an explicit checkpoint, the
/// configured one, or a freshly bootstrapped dense model.
fn load_model(
    cfg: &PipelineConfig,
    explicit: Option<&PathBuf>,
    default_name: Option<&str>,
) -> Result<(TransformerModel<f32>, Vocab)> {
    let path = explicit
        .cloned()
        .or_else(|| cfg.paths.model.clone())
        .or_else(|| default_name.map(|n| out_path(cfg, n)));
    match path {
        Some(p) if p.exists() => {
            let (model, vocab, _) = load_checkpoint(&p)?;
            let vocab = vocab.ok_or_else(|| {
                Error::Data(format!("{}: checkpoint carries no vocabulary", p.display()))
            })?;
            Ok((model, vocab))
        }
        Some(p) if explicit.is_some() || cfg.paths.model.is_some() => {
            Err(Error::Data(format!("{}: no such checkpoint", p.display())))
        }
        _ => {
            let setup = bootstrap(cfg)?;
            Ok((setup.dense, setup.vocab))
        }
    }
}

/// Labelled records from a flag, the configured path, or the task fixture.
/// Returns the task when it was the source, so callers can reuse its splits.
fn load_records(
    cfg: &PipelineConfig,
    explicit: Option<&PathBuf>,
    split: fn(&ToyTask) -> &Vec<fedslim::data::PrivateRecord>,
) -> Result<(Vec<fedslim::data::PrivateRecord>, Option<ToyTask>)> {
    let path = explicit.cloned().or_else(|| cfg.paths.private_data.clone());
    match path {
        Some(p) => Ok((load_private(&p)?, None)),
        None => {
            let task = make_toy_task(&cfg.task)?;
            Ok((split(&task).clone(), Some(task)))
        }
    }
}

/// Embedding table from a file, a model checkpoint, or a bootstrap.
fn load_table(
    cfg: &PipelineConfig,
    embedding: Option<&PathBuf>,
    model: Option<&PathBuf>,
) -> Result<(EmbeddingTable, Option<Vocab>)> {
    let emb_path = embedding.cloned().or_else(|| cfg.paths.embedding.clone());
    if let Some(p) = emb_path {
        let (tensor, vocab) = load_embedding(&p)?;
        return Ok((EmbeddingTable::new(tensor, EmbeddingSource::ExternalFile)?, vocab));
    }
    let model_path = model.cloned().or_else(|| cfg.paths.model.clone());
    if let Some(p) = model_path {
        let (model, vocab, _) = load_checkpoint(&p)?;
        return Ok((EmbeddingTable::from_model(&model)?, vocab));
    }
    let setup = bootstrap(cfg)?;
    Ok((EmbeddingTable::from_model(&setup.dense)?, Some(setup.vocab)))
}

fn print_event(e: &ProgressEvent) {
    match (&e.loss, &e.note) {
        (Some(loss), _) => println!("[{}] {}/{} loss={loss:.4}", e.phase, e.step, e.total),
        (None, Some(note)) => println!("[{}] {note}", e.phase),
        (None, None) => println!("[{}] {}/{}", e.phase, e.step, e.total),
    }
}

// ------------------------------------------------------------ subcommands

fn cmd_perturb(a: PerturbArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides {
        epsilon: a.epsilon,
        ..Overrides::default()
    })?;
    ensure_out_dir(&cfg)?;

    let (records, task) = load_records(&cfg, a.r#in.as_ref(), |t| &t.train)?;
    let (table, table_vocab) = load_table(&cfg, a.embedding.as_ref(), a.model.as_ref())?;
    let vocab = match (table_vocab, task) {
        (Some(v), _) => v,
        (None, Some(task)) => task.vocab(),
        (None, None) => {
            return Err(Error::Data(
                "no vocabulary available: embedding file has none and records are external".into(),
            ))
        }
    };
    let perturbed = perturb_phase(&cfg, &records, &vocab, &table)?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_PERTURBED));
    write_jsonl(&out, &perturbed)?;
    write_sidecar(&out, "perturb", &cfg)?;
    println!(
        "perturbed {} records (epsilon={}) -> {}",
        perturbed.len(),
        cfg.privacy.epsilon,
        out.display()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let backend_kind = a.backend.as_deref().map(parse_backend).transpose()?;
    let cfg = a.common.resolve(Overrides {
        synth_ratio: a.ratio,
        backend: backend_kind,
        ..Overrides::default()
    })?;
    ensure_out_dir(&cfg)?;

    let input = a.r#in.unwrap_or_else(|| out_path(&cfg, F_PERTURBED));
    let perturbed: Vec<PerturbedRecord> = read_jsonl(&input)?;
    let backend = make_backend(&cfg)?;
    let options = synth_options(&cfg)?;
    let (synthetic, report) = fedslim::synth::synthesize(backend.as_ref(), &perturbed, &options)?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_SYNTHETIC));
    write_jsonl(&out, &synthetic)?;
    write_sidecar(&out, "synth", &cfg)?;
    let report_path = out_path(&cfg, F_SYNTH_REPORT);
    write_json(&report_path, &report)?;
    write_sidecar(&report_path, "synth", &cfg)?;
    println!(
        "accepted {} / requested {} ({} attempts; {} disagreed, {} malformed) -> {}",
        report.accepted,
        report.requested,
        report.attempts,
        report.rejected_disagreement,
        report.rejected_malformed,
        out.display()
    );
    Ok(())
}

fn cmd_bi(a: BiArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let (model, vocab) = load_model(&cfg, a.model.as_ref(), None)?;
    let input = a.r#in.unwrap_or_else(|| out_path(&cfg, F_SYNTHETIC));
    let records = load_synthetic(&input)?;

    let options = cfg.prune.bi_options();
    let label = compute_bi(&model, &records, &vocab, BiTarget::Label, &options)?;
    let rationale = compute_bi(&model, &records, &vocab, BiTarget::Rationale, &options)?;
    let report = BiReport::new(&model.layer_ids, &label, &rationale)?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_BI_JSON));
    write_json(&out, &report)?;
    write_sidecar(&out, "bi", &cfg)?;
    let table = report.to_table();
    std::fs::write(out_path(&cfg, F_BI_TEXT), &table)
        .map_err(|e| Error::Data(format!("{}: {e}", out_path(&cfg, F_BI_TEXT).display())))?;
    print!("{table}");
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let metric = a.metric.as_deref().map(parse_metric).transpose()?;
    let cfg = a.common.resolve(Overrides {
        prune_ratio: a.ratio,
        ..Overrides::default()
    })?;
    ensure_out_dir(&cfg)?;
    let metric = metric.unwrap_or(cfg.prune.metric);

    let (model, vocab) = load_model(&cfg, a.model.as_ref(), None)?;
    let scores = match metric {
        PruneMetric::Bi => {
            let path = a.bi.unwrap_or_else(|| out_path(&cfg, F_BI_JSON));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let report: BiReport = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let report_ids: Vec<usize> = report.rows.iter().map(|r| r.layer_id).collect();
            if report_ids != model.layer_ids {
                return Err(Error::Data(format!(
                    "influence report covers layers {:?} but the model has {:?}",
                    report_ids, model.layer_ids
                )));
            }
            report.combined()
        }
        PruneMetric::Seq => seq_importance(model.layers.len()),
    };
    let plan = plan_pruning(&scores, &model.layer_ids, cfg.prune.ratio, metric)?;
    let pruned = prune(&model, &plan)?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_PRUNED));
    let mut extra = CheckpointExtra::new();
    extra.insert("pruning_plan".into(), json!(plan));
    save_checkpoint(&out, &pruned, Some(&vocab), extra)?;
    write_sidecar(&out, "prune", &cfg)?;
    println!(
        "removed layers {:?} ({} -> {} params) -> {}",
        plan.remove,
        model.param_count(),
        pruned.param_count(),
        out.display()
    );
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let (mut model, vocab) = load_model(&cfg, a.model.as_ref(), Some(F_PRUNED))?;
    let input = a.r#in.unwrap_or_else(|| out_path(&cfg, F_SYNTHETIC));
    let records = load_synthetic(&input)?;

    let mut train_config: TrainConfig = cfg.train.server.clone();
    if let Some(steps) = a.steps {
        train_config.max_steps = steps;
    }
    let log = retrain_server(
        &mut model,
        &records,
        &vocab,
        &train_config,
        cfg.train.with_rationale,
        None,
    )?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_RETRAINED));
    save_checkpoint(&out, &model, Some(&vocab), CheckpointExtra::new())?;
    write_sidecar(&out, "distill", &cfg)?;
    let log_path = out_path(&cfg, F_RETRAIN_LOG);
    write_jsonl(&log_path, &log)?;
    write_sidecar(&log_path, "distill", &cfg)?;
    let last = log.last().map(|e| e.total).unwrap_or(f64::NAN);
    println!(
        "retrained {} steps on {} records (final loss {last:.4}) -> {}",
        train_config.max_steps,
        records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let (mut model, vocab) = load_model(&cfg, a.model.as_ref(), Some(F_RETRAINED))?;
    let (records, task) = load_records(&cfg, a.r#in.as_ref(), |t| &t.train)?;

    let mut train_config: TrainConfig = cfg.train.client.clone();
    if let Some(steps) = a.steps {
        train_config.max_steps = steps;
    }
    let eval_set = task.as_ref().map(|t| t.val.as_slice());
    let log = finetune_client(&mut model, &records, &vocab, &train_config, eval_set)?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_FINAL));
    save_checkpoint(&out, &model, Some(&vocab), CheckpointExtra::new())?;
    write_sidecar(&out, "finetune", &cfg)?;
    let log_path = out_path(&cfg, F_FINETUNE_LOG);
    write_jsonl(&log_path, &log)?;
    write_sidecar(&log_path, "finetune", &cfg)?;
    println!(
        "fine-tuned {} steps on {} records -> {}",
        train_config.max_steps,
        records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let (model, vocab) = load_model(&cfg, a.model.as_ref(), Some(F_FINAL))?;
    let (records, _task) = load_records(&cfg, a.r#in.as_ref(), |t| &t.test)?;
    let result = evaluate(&model, &records, &vocab, "eval")?;

    let out = a.out.unwrap_or_else(|| out_path(&cfg, F_METRICS));
    write_json(&out, &result)?;
    write_sidecar(&out, "eval", &cfg)?;
    println!("accuracy={:.4} n={} -> {}", result.accuracy, result.n, out.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let setup = bootstrap(&cfg)?;
    // Export what a client needs out-of-band: the dense checkpoint and its
    // embedding table.
    let dense_path = out_path(&cfg, F_DENSE);
    save_checkpoint(&dense_path, &setup.dense, Some(&setup.vocab), CheckpointExtra::new())?;
    write_sidecar(&dense_path, "serve", &cfg)?;
    let emb_path = out_path(&cfg, F_EMBEDDING);
    save_embedding(&emb_path, &setup.dense.tok_emb, Some(&setup.vocab))?;
    write_sidecar(&emb_path, "serve", &cfg)?;

    let listener = TcpListener::bind(&a.addr)
        .map_err(|e| Error::Backend(format!("bind {}: {e}", a.addr)))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Backend(format!("local addr: {e}")))?;
    println!("listening on {local}");
    let opts = ServeOptions {
        max_sessions: a.max_sessions,
        ..ServeOptions::default()
    };
    let stats = serve(&cfg, &setup, listener, &opts)?;
    println!(
        "served {} sessions ({} failed)",
        stats.sessions_ok + stats.sessions_failed,
        stats.sessions_failed
    );
    Ok(())
}

fn cmd_client(a: ClientArgs) -> Result<()> {
    let cfg = a.common.resolve(Overrides::default())?;
    ensure_out_dir(&cfg)?;

    let emb_path = a
        .embedding
        .clone()
        .or_else(|| cfg.paths.embedding.clone())
        .ok_or_else(|| {
            Error::Usage(
                "client needs an embedding table: pass --embedding or set paths.embedding".into(),
            )
        })?;
    let (tensor, _vocab) = load_embedding(&emb_path)?;
    let table = EmbeddingTable::new(tensor, EmbeddingSource::ExternalFile)?;

    let run = run_client(&cfg, &a.addr, &table, &mut print_event)?;

    let perturbed_path = out_path(&cfg, F_PERTURBED);
    write_jsonl(&perturbed_path, &run.perturbed)?;
    write_sidecar(&perturbed_path, "client", &cfg)?;
    let progress_path = out_path(&cfg, F_PROGRESS);
    write_jsonl(&progress_path, &run.progress)?;
    write_sidecar(&progress_path, "client", &cfg)?;

    let task = make_toy_task(&cfg.task)?;
    let final_path = out_path(&cfg, F_FINAL);
    save_checkpoint(&final_path, &run.model, Some(&task.vocab()), CheckpointExtra::new())?;
    write_sidecar(&final_path, "client", &cfg)?;

    let metrics_path = out_path(&cfg, F_METRICS);
    write_json(
        &metrics_path,
        &json!({
            "pre_accuracy": run.pre_accuracy,
            "final_accuracy": run.final_accuracy,
            "model_sha256": run.model_sha256,
            "received_extra": run.received_extra,
        }),
    )?;
    write_sidecar(&metrics_path, "client", &cfg)?;
    println!(
        "received model {} | accuracy {:.4} -> {:.4} | artifacts in {}",
        &run.model_sha256[..12.min(run.model_sha256.len())],
        run.pre_accuracy,
        run.final_accuracy,
        cfg.paths.output_dir.display()
    );
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let backend_kind = a.backend.as_deref().map(parse_backend).transpose()?;
    let cfg = a.common.resolve(Overrides {
        epsilon: a.epsilon,
        synth_ratio: a.synth_ratio,
        prune_ratio: a.prune_ratio,
        backend: backend_kind,
        ..Overrides::default()
    })?;
    ensure_out_dir(&cfg)?;

    let outcome = run_pipeline(&cfg, &mut |e| print_event(&e))?;
    let vocab = &outcome.setup.vocab;

    // Every intermediate artifact, same names the staged subcommands use.
    let dense_path = out_path(&cfg, F_DENSE);
    save_checkpoint(&dense_path, &outcome.setup.dense, Some(vocab), CheckpointExtra::new())?;
    let emb_path = out_path(&cfg, F_EMBEDDING);
    save_embedding(&emb_path, &outcome.setup.dense.tok_emb, Some(vocab))?;
    let perturbed_path = out_path(&cfg, F_PERTURBED);
    write_jsonl(&perturbed_path, &outcome.perturbed)?;
    let synth_path = out_path(&cfg, F_SYNTHETIC);
    write_jsonl(&synth_path, &outcome.server.synthetic)?;
    let synth_report_path = out_path(&cfg, F_SYNTH_REPORT);
    write_json(&synth_report_path, &outcome.server.synth_report)?;
    let bi_path = out_path(&cfg, F_BI_JSON);
    write_json(&bi_path, &outcome.server.bi)?;
    std::fs::write(out_path(&cfg, F_BI_TEXT), outcome.server.bi.to_table())
        .map_err(|e| Error::Data(format!("{e}")))?;
    let pruned = prune(&outcome.setup.dense, &outcome.server.plan)?;
    let pruned_path = out_path(&cfg, F_PRUNED);
    let mut extra = CheckpointExtra::new();
    extra.insert("pruning_plan".into(), json!(outcome.server.plan));
    save_checkpoint(&pruned_path, &pruned, Some(vocab), extra.clone())?;
    let retrained_path = out_path(&cfg, F_RETRAINED);
    save_checkpoint(&retrained_path, &outcome.server.model, Some(vocab), extra)?;
    let retrain_log_path = out_path(&cfg, F_RETRAIN_LOG);
    write_jsonl(&retrain_log_path, &outcome.server.retrain_log)?;
    let final_path = out_path(&cfg, F_FINAL);
    save_checkpoint(&final_path, &outcome.client.model, Some(vocab), CheckpointExtra::new())?;
    let finetune_log_path = out_path(&cfg, F_FINETUNE_LOG);
    write_jsonl(&finetune_log_path, &outcome.client.finetune_log)?;

    let metrics = json!({
        "dense_accuracy": outcome.dense_accuracy,
        "pruned_accuracy": outcome.pruned_accuracy,
        "retrained_accuracy": outcome.client.pre_accuracy,
        "final_accuracy": outcome.client.final_accuracy,
        "dense_params": outcome.setup.dense.param_count(),
        "final_params": outcome.client.model.param_count(),
        "removed_layers": outcome.server.plan.remove,
        "synth": outcome.server.synth_report,
    });
    let metrics_path = out_path(&cfg, F_METRICS);
    write_json(&metrics_path, &metrics)?;

    for p in [
        &dense_path, &emb_path, &perturbed_path, &synth_path, &synth_report_path, &bi_path,
        &pruned_path, &retrained_path, &retrain_log_path, &final_path, &finetune_log_path,
        &metrics_path,
    ] {
        write_sidecar(p, "pipeline", &cfg)?;
    }

    println!(
        "dense {:.4} | pruned {:.4} | retrained {:.4} | final {:.4} | params {} -> {} | artifacts in {}",
        outcome.dense_accuracy,
        outcome.pruned_accuracy,
        outcome.client.pre_accuracy,
        outcome.client.final_accuracy,
        outcome.setup.dense.param_count(),
        outcome.client.model.param_count(),
        cfg.paths.output_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Perturb(a) => cmd_perturb(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Bi(a) => cmd_bi(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Client(a) => cmd_client(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            let err = Error::Usage(format!("{}", e.kind()));
            eprintln!("{}", ErrorLine(&err));
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", ErrorLine(&e));
        std::process::exit(e.exit_code());
    }
}
