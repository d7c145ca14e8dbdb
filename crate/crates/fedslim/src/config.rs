//! Run configuration.
//!
//! One TOML file describes every phase of a run: task fixture, dense model
//! shape, bootstrap training, privacy budget, synthesis, pruning, and the
//! two training stages. A handful of knobs can be overridden without
//! editing the file; precedence is flag > environment > file > built-in
//! default. Both endpoints of a federated run are expected to load the same
//! file — the task section is what lets a stub backend on the server answer
//! questions from the same world the client sampled its data from.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::SensitivityMode;
use crate::error::{Error, Result};
use crate::evalkit::ToyTaskSpec;
use crate::model::ModelConfig;
use crate::prune::{BiOptions, PositionSet, PruneMetric};
use crate::synth::HttpBackendConfig;
use crate::train::TrainConfig;

/// Environment variables honoured by [`PipelineConfig::apply_env`].
pub const ENV_SEED: &str = "FEDSLIM_SEED";
pub const ENV_EPSILON: &str = "FEDSLIM_EPSILON";
pub const ENV_SYNTH_RATIO: &str = "FEDSLIM_SYNTH_RATIO";
pub const ENV_PRUNE_RATIO: &str = "FEDSLIM_PRUNE_RATIO";
pub const ENV_BACKEND: &str = "FEDSLIM_BACKEND";
pub const ENV_OUTPUT_DIR: &str = "FEDSLIM_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stochastic phase derives its own stream from this
    /// plus a fixed label, so phases stay decoupled.
    pub seed: u64,
    pub paths: PathsConfig,
    pub task: ToyTaskSpec,
    pub model: ModelShape,
    pub bootstrap: BootstrapConfig,
    pub privacy: PrivacyConfig,
    pub synth: SynthConfig,
    pub prune: PruneConfig,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: PathsConfig::default(),
            task: ToyTaskSpec::default(),
            model: ModelShape::default(),
            bootstrap: BootstrapConfig::default(),
            privacy: PrivacyConfig::default(),
            synth: SynthConfig::default(),
            prune: PruneConfig::default(),
            train: TrainSection::default(),
        }
    }
}

/// File locations. Optional entries fall back to in-process generation
/// (task data, dense model) when unset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory for artifacts written by the command-line tools.
    pub output_dir: PathBuf,
    /// Dense checkpoint to start from; empty → bootstrap one from the task.
    pub model: Option<PathBuf>,
    /// Standalone embedding table for client-side perturbation; empty → the
    /// dense model's token embedding.
    pub embedding: Option<PathBuf>,
    /// Private records (JSONL); empty → the task's train split.
    pub private_data: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            output_dir: PathBuf::from("out"),
            model: None,
            embedding: None,
            private_data: None,
        }
    }
}

/// Architecture of the dense model, minus the vocabulary size, which is
/// always taken from the task's vocabulary at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
        }
    }
}

impl ModelShape {
    pub fn to_model_config(self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Vocabulary size is filled in later; validate the rest.
        self.to_model_config(1).validate()
    }
}

/// Dense-model bootstrap: how much world data to train on and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// World samples drawn for dense training.
    pub n_records: usize,
    /// Train the dense model with the rationale stream too, so layer
    /// influence on rationales is measured against a model that has
    /// actually seen them.
    pub with_rationale: bool,
    pub train: TrainConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_records: 512,
            with_rationale: true,
            train: TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub sensitivity: SensitivityMode,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            epsilon: 3.0,
            sensitivity: SensitivityMode::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub backend: BackendKind,
    /// Synthetic records per private record.
    pub ratio: usize,
    /// Attempt budget as a multiple of the target count.
    pub attempt_cap_factor: usize,
    /// Directory of prompt template files; empty → built-in templates.
    pub template_dir: Option<PathBuf>,
    pub http: HttpBackendConfig,
    pub stub: StubConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            backend: BackendKind::Stub,
            ratio: 8,
            attempt_cap_factor: 4,
            template_dir: None,
            http: HttpBackendConfig::default(),
            stub: StubConfig::default(),
        }
    }
}

/// Stub-backend knobs; the world itself comes from the task section.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubConfig {
    pub choices_per_item: usize,
    /// Flip the stub's third answer vote on this many question batches,
    /// counted from the start of the run. Exercises the consistency filter.
    pub disagree_first: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            choices_per_item: 4,
            disagree_first: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of layers to remove.
    pub ratio: f64,
    pub metric: PruneMetric,
    pub positions: PositionSet,
    pub max_question_len: usize,
    pub max_target_len: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        let bi = BiOptions::default();
        PruneConfig {
            ratio: 0.30,
            metric: PruneMetric::Bi,
            positions: bi.positions,
            max_question_len: bi.max_question_len,
            max_target_len: bi.max_target_len,
        }
    }
}

impl PruneConfig {
    pub fn bi_options(&self) -> BiOptions {
        BiOptions {
            max_question_len: self.max_question_len,
            max_target_len: self.max_target_len,
            positions: self.positions,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Server-side recovery stage over synthetic records.
    pub server: TrainConfig,
    /// Whether the server stage uses the rationale stream.
    pub with_rationale: bool,
    /// Client-side fine-tuning over private records.
    pub client: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            server: TrainConfig::default(),
            with_rationale: true,
            client: TrainConfig::default(),
        }
    }
}

/// Knobs settable from the command line; `None` leaves the config alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub synth_ratio: Option<usize>,
    pub prune_ratio: Option<f64>,
    pub backend: Option<BackendKind>,
    pub output_dir: Option<PathBuf>,
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Usage(format!("{name}: cannot parse {raw:?}")))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Data(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply `FEDSLIM_*` environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = env::var(ENV_SEED) {
            self.seed = parse_env(ENV_SEED, &v)?;
        }
        if let Ok(v) = env::var(ENV_EPSILON) {
            self.privacy.epsilon = parse_env(ENV_EPSILON, &v)?;
        }
        if let Ok(v) = env::var(ENV_SYNTH_RATIO) {
            self.synth.ratio = parse_env(ENV_SYNTH_RATIO, &v)?;
        }
        if let Ok(v) = env::var(ENV_PRUNE_RATIO) {
            self.prune.ratio = parse_env(ENV_PRUNE_RATIO, &v)?;
        }
        if let Ok(v) = env::var(ENV_BACKEND) {
            self.synth.backend = match v.as_str() {
                "stub" => BackendKind::Stub,
                "http" => BackendKind::Http,
                other => {
                    return Err(Error::Usage(format!(
                        "{ENV_BACKEND}: expected stub or http, got {other:?}"
                    )))
                }
            };
        }
        if let Ok(v) = env::var(ENV_OUTPUT_DIR) {
            self.paths.output_dir = PathBuf::from(v);
        }
        Ok(())
    }

    /// Apply command-line overrides (highest precedence).
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.epsilon {
            self.privacy.epsilon = v;
        }
        if let Some(v) = o.synth_ratio {
            self.synth.ratio = v;
        }
        if let Some(v) = o.prune_ratio {
            self.prune.ratio = v;
        }
        if let Some(v) = o.backend {
            self.synth.backend = v;
        }
        if let Some(v) = &o.output_dir {
            self.paths.output_dir = v.clone();
        }
    }

    /// Load-and-layer: file (or defaults), then environment, then flags,
    /// then validate.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env()?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.privacy.epsilon.is_finite() && self.privacy.epsilon > 0.0) {
            return Err(Error::Usage(format!(
                "config: epsilon must be finite and positive, got {}",
                self.privacy.epsilon
            )));
        }
        if self.synth.ratio == 0 {
            return Err(Error::Usage("config: synth.ratio must be at least 1".into()));
        }
        if self.synth.attempt_cap_factor == 0 {
            return Err(Error::Usage(
                "config: synth.attempt_cap_factor must be at least 1".into(),
            ));
        }
        if !(self.prune.ratio.is_finite() && (0.0..1.0).contains(&self.prune.ratio)) {
            return Err(Error::Usage(format!(
                "config: prune.ratio must lie in [0, 1), got {}",
                self.prune.ratio
            )));
        }
        if self.synth.stub.choices_per_item < 2 {
            return Err(Error::Usage(
                "config: stub.choices_per_item must be at least 2".into(),
            ));
        }
        if self.bootstrap.n_records == 0 {
            return Err(Error::Usage("config: bootstrap.n_records must be at least 1".into()));
        }
        self.task.validate()?;
        self.model.validate()?;
        self.bootstrap.train.validate()?;
        self.train.server.validate()?;
        self.train.client.validate()?;
        Ok(())
    }

    /// Seed for a named phase, decorrelated from every other phase.
    pub fn phase_seed(&self, phase: &str) -> u64 {
        crate::num::subseed(self.seed, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.privacy.epsilon, cfg.privacy.epsilon);
        assert_eq!(back.synth.ratio, cfg.synth.ratio);
        assert_eq!(back.prune.ratio, cfg.prune.ratio);
        assert_eq!(back.model, cfg.model);
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_match_contract() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.privacy.epsilon, 3.0);
        assert_eq!(cfg.synth.ratio, 8);
        assert_eq!(cfg.prune.ratio, 0.30);
        assert_eq!(cfg.synth.backend, BackendKind::Stub);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_toml(
            "seed = 7\n[privacy]\nepsilon = 1.5\n[model]\nn_layers = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.privacy.epsilon, 1.5);
        assert_eq!(cfg.model.n_layers, 4);
        assert_eq!(cfg.model.d_model, 64); // untouched default
        assert_eq!(cfg.synth.ratio, 8);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::from_toml("[privacy]\nepsilonn = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        let err = PipelineConfig::from_toml("typo_toplevel = 1\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = PipelineConfig::default();
        cfg.privacy.epsilon = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));

        let mut cfg = PipelineConfig::default();
        cfg.prune.ratio = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));

        let mut cfg = PipelineConfig::default();
        cfg.synth.ratio = 0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));

        let mut cfg = PipelineConfig::default();
        cfg.model.n_heads = 3; // does not divide d_model = 64
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flag_overrides_beat_everything() {
        let mut cfg = PipelineConfig::from_toml("[privacy]\nepsilon = 1.0\n").unwrap();
        cfg.apply(&Overrides {
            epsilon: Some(9.0),
            prune_ratio: Some(0.5),
            ..Overrides::default()
        });
        assert_eq!(cfg.privacy.epsilon, 9.0);
        assert_eq!(cfg.prune.ratio, 0.5);
        assert_eq!(cfg.synth.ratio, 8); // untouched
    }

    #[test]
    fn phase_seeds_differ() {
        let cfg = PipelineConfig::default();
        assert_ne!(cfg.phase_seed("perturb"), cfg.phase_seed("synth"));
        assert_ne!(cfg.phase_seed("synth"), cfg.phase_seed("retrain"));
        let mut other = PipelineConfig::default();
        other.seed = 1;
        assert_ne!(cfg.phase_seed("perturb"), other.phase_seed("perturb"));
    }
}
