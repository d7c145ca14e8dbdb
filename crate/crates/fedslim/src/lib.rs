//! Federated compression of small decoder-only language models.
//!
//! A client holds private multiple-choice records it will not share. A
//! server holds a trained dense model and a generation backend. The client
//! sends only differentially-private perturbations of its questions; the
//! server synthesizes rationale-annotated training data from them, prunes
//! the dense model where layer influence is lowest, retrains the survivor
//! on the synthetic data right there, and ships the compressed checkpoint
//! back for local fine-tuning. Everything — the transformer, its gradients,
//! the privacy mechanism, the wire protocol — is implemented here over
//! plain `Vec<f32>`, sized for a desk rather than a datacenter.
//!
//! The `examples/` directory is the intended front door, one program per
//! capability:
//!
//! - `perturb_text` — token-level privacy mechanism at several epsilons
//! - `offline_synthesis` — synthetic QA + rationales from a stub backend,
//!   with self-consistency rejection
//! - `layer_influence` — per-layer influence scores and a pruning plan
//! - `prune_and_recover` — drop half the depth, distill the accuracy back
//! - `checkpoint_io` — the canonical binary checkpoint container
//! - `federated_roundtrip` — client/server exchange over a real socket
//! - `end_to_end` — the full pipeline in one process
//!
//! Run one with `cargo run --example end_to_end`. The `fedslim` binary
//! wraps the same phases as subcommands for shell-driven runs; see the
//! README for the artifact layout it writes.
//!
//! Determinism is load-bearing throughout: every phase draws from a seed
//! derived from the run seed and the phase name ([`num::subseed`]), so a
//! loopback run and a socket run of the same configuration produce
//! byte-identical checkpoints.

pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod num;
pub mod pipeline;
pub mod proto;
pub mod prune;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
