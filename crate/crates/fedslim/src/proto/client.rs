//! Session handling on the data-owning side.
//!
//! The client perturbs its questions locally, ships only the perturbed
//! text, waits through progress reports for the compressed model, verifies
//! the declared checksum, then fine-tunes and evaluates entirely offline.

use std::net::TcpStream;
use std::time::Duration;

use super::wire::{
    recv_message, recv_model_blob, send_message, Hello, Message, PerturbedData, Role,
    PROTO_VERSION,
};
use crate::config::PipelineConfig;
use crate::data::PerturbedRecord;
use crate::dp::EmbeddingTable;
use crate::error::{Error, Result};
use crate::evalkit::make_toy_task;
use crate::model::{parse_checkpoint, CheckpointExtra};
use crate::pipeline::{client_phase, perturb_phase, ProgressEvent};
use crate::train::TrainLog;
use crate::model::TransformerModel;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Covers the server's whole processing stretch between frames, so it
    /// is much longer than a usual socket timeout.
    pub io_timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            io_timeout: Duration::from_secs(900),
        }
    }
}

/// Everything a federated exchange leaves on the client.
pub struct ClientRun {
    /// Fine-tuned model.
    pub model: TransformerModel<f32>,
    /// Metadata the server embedded in the shipped checkpoint.
    pub received_extra: CheckpointExtra,
    /// Checksum of the received blob, as verified.
    pub model_sha256: String,
    pub pre_accuracy: f64,
    pub final_accuracy: f64,
    pub finetune_log: TrainLog,
    pub progress: Vec<ProgressEvent>,
    pub perturbed: Vec<PerturbedRecord>,
}

/// Run one full exchange against `addr`.
pub fn run_client(
    cfg: &PipelineConfig,
    addr: &str,
    table: &EmbeddingTable,
    on_progress: &mut dyn FnMut(&ProgressEvent),
) -> Result<ClientRun> {
    cfg.validate()?;
    let task = make_toy_task(&cfg.task)?;
    let vocab = task.vocab();
    let perturbed = perturb_phase(cfg, &task.train, &vocab, table)?;

    let mut stream = TcpStream::connect(addr)
        .map_err(|e| Error::Backend(format!("connect {addr}: {e}")))?;
    let opts = ClientOptions::default();
    stream
        .set_read_timeout(Some(opts.io_timeout))
        .and_then(|_| stream.set_write_timeout(Some(opts.io_timeout)))
        .map_err(|e| Error::Backend(format!("socket setup: {e}")))?;

    send_message(
        &mut stream,
        &Message::Hello(Hello {
            version: PROTO_VERSION,
            role: Role::Client,
        }),
    )?;
    match recv_message(&mut stream)? {
        Message::Hello(h) if h.version == PROTO_VERSION && h.role == Role::Server => {}
        Message::Hello(h) => {
            return Err(Error::Backend(format!(
                "unsupported peer: version {} role {:?}",
                h.version, h.role
            )));
        }
        Message::Error(info) => return Err(info.to_error()),
        other => {
            return Err(Error::Backend(format!("expected HELLO, got {}", other.kind())));
        }
    }

    send_message(
        &mut stream,
        &Message::PerturbedData(PerturbedData {
            records: perturbed.clone(),
        }),
    )?;

    // Progress stream, then the model.
    let mut progress = Vec::new();
    let (header, blob) = loop {
        match recv_message(&mut stream)? {
            Message::Progress(p) => {
                on_progress(&p.event);
                progress.push(p.event);
            }
            Message::Model(header) => {
                let blob = recv_model_blob(&mut stream, &header)?;
                break (header, blob);
            }
            Message::Error(info) => return Err(info.to_error()),
            other => {
                return Err(Error::Backend(format!(
                    "expected PROGRESS or MODEL, got {}",
                    other.kind()
                )));
            }
        }
    };

    let (model, ckpt_vocab, received_extra) = parse_checkpoint(&blob)?;
    let ckpt_vocab =
        ckpt_vocab.ok_or_else(|| Error::Data("received checkpoint carries no vocabulary".into()))?;
    if ckpt_vocab.tokens() != vocab.tokens() {
        return Err(Error::Data(
            "received checkpoint vocabulary does not match the task vocabulary".into(),
        ));
    }

    send_message(&mut stream, &Message::Bye)?;
    drop(stream);

    // Everything from here on is local.
    let client = client_phase(cfg, model, &task, &vocab)?;
    Ok(ClientRun {
        model: client.model,
        received_extra,
        model_sha256: header.sha256,
        pre_accuracy: client.pre_accuracy,
        final_accuracy: client.final_accuracy,
        finetune_log: client.finetune_log,
        progress,
        perturbed,
    })
}
