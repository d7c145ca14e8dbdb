//! Session handling on the compression side.
//!
//! One session at a time: accept, handshake, receive perturbed records,
//! run the processing phases while a pump thread streams PROGRESS frames,
//! send the retrained model, wait for BYE. Progress events go through a
//! bounded queue that drops its oldest entry when full, so a slow reader
//! can never stall training.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::json;

use super::wire::{
    recv_message, ErrorInfo, Hello, Message, Progress, Role, MAX_FRAME, PROTO_VERSION,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{checkpoint_bytes, CheckpointExtra};
use crate::pipeline::{make_backend, server_phase, DeskSetup, ProgressEvent};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Stop after this many sessions; `None` serves forever.
    pub max_sessions: Option<u64>,
    pub io_timeout: Duration,
    /// Progress queue capacity; the oldest event is dropped on overflow.
    pub progress_capacity: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            max_sessions: None,
            io_timeout: Duration::from_secs(300),
            progress_capacity: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub sessions_ok: u64,
    pub sessions_failed: u64,
}

/// Bounded FIFO that drops the oldest entry instead of blocking.
pub(crate) struct ProgressQueue {
    inner: Mutex<VecDeque<ProgressEvent>>,
    cap: usize,
    pub(crate) dropped: AtomicBool,
}

impl ProgressQueue {
    pub(crate) fn new(cap: usize) -> Self {
        ProgressQueue {
            inner: Mutex::new(VecDeque::new()),
            cap: cap.max(1),
            dropped: AtomicBool::new(false),
        }
    }

    pub(crate) fn push(&self, event: ProgressEvent) {
        let mut q = self.inner.lock().expect("queue poisoned");
        if q.len() >= self.cap {
            q.pop_front();
            self.dropped.store(true, Ordering::Relaxed);
        }
        q.push_back(event);
    }

    pub(crate) fn pop(&self) -> Option<ProgressEvent> {
        self.inner.lock().expect("queue poisoned").pop_front()
    }
}

/// All writes to one socket, serialized. The pump thread and the session
/// thread both send frames; each frame goes out atomically under the lock.
struct SharedWriter {
    stream: Mutex<TcpStream>,
}

impl SharedWriter {
    fn send(&self, m: &Message) -> Result<()> {
        let mut s = self.stream.lock().expect("writer poisoned");
        super::wire::send_message(&mut *s, m)
    }

    fn send_model(&self, blob: &[u8]) -> Result<()> {
        let mut s = self.stream.lock().expect("writer poisoned");
        super::wire::send_model(&mut *s, blob)
    }
}

/// Accept sessions one at a time until `max_sessions` is reached. The
/// dense model and task fixture are built once, before the first accept.
pub fn serve(
    cfg: &PipelineConfig,
    setup: &DeskSetup,
    listener: TcpListener,
    opts: &ServeOptions,
) -> Result<ServeStats> {
    let mut stats = ServeStats::default();
    loop {
        if let Some(max) = opts.max_sessions {
            if stats.sessions_ok + stats.sessions_failed >= max {
                return Ok(stats);
            }
        }
        let (stream, _) = listener
            .accept()
            .map_err(|e| Error::Backend(format!("accept: {e}")))?;
        match handle_session(cfg, setup, stream, opts) {
            Ok(()) => stats.sessions_ok += 1,
            Err(_) => stats.sessions_failed += 1,
        }
    }
}

fn expect_frame(stream: &mut TcpStream, writer: &SharedWriter) -> Result<Message> {
    match recv_message(stream) {
        Ok(m) => Ok(m),
        Err(e) => {
            let _ = writer.send(&Message::Error(ErrorInfo::from_error(&e)));
            Err(e)
        }
    }
}

/// Send an ERROR frame describing `e`, then return it.
fn reject(writer: &SharedWriter, e: Error) -> Error {
    let _ = writer.send(&Message::Error(ErrorInfo::from_error(&e)));
    e
}

fn handle_session(
    cfg: &PipelineConfig,
    setup: &DeskSetup,
    mut stream: TcpStream,
    opts: &ServeOptions,
) -> Result<()> {
    stream
        .set_read_timeout(Some(opts.io_timeout))
        .and_then(|_| stream.set_write_timeout(Some(opts.io_timeout)))
        .map_err(|e| Error::Backend(format!("socket setup: {e}")))?;
    let writer = Arc::new(SharedWriter {
        stream: Mutex::new(
            stream
                .try_clone()
                .map_err(|e| Error::Backend(format!("socket clone: {e}")))?,
        ),
    });

    // Handshake.
    match expect_frame(&mut stream, &writer)? {
        Message::Hello(h) if h.version == PROTO_VERSION && h.role == Role::Client => {}
        Message::Hello(h) => {
            return Err(reject(
                &writer,
                Error::Backend(format!(
                    "unsupported peer: version {} role {:?} (need version {PROTO_VERSION} client)",
                    h.version, h.role
                )),
            ));
        }
        other => {
            return Err(reject(
                &writer,
                Error::Backend(format!("expected HELLO, got {}", other.kind())),
            ));
        }
    }
    writer.send(&Message::Hello(Hello {
        version: PROTO_VERSION,
        role: Role::Server,
    }))?;

    // Data. The message schema admits ids and perturbed text, nothing else.
    let records = match expect_frame(&mut stream, &writer)? {
        Message::PerturbedData(d) => d.records,
        other => {
            return Err(reject(
                &writer,
                Error::Backend(format!("expected PERTURBED_DATA, got {}", other.kind())),
            ));
        }
    };
    if records.is_empty() {
        return Err(reject(&writer, Error::Data("no perturbed records".into())));
    }

    // Processing, with a pump thread forwarding progress.
    let backend = match make_backend(cfg) {
        Ok(b) => b,
        Err(e) => return Err(reject(&writer, e)),
    };
    let queue = Arc::new(ProgressQueue::new(opts.progress_capacity));
    let stop = Arc::new(AtomicBool::new(false));
    let pump = {
        let queue = Arc::clone(&queue);
        let writer = Arc::clone(&writer);
        let stop = Arc::clone(&stop);
        thread::spawn(move || {
            loop {
                while let Some(event) = queue.pop() {
                    if writer.send(&Message::Progress(Progress { event })).is_err() {
                        return;
                    }
                }
                if stop.load(Ordering::Acquire) {
                    return;
                }
                thread::sleep(Duration::from_millis(5));
            }
        })
    };
    let phase_result = server_phase(
        cfg,
        &setup.dense,
        &setup.vocab,
        &records,
        backend.as_ref(),
        &mut |event| queue.push(event),
    );
    stop.store(true, Ordering::Release);
    let _ = pump.join();
    let artifacts = match phase_result {
        Ok(a) => a,
        Err(e) => return Err(reject(&writer, e)),
    };

    // Ship the model.
    let mut extra = CheckpointExtra::new();
    extra.insert("pruning_plan".into(), json!(artifacts.plan));
    extra.insert("phase".into(), json!("retrained"));
    let blob = checkpoint_bytes(&artifacts.model, Some(&setup.vocab), extra)?;
    if blob.len() as u64 > MAX_FRAME {
        return Err(reject(
            &writer,
            Error::Backend(format!("model blob of {} bytes exceeds cap", blob.len())),
        ));
    }
    writer.send_model(&blob)?;

    // Wait for acknowledgement.
    match expect_frame(&mut stream, &writer)? {
        Message::Bye => Ok(()),
        Message::Error(info) => Err(info.to_error()),
        other => Err(reject(
            &writer,
            Error::Backend(format!("expected BYE, got {}", other.kind())),
        )),
    }
}
