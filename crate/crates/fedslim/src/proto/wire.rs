//! Frame and message encoding.
//!
//! Every message travels as one frame: a big-endian u32 byte length
//! followed by a UTF-8 JSON control payload carrying a `kind` field. A
//! MODEL control frame additionally declares the length and SHA-256 of a
//! raw checkpoint blob, which follows the frame unframed. Frames above
//! [`MAX_FRAME`] are rejected before allocation, so a hostile length
//! prefix cannot balloon memory.

use std::io::{Read, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::PerturbedRecord;
use crate::error::{Error, Result};
use crate::pipeline::ProgressEvent;

pub const PROTO_VERSION: u32 = 1;
/// Upper bound for one frame or blob: 64 MiB.
pub const MAX_FRAME: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub version: u32,
    pub role: Role,
}

/// The only client payload that carries data, and by schema the only shape
/// it can have: record ids plus perturbed question text. Any extra field —
/// an answer, a raw question, choices — fails deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedData {
    pub records: Vec<PerturbedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub event: ProgressEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub byte_len: u64,
    /// Lowercase hex SHA-256 of the blob.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorInfo {
    pub class: String,
    pub message: String,
}

impl ErrorInfo {
    pub fn from_error(e: &Error) -> Self {
        ErrorInfo {
            class: e.class().into(),
            message: e.to_string(),
        }
    }

    /// Reconstruct a local error from a peer's report. Class strings match
    /// [`Error::class`].
    pub fn to_error(&self) -> Error {
        let msg = format!("peer: {}", self.message);
        match self.class.as_str() {
            "usage" => Error::Usage(msg),
            "data-format" => Error::Data(msg),
            "numeric" => Error::Numeric(msg),
            _ => Error::Backend(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    PerturbedData(PerturbedData),
    Progress(Progress),
    Model(ModelHeader),
    Error(ErrorInfo),
    Bye,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::PerturbedData(_) => "PERTURBED_DATA",
            Message::Progress(_) => "PROGRESS",
            Message::Model(_) => "MODEL",
            Message::Error(_) => "ERROR",
            Message::Bye => "BYE",
        }
    }
}

fn to_object<T: Serialize>(kind: &str, payload: &T) -> Result<Value> {
    let mut value = serde_json::to_value(payload)
        .map_err(|e| Error::Backend(format!("encode {kind}: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Backend(format!("encode {kind}: payload not an object")))?;
    obj.insert("kind".into(), Value::String(kind.into()));
    Ok(value)
}

/// Serialize one message to its JSON control payload.
pub fn encode_message(m: &Message) -> Result<Vec<u8>> {
    let value = match m {
        Message::Hello(p) => to_object("HELLO", p)?,
        Message::PerturbedData(p) => to_object("PERTURBED_DATA", p)?,
        Message::Progress(p) => to_object("PROGRESS", p)?,
        Message::Model(p) => to_object("MODEL", p)?,
        Message::Error(p) => to_object("ERROR", p)?,
        Message::Bye => to_object("BYE", &serde_json::Map::new())?,
    };
    serde_json::to_vec(&value).map_err(|e| Error::Backend(format!("encode: {e}")))
}

fn from_object<T: DeserializeOwned>(kind: &str, obj: serde_json::Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(obj))
        .map_err(|e| Error::Backend(format!("decode {kind}: {e}")))
}

/// Parse one JSON control payload. Unknown kinds and unexpected fields are
/// rejected.
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Backend(format!("decode frame: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(Error::Backend("decode frame: payload not an object".into()));
    };
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        _ => return Err(Error::Backend("decode frame: missing kind".into())),
    };
    match kind.as_str() {
        "HELLO" => Ok(Message::Hello(from_object(&kind, obj)?)),
        "PERTURBED_DATA" => Ok(Message::PerturbedData(from_object(&kind, obj)?)),
        "PROGRESS" => Ok(Message::Progress(from_object(&kind, obj)?)),
        "MODEL" => Ok(Message::Model(from_object(&kind, obj)?)),
        "ERROR" => Ok(Message::Error(from_object(&kind, obj)?)),
        "BYE" => {
            if obj.is_empty() {
                Ok(Message::Bye)
            } else {
                Err(Error::Backend("decode BYE: unexpected fields".into()))
            }
        }
        other => Err(Error::Backend(format!("decode frame: unknown kind {other:?}"))),
    }
}

/// Write one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() as u64 > MAX_FRAME {
        return Err(Error::Backend(format!(
            "frame of {} bytes exceeds the {MAX_FRAME}-byte cap",
            payload.len()
        )));
    }
    let len = (payload.len() as u32).to_be_bytes();
    w.write_all(&len)
        .and_then(|_| w.write_all(payload))
        .map_err(|e| Error::Backend(format!("write frame: {e}")))?;
    Ok(())
}

/// Read one length-prefixed frame. The length is validated against
/// [`MAX_FRAME`] before any allocation.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| Error::Backend(format!("read frame length: {e}")))?;
    let len = u32::from_be_bytes(len_bytes) as u64;
    if len > MAX_FRAME {
        return Err(Error::Backend(format!(
            "peer announced a {len}-byte frame, above the {MAX_FRAME}-byte cap"
        )));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Backend(format!("read frame body: {e}")))?;
    Ok(payload)
}

pub fn send_message(w: &mut impl Write, m: &Message) -> Result<()> {
    write_frame(w, &encode_message(m)?)
}

pub fn recv_message(r: &mut impl Read) -> Result<Message> {
    decode_message(&read_frame(r)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Send a MODEL header and the raw blob that follows it.
pub fn send_model(w: &mut impl Write, blob: &[u8]) -> Result<()> {
    if blob.len() as u64 > MAX_FRAME {
        return Err(Error::Backend(format!(
            "model blob of {} bytes exceeds the {MAX_FRAME}-byte cap",
            blob.len()
        )));
    }
    let header = ModelHeader {
        byte_len: blob.len() as u64,
        sha256: sha256_hex(blob),
    };
    send_message(w, &Message::Model(header))?;
    w.write_all(blob)
        .map_err(|e| Error::Backend(format!("write model blob: {e}")))?;
    Ok(())
}

/// Read the raw blob a MODEL header announced, verifying length cap and
/// checksum.
pub fn recv_model_blob(r: &mut impl Read, header: &ModelHeader) -> Result<Vec<u8>> {
    if header.byte_len > MAX_FRAME {
        return Err(Error::Backend(format!(
            "peer announced a {}-byte model blob, above the {MAX_FRAME}-byte cap",
            header.byte_len
        )));
    }
    let mut blob = vec![0u8; header.byte_len as usize];
    r.read_exact(&mut blob)
        .map_err(|e| Error::Backend(format!("read model blob: {e}")))?;
    let got = sha256_hex(&blob);
    if got != header.sha256 {
        return Err(Error::Backend(format!(
            "model blob checksum mismatch: declared {}, got {got}",
            header.sha256
        )));
    }
    Ok(blob)
}
