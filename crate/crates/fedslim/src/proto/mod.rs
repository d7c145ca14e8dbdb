//! Federation protocol.
//!
//! A client holding labelled records and a server holding a dense model
//! exchange exactly five things over one TCP connection: a version
//! handshake, the client's perturbed questions, progress reports, the
//! compressed model with a declared checksum, and a goodbye. Raw questions
//! and labels have no place in the message schema, so they cannot be sent
//! even by a buggy peer — the receiving side rejects any record shape other
//! than id + perturbed text.
//!
//! The same phase functions back the in-process loopback mode
//! ([`crate::pipeline::run_pipeline`]); a socket run with the same
//! configuration yields byte-identical artifacts.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{run_client, ClientOptions, ClientRun};
pub use server::{serve, ServeOptions, ServeStats};
pub use wire::{
    decode_message, encode_message, read_frame, recv_message, recv_model_blob, send_message,
    send_model, write_frame, ErrorInfo, Hello, Message, ModelHeader, PerturbedData, Progress,
    Role, MAX_FRAME, PROTO_VERSION,
};

#[cfg(test)]
mod tests {
    use std::io::Write;
    use std::net::{TcpListener, TcpStream};
    use std::thread;

    use super::wire::*;
    use super::{serve, ServeOptions};
    use crate::dp::EmbeddingTable;
    use crate::model::checkpoint_bytes;
    use crate::pipeline::{bootstrap, run_pipeline, tiny_config};

    /// Bootstrap once, serve `n` sessions on an ephemeral port; returns the
    /// address and the join handle.
    fn spawn_server(n: u64) -> (String, thread::JoinHandle<super::ServeStats>) {
        let cfg = tiny_config();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = thread::spawn(move || {
            let setup = bootstrap(&cfg).unwrap();
            let opts = ServeOptions {
                max_sessions: Some(n),
                ..ServeOptions::default()
            };
            serve(&cfg, &setup, listener, &opts).unwrap()
        });
        (addr, handle)
    }

    #[test]
    fn socket_run_matches_loopback() {
        let cfg = tiny_config();

        // In-process reference.
        let mut sink = Vec::new();
        let loopback = run_pipeline(&cfg, &mut |e| sink.push(e)).unwrap();
        let loopback_bytes =
            checkpoint_bytes(&loopback.client.model, Some(&loopback.setup.vocab), Default::default())
                .unwrap();

        // Same configuration across a socket.
        let (addr, handle) = spawn_server(1);
        let table = EmbeddingTable::from_model(&loopback.setup.dense).unwrap();
        let run = super::run_client(&cfg, &addr, &table, &mut |_e| {}).unwrap();
        let stats = handle.join().unwrap();
        assert_eq!(stats.sessions_ok, 1);
        assert_eq!(stats.sessions_failed, 0);

        let socket_bytes =
            checkpoint_bytes(&run.model, Some(&loopback.setup.vocab), Default::default()).unwrap();
        assert_eq!(socket_bytes, loopback_bytes, "socket and loopback final weights differ");
        assert_eq!(run.pre_accuracy, loopback.client.pre_accuracy);
        assert_eq!(run.final_accuracy, loopback.client.final_accuracy);
        assert_eq!(run.progress, sink, "progress streams differ");
        assert!(run.received_extra.contains_key("pruning_plan"));
    }

    #[test]
    fn version_mismatch_gets_error_frame() {
        let (addr, handle) = spawn_server(1);
        let mut stream = TcpStream::connect(&addr).unwrap();
        send_message(
            &mut stream,
            &Message::Hello(Hello {
                version: PROTO_VERSION + 7,
                role: Role::Client,
            }),
        )
        .unwrap();
        match recv_message(&mut stream).unwrap() {
            Message::Error(info) => {
                assert!(info.message.contains("version"), "{}", info.message)
            }
            other => panic!("expected ERROR, got {}", other.kind()),
        }
        drop(stream);
        let stats = handle.join().unwrap();
        assert_eq!(stats.sessions_failed, 1);
    }

    #[test]
    fn answer_bearing_records_rejected() {
        let (addr, handle) = spawn_server(1);
        let mut stream = TcpStream::connect(&addr).unwrap();
        send_message(
            &mut stream,
            &Message::Hello(Hello {
                version: PROTO_VERSION,
                role: Role::Client,
            }),
        )
        .unwrap();
        assert!(matches!(recv_message(&mut stream).unwrap(), Message::Hello(_)));
        // Hand-built frame smuggling a label through the data message.
        let payload = br#"{"kind":"PERTURBED_DATA","records":[{"id":"x","perturbed_question":"k","answer":"v3"}]}"#;
        write_frame(&mut stream, payload).unwrap();
        match recv_message(&mut stream).unwrap() {
            Message::Error(info) => assert!(info.message.contains("answer"), "{}", info.message),
            other => panic!("expected ERROR, got {}", other.kind()),
        }
        drop(stream);
        let stats = handle.join().unwrap();
        assert_eq!(stats.sessions_failed, 1);
    }

    #[test]
    fn server_survives_garbage_then_serves() {
        let cfg = tiny_config();
        let (addr, handle) = spawn_server(3);

        // Session 1: raw garbage bytes.
        let mut s1 = TcpStream::connect(&addr).unwrap();
        s1.write_all(b"\x00\x00\x00\x05junk!").unwrap();
        drop(s1);

        // Session 2: valid frame, wrong first message.
        let mut s2 = TcpStream::connect(&addr).unwrap();
        send_message(&mut s2, &Message::Bye).unwrap();
        let _ = recv_message(&mut s2); // ERROR or EOF
        drop(s2);

        // Session 3: a real client completes normally.
        let setup = bootstrap(&cfg).unwrap();
        let table = EmbeddingTable::from_model(&setup.dense).unwrap();
        let run = super::run_client(&cfg, &addr, &table, &mut |_e| {}).unwrap();
        assert!(run.final_accuracy.is_finite());

        let stats = handle.join().unwrap();
        assert_eq!(stats.sessions_ok, 1);
        assert_eq!(stats.sessions_failed, 2);
    }
}
