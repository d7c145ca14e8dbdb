//! One client/server exchange over a real TCP socket.
//!
//! The server holds the dense model and the generation backend; the client
//! holds the private records. Only perturbed questions cross the wire in one
//! direction and the compressed checkpoint in the other. Both halves run in
//! this process, on localhost.

use std::net::TcpListener;
use std::thread;

use fedslim::config::PipelineConfig;
use fedslim::dp::EmbeddingTable;
use fedslim::evalkit::{TaskFamily, ToyTaskSpec};
use fedslim::pipeline::bootstrap;
use fedslim::proto::{run_client, serve, ServeOptions};
use fedslim::train::TrainConfig;

fn demo_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 29;
    cfg.task = ToyTaskSpec {
        family: TaskFamily::KeyValueLookup,
        n_keys: 6,
        n_values: 5,
        choices_per_item: 3,
        seed: 4,
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
        eval_every: 20,
        ..Default::default()
    };
    cfg.bootstrap.n_records = 64;
    cfg.bootstrap.train = quick.clone();
    cfg.synth.ratio = 4;
    cfg.prune.ratio = 0.25;
    cfg.train.server = quick.clone();
    cfg.train.client = TrainConfig { max_steps: 30, ..quick };
    cfg
}

fn main() -> fedslim::Result<()> {
    let cfg = demo_config();

    println!("server: preparing dense model...");
    let setup = bootstrap(&cfg)?;
    // In a deployment the embedding table ships out-of-band, like the public
    // model it comes from. Here we lift it from the server's dense model.
    let table = EmbeddingTable::from_model(&setup.dense)?;

    let listener = TcpListener::bind("127.0.0.1:0").expect("bind localhost");
    let addr = listener.local_addr().expect("local addr").to_string();
    let server_cfg = cfg.clone();
    let server = thread::spawn(move || {
        let opts = ServeOptions { max_sessions: Some(1), ..Default::default() };
        serve(&server_cfg, &setup, listener, &opts)
    });

    println!("client: connecting to {addr}");
    let run = run_client(&cfg, &addr, &table, &mut |e| {
        if let Some(note) = &e.note {
            println!("  [{}] {note}", e.phase);
        } else {
            println!("  [{}] step {}/{}", e.phase, e.step, e.total);
        }
    })?;

    let stats = server.join().expect("server thread")?;
    println!("\nserver sessions ok: {}", stats.sessions_ok);
    println!("model sha256: {}...", &run.model_sha256[..16]);
    println!("received accuracy:   {:.3}", run.pre_accuracy);
    println!("fine-tuned accuracy: {:.3}", run.final_accuracy);
    Ok(())
}
