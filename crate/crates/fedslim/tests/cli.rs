//! Shell-level contract of the `fedslim` binary: exit codes, configuration
//! precedence, artifact sidecars.

use std::path::Path;
use std::process::{Command, Output};

const TINY_TOML: &str = r#"
seed = 11

[task]
family = "key-value-lookup"
n_keys = 6
n_values = 5
choices_per_item = 3
seed = 3
n_train = 8
n_val = 4
n_test = 8

[model]
d_model = 16
n_layers = 4
n_heads = 2
d_ff = 32
max_seq_len = 32

[bootstrap]
n_records = 16

[bootstrap.train]
batch_size = 4
max_steps = 4
eval_every = 0

[privacy]
epsilon = 2.5

[synth]
ratio = 2

[synth.stub]
choices_per_item = 3

[prune]
ratio = 0.25

[train.server]
batch_size = 4
max_steps = 4
eval_every = 0

[train.client]
batch_size = 4
max_steps = 4
eval_every = 0
"#;

const ENV_VARS: &[&str] = &[
    "FEDSLIM_SEED",
    "FEDSLIM_EPSILON",
    "FEDSLIM_SYNTH_RATIO",
    "FEDSLIM_PRUNE_RATIO",
    "FEDSLIM_BACKEND",
    "FEDSLIM_OUTPUT_DIR",
];

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedslim"));
    for var in ENV_VARS {
        cmd.env_remove(var);
    }
    cmd
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_TOML).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sidecar_epsilon(dir: &Path) -> f64 {
    let text = std::fs::read_to_string(dir.join("perturbed.jsonl.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&text).unwrap();
    meta["config"]["privacy"]["epsilon"].as_f64().unwrap()
}

#[test]
fn help_and_version_exit_zero_on_stdout() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("perturb"));
    assert!(out.stderr.is_empty());

    let out = bin().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fedslim"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["pipeline", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("error"));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    // synth needs perturbed.jsonl, which nothing has written.
    let out = bin()
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("class=data-format"), "{}", stderr_of(&out));
}

#[test]
fn over_pruning_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    // Bootstraps a tiny model, then asks to remove all four layers. Depth
    // order rather than influence, so no report artifact is needed.
    let out = bin()
        .args(["prune", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .args(["--ratio", "0.95", "--metric", "seq"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("leaves nothing"), "{}", stderr_of(&out));
}

#[test]
fn connection_refused_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let emb = dir.path().join("none.ckpt");
    // Port 1 is never listening; the failure must map to the transport class.
    let out = bin()
        .args(["client", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .args(["--addr", "127.0.0.1:1", "--embedding"])
        .arg(&emb)
        .output()
        .unwrap();
    // Missing embedding file fails earlier, as a data error.
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    // serve --max-sessions 0 exports embedding.ckpt and exits without
    // accepting; that gives the client a real table so it reaches the dial.
    let out = bin()
        .args(["serve", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .args(["--addr", "127.0.0.1:0", "--max-sessions", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let out = bin()
        .args(["client", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .args(["--addr", "127.0.0.1:1", "--embedding"])
        .arg(dir.path().join("embedding.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("class=backend-transport"), "{}", stderr_of(&out));
}

#[test]
fn epsilon_resolves_flag_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());

    let run = |extra_env: Option<(&str, &str)>, extra_args: &[&str], out_dir: &Path| {
        let mut cmd = bin();
        cmd.args(["perturb", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(out_dir)
            .args(extra_args);
        if let Some((k, v)) = extra_env {
            cmd.env(k, v);
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    };

    let d1 = dir.path().join("file-only");
    run(None, &[], &d1);
    assert_eq!(sidecar_epsilon(&d1), 2.5, "file value");

    let d2 = dir.path().join("env-over-file");
    run(Some(("FEDSLIM_EPSILON", "1.5")), &[], &d2);
    assert_eq!(sidecar_epsilon(&d2), 1.5, "env beats file");

    let d3 = dir.path().join("flag-over-env");
    run(Some(("FEDSLIM_EPSILON", "1.5")), &["--epsilon", "9"], &d3);
    assert_eq!(sidecar_epsilon(&d3), 9.0, "flag beats env");
}

#[test]
fn malformed_env_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = bin()
        .args(["perturb", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .env("FEDSLIM_EPSILON", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("FEDSLIM_EPSILON"), "error names the variable: {err}");
}

#[test]
fn artifacts_and_sidecars_chain_through_the_staged_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let stage = |args: &[&str]| {
        let mut cmd = bin();
        cmd.arg(args[0])
            .args(["--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path())
            .args(&args[1..]);
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}: {}", args[0], stderr_of(&out));
    };
    stage(&["perturb"]);
    stage(&["synth"]);
    stage(&["bi"]);
    stage(&["prune"]);
    stage(&["distill"]);
    stage(&["finetune"]);
    stage(&["eval"]);

    for artifact in [
        "perturbed.jsonl",
        "synthetic.jsonl",
        "bi_report.json",
        "pruned.ckpt",
        "retrained.ckpt",
        "final.ckpt",
        "metrics.json",
    ] {
        let path = dir.path().join(artifact);
        assert!(path.exists(), "missing {artifact}");
    }
    // Every produced artifact carries a sidecar recording the resolved
    // configuration and seed.
    let meta = std::fs::read_to_string(dir.path().join("pruned.ckpt.meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["produced_by"], "prune");
    assert_eq!(meta["seed"], 11);
}
