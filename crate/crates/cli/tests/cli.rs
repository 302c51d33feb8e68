//! Exit codes and artifacts of the `stepmppi` binary.

use std::path::Path;
use std::process::{Command, Output};

fn stepmppi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepmppi"))
        .args(args)
        .env("STEPMPPI_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const DI_CONFIG: &str = r#"
env = "double_integrator"
episodes = 3
episode_len = 20

[train]
horizon = 8
epochs = 2
dataset_size = 16
batch_size = 8
samples = 8

[train.policy]
hidden = [8, 8]

[[controllers]]
kind = "baseline"

[[controllers]]
kind = "lqr"

[[assertions]]
left = "lqr"
metric = "total_cost"
right = "baseline"
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_fails_on_an_impossible_tolerance() {
    let ok = stepmppi(&["gradcheck", "--scope", "layer", "--trials", "3"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS layer"));
    let strict = stepmppi(&["gradcheck", "--scope", "policy", "--trials", "2", "--tol", "1e-300"]);
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn unknown_gradcheck_scope_is_an_error() {
    let o = stepmppi(&["gradcheck", "--scope", "everything"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_exit_code_follows_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), DI_CONFIG);
    let o = stepmppi(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for f in ["episodes.csv", "timing.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let reversed = DI_CONFIG.replace("left = \"lqr\"\nmetric = \"total_cost\"\nright = \"baseline\"", "left = \"baseline\"\nmetric = \"total_cost\"\nright = \"lqr\"");
    assert_ne!(reversed, DI_CONFIG);
    let cfg = write_config(dir.path(), &reversed);
    let o = stepmppi(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(dir.path(), DI_CONFIG);
    let o = stepmppi(&["dataset", "--config", &cfg, "--out", out_s, "--size", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let dataset = out.join("dataset.json");
    assert!(dataset.exists());
    let o = stepmppi(&["train", "--config", &cfg, "--out", out_s, "--method", "dpc", "--dataset", dataset.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("dpc.ckpt");
    assert!(ckpt.exists() && out.join("dpc_train.csv").exists());
    let eval_out = dir.path().join("eval");
    let o = stepmppi(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        eval_out.to_str().unwrap(),
        "--controller",
        "dpc",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--precision",
        "f32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let traces = std::fs::read_to_string(eval_out.join("traces.csv")).unwrap();
    assert!(traces.starts_with("controller,episode,step,var,index,value"));
}

#[test]
fn missing_checkpoint_and_unknown_env_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DI_CONFIG);
    let missing = dir.path().join("nope.ckpt");
    let o = stepmppi(&["eval", "--config", &cfg, "--controller", "step-mppi", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = stepmppi(&["compare", "--config", &cfg, "--env", "submarine"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("submarine"));
}
