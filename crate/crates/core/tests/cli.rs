//! End-to-end runs of the `tie-sim` binary.

use std::path::Path;
use std::process::{Command, Output};

fn tie_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tie-sim")).args(args).output().expect("spawn tie-sim")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_MODEL: [&str; 4] = ["model.hidden=16", "model.mlp_hidden=24", "model.blocks=2", "train.epochs=2"];

fn gen(dir: &Path, world: &str, particles: usize) {
    let out = tie_sim(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        &format!("data.world={world}"),
        &format!("data.particles={particles}"),
        "data.frames=10",
        "data.train=3",
        "data.valid=2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn train(data: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--precision", "f64"];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    tie_sim(&args)
}

#[test]
fn drop_merge_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model, report, roll) = (tmp.path().join("data"), tmp.path().join("model"), tmp.path().join("eval"), tmp.path().join("roll"));
    gen(&data, "drop_merge", 16);
    assert!(data.join("resolved_config.json").exists());

    let out = train(&data, &model, &["--abstract-particles", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["history.csv", "stats.json", "model.json", "model.bin", "resolved_config.json"] {
        assert!(model.join(f).exists(), "missing {f}");
    }

    let (d, m, r) = (data.to_str().unwrap(), model.to_str().unwrap(), report.to_str().unwrap());
    let out = tie_sim(&["eval", "--data", d, "--model", m, "--out", r, "eval.steps=4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert!(json["one_step"]["mean"].as_f64().unwrap().is_finite());
    assert!(json["baseline_one_step"]["mean"].as_f64().is_some());
    assert_eq!(json["rollout"]["steps"].as_u64(), Some(4));

    let out = tie_sim(&["rollout", "--data", d, "--model", m, "--out", roll.to_str().unwrap(), "eval.steps=3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(roll.join("rollout_000.bin").exists() && roll.join("rollout_001.bin").exists());
}

#[test]
fn eval_with_mismatched_dims_is_a_shape_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, model) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("model"));
    gen(&a, "drop_merge", 12);
    gen(&b, "box_splash", 12);
    let out = train(&a, &model, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (m, o) = (model.to_str().unwrap(), tmp.path().join("eval"));
    let out = tie_sim(&["eval", "--data", b.to_str().unwrap(), "--model", m, "--out", o.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dimension mismatch"), "{}", stderr(&out));

    // a history that disagrees with the checkpoint
    let out = tie_sim(&["eval", "--data", a.to_str().unwrap(), "--model", m, "--out", o.to_str().unwrap(), "--history", "3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dimension mismatch"), "{}", stderr(&out));
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tie_sim(&["verify", "--out", tmp.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}{}", stderr(&out));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{stdout}");
    assert!(tmp.path().join("resolved_config.json").exists());
}

#[test]
fn bad_arguments_and_missing_files_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    assert_eq!(code(&tie_sim(&["gen-data", "--out", o, "data.nonsense=1"])), 2);
    assert_eq!(code(&tie_sim(&["gen-data", "--out", o, "no-equals-sign"])), 2);
    assert_eq!(code(&tie_sim(&["bench", "--out", o, "--backbone", "mlp"])), 2);
    assert_eq!(code(&tie_sim(&["fly"])), 2);
    let missing = tmp.path().join("absent");
    assert_eq!(code(&tie_sim(&["train", "--data", missing.to_str().unwrap(), "--out", o])), 5);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 1}}"#).unwrap();
    assert_eq!(code(&tie_sim(&["gen-data", "--out", o, "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn config_file_then_flags_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"data": {"particles": 9, "frames": 6, "train": 1, "valid": 1, "seed": 4}, "model": {"radius": 0.2}}"#).unwrap();
    let out_dir = tmp.path().join("data");
    let out = tie_sim(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "11",
        "--radius",
        "0.3",
        "model.radius=0.25",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["data"]["particles"], 9);
    assert_eq!(snap["data"]["seed"], 11);
    assert_eq!(snap["train"]["seed"], 11);
    assert_eq!(snap["model"]["radius"], 0.25);
}
