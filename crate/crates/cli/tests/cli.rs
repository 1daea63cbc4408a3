use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "scene": {"dims": [48, 48, 16], "n_objects": 4, "room_grid": [1, 1], "footprint": [2, 4], "height": [3, 8]},
  "camera": {"width": 24, "height": 24},
  "camera_height": 0.3,
  "steps": 40,
  "n_replanning": 10,
  "seeds": [1, 2],
  "map_k": 16,
  "candidates": 8,
  "finetune": {"epochs": 3}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lookaround"))
        .current_dir(dir)
        .env("LOOKAROUND_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) {
    fs::write(dir.join("cfg.json"), SMALL).unwrap();
}

#[test]
fn explore_reconcile_finetune_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    run(
        d,
        &[
            "generate-scene",
            "--config",
            "cfg.json",
            "--seed",
            "4",
            "--out",
            "scene.json",
        ],
    );
    assert!(fs::read_to_string(d.join("scene.json"))
        .unwrap()
        .contains("\"version\""));

    run(
        d,
        &[
            "explore", "--config", "cfg.json", "--policy", "frontier", "--score", "cos", "--seed",
            "4", "--dump-h", "--out", "ep",
        ],
    );
    for f in ["episode.json", "map.json", "h.csv"] {
        assert!(
            fs::read_to_string(d.join("ep").join(f))
                .unwrap()
                .contains("schema_version"),
            "{f}"
        );
    }

    run(
        d,
        &[
            "reconcile",
            "--episode",
            "ep/episode.json",
            "--out",
            "ds.jsonl",
        ],
    );
    run(
        d,
        &[
            "finetune",
            "--dataset",
            "ds.jsonl",
            "--config",
            "cfg.json",
            "--alpha",
            "0.7",
            "--margin",
            "0.3",
            "--epochs",
            "2",
            "--seed",
            "4",
            "--out",
            "head.json",
        ],
    );
    let curve = fs::read_to_string(d.join("head.csv")).unwrap();
    assert_eq!(
        curve.lines().next(),
        Some("epoch,L_head,L_distil,L_im,total")
    );
    assert_eq!(curve.lines().count(), 3);
    let head: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("head.json")).unwrap()).unwrap();
    assert_eq!(head["schema_version"], 1);
    assert_eq!(head["raw"], false);

    run(
        d,
        &[
            "finetune",
            "--dataset",
            "ds.jsonl",
            "--config",
            "cfg.json",
            "--raw",
            "--seed",
            "4",
            "--out",
            "raw.json",
        ],
    );
    let raw: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("raw.json")).unwrap()).unwrap();
    assert_eq!(raw["raw"], true);
}

#[test]
fn explore_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    for out in ["a", "b"] {
        run(
            d,
            &[
                "explore", "--config", "cfg.json", "--policy", "random", "--seed", "9", "--out",
                out,
            ],
        );
    }
    for f in ["episode.json", "map.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn zero_steps_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lookaround"))
        .current_dir(tmp.path())
        .args(["explore", "--steps", "0", "--out", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps must be > 0"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"stepz": 10}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lookaround"))
        .current_dir(tmp.path())
        .args(["evaluate", "--config", "bad.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn evaluate_then_report_merges_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    run(
        d,
        &[
            "evaluate", "--config", "cfg.json", "--seeds", "1", "--out", "r1",
        ],
    );
    run(
        d,
        &[
            "evaluate", "--config", "cfg.json", "--seeds", "2", "--out", "r2",
        ],
    );
    run(
        d,
        &[
            "report",
            "--in",
            "r1/metrics.json",
            "r2/metrics.json",
            "--out",
            "all",
        ],
    );
    let merged: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("all/metrics.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = merged["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![1, 2]);
    assert!(fs::read_to_string(d.join("all/metrics.csv"))
        .unwrap()
        .starts_with("schema_version=1"));
}

#[test]
fn ablate_scores_writes_one_row_per_score() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let out = run(
        d,
        &["ablate-scores", "--config", "cfg.json", "--out", "abl"],
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(d.join("abl/ablation_score.json").exists());
}

#[test]
fn train_policy_writes_loadable_params() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    run(
        d,
        &[
            "train-policy",
            "--config",
            "cfg.json",
            "--scenes",
            "3",
            "--rollouts",
            "2",
            "--steps",
            "20",
            "--out",
            "pol.json",
        ],
    );
    run(
        d,
        &[
            "explore", "--config", "cfg.json", "--policy", "learned", "--params", "pol.json",
            "--out", "ep",
        ],
    );
    let p: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("pol.json")).unwrap()).unwrap();
    assert!(
        p["weights"].is_array()
            && p["temperature"].is_number()
            && p["feature_spec_version"].is_number()
    );
}
