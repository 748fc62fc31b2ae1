use std::fs;
use std::path::Path;

use cavg::config::RunConfig;
use cavg_cli::dispatch;

const TINY: &str = r#"{
  "scenario": {
    "network": { "kind": "ring", "length": 62.72727272727273 },
    "humans": 2,
    "cavs": 4,
    "horizon": 60,
    "sim": { "safety_clamp": true }
  },
  "nn": { "hidden": 16, "heads": 2 },
  "ppo": { "episodes": 3, "batch_size": 100, "minibatch_size": 50, "epochs": 2, "checkpoint_every": 2 },
  "eval": { "episodes": 2, "decentralization_states": 5, "decentralization_stride": 3 },
  "seeds": [7]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("cavg").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["eval", "x.json"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    assert_eq!(
        run(&["sweep", &cfg, "--variable", "colour", "--values", "1", "--out", out.to_str().unwrap()]),
        2
    );
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", dir.path().join("missing.json").to_str().unwrap()]), 1);
    let bad = write_config(dir.path(), r#"{"ppo": {"gamma": 2}}"#);
    assert_eq!(run(&["train", &bad]), 1);
}

#[test]
fn baseline_writes_report_and_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("base");
    assert_eq!(run(&["baseline", &cfg, "--out", out.to_str().unwrap()]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["mean_velocity"].as_f64().unwrap() >= 0.0);
    let effective = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(effective.scenario.cavs, 0);
    assert_eq!(effective.scenario.humans, 6);
    assert_eq!(effective.output_dir, out);
    let st = fs::read_to_string(out.join("spacetime/seed7.csv")).unwrap();
    assert_eq!(st.lines().count(), 1 + 60 * 6);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"].as_str().unwrap(), effective.hash());
}

#[test]
fn train_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(run(&["train", &cfg, "--out", out.to_str().unwrap()]), 0);
    }
    let curve = fs::read(a.join("learning_curve.csv")).unwrap();
    assert_eq!(curve, fs::read(b.join("learning_curve.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&curve).lines().count(), 4);
    for name in ["seed7_episode2.json", "seed7_final.json"] {
        assert!(a.join("checkpoints").join(name).exists(), "{name}");
    }

    let ckpt = a.join("checkpoints/seed7_final.json");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for out in [&e1, &e2] {
        assert_eq!(
            run(&["eval", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dump-adjacency"]),
            0
        );
    }
    let r1 = fs::read(e1.join("eval/report.json")).unwrap();
    assert_eq!(r1, fs::read(e2.join("eval/report.json")).unwrap());
    let dec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(e1.join("eval/decentralization.json")).unwrap()).unwrap();
    assert_eq!(dec["violations"].as_array().unwrap().len(), 0);
    let adj = fs::read_dir(e1.join("adjacency")).unwrap().count();
    assert_eq!(adj, 60);
    let first = fs::read_to_string(e1.join("adjacency/step000000.csv")).unwrap();
    assert_eq!(first.lines().count(), 5);
}

#[test]
fn checkpoint_architecture_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("t");
    assert_eq!(run(&["train", &cfg, "--out", out.to_str().unwrap()]), 0);
    let other = write_config(dir.path(), &TINY.replace(r#""heads": 2"#, r#""heads": 4"#));
    let ckpt = out.join("checkpoints/seed7_final.json");
    assert_eq!(
        run(&["eval", &other, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        1
    );
}

#[test]
fn single_cell_sweep_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("s");
    assert_eq!(
        run(&["sweep", &cfg, "--variable", "attention_heads", "--values", "0", "--out", out.to_str().unwrap()]),
        0
    );
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "variable,value,seed,return,mean_velocity,mean_abs_accel");
    assert!(lines[1].starts_with("attention_heads,0,7,"));
}

#[test]
fn target_speed_sweep_reports_percent_change() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("ts");
    assert_eq!(
        run(&["sweep", &cfg, "--variable", "target_speed", "--values", "30", "--out", out.to_str().unwrap()]),
        0
    );
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let change = fs::read_to_string(out.join("target_speed_change.csv")).unwrap();
    let lines: Vec<_> = change.lines().collect();
    assert_eq!(lines[0], "target_speed,seed,return,baseline_return,percent_change");
    assert!(lines.iter().any(|l| l.starts_with("20,7,") && l.ends_with(",0")));
    assert!(lines.iter().any(|l| l.starts_with("30,7,")));
}

#[test]
fn check_subcommand_passes() {
    assert_eq!(run(&["check"]), 0);
}
