use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfbc::data::read_dataset;
use sfbc::env::arrival_counts;

fn sfbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfbc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small enough to train in a couple of seconds.
const TINY: &str = r#"{
  "n_trajectories": 24,
  "eval_episodes": 4,
  "behavior_train": {"epochs": 2, "batch_size": 256},
  "planning": {"iterations": 2, "critic": {"epochs": 1, "hidden": [16, 16]}},
  "policy": {"candidates": 4, "diffusion_steps": 3}
}"#;

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for path in [&a, &b] {
        let out = sfbc(&[
            "gen-data",
            "--mode",
            "both",
            "--seed",
            "7",
            "--n-traj",
            "50",
            "--out",
            p(path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_data_modes() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single.jsonl");
    assert_eq!(
        code(&sfbc(&[
            "gen-data",
            "--mode",
            "single",
            "--n-traj",
            "200",
            "--out",
            p(&single)
        ])),
        0
    );
    let (left, right) = arrival_counts(&read_dataset(&single).unwrap());
    assert_eq!(left, 0);
    assert!(right > 0);

    let both = dir.path().join("both.jsonl");
    assert_eq!(code(&sfbc(&["gen-data", "--n-traj", "1000", "--out", p(&both)])), 0);
    let (left, right) = arrival_counts(&read_dataset(&both).unwrap());
    let share = left as f64 / (left + right) as f64;
    assert!((share - 0.5).abs() <= 0.05, "left share {share}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    assert_eq!(code(&sfbc(&["gen-data", "--n-traj", "1", "--out", p(&out)])), 1);
    assert_eq!(code(&sfbc(&["gen-data", "--mode", "sideways", "--out", p(&out)])), 1);
    assert_eq!(code(&sfbc(&["no-such-command"])), 1);
    assert_eq!(
        code(&sfbc(&["operator-lab", "--trials", "0", "--out", p(dir.path())])),
        1
    );
    assert_eq!(code(&sfbc(&["plot", "--out", p(dir.path())])), 1);
    assert_eq!(code(&sfbc(&["--help"])), 0);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"policy": {"top_k": 0}}"#).unwrap();
    assert_eq!(
        code(&sfbc(&[
            "train",
            "--config",
            p(&bad),
            "--out",
            p(&dir.path().join("r"))
        ])),
        1
    );
}

#[test]
fn operator_lab_passes_and_reports_injected_violations() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let out = sfbc(&["operator-lab", "--trials", "20", "--seed", "3", "--out", p(&clean)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    for f in ["propositions.csv", "contraction.csv", "summary.txt"] {
        assert!(clean.join(f).exists(), "{f}");
    }

    let broken = dir.path().join("broken");
    let out = sfbc(&[
        "operator-lab",
        "--trials",
        "5",
        "--inject-violation",
        "--out",
        p(&broken),
    ]);
    assert_eq!(code(&out), 3);
    let csv = fs::read_to_string(broken.join("propositions.csv")).unwrap();
    assert!(csv
        .lines()
        .any(|l| l.contains(",monotonicity,") && l.contains(",false,")));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    let out = sfbc(&["train", "--config", p(&config), "--seed", "1", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.json",
        "behavior.bin",
        "behavior.json",
        "critic.bin",
        "critic.json",
        "targets.csv",
        "metrics.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("INCOMPLETE").exists());

    let report = dir.path().join("report.json");
    let out = sfbc(&["eval", "--run", p(&run), "--episodes", "3", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("score "));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["episodes"], 3);
    assert!(fs::read_to_string(run.join("metrics.csv"))
        .unwrap()
        .contains("eval,0,score,"));

    let figs = dir.path().join("figs");
    let out = sfbc(&["plot", "--run", p(&run), "--out", p(&figs), "--nx", "5", "--nv", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["action_map.csv", "action_map.svg", "targets.svg", "target_summary.csv"] {
        assert!(figs.join(f).exists(), "{f}");
    }
    // Figures regenerate from the CSV alone.
    let again = dir.path().join("again");
    let csv = figs.join("action_map.csv");
    assert_eq!(code(&sfbc(&["plot", "--action-csv", p(&csv), "--out", p(&again)])), 0);
    assert!(again.join("action_map.svg").exists());
    assert_eq!(
        code(&sfbc(&["plot", "--run", p(&run), "--out", p(&again), "--nx", "0"])),
        1
    );
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data.jsonl");
    assert_eq!(
        code(&sfbc(&["gen-data", "--n-traj", "24", "--seed", "4", "--out", p(&data)])),
        0
    );
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = sfbc(&["train", "--config", p(&config), "--dataset", p(&data), "--out", p(&run)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        metrics.push(fs::read_to_string(run.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn ablation_and_phase_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();

    let bc = dir.path().join("bc");
    assert_eq!(
        code(&sfbc(&[
            "train",
            "--config",
            p(&config),
            "--behavior-only",
            "--out",
            p(&bc)
        ])),
        0
    );
    assert!(bc.join("behavior.bin").exists());
    assert!(!bc.join("critic.bin").exists() && !bc.join("targets.csv").exists());
    assert_eq!(code(&sfbc(&["eval", "--run", p(&bc), "--episodes", "2"])), 0);

    let flat = dir.path().join("flat");
    assert_eq!(
        code(&sfbc(&[
            "train",
            "--config",
            p(&config),
            "--ablation",
            "no-planning",
            "--out",
            p(&flat)
        ])),
        0
    );
    let targets = fs::read_to_string(flat.join("targets.csv")).unwrap();
    // One critic fit: the history holds the plain returns and one planned update.
    let iterations: std::collections::BTreeSet<&str> =
        targets.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iterations.into_iter().collect::<Vec<_>>(), ["0", "1"]);

    let gauss = dir.path().join("gauss");
    let out = sfbc(&[
        "train",
        "--config",
        p(&config),
        "--ablation",
        "gaussian",
        "--k-iters",
        "1",
        "--out",
        p(&gauss),
    ]);
    assert_eq!(code(&out), 0);
    let saved = fs::read_to_string(gauss.join("config.json")).unwrap();
    assert!(saved.contains(r#""behavior": "gaussian""#));
    assert_eq!(code(&sfbc(&["eval", "--run", p(&gauss), "--episodes", "2"])), 0);
}

#[test]
fn missing_or_incomplete_checkpoints_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sfbc(&["eval", "--run", p(&dir.path().join("nowhere"))])), 2);

    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    assert_eq!(
        code(&sfbc(&[
            "train",
            "--config",
            p(&config),
            "--behavior-only",
            "--out",
            p(&run)
        ])),
        0
    );
    fs::write(run.join("INCOMPLETE"), "interrupted\n").unwrap();
    assert_eq!(code(&sfbc(&["eval", "--run", p(&run)])), 2);
}
