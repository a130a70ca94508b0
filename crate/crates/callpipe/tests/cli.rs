//! End-to-end runs of the `callpipe` binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use callpipe::trainer::load_checkpoint;
use tempfile::TempDir;

fn callpipe(runs_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_callpipe"))
        .args(args)
        .env("CALLPIPE_RUNS_DIR", runs_dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(callpipe(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(callpipe(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let out = callpipe(dir.path(), &["infer"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--checkpoint"), "{stderr}");
    assert_eq!(callpipe(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let conf = common::conf_dir();
    let out = callpipe(
        dir.path(),
        &["train", "--conf-dir", conf.to_str().unwrap(), "--config-name", "no_such_run"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_infer_eval_finetune_sweep_pipeline() {
    let work = TempDir::new().unwrap();
    let runs = work.path().join("runs");
    let (audio_dir, annotations) = common::generate_corpus(work.path(), 24, 99);
    let conf = common::conf_dir();
    let conf_s = conf.to_str().unwrap();

    let data_overrides = [
        format!("data.audio_dir={}", audio_dir.display()),
        format!("data.annotations={}", annotations.display()),
    ];

    // Train a short run.
    let out = callpipe(
        &runs,
        &[
            "train",
            "--conf-dir",
            conf_s,
            "--config-name",
            "default",
            &data_overrides[0],
            &data_overrides[1],
            "data.batch_size=8",
            "optim.epochs=2",
            "experiment.manual_seed=4321",
        ],
    );
    assert_success(&out);
    let run_dir = runs.join("default-0");
    assert!(run_dir.join("config.yaml").is_file());
    assert!(run_dir.join("best.ckpt").is_file());
    assert!(run_dir.join("last.ckpt").is_file());
    let log = std::fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    // The snapshot reflects the overrides.
    let snapshot = std::fs::read_to_string(run_dir.join("config.yaml")).unwrap();
    assert!(snapshot.contains("batch_size: 8"));
    assert!(snapshot.contains("manual_seed: 4321"));

    // Inference over the same corpus.
    let ckpt_path = run_dir.join("best.ckpt");
    let infer_out = work.path().join("infer_out");
    let out = callpipe(
        &runs,
        &[
            "infer",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--audio",
            audio_dir.to_str().unwrap(),
            "--annotations",
            annotations.to_str().unwrap(),
            "--plot",
            "--out",
            infer_out.to_str().unwrap(),
        ],
    );
    assert_success(&out);
    let predictions = std::fs::read_to_string(infer_out.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 48); // header + two windows per 2 s clip
    let detections = std::fs::read_to_string(infer_out.join("detections.txt")).unwrap();
    assert!(detections.starts_with("Selection\tView\tChannel\t"));
    assert!(infer_out.join("metrics.json").is_file());
    assert!(infer_out.join("config.yaml").is_file());
    assert!(infer_out.join("plots").join("clip000").join("probability.csv").is_file());

    // Eval writes metrics.json with the ROC-optimal threshold.
    let eval_out = work.path().join("eval_out");
    let out = callpipe(
        &runs,
        &[
            "eval",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--audio",
            audio_dir.to_str().unwrap(),
            "--annotations",
            annotations.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
        ],
    );
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["metrics"]["auc"].as_f64().unwrap() > 0.0);
    assert!(metrics["youden_threshold"].is_number());

    // Head-only finetuning freezes every non-head parameter.
    let out = callpipe(
        &runs,
        &[
            "finetune",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--mode",
            "head-only",
            "--conf-dir",
            conf_s,
            "--config-name",
            "default",
            &data_overrides[0],
            &data_overrides[1],
            "data.batch_size=8",
            "optim.epochs=2",
            "experiment.manual_seed=4321",
        ],
    );
    assert_success(&out);
    let finetuned_dir = runs.join("default-finetune-0");
    let before = load_checkpoint(&ckpt_path).unwrap();
    let after = load_checkpoint(&finetuned_dir.join("last.ckpt")).unwrap();
    let mut head_changed = false;
    for (a, b) in before.model.params.iter().zip(&after.model.params) {
        assert_eq!(a.name, b.name);
        let same = a.value.data() == b.value.data();
        if a.name.starts_with("head.") {
            head_changed |= !same;
        } else {
            assert!(same, "frozen parameter `{}` changed", a.name);
        }
    }
    assert!(head_changed, "head parameters never moved");

    // A tiny random sweep.
    let sweep_spec = work.path().join("sweep.yaml");
    std::fs::write(
        &sweep_spec,
        "method: random\nmetric:\n  goal: maximize\n  name: auc\nparameters:\n  optim.lr:\n    distribution: uniform\n    min: 0.0005\n    max: 0.002\n  optim.epochs:\n    value: 1\n  experiment.run_id:\n    distribution: int_uniform\n    min: 0\n    max: 1000\n",
    )
    .unwrap();
    let out = callpipe(
        &runs,
        &[
            "sweep",
            "--spec",
            sweep_spec.to_str().unwrap(),
            "--conf-dir",
            conf_s,
            "--config-name",
            "default",
            "--budget",
            "2",
            &data_overrides[0],
            &data_overrides[1],
            "data.batch_size=8",
        ],
    );
    assert_success(&out);
    let sweep_dir = runs.join("sweeps").join("default-1234");
    let leaderboard = std::fs::read_to_string(sweep_dir.join("leaderboard.csv")).unwrap();
    assert_eq!(leaderboard.lines().count(), 1 + 2);
    assert!(leaderboard.lines().nth(1).unwrap().contains("finished"));
    assert!(sweep_dir.join("run000").join("log.jsonl").is_file());
}
