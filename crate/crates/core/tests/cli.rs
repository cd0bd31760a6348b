use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn milab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milab"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const SMALL_DATA: &str =
    r#"{"m": 6, "train_bags": 12, "val_bags": 8, "test_bags": 8, "bag_size": 8}"#;
const SMALL_TRAIN: &str = r#"{
    "pretrain_epochs": 2, "pretrain_steps_per_epoch": 2, "pretrain_batch": 16,
    "finetune_epochs": 4, "finetune_steps_per_epoch": 2, "refresh_period": 2,
    "batch": {"n_anchors": 8, "n_same": 2, "n_diff": 2}, "ce_batch": 16,
    "encoder": {"embed": 4, "proj": 3, "hidden": [8], "projection_hidden": []},
    "aggregator": {"kind": "ds_mil", "epochs": 3, "lr": 0.001, "decay_every": 2}
}"#;

/// A temp dir holding small configs and a synthesized dataset.
fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.json"), SMALL_DATA).unwrap();
    fs::write(dir.path().join("train.json"), SMALL_TRAIN).unwrap();
    let out = milab(&[
        "synth",
        "--config",
        &s(&dir.path().join("data.json")),
        "--seed",
        "1",
        "--out",
        &s(&dir.path().join("ds")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn train(dir: &Path, mode: &str, out: &str, init: Option<&Path>) -> Output {
    let (ds, cfg, out) = (
        s(&dir.join("ds")),
        s(&dir.join("train.json")),
        s(&dir.join(out)),
    );
    let mut args = vec![
        "--threads",
        "1",
        "train",
        "--mode",
        mode,
        "--dataset",
        &ds,
        "--config",
        &cfg,
        "--seed",
        "2",
        "--out",
        &out,
    ];
    let init = init.map(s);
    if let Some(i) = &init {
        args.extend(["--init", i.as_str()]);
    }
    milab(&args)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&milab(&[])), 2);
    assert_eq!(code(&milab(&["frobnicate"])), 2);
    assert_eq!(
        code(&milab(&[
            "train",
            "--mode",
            "nonsense",
            "--dataset",
            "x",
            "--out",
            "y"
        ])),
        2
    );
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&milab(&["--help"])), 0);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"witness_rate": "lots"}"#).unwrap();
    assert_eq!(
        code(&milab(&[
            "synth",
            "--config",
            &s(&cfg),
            "--out",
            &s(&dir.path().join("d"))
        ])),
        2
    );
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(
        code(&milab(&[
            "synth",
            "--config",
            &s(&cfg),
            "--out",
            &s(&dir.path().join("d"))
        ])),
        2
    );
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = setup();
    let out = milab(&[
        "train",
        "--mode",
        "pretrain",
        "--dataset",
        &s(&dir.path().join("absent")),
        "--out",
        &s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(code(&train(dir.path(), "its2clr", "r", None)), 3);
    assert_eq!(
        code(&train(
            dir.path(),
            "its2clr",
            "r",
            Some(&dir.path().join("nope.ckpt"))
        )),
        3
    );
    let plot = milab(&[
        "plot",
        &s(&dir.path().join("absent_run")),
        "--out",
        &s(&dir.path().join("p.svg")),
    ]);
    assert_eq!(code(&plot), 2);
}

#[test]
fn synth_is_deterministic_and_leaves_no_staging_dir() {
    let dir = setup();
    let again = dir.path().join("ds2");
    let out = milab(&[
        "synth",
        "--config",
        &s(&dir.path().join("data.json")),
        "--seed",
        "1",
        "--out",
        &s(&again),
    ]);
    assert_eq!(code(&out), 0);
    for f in ["features.milf", "manifest.json"] {
        assert_eq!(
            fs::read(dir.path().join("ds").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train witness rate"));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(code(&train(p, "pretrain", "pre", None)), 0);
    assert!(p.join("pre/pretrain_log.csv").exists());
    let init = p.join("pre/encoder.ckpt");
    for (mode, run) in [
        ("its2clr", "a"),
        ("ce-iter", "c"),
        ("gt", "g"),
        ("e2e", "e"),
        ("agg-only", "o"),
    ] {
        let out = train(p, mode, run, Some(&init));
        assert_eq!(
            code(&out),
            0,
            "{mode}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        for f in [
            "curves.csv",
            "report.csv",
            "rounds.csv",
            "encoder.ckpt",
            "aggregator.ckpt",
            "manifest.json",
            "config.json",
        ] {
            assert!(p.join(run).join(f).exists(), "{mode} missing {f}");
        }
    }
    assert!(p.join("a/pseudo_labels.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["threads"], 1);

    let eval_out = p.join("eval.csv");
    let out = milab(&[
        "eval",
        "--run",
        &s(&p.join("a")),
        "--dataset",
        &s(&p.join("ds")),
        "--config",
        &s(&p.join("train.json")),
        "--aggregators",
        "max,ds_mil",
        "--retrains",
        "2",
        "--linear-probe",
        "--out",
        &s(&eval_out),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&eval_out).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");

    let bad = milab(&[
        "eval",
        "--run",
        &s(&p.join("a")),
        "--dataset",
        &s(&p.join("ds")),
        "--aggregators",
        "median",
        "--out",
        &s(&eval_out),
    ]);
    assert_eq!(code(&bad), 2);

    let svg = p.join("curves.svg");
    let out = milab(&[
        "plot",
        &s(&p.join("a")),
        &s(&p.join("c")),
        "--out",
        &s(&svg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    assert!(svg.with_extension("tsv").exists());
}

#[test]
fn its2clr_runs_are_byte_identical() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(code(&train(p, "pretrain", "pre", None)), 0);
    let init = p.join("pre/encoder.ckpt");
    assert_eq!(code(&train(p, "its2clr", "a", Some(&init))), 0);
    assert_eq!(code(&train(p, "its2clr", "b", Some(&init))), 0);
    for f in [
        "curves.csv",
        "encoder.ckpt",
        "aggregator.ckpt",
        "pseudo_labels.csv",
        "rounds.csv",
    ] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
