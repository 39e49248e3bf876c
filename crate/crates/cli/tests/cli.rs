//! End-to-end tests of the fsn binary: every command, exit codes, file
//! outputs, and bit-exact reruns. Each test works in its own temp dir.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fsn")
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fsn_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

/// Small-but-real settings shared by the training tests.
const TINY: &[&str] = &[
    "channels=8",
    "selective_channels=4",
    "head_width=16",
    "iterations=2",
    "rois_per_image=8",
    "proposals_per_image=20",
    "width=48",
    "height=48",
];

fn gen_data(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "dataset=ds", "scenes=2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = run_in(dir, &args, &[]);
    assert!(out.status.success(), "gen-data failed: {out:?}");
}

#[test]
fn no_arguments_is_usage_error() {
    let out = Command::new(bin()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_command_is_usage_error() {
    let dir = work_dir("unknown_cmd");
    let out = run_in(&dir, &["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = work_dir("unknown_key");
    let out = run_in(&dir, &["gen-data", "dataset=ds", "no_such_key=1"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn gen_data_writes_dataset_and_reruns_identically() {
    let dir = work_dir("gen_data");
    gen_data(&dir, &[]);
    for f in ["ds/manifest.txt", "ds/annotations.txt", "ds/config.txt"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let mut args = vec!["gen-data", "dataset=ds2", "scenes=2"];
    args.extend_from_slice(TINY);
    let out = run_in(&dir, &args, &[]);
    assert!(out.status.success());
    assert_eq!(
        fs::read(dir.join("ds/annotations.txt")).unwrap(),
        fs::read(dir.join("ds2/annotations.txt")).unwrap()
    );
    assert_eq!(
        fs::read(dir.join("ds/images/scene_00000.ppm")).unwrap(),
        fs::read(dir.join("ds2/images/scene_00000.ppm")).unwrap()
    );
}

#[test]
fn train_writes_outputs_and_rerun_is_bit_exact() {
    let dir = work_dir("train");
    gen_data(&dir, &[]);
    let mut args = vec!["train", "dataset=ds", "out=run1"];
    args.extend_from_slice(TINY);
    let out = run_in(&dir, &args, &[]);
    assert!(out.status.success(), "train failed: {out:?}");
    for f in [
        "run1/checkpoint.fsn",
        "run1/loss_log.txt",
        "run1/config.txt",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    // rerun from the echoed config alone
    let out = run_in(
        &dir,
        &["train", "--config", "run1/config.txt", "out=run2"],
        &[],
    );
    assert!(out.status.success(), "rerun failed: {out:?}");
    assert_eq!(
        fs::read(dir.join("run1/loss_log.txt")).unwrap(),
        fs::read(dir.join("run2/loss_log.txt")).unwrap(),
        "loss logs differ between identical runs"
    );
    assert_eq!(
        fs::read(dir.join("run1/checkpoint.fsn")).unwrap(),
        fs::read(dir.join("run2/checkpoint.fsn")).unwrap(),
        "checkpoints differ between identical runs"
    );
}

#[test]
fn eval_reports_map_and_missing_checkpoint_fails() {
    let dir = work_dir("eval");
    gen_data(&dir, &[]);
    let mut args = vec!["train", "dataset=ds", "out=run"];
    args.extend_from_slice(TINY);
    assert!(run_in(&dir, &args, &[]).status.success());

    let out = run_in(
        &dir,
        &[
            "eval",
            "dataset=ds",
            "out=ev",
            "checkpoint=run/checkpoint.fsn",
        ],
        &[],
    );
    assert!(out.status.success(), "eval failed: {out:?}");
    let text = fs::read_to_string(dir.join("ev/eval.txt")).unwrap();
    assert!(text.contains("mAP "), "no mAP line in: {text}");

    let out = run_in(
        &dir,
        &["eval", "dataset=ds", "out=ev2", "checkpoint=missing.fsn"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn infer_prints_parseable_detections() {
    let dir = work_dir("infer");
    gen_data(&dir, &[]);
    let mut args = vec!["train", "dataset=ds", "out=run"];
    args.extend_from_slice(TINY);
    assert!(run_in(&dir, &args, &[]).status.success());

    let out = run_in(
        &dir,
        &[
            "infer",
            "image=ds/images/scene_00000.ppm",
            "checkpoint=run/checkpoint.fsn",
            "out=inf",
        ],
        &[],
    );
    assert!(out.status.success(), "infer failed: {out:?}");
    let text = fs::read_to_string(dir.join("inf/detections.txt")).unwrap();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(parts.len(), 6, "bad detection line '{line}'");
        assert!(["tall-bar", "wide-bar", "square-disk"].contains(&parts[0]));
        for p in &parts[1..] {
            p.parse::<f64>().expect("numeric field");
        }
    }
}

#[test]
fn gradcheck_command_passes_with_exit_zero() {
    let dir = work_dir("gradcheck");
    let out = run_in(&dir, &["gradcheck", "gradcheck_seeds=1", "out=gc"], &[]);
    assert_eq!(out.status.code(), Some(0), "gradcheck: {out:?}");
    let text = fs::read_to_string(dir.join("gc/gradcheck.txt")).unwrap();
    assert!(text.contains("micro-pipeline"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn ablate_emits_twelve_rows_with_provenance() {
    let dir = work_dir("ablate");
    gen_data(&dir, &[]);
    let mut args = vec![
        "ablate",
        "dataset=ds",
        "out=ab",
        "iterations=1",
        "heldout_scenes=2",
    ];
    args.extend_from_slice(TINY[..6].as_ref()); // keep width/height defaults for heldout gen
    let args: Vec<&str> = args.into_iter().chain(["width=48", "height=48"]).collect();
    let out = run_in(&dir, &args, &[]);
    assert!(out.status.success(), "ablate failed: {out:?}");
    let tsv = fs::read_to_string(dir.join("ab/ablation.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows.len(), 13, "header + 12 rows, got: {tsv}");
    assert_eq!(rows[0], "variant\tshift\tmAP\tfinal_cls\tfinal_reg\tseed");
    for (i, variant) in ["none", "sub-region", "aspect", "both"].iter().enumerate() {
        for (j, dir_name) in ["center", "outside", "random"].iter().enumerate() {
            let row = rows[1 + i * 3 + j];
            assert!(
                row.starts_with(&format!("{variant}\t{dir_name}\t")),
                "row {row} out of order"
            );
        }
    }
}

#[test]
fn fsn_seed_env_overrides_config() {
    let dir = work_dir("seed_env");
    let out = run_in(
        &dir,
        &["gen-data", "dataset=ds", "scenes=1", "seed=3"],
        &[("FSN_SEED", "7")],
    );
    assert!(out.status.success());
    let echoed = fs::read_to_string(dir.join("ds/config.txt")).unwrap();
    assert!(echoed.contains("seed=7"), "echo was: {echoed}");
}

#[test]
fn flag_overrides_beat_config_file() {
    let dir = work_dir("override");
    fs::write(dir.join("base.cfg"), "scenes=1\nseed=3\n# comment\n\n").unwrap();
    let out = run_in(
        &dir,
        &["gen-data", "--config", "base.cfg", "dataset=ds", "seed=9"],
        &[],
    );
    assert!(out.status.success(), "{out:?}");
    let echoed = fs::read_to_string(dir.join("ds/config.txt")).unwrap();
    assert!(echoed.contains("seed=9"));
    assert!(echoed.contains("scenes=1"));
}
