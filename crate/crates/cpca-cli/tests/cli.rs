//! End-to-end exercise of the `cpca` binary: the full command chain on a
//! tiny configuration, exit codes, artifact formats and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cpca")
}

fn workdir(test: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cpca_cli_{test}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Tiny but complete config: 32x32 tiles, few samples, short phases.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "data.num_classes = 4\n\
         data.height = 32\n\
         data.width = 32\n\
         data.n_source = 10\n\
         data.n_target = 10\n\
         data.n_target_test = 4\n\
         model.feature_dim = 4\n\
         model.widths = 4,4\n\
         train.seed = 3\n\
         train.pretrain.iterations = 12\n\
         train.pretrain.batch_size = 4\n\
         train.adapt.iterations = 20\n\
         train.adapt.batch_size = 4\n\
         train.selftrain.iterations = 12\n\
         train.selftrain.batch_size = 4\n\
         train.warmup_iters = 4\n",
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("failed to launch cpca")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_chain_runs_without_manual_surgery() {
    let dir = workdir("chain");
    let cfg = write_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| dir.join(s).display().to_string();

    // gen-data
    run_ok(&["gen-data", "--config", cfg, "--out", &p("data")]);
    for split in ["source", "target", "target_test"] {
        assert!(dir.join("data").join(split).join("manifest.txt").exists());
    }
    // resolved config echo round-trips byte-identically through a re-echo
    let echoed = std::fs::read_to_string(dir.join("data/config.resolved.txt")).unwrap();
    assert!(echoed.contains("train.seed = 3"));

    // pretrain
    run_ok(&[
        "pretrain",
        "--config",
        cfg,
        "--source",
        &p("data/source/manifest.txt"),
        "--out",
        &p("p1"),
    ]);
    assert!(dir.join("p1/pretrained.ckpt").exists());
    let log = std::fs::read_to_string(dir.join("p1/pretrain_log.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,m,l_seg"));
    assert_eq!(log.lines().count(), 13); // header + 12 iterations

    // init-protos
    run_ok(&[
        "init-protos",
        "--config",
        cfg,
        "--source",
        &p("data/source/manifest.txt"),
        "--ckpt",
        &p("p1/pretrained.ckpt"),
        "--out",
        &p("p1"),
    ]);

    // adapt
    run_ok(&[
        "adapt",
        "--config",
        cfg,
        "--source",
        &p("data/source/manifest.txt"),
        "--target",
        &p("data/target/manifest.txt"),
        "--ckpt",
        &p("p1/protos.ckpt"),
        "--out",
        &p("p2"),
    ]);
    let adapt_log = std::fs::read_to_string(dir.join("p2/adapt_log.csv")).unwrap();
    let first_data_line = adapt_log.lines().nth(1).unwrap();
    let m_column: f64 = first_data_line.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(m_column, 0.9, "annealing momentum must start at m0");

    // pseudo-label
    run_ok(&[
        "pseudo-label",
        "--config",
        cfg,
        "--target",
        &p("data/target/manifest.txt"),
        "--ckpt",
        &p("p2/adapted.ckpt"),
        "--out",
        &p("p2"),
    ]);
    assert!(dir.join("p2/pseudo/manifest.txt").exists());
    assert!(dir.join("p2/pseudo_summary.csv").exists());

    // self-train
    run_ok(&[
        "self-train",
        "--config",
        cfg,
        "--pseudo",
        &p("p2/pseudo/manifest.txt"),
        "--ckpt",
        &p("p2/adapted.ckpt"),
        "--out",
        &p("p3"),
    ]);
    assert!(dir.join("p3/final.ckpt").exists());

    // eval the final model
    let table = run_ok(&[
        "eval",
        "--config",
        cfg,
        "--data",
        &p("data/target_test/manifest.txt"),
        "--ckpt",
        &p("p3/final.ckpt"),
        "--name",
        "adapted",
        "--out",
        &p("eval"),
    ]);
    assert!(table.contains("adapted"));
    assert!(table.contains("mIoU"));
    let record = std::fs::read_to_string(dir.join("eval/metrics.txt")).unwrap();
    assert!(record.contains("oa = "));

    // report: table + charts
    run_ok(&[
        "report",
        "--metrics",
        &p("eval/metrics.txt"),
        "--logs",
        &p("p2/adapt_log.csv"),
        "--config",
        cfg,
        "--out",
        &p("report"),
    ]);
    assert!(dir.join("report/report_table.txt").exists());
    assert!(dir.join("report/loss_curves.png").exists());
    assert!(dir.join("report/momentum_schedule.png").exists());
}

#[test]
fn eval_on_perfect_predictions_reports_unit_accuracy() {
    let dir = workdir("perfect");
    let cfg = write_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| dir.join(s).display().to_string();
    run_ok(&["gen-data", "--config", cfg, "--out", &p("data")]);
    // ground truth as its own prediction
    let out = run_ok(&[
        "eval",
        "--config",
        cfg,
        "--data",
        &p("data/target_test/manifest.txt"),
        "--pred",
        &p("data/target_test/manifest.txt"),
        "--name",
        "oracle",
        "--out",
        &p("eval_perfect"),
    ]);
    assert!(out.contains("100.00"), "expected OA 100.00 in:\n{out}");
    let record = std::fs::read_to_string(dir.join("eval_perfect/metrics.txt")).unwrap();
    assert!(record.contains("oa = 1"));
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = workdir("badkey");
    let cfg = write_config(&dir);
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.wibble=1",
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.wibble"), "stderr: {stderr}");
}

#[test]
fn runtime_failures_exit_1() {
    let dir = workdir("runtime");
    let cfg = write_config(&dir);
    let cfg = cfg.to_str().unwrap();
    // missing manifest
    let out = run(&[
        "pretrain",
        "--config",
        cfg,
        "--source",
        dir.join("nope/manifest.txt").to_str().unwrap(),
        "--out",
        dir.join("p1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // corrupt checkpoint
    let p = |s: &str| dir.join(s).display().to_string();
    run_ok(&["gen-data", "--config", cfg, "--out", &p("data")]);
    std::fs::write(dir.join("broken.ckpt"), b"CPCA but not really").unwrap();
    let out = run(&[
        "eval",
        "--config",
        cfg,
        "--data",
        &p("data/target_test/manifest.txt"),
        "--ckpt",
        &p("broken.ckpt"),
        "--out",
        &p("eval_broken"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checkpoints_refuse_a_changed_config() {
    let dir = workdir("digest");
    let cfg = write_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| dir.join(s).display().to_string();
    run_ok(&["gen-data", "--config", cfg, "--out", &p("data")]);
    run_ok(&[
        "pretrain",
        "--config",
        cfg,
        "--source",
        &p("data/source/manifest.txt"),
        "--out",
        &p("p1"),
    ]);
    let out = run(&[
        "eval",
        "--config",
        cfg,
        "--set",
        "data.num_classes=6",
        "--data",
        &p("data/target_test/manifest.txt"),
        "--ckpt",
        &p("p1/pretrained.ckpt"),
        "--out",
        &p("eval_mismatch"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("digest"), "stderr: {stderr}");
}

#[test]
fn serial_runs_are_bit_identical() {
    let dir = workdir("serial");
    let cfg = write_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| dir.join(s).display().to_string();
    run_ok(&["--serial", "gen-data", "--config", cfg, "--out", &p("a/data")]);
    run_ok(&["--serial", "gen-data", "--config", cfg, "--out", &p("b/data")]);
    for rel in [
        "data/source/manifest.txt",
        "data/source/images/src_0000.png",
        "data/target/labels/tgt_0003.png",
    ] {
        let x = std::fs::read(dir.join("a").join(rel)).unwrap();
        let y = std::fs::read(dir.join("b").join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between serial runs");
    }

    for side in ["a", "b"] {
        run_ok(&[
            "--serial",
            "pretrain",
            "--config",
            cfg,
            "--source",
            &p(&format!("{side}/data/source/manifest.txt")),
            "--out",
            &p(&format!("{side}/p1")),
        ]);
        run_ok(&[
            "--serial",
            "eval",
            "--config",
            cfg,
            "--data",
            &p(&format!("{side}/data/target_test/manifest.txt")),
            "--ckpt",
            &p(&format!("{side}/p1/pretrained.ckpt")),
            "--out",
            &p(&format!("{side}/eval")),
        ]);
    }
    let log_a = std::fs::read(dir.join("a/p1/pretrain_log.csv")).unwrap();
    let log_b = std::fs::read(dir.join("b/p1/pretrain_log.csv")).unwrap();
    assert_eq!(log_a, log_b, "training logs differ between serial runs");
    let ckpt_a = std::fs::read(dir.join("a/p1/pretrained.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir.join("b/p1/pretrained.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between serial runs");
    let metrics_a = std::fs::read(dir.join("a/eval/metrics.txt")).unwrap();
    let metrics_b = std::fs::read(dir.join("b/eval/metrics.txt")).unwrap();
    assert_eq!(metrics_a, metrics_b, "metric records differ between serial runs");
}
