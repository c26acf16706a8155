use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--embed-dim",
    "16",
    "--layers",
    "1",
    "--heads",
    "2",
    "--ff-dim",
    "32",
    "--max-len",
    "40",
    "--stage1-epochs",
    "1",
    "--stage2-epochs",
    "2",
    "--batch-size",
    "16",
    "--learning-rate",
    "0.001",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastlogad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        "7",
        "--train",
        "160",
        "--val",
        "40",
        "--test-normal",
        "60",
        "--test-anomaly",
        "20",
    ]);
}

#[test]
fn synth_then_pipeline_writes_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d);
    assert!(d.join("sequences.tsv").exists());
    assert!(d.join("synth.json").exists());
    let mut args = vec!["pipeline", "--data", p(&d), "--generator", "mlm"];
    args.extend_from_slice(TINY);
    ok(&args);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/eval_report.json")).unwrap())
            .unwrap();
    assert!(report["f1"].is_number());
    assert_eq!(report["config"]["train"]["generator"], "mlm");
    assert_eq!(report["test_sequences"], 80);
    for f in ["verdicts.csv", "train_report.csv"] {
        let text = std::fs::read_to_string(d.join("run").join(f)).unwrap();
        assert!(text.starts_with("# config: {"), "{f} lacks provenance");
    }
}

#[test]
fn pipeline_rerun_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let mut args = vec!["pipeline", "--data", p(&d), "--out", p(&out), "--seed", "3"];
        args.extend_from_slice(TINY);
        ok(&args);
        reports.push(std::fs::read(out.join("eval_report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn step_by_step_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let d = t.join("d");
    synth(&d);
    let (split, model) = (t.join("split"), t.join("model"));
    ok(&["build-vocab", "--input", p(&d), "--out", p(&split)]);
    let mut args = vec![
        "train",
        "--data",
        p(&split),
        "--out",
        p(&model),
        "--generator",
        "random",
        "--rtd",
        "off",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(t.join("model/discriminator.ckpt").exists());
    assert!(!t.join("model/generator.ckpt").exists());
    let summary = std::fs::read_to_string(t.join("model/train_summary.json")).unwrap();
    assert!(summary.contains("\"rtd\": false"));

    ok(&[
        "calibrate",
        "--model",
        p(&t.join("model")),
        "--input",
        p(&t.join("split/val.tsv")),
        "--out",
        p(&t.join("cal")),
    ]);
    ok(&[
        "detect",
        "--model",
        p(&t.join("model")),
        "--input",
        p(&t.join("split/test.tsv")),
        "--threshold",
        p(&t.join("cal/threshold.json")),
        "--out",
        p(&t.join("det")),
    ]);
    let stdout = ok(&[
        "eval",
        "--verdicts",
        p(&t.join("det/verdicts.csv")),
        "--labels",
        p(&t.join("split/test.tsv")),
        "--threshold",
        p(&t.join("cal/threshold.json")),
        "--out",
        p(&t.join("eval")),
    ]);
    assert!(stdout.contains("F1"));
    assert!(t.join("eval/eval_report.json").exists());

    let stdout = ok(&[
        "bench",
        "--checkpoint",
        p(&t.join("model/discriminator.ckpt")),
        "--batch",
        "64",
    ]);
    assert!(stdout.contains("Avg (ms):"), "{stdout}");
}

#[test]
fn raw_log_parse_and_group() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let log = t.join("bgl.log");
    let mut text = String::new();
    for i in 0..30 {
        let flag = if i == 7 { "APPINFO" } else { "-" };
        let ts = 1117838570 + i * 20;
        text.push_str(&format!(
            "{flag} {ts} 2005.06.03 R02-M1-N0-C:J12-U11 2005-06-03-15.42.50.363779 R02-M1-N0-C:J12-U11 RAS KERNEL INFO instruction cache parity error corrected {i}\n"
        ));
    }
    std::fs::write(&log, text).unwrap();
    let stdout = ok(&[
        "parse",
        "--input",
        p(&log),
        "--dataset",
        "bgl",
        "--out",
        p(&t.join("parsed")),
    ]);
    assert!(stdout.contains("30 lines"), "{stdout}");
    ok(&[
        "group",
        "--input",
        p(&t.join("parsed")),
        "--dataset",
        "bgl",
        "--window-seconds",
        "120",
        "--step-seconds",
        "120",
        "--out",
        p(&t.join("grouped")),
    ]);
    let seqs = std::fs::read_to_string(t.join("grouped/sequences.tsv")).unwrap();
    assert_eq!(seqs.lines().count(), 5);
    assert_eq!(
        seqs.lines()
            .filter(|l| l.split('\t').nth(1) == Some("1"))
            .count(),
        1
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let d = t.join("d");
    synth(&d);
    let cfg = t.join("cfg.toml");
    std::fs::write(
        &cfg,
        "quantile = 0.95\n\n[train]\nseed = 11\nmask_ratio = 0.25\n",
    )
    .unwrap();
    let run_dir = t.join("run");
    let mut args = vec![
        "pipeline",
        "--config",
        p(&cfg),
        "--data",
        p(&d),
        "--out",
        p(&run_dir),
        "--mask-ratio",
        "0.4",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let echoed = std::fs::read_to_string(t.join("run/config.toml")).unwrap();
    assert!(echoed.contains("quantile = 0.95"), "{echoed}");
    assert!(echoed.contains("seed = 11"));
    assert!(echoed.contains("mask_ratio = 0.4"));
}

#[test]
fn mask_ratio_sweep_writes_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d);
    let out = tmp.path().join("sweep");
    let mut args = vec![
        "pipeline",
        "--data",
        p(&d),
        "--out",
        p(&out),
        "--mask-ratio-sweep",
        "0:0.5:0.5",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "mask_ratio,f1,auc,aupr");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("0.5,"));
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();

    let out = run(&["pipeline", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[usage]: "));

    let out = run(&["train", "--data", p(&t.join("missing")), "--out", p(t)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error[data]: "));

    let d = t.join("d");
    synth(&d);
    let out = run(&[
        "pipeline",
        "--data",
        p(&d),
        "--embed-dim",
        "10",
        "--heads",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let nan_dir = t.join("nan");
    let mut args = vec!["pipeline", "--data", p(&d), "--out", p(&nan_dir)];
    args.extend_from_slice(&TINY[..TINY.len() - 2]);
    args.extend_from_slice(&["--learning-rate", "1e38", "--clip-norm", "0"]);
    let out = run(&args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(4), "{err}");
    assert!(err.lines().last().unwrap().starts_with("error[numeric]: "));
}

#[test]
fn help_names_subcommand_flags() {
    let help = ok(&["pipeline", "--help"]);
    for flag in [
        "--generator",
        "--rtd",
        "--mask-ratio",
        "--mask-ratio-sweep",
        "--seed",
        "--threads",
        "--config",
        "--out",
    ] {
        assert!(help.contains(flag), "missing {flag}");
    }
    let help = ok(&["bench", "--help"]);
    for flag in ["--checkpoint", "--batch", "--repeats", "--with-generator"] {
        assert!(help.contains(flag), "missing {flag}");
    }
}
