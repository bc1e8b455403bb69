use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set=model.d_embed=4",
    "--set=model.d_hidden=8",
    "--set=model.d_skip=8",
    "--set=model.layers=2",
    "--set=model.kernels=2,3",
    "--set=model.topk=4",
    "--set=model.horizon=3",
    "--set=model.history=12",
    "--set=train.batch=8",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stprompt"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env_remove("STPROMPT_RUN_ROOT")
        .output()
        .expect("spawn stprompt")
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    let out = run(dir, args);
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn with_tiny<'a>(base: &[&'a str]) -> Vec<&'a str> {
    base.iter().copied().chain(TINY.iter().copied()).collect()
}

fn shiftgen(dir: &Path) {
    assert_eq!(code(dir, &["shiftgen", "--nodes", "5", "--steps", "240", "--seed", "3", "--shift", "lag:2"]), 0);
}

fn pretrain_and_prompt(dir: &Path) {
    shiftgen(dir);
    assert_eq!(code(dir, &with_tiny(&["pretrain", "--seed", "1", "--epochs", "3", "--optimizer", "adam", "--lr", "0.005"])), 0);
    assert_eq!(code(dir, &["tune", "--mode", "prompt", "--seed", "1", "--epochs", "3"]), 0);
}

#[test]
fn full_workflow_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pretrain_and_prompt(d);
    assert_eq!(code(d, &["tune", "--mode", "finetune", "--seed", "1", "--epochs", "2"]), 0);
    assert_eq!(code(d, &["tune", "--mode", "scratch", "--seed", "1", "--epochs", "2"]), 0);
    for m in ["frozen", "prompt", "finetune", "scratch"] {
        assert_eq!(code(d, &["eval", "--model", m, "--split", "tst"]), 0, "{m}");
        assert!(d.join(format!("eval-{m}-tst.csv")).exists());
    }
    assert_eq!(code(d, &["predict", "--model", "prompt"]), 0);
    let pred = std::fs::read_to_string(d.join("predictions-prompt.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + 5 * 3);

    let out = run(d, &["inspect", "prompt"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ratio="), "{text}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    shiftgen(d);
    assert_eq!(code(d, &["pretrain", "--seed", "1", "--set", "model.bogus=3"]), 2);
    assert_eq!(code(d, &["pretrain", "--seed", "1", "--set", "train.lr=-1"]), 2);
    assert_eq!(code(d, &["shiftgen", "--nodes", "3", "--steps", "50", "--seed", "1", "--shift", "warp:2"]), 2);

    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "model.layers = 2\nmodel.layers = 3\n").unwrap();
    let out = run(d, &["pretrain", "--seed", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error code=2 kind=config"), "{err}");
}

#[test]
fn missing_data_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["pretrain", "--seed", "1"]), 3);
    assert_eq!(code(d, &["tune", "--mode", "prompt", "--seed", "1"]), 3);
}

#[test]
fn tampered_backbone_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pretrain_and_prompt(d);
    std::fs::write(d.join("frozen_digest.txt"), format!("{}\n", "0".repeat(64))).unwrap();
    let out = run(d, &["tune", "--mode", "prompt", "--seed", "1", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=contract"));
    assert_eq!(code(d, &["eval", "--model", "prompt"]), 4);
}

const REPRODUCIBLE: &[&str] = &["pretrain.ckpt", "prompt.ckpt", "frozen_digest.txt", "metrics.csv"];

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pretrain_and_prompt(a.path());
    pretrain_and_prompt(b.path());
    for f in REPRODUCIBLE {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_snapshot_reproduces_pretraining() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pretrain_and_prompt(a.path());
    shiftgen(b.path());
    let snap = a.path().join("config.pretrain.txt");
    assert_eq!(code(b.path(), &["pretrain", "--seed", "1", "--config", snap.to_str().unwrap()]), 0);
    for f in ["pretrain.ckpt", "frozen_digest.txt", "config.pretrain.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ingest_round_trips_readings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut csv = String::from("timestamp,sensor_id,value\n");
    for t in 0..40 {
        for s in 0..3 {
            if (t, s) == (7, 1) {
                continue;
            }
            csv.push_str(&format!("{t},s{s},{}\n", (t as f64 * 0.3).sin() + s as f64));
        }
    }
    let readings = d.join("raw.csv");
    std::fs::write(&readings, csv).unwrap();
    let edges = d.join("edges.csv");
    std::fs::write(&edges, "src,dst,distance\ns0,s1,0.2\ns1,s2,0.3\n").unwrap();
    let out = d.join("run");
    assert_eq!(
        code(&out, &["ingest", "--readings", readings.to_str().unwrap(), "--edges", edges.to_str().unwrap()]),
        0
    );
    let report = std::fs::read_to_string(out.join("ingest_report.txt")).unwrap();
    assert!(report.contains("sensors=3 steps=40 features=1 imputed=1"), "{report}");
    let series = std::fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 3 * 40);
}

#[test]
fn bench_writes_ratio_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let arms = ["prompt", "finetune", "scratch"];
    assert_eq!(code(d, &["bench", "--scales", "10,100", "--seeds", "3", "--footprint", "--parallel"]), 0);
    let ratios = std::fs::read_to_string(d.join("bench_ratios.csv")).unwrap();
    assert_eq!(ratios.lines().count(), 1 + 2 * 3 * arms.len(), "{ratios}");
    let records = std::fs::read_to_string(d.join("bench_records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2 * 3 * arms.len());
    let meta = std::fs::read_to_string(d.join("bench_meta.txt")).unwrap();
    assert!(meta.contains("fair_batches=true"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gradcheck", "--points", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.ends_with("status=PASS")));
    assert!(text.lines().any(|l| l.starts_with("model_param=")));
}
