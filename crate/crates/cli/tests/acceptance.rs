//! One line per acceptance criterion, written straight to stdout so it shows
//! up in `cargo test` output without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;

use stprompt::suite::{run_suite, verify_manifest, Level, Status, REPRODUCIBLE_FILES};

/// Criteria measured honestly and currently failing; see README "Known results".
const EXPECTED_RED: &[u8] = &[6];

fn stprompt(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_stprompt"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env_remove("STPROMPT_RUN_ROOT")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn cli_run(dir: &Path) -> bool {
    let tiny = [
        "--set=model.d_embed=4",
        "--set=model.d_hidden=8",
        "--set=model.d_skip=8",
        "--set=model.layers=2",
        "--set=model.kernels=2,3",
        "--set=model.topk=4",
        "--set=model.horizon=3",
        "--set=model.history=12",
    ];
    let mut pre = vec!["pretrain", "--seed", "7", "--epochs", "2"];
    pre.extend(tiny);
    stprompt(dir, &["shiftgen", "--nodes", "4", "--steps", "200", "--seed", "7"])
        && stprompt(dir, &pre)
        && stprompt(dir, &["tune", "--mode", "prompt", "--seed", "7", "--epochs", "2"])
}

/// Two CLI runs with one seed; the first differing artifact, if any.
fn cli_reproducible() -> Result<(), String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    if !cli_run(a.path()) || !cli_run(b.path()) {
        return Err("cli run failed".into());
    }
    for f in REPRODUCIBLE_FILES {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{f} differs"));
        }
    }
    Ok(())
}

#[test]
fn acceptance() {
    let mut res = run_suite(Level::Full);
    verify_manifest(&res).expect("suite covers every criterion once, in order");

    let cli = cli_reproducible();
    for c in res.checks.iter_mut().filter(|c| c.id == 11) {
        match &cli {
            Ok(()) => c.measured.push_str(";cli=identical"),
            Err(e) => {
                c.status = Status::Fail;
                c.measured.push_str(&format!(";cli={}", e.replace(' ', "_")));
            }
        }
    }

    let mut out = std::io::stdout().lock();
    for c in &res.checks {
        let _ = writeln!(out, "{c}");
    }
    let passed = res.checks.iter().filter(|c| c.status == Status::Pass).count();
    let _ = writeln!(out, "acceptance: {passed}/{} PASS", res.checks.len());
    drop(out);

    for c in &res.checks {
        if EXPECTED_RED.contains(&c.id) {
            assert_ne!(c.status, Status::Skip, "criterion {} was not measured", c.id);
        } else {
            assert_eq!(c.status, Status::Pass, "{c}");
        }
    }
}
