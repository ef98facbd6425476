//! The command-line tool, driven as a subprocess.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{SMALL_CONFIG, SMALL_SCENE};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stall-sentinel"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cli(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = cli(args, cwd);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// A temp dir holding the rendered small scene and its config.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.scene"), SMALL_SCENE).unwrap();
    fs::write(tmp.path().join("small.conf"), SMALL_CONFIG).unwrap();
    ok(&["generate", "small.scene", "--out", "small"], tmp.path());
    tmp
}

#[test]
fn generate_run_eval_round_trip() {
    let tmp = workspace();
    let p = tmp.path();
    for f in [
        "manifest.txt",
        "detections.csv",
        "mask.pgm",
        "ground_truth.txt",
        "frames/000000.pgm",
    ] {
        assert!(p.join("small").join(f).exists(), "missing {f}");
    }
    let stdout = ok(
        &[
            "run",
            "small",
            "--config",
            "small.conf",
            "--out",
            "out",
            "--export-series",
            "--backgrounds",
        ],
        p,
    );
    assert!(stdout.contains("1 predicted events"), "{stdout}");
    assert_eq!(
        fs::read_to_string(p.join("out/predictions.txt")).unwrap().trim(),
        "small 200"
    );
    let series = fs::read_to_string(p.join("out/series_small_0.csv")).unwrap();
    assert!(series.lines().count() > 10);
    assert!(fs::read_dir(p.join("out/backgrounds/small")).unwrap().count() > 0);

    let report = ok(
        &[
            "eval",
            "--preds",
            "out/predictions.txt",
            "--gt",
            "small/ground_truth.txt",
            "--out",
            "eval",
        ],
        p,
    );
    assert!(report.contains("F1     1.0000"), "{report}");
    assert_eq!(fs::read_to_string(p.join("eval/report.txt")).unwrap(), report);
}

#[test]
fn calibrate_then_sweep_gives_a_curve() {
    let tmp = workspace();
    let p = tmp.path();
    fs::write(p.join("seq.conf"), format!("{SMALL_CONFIG}alpha_sig = 0.25\n")).unwrap();
    let stdout = ok(&["calibrate", "small", "--config", "seq.conf", "--out", "cal.txt"], p);
    assert!(stdout.starts_with("gamma "), "{stdout}");
    ok(
        &[
            "run",
            "small",
            "--config",
            "seq.conf",
            "--out",
            "seq",
            "--sequential",
            "--calibration",
            "cal.txt",
            "--sweep",
            "h=0.5,1,2",
        ],
        p,
    );
    for h in ["0.5", "1", "2"] {
        assert!(p.join(format!("seq/predictions_h{h}.txt")).exists());
    }
    let report = ok(
        &[
            "eval",
            "--preds",
            "seq/predictions_h{h}.txt",
            "--gt",
            "small/ground_truth.txt",
            "--sweep",
            "h=0.5,1,2",
            "--config",
            "small.conf",
            "--out",
            "curve",
        ],
        p,
    );
    assert!(report.contains("APD "), "{report}");
    let csv = fs::read_to_string(p.join("curve/curve.csv")).unwrap();
    assert!(csv.starts_with("alpha,precision\n"));
}

#[test]
fn calibrate_from_a_score_file() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let scores: String = (1..=100).map(|i| format!("{}\n", i as f64 / 100.0)).collect();
    fs::write(p.join("scores.txt"), scores).unwrap();
    ok(&["calibrate", "--scores", "scores.txt", "--out", "cal.txt"], p);
    let cal = stall_sentinel::sequential::Calibration::load(&p.join("cal.txt")).unwrap();
    assert_eq!((cal.norm_min, cal.norm_max), (0.01, 1.0));
    assert!(cal.gamma > 0.9 && cal.gamma < 1.0, "{cal:?}");
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("gt.txt"), "v 10\n").unwrap();
    fs::write(p.join("preds.txt"), "v 12\n").unwrap();
    for (text, field) in [
        ("learning_rate = 1.5\n", "learning_rate"),
        ("no_such_key = 1\n", "no_such_key"),
        ("stride = ten\n", "stride"),
        ("savgol_window = 4\n", "savgol_window"),
    ] {
        fs::write(p.join("bad.conf"), text).unwrap();
        let stderr = fails(
            &["eval", "--preds", "preds.txt", "--gt", "gt.txt", "--config", "bad.conf"],
            p,
        );
        assert!(stderr.contains(&format!("`{field}`")), "{text}: {stderr}");
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = workspace();
    let p = tmp.path();
    let stderr = fails(&["run", "missing", "--out", "out"], p);
    assert!(stderr.starts_with("error: ") && stderr.contains("missing"), "{stderr}");
    let stderr = fails(&["run", "small", "--out", "out", "--sweep", "h=1"], p);
    assert!(stderr.contains("--sweep needs --sequential"), "{stderr}");
    let stderr = fails(&["run", "small", "--out", "out", "--sequential"], p);
    assert!(stderr.contains("--calibration"), "{stderr}");
    let stderr = fails(
        &[
            "eval",
            "--preds",
            "p.txt",
            "--gt",
            "small/ground_truth.txt",
            "--sweep",
            "h=-1",
        ],
        p,
    );
    assert!(stderr.contains("not a positive number"), "{stderr}");
    fs::write(p.join("broken.scene"), "width = 100\nstall = 1,2,3\n").unwrap();
    let stderr = fails(&["generate", "broken.scene", "--out", "broken"], p);
    assert!(stderr.contains("broken.scene:2"), "{stderr}");
}
