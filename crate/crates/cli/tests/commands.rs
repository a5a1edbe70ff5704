use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

use tactile::dsp::{self, Waveform};

fn tactile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tactile(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn reconstruct_sine_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("sine.wav");
    let samples = (0..88_200).map(|n| 0.5 * (2.0 * PI * 300.0 * n as f64 / 44_100.0).sin()).collect();
    dsp::write_wav(&input, &Waveform::new(samples, 44_100).unwrap()).unwrap();
    let output = dir.path().join("out.wav");
    let stdout = ok(&["reconstruct", "--input", p(&input), "--output", p(&output)]);
    let d: f64 = field(&stdout, "spectral_convergence").parse().unwrap();
    assert!(d < 0.05, "{d}");
    let back = dsp::read_wav(&output).unwrap();
    assert_eq!(back.sample_rate(), 44_100);
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let out = tactile(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=usage msg="), "{err}");

    let out = tactile(&["prepare", "--audio", "/nonexistent/dir", "--out", "/tmp/x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=data"));

    assert!(tactile(&["--help"]).status.success());
}

#[test]
fn evaluate_reports_and_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let mut csv = String::from("predicted,actual,subject_id,group\n");
    for k in 0..40 {
        let actual = k % 4;
        let predicted = if k % 3 == 0 { (actual + 1) % 4 } else { actual };
        csv += &format!("{predicted},{actual},{},{}\n", k % 5, if k % 2 == 0 { "real" } else { "generated" });
    }
    std::fs::write(&records, csv).unwrap();
    let reg = dir.path().join("rows.csv");
    let mut csv = String::from("c,i,acc_r,acc_g\n");
    for k in 0..30 {
        let (c, i, r) = ((k % 5) as f64, (k % 3) as f64, 0.5 + 0.013 * k as f64);
        csv += &format!("{c},{i},{r},{}\n", 0.1 * c + 0.8 * r + 0.01 * ((k * 7) % 5) as f64);
    }
    std::fs::write(&reg, csv).unwrap();
    let out = dir.path().join("report");
    let stdout = ok(&["evaluate", "--out", p(&out), "--records", p(&records), "--regression", p(&reg)]);
    assert!(stdout.contains("full interaction model"));
    for f in ["confusion_real.csv", "confusion_generated.csv", "report.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let zeros = dir.path().join("zeros.csv");
    std::fs::write(&zeros, format!("c,i,acc_r,acc_g\n{}", "0,0,0,1\n".repeat(10))).unwrap();
    let r = tactile(&["evaluate", "--out", p(&out), "--regression", p(&zeros), "--mad-k", "0"]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(tactile(&["evaluate", "--out", p(&out)]).status.code(), Some(1));
}

/// synth-corpus -> prepare -> train (twice) -> simulate (twice) -> evaluate.
#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (audio, targets) = (root.join("audio"), root.join("targets"));
    ok(&["synth-corpus", "--out", p(&audio), "--seed", "1"]);
    ok(&["synth-corpus", "--out", p(&targets), "--set", "targets", "--seed", "99"]);
    assert!(targets.join("targets.toml").is_file());

    let data = root.join("data.bin");
    let stdout = ok(&["prepare", "--audio", p(&audio), "--out", p(&data)]);
    assert!(field(&stdout, "segments").parse::<usize>().unwrap() >= 500);

    let mut hashes = Vec::new();
    for run in 0..2 {
        let ckpt = root.join(format!("m{run}.ckpt"));
        let metrics = root.join(format!("m{run}.csv"));
        let stdout = ok(&["train", "--dataset", p(&data), "--out", p(&ckpt), "--metrics", p(&metrics), "--epochs", "1", "--seed", "7"]);
        hashes.push(field(&stdout, "hash").to_owned());
        assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 2);
    }
    assert_eq!(hashes[0], hashes[1]);

    let ckpt = root.join("m0.ckpt");
    let manifest = targets.join("targets.toml");
    let mut runs = Vec::new();
    for run in 0..2 {
        let out = root.join(format!("sim{run}"));
        ok(&[
            "simulate", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--targets", p(&manifest),
            "--out", p(&out), "--sessions", "10", "--seed", "3", "--max-iters", "3",
        ]);
        let files: Vec<Vec<u8>> = (0..10).map(|i| std::fs::read(out.join(tactile_cli::trace_name(i))).unwrap()).collect();
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);

    let report = root.join("report");
    let stdout = ok(&["evaluate", "--out", p(&report), "--traces", p(&root.join("sim0"))]);
    assert!(stdout.contains("10 sessions"), "{stdout}");
}
