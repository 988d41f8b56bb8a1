use std::path::Path;
use std::process::{Command, Output};

use mcfr_cli::cli_command;
use serde_json::Value;

fn mcfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfr"))
        .args(args)
        .env("MCFR_THREADS", "1")
        .output()
        .expect("spawn mcfr")
}

fn ok(args: &[&str]) -> Value {
    let out = mcfr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{args:?} printed non-JSON {text:?}: {e}"))
}

fn fail(args: &[&str]) -> (i32, Value) {
    let out = mcfr(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let text = String::from_utf8(out.stderr).unwrap();
    let line = text.lines().last().unwrap_or_default();
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_argument_is_documented() {
    let mut cmd = cli_command();
    cmd.build();
    for sub in cmd.get_subcommands_mut() {
        let name = sub.get_name().to_string();
        assert!(sub.get_about().is_some(), "{name} has no about");
        let help = sub.render_help().to_string();
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{name} --{id} has no help");
            let long = arg.get_long().unwrap();
            assert!(help.contains(&format!("--{long}")), "{name} help omits --{long}");
        }
    }
}

#[test]
fn synth_simulate_stack_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let v = ok(&["synth", "--out", s(&seq), "--frames", "6", "--size", "40", "32", "--seed", "2"]);
    assert_eq!(v["frames"], 6);
    assert!(seq.join("groundtruth.txt").exists());

    let events = seq.join("events.csv");
    let v = ok(&["simulate", "--frames", s(&seq), "--out", s(&events)]);
    let n = v["events"].as_u64().unwrap();
    assert!(n > 0);
    let rows = std::fs::read_to_string(&events).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows as u64, n);

    let stacked = dir.path().join("w.bin");
    let v = ok(&["stack", "--events", s(&events), "--window", "0", "10000000", "--out", s(&stacked)]);
    assert_eq!(v["events"].as_u64().unwrap(), n);
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(40), Some(32)));
    assert!(stacked.metadata().unwrap().len() > 0);

    let dark = dir.path().join("dark");
    ok(&["perturb", "--frames", s(&seq), "--out", s(&dark), "--mode", "under", "--seed", "1"]);
    assert_eq!(
        std::fs::read(dark.join("groundtruth.txt")).unwrap(),
        std::fs::read(seq.join("groundtruth.txt")).unwrap()
    );
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--frames", "4", "--size", "32", "32", "--motion", "sine", "--color", "--seed", "5"]);
    }
    for f in ["000000.ppm", "000003.ppm", "groundtruth.txt", "timestamps.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn track_with_ablation_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth", "--out", s(&seq), "--frames", "5", "--size", "40", "40"]);
    ok(&["simulate", "--frames", s(&seq), "--out", s(&seq.join("events.csv"))]);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"tracker": {"n_candidates": 32, "init_iters": 5}}"#).unwrap();

    let pred = dir.path().join("pred.txt");
    let report = dir.path().join("report.json");
    let full = ok(&["track", "--config", s(&cfg), "--seq", s(&seq), "--out", s(&pred)]);
    let v = ok(&[
        "track", "--config", s(&cfg), "--seq", s(&seq), "--out", s(&pred), "--ablate", "no-uee", "--report",
        s(&report),
    ]);
    assert_eq!(v["frames"], 5);
    assert_ne!(v["fingerprint"], full["fingerprint"]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["config_fingerprint"], v["fingerprint"]);
    let lines: Vec<_> = std::fs::read_to_string(&pred).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0].split(',').count(), 5);

    let gt = seq.join("groundtruth.txt");
    let e = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--metric", "prsr"]);
    assert_eq!(e["frames"], 5);
    // the first frame is the ground truth itself
    assert!(e["sr_curve"][0].as_f64().unwrap() >= 0.2);
}

#[test]
fn apar_takes_rounds_times_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    std::fs::write(&gt, "0,0,10,10\n1,1,10,10\n2,2,10,10\n").unwrap();
    let perfect = dir.path().join("p.txt");
    std::fs::copy(&gt, &perfect).unwrap();
    let p = s(&perfect);
    let v = ok(&["eval", "--pred", p, p, p, p, p, "--gt", s(&gt), "--metric", "apar", "--rounds", "5"]);
    assert_eq!((v["rounds"].as_u64(), v["ap"].as_f64(), v["ar"].as_f64()), (Some(5), Some(1.0), Some(1.0)), "{v}");

    let curves = dir.path().join("curves.csv");
    let out = dir.path().join("report.json");
    ok_quiet(&["eval", "--pred", p, p, "--gt", s(&gt), "--metric", "apar", "--rounds", "2", "--out", s(&out), "--curves", s(&curves)]);
    assert!(out.exists() && curves.exists());

    let (code, e) = fail(&["eval", "--pred", p, p, "--gt", s(&gt), "--metric", "apar"]);
    assert_eq!((code, e["error"].as_str()), (1, Some("invalid")));
}

fn ok_quiet(args: &[&str]) {
    let out = mcfr(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn errors_are_single_json_lines() {
    let (code, e) = fail(&["track", "--frobnicate"]);
    assert_eq!((code, e["error"].as_str()), (2, Some("usage")));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let (code, e) = fail(&["stack", "--events", s(&missing), "--window", "0", "1", "--out", s(&missing)]);
    assert_eq!((code, e["error"].as_str()), (1, Some("io")));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tracker": {"n_candidate": 3}}"#).unwrap();
    let (_, e) = fail(&["train", "--data", s(dir.path()), "--config", s(&bad), "--out", s(&missing)]);
    assert_eq!(e["error"], "json");
    assert!(e["message"].as_str().unwrap().contains("n_candidate"));
}

#[test]
fn gradcheck_passes() {
    let v = ok(&["gradcheck", "--seeds", "1"]);
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn help_and_version_exit_zero() {
    assert!(mcfr(&["--help"]).status.success());
    assert!(mcfr(&["--version"]).status.success());
}

#[test]
fn train_then_track_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let seqs: Vec<_> = (0..2).map(|i| dir.path().join(format!("seq{i}"))).collect();
    for (i, seq) in seqs.iter().enumerate() {
        let seed = i.to_string();
        ok(&["synth", "--out", s(seq), "--frames", "4", "--size", "40", "40", "--seed", &seed]);
        ok(&["simulate", "--frames", s(seq), "--out", s(&seq.join("events.csv"))]);
    }
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"training": {"iterations": 2, "frames_per_batch": 2, "samples_per_frame": [4, 8]},
            "tracker": {"n_candidates": 16, "init_iters": 2}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let v = ok(&["train", "--data", s(&seqs[0]), s(&seqs[1]), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!((v["domains"].as_u64(), v["iterations"].as_u64()), (Some(2), Some(2)));

    let pred = dir.path().join("pred.txt");
    let t = ok(&[
        "track", "--model", s(&ckpt), "--config", s(&cfg), "--seq", s(&seqs[1]), "--out", s(&pred), "--init",
        "10,10,8,8", "--ablate", "no-cfe",
    ]);
    assert_eq!(t["frames"], 4);
    assert_ne!(t["fingerprint"], v["fingerprint"]);
}
