use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ldrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldrs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ldrs(args);
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

const NET: [&str; 8] = ["--latent-channels", "2", "--hidden", "4", "--bottleneck", "6", "--embed-dim", "4"];

#[test]
fn help_exits_zero() {
    let out = ldrs(&["restore", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--pos") && text.contains("--steps"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ldrs(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ldrs(&["restore", "--bogus"]).status.code(), Some(1));
    assert_eq!(ldrs(&[]).status.code(), Some(1));
    // missing required path
    assert_eq!(ldrs(&["synth-data"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"nonsense": true}"#).unwrap();
    assert_eq!(ldrs(&["gradcheck", "--config", p(&cfg)]).status.code(), Some(1));
    let out = ldrs(&["degrade", "--in", "a.pgm", "--out", "b.pgm", "--spec", "blur:-1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ldrs");
    let out = ldrs(&["restore", "--base", p(&missing), "--in", "x.pgm", "--out", "y.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gradcheck_passes_and_prints_config() {
    let out = ok(&["gradcheck", "--seed", "7"]);
    assert!(out.starts_with("# gradcheck resolved config"));
    assert!(out.contains("\"seed\": 7"));
    assert!(out.contains("max rel err"));
}

#[test]
fn degrade_applies_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", p(&data), "--n", "2", "--size", "32"]);
    let src = data.join("0000.pgm");
    let dst = dir.path().join("b.pgm");
    let out = ok(&["degrade", "--in", p(&src), "--out", p(&dst), "--spec", "blur:2.0+sr:4"]);
    assert!(out.contains("\"seed\": 0"));
    let a = fs::read(&src).unwrap();
    let b = fs::read(&dst).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
}

/// synth → train-base → train-lora → degrade → restore → eval, all under `root`.
fn pipeline(root: &Path) {
    let data = root.join("data");
    let held = root.join("held");
    let pairs = root.join("pairs");
    let base = root.join("base.ldrs");
    let lora = root.join("lora.ldrs");
    let (base_log, lora_log) = (root.join("base.csv"), root.join("lora.csv"));
    ok(&["synth-data", "--out", p(&data), "--n", "8", "--size", "16", "--seed", "1"]);
    ok(&["synth-data", "--out", p(&held), "--n", "3", "--size", "16", "--seed", "2"]);
    let mut args = vec!["train-base", "--data", p(&data), "--out", p(&base), "--log", p(&base_log)];
    args.extend(["--steps", "2", "--batch", "4", "--schedule-steps", "20", "--exclude-family", "disk"]);
    args.extend(NET);
    ok(&args);
    ok(&[
        "train-lora", "--base", p(&base), "--data", p(&data), "--out", p(&lora), "--log", p(&lora_log),
        "--steps", "2", "--batch", "2", "--rank", "1", "--family", "disk", "--lr", "0.01",
    ]);
    ok(&["degrade", "--in", p(&held), "--out", p(&pairs), "--spec", "blur:1.0", "--seed", "4"]);
    ok(&[
        "restore", "--base", p(&base), "--lora", p(&lora), "--in", p(&pairs), "--out", p(&pairs), "--batch",
        "--steps", "3", "--pos", "disk,high-quality", "--cfg", "1.5",
    ]);
    let eval = root.join("eval.csv");
    ok(&["eval", "--dir", p(&pairs), "--base", p(&base), "--out", p(&eval)]);
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.iter().map(|f| &f.0).collect::<Vec<_>>(), sb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in sa.iter().zip(&sb) {
        assert!(x == y, "{name} differs between identical runs");
    }
    let csv = fs::read_to_string(a.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,spec,psnr_db,ssim,pproxy,wall_ms");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("MEAN,"));
    let restored: Vec<_> = sa.iter().filter(|f| f.0.ends_with(".restored.pgm")).collect();
    assert_eq!(restored.len(), 3);
    let log = fs::read_to_string(a.path().join("base.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,reg_loss,wall_ms"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", p(&data), "--n", "6", "--size", "16"]);
    let train = |out: &Path, steps: &str, resume: Option<&Path>| {
        let mut args = vec!["train-base", "--data", p(&data), "--out", p(out), "--steps", steps, "--batch", "3"];
        args.extend(["--schedule-steps", "10"]);
        args.extend(NET);
        if let Some(r) = resume {
            args.extend(["--resume", p(r)]);
        }
        ok(&args);
    };
    let full = dir.path().join("full.ldrs");
    let half = dir.path().join("half.ldrs");
    let rest = dir.path().join("rest.ldrs");
    train(&full, "4", None);
    train(&half, "2", None);
    train(&rest, "4", Some(&half));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&rest).unwrap());
}

#[test]
fn printed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("one");
    let printed = ok(&["synth-data", "--out", p(&out1), "--n", "3", "--size", "16", "--seed", "5"]);
    let json: String = printed.lines().skip(1).take_while(|l| !l.starts_with("wrote")).collect::<Vec<_>>().join("\n");
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let out2 = dir.path().join("two");
    v["out"] = serde_json::Value::String(p(&out2).into());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, v.to_string()).unwrap();
    ok(&["synth-data", "--config", p(&cfg)]);
    for f in ["0000.pgm", "0002.pgm", "manifest.json"] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap());
    }
}
