//! End-to-end checks of the `modnet` binary: exit codes, artifacts, translation from stdin.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn modnet(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_modnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    if let Some(text) = stdin {
        child.stdin.take().unwrap().write_all(text.as_bytes()).unwrap();
    }
    drop(child.stdin.take());
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    let text = format!(
        "run.name = cli\nmodel.kind = m2\nmodel.preset = tiny\nmodel.languages = aa bb cc\n\
         synth.rows = 60\nsynth.valid_rows = 12\nsynth.test_rows = 12\nsynth.concepts = 12\nsynth.max_len = 6\n\
         train.budget = 64\ntrain.max_epochs = 1\ntrain.warmup = 10\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = modnet(&["run"], None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.learning_rate = 0.1\n");
    let o = modnet(&["run", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
}

#[test]
fn unreadable_config_is_an_io_error() {
    let o = modnet(&["run", "--config", "/nonexistent/exp.cfg"], None);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn run_translate_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    let common = ["--config", cfg.as_str(), "--out", out_s.as_str(), "--deterministic"];

    let o = modnet(&[&["run"], &common[..]].concat(), None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("average BLEU"));
    for f in ["manifest.json", "metrics.jsonl", "matrix.txt", "checkpoints/best.ckpt", "config.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let o = modnet(&[&["translate", "--direction", "aa-bb"], &common[..]].concat(), Some("aa_0 aa_1\naa_2\n"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = modnet(&[&["zero-shot"], &common[..]].concat(), None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("zero-shot").join("manifest.json").is_file());

    let o = modnet(&["report", "--runs", &out_s], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains("m2"));
    assert!(table.lines().last().unwrap().starts_with("Avg"));

    let o = modnet(&[&["translate", "--direction", "aa-zz"], &common[..]].concat(), Some("aa_0\n"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let ckpt = out.join("checkpoints/best.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    let broken = tmp.path().join("broken.ckpt");
    std::fs::write(&broken, bytes).unwrap();
    let o = modnet(&[&["evaluate", "--checkpoint", broken.to_str().unwrap()], &common[..]].concat(), None);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
