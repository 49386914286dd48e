mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_kshare");
const PROTOCOL_FILES: [&str; 5] = ["checkpoint.bin", "gate_log.jsonl", "metrics.csv", "metrics.jsonl", "summary.json"];

fn kshare(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("KSHARE_OUTPUT_ROOT")
        .output()
        .unwrap()
}

/// Write a config with the given top-level prefix ahead of the small scenario.
fn config(dir: &Path, name: &str, prefix: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{prefix}\n{}", common::SMALL)).unwrap();
    path
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

#[test]
fn run_writes_outputs_and_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let cfg = config(tmp.path(), "run.toml", &format!("output_dir = {:?}", dir.to_str().unwrap()));
        let out = kshare(&["run", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("protocol runner: 3 rounds"));
        assert_eq!(listing(dir), PROTOCOL_FILES);
    }
    for f in PROTOCOL_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let inspect = kshare(&["inspect", a.join("checkpoint.bin").to_str().unwrap()], tmp.path());
    assert_eq!(code(&inspect), 0);
    assert!(String::from_utf8_lossy(&inspect.stdout).starts_with("round 3"));
}

#[test]
fn fedavg_run_has_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("f");
    let prefix = format!("runner = \"fedavg\"\noutput_dir = {:?}", dir.to_str().unwrap());
    let cfg = config(tmp.path(), "f.toml", &prefix);
    let out = kshare(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(listing(&dir), ["gate_log.jsonl", "metrics.csv", "metrics.jsonl", "summary.json"]);
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let text = format!(
        r#"seed = 1
output_dir = {:?}

[dataset]
kind = "idx"
images = "no-such-images"
labels = "no-such-labels"
"#,
        dir.to_str().unwrap()
    );
    let cfg = tmp.path().join("idx.toml");
    fs::write(&cfg, text).unwrap();
    let out = kshare(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    assert!(!dir.exists());
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = config(tmp.path(), "unknown.toml", "bogus_key = 3");
    let no_seed = tmp.path().join("noseed.toml");
    fs::write(&no_seed, "").unwrap();
    let escape = config(tmp.path(), "escape.toml", "output_dir = \"../outside\"");
    let alpha = config(tmp.path(), "alpha.toml", "[train]\nalpha = 1.5");
    for (path, needle) in [(&unknown, "bogus_key"), (&no_seed, "seed missing"), (&escape, "output_dir"), (&alpha, "alpha")] {
        for cmd in ["run", "validate"] {
            let out = kshare(&[cmd, path.to_str().unwrap()], tmp.path());
            assert_eq!(code(&out), 1, "{cmd} {}", path.display());
            let err = String::from_utf8_lossy(&out.stderr);
            assert!(err.contains(needle), "{err}");
        }
    }
    assert!(!tmp.path().join("out").exists());
    assert_eq!(code(&kshare(&["validate", "missing.toml"], tmp.path())), 1);
}

#[test]
fn validate_accepts_shipped_config() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs_label_limit.toml");
    let out = kshare(&["validate", root.to_str().unwrap()], Path::new(env!("CARGO_MANIFEST_DIR")));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).ends_with(": ok\n"));
}

#[test]
fn output_root_prefixes_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let cfg = config(tmp.path(), "rel.toml", "runner = \"single\"\noutput_dir = \"runs/one\"");
    let out = Command::new(BIN)
        .args(["run", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("KSHARE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("runs/one/summary.json").exists());
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn inspect_rejects_bad_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&kshare(&["inspect", junk.to_str().unwrap()], tmp.path())), 2);
    assert_eq!(code(&kshare(&["inspect", "absent.bin"], tmp.path())), 2);
}
