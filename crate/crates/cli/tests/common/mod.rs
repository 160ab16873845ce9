#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bke(args: &[&str]) -> Output {
    bke_in(Path::new("."), args)
}

pub fn bke_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bke"))
        .args(args)
        .current_dir(dir)
        .env("BKE_THREADS", "1")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> Output {
    ok_in(Path::new("."), args)
}

pub fn ok_in(dir: &Path, args: &[&str]) -> Output {
    let out = bke_in(dir, args);
    assert!(
        out.status.success(),
        "bke {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// A synthetic dataset plus a short pretraining run.
pub struct Fixture {
    pub root: tempfile::TempDir,
}

impl Fixture {
    pub fn new(train_per_class: usize, test_per_class: usize, pretrain_epochs: usize) -> Self {
        let root = tempfile::tempdir().unwrap();
        let f = Fixture { root };
        ok(&[
            "synth",
            "--out",
            s(&f.data()),
            "--train-per-class",
            &train_per_class.to_string(),
            "--test-per-class",
            &test_per_class.to_string(),
        ]);
        ok(&[
            "pretrain",
            "--out",
            s(&f.path("pre")),
            "--data",
            s(&f.data()),
            "--split",
            s(&f.split()),
            "--epochs",
            &pretrain_epochs.to_string(),
            "--batch-size",
            "32",
        ]);
        f
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.path("data")
    }

    pub fn split(&self) -> PathBuf {
        self.data().join("split.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("pre").join("pretrain.bkec")
    }
}
