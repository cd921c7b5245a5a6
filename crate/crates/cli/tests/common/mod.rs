#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small 8x8-grid experiment: `facilities` adjacent blocks, a few days of
/// trips, a short round budget.
pub fn tiny_config(facilities: usize, days: u32, trips: f64, rounds: u32) -> String {
    format!(
        r#"{{
  "grid": {{
    "origin_lat": 35.0,
    "origin_lon": 139.0,
    "cell_size_km": 1.0,
    "n_rows": 8,
    "n_cols": 8,
    "slot_duration_s": 3600,
    "epoch_start": 1704067200
  }},
  "synthetic": {{ "n_facilities": {facilities}, "days": {days}, "target_trips": {trips} }},
  "fed": {{ "n_rounds": {rounds} }},
  "master_seed": 11
}}"#
    )
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), config).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with `--config config.json` from the workspace root.
    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_taxifed"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("config.json")
            .args(args)
            .output()
            .expect("binary runs")
    }

    pub fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "taxifed {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    pub fn read_string(&self, rel: &str) -> String {
        String::from_utf8(self.read(rel)).unwrap()
    }

    /// generate + prepare into `corpus/` and `prepared/`.
    pub fn prepared(&self) -> &Self {
        self.ok(&["generate", "--out", "corpus"]);
        self.ok(&["prepare", "--corpus", "corpus", "--out", "prepared"]);
        self
    }
}

pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
