#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaper::encoders::sha256_hex;

pub const BIN: &str = env!("CARGO_BIN_EXE_metaper");

/// A small world: two categories, two personal instances each.
pub const SMALL_SPEC: &str = r#"{"categories": 2, "instances_per_category": 2,
    "meta_instances_per_category": 6, "distractor_shots": 16}"#;

/// Training flags sized for a few seconds per run.
pub const QUICK: &[&str] = &[
    "--q",
    "16",
    "--rounds",
    "2",
    "--instances-per-cat",
    "4",
    "--distractors",
    "16",
    "--extra-instances",
    "2",
];

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// Parsed `{"error": …}` line of a failed run.
    pub fn error(&self) -> serde_json::Value {
        let line = self
            .stderr
            .lines()
            .rev()
            .find(|l| l.contains("\"error\""))
            .expect("error line on stderr");
        serde_json::from_str::<serde_json::Value>(line).unwrap()["error"].clone()
    }

    pub fn log_messages(&self) -> Vec<String> {
        self.stderr
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .filter_map(|v| v["fields"]["message"].as_str().map(str::to_string))
            .collect()
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Self {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

pub fn metaper<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    Command::new(BIN)
        .args(args)
        .env_remove("METAPER_THREADS")
        .output()
        .expect("binary runs")
        .into()
}

/// Runs and asserts success.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let r = metaper(args);
    assert_eq!(r.code, 0, "stdout:\n{}\nstderr:\n{}", r.stdout, r.stderr);
    r
}

/// Writes `spec` and synthesizes a world into `dir/world`.
pub fn synth(dir: &Path, spec: &str) -> PathBuf {
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec).unwrap();
    let world = dir.join("world");
    ok(&[
        "synth".as_ref(),
        "--spec".as_ref(),
        spec_path.as_os_str(),
        "--out-dir".as_ref(),
        world.as_os_str(),
    ]);
    world
}

pub fn file_hash(path: &Path) -> String {
    sha256_hex(&std::fs::read(path).unwrap())
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}
