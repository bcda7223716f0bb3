#![allow(dead_code)]

use std::path::{Path, PathBuf};

use stemweaver::pipeline::{BackendSpec, RunConfig};
use stemweaver::plan::InputDescriptor;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn street_input() -> InputDescriptor {
    serde_json::from_str(&std::fs::read_to_string(fixture("street/input.json")).unwrap()).unwrap()
}

pub fn street_config(out: &Path) -> RunConfig {
    let mut config = RunConfig::load(&fixture("street/config.json")).unwrap();
    config.out_dir = out.to_path_buf();
    config
}

pub fn scripted_config(script: &Path, out: &Path) -> RunConfig {
    RunConfig {
        backend: Some(BackendSpec::Scripted(script.to_path_buf())),
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

/// Relative path → bytes for every file under `dir`.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
