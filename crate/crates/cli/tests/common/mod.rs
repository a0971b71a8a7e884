#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use hgpclust::csvio;
use hgpclust_core::synth::{generate, SyntheticSpec};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hgpclust"))
}

pub fn run(args: &[&str]) -> i32 {
    let out = bin().args(args).output().expect("spawn hgpclust");
    out.status.code().expect("exit code")
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A small three-cluster benchmark written as CSV.
pub fn small_synth(dir: &Path, seed: u64) -> PathBuf {
    let spec = SyntheticSpec {
        n_clusters: 3,
        per_cluster_range: (6, 8),
        ..SyntheticSpec::with_seed(seed)
    };
    let (data, _) = generate(&spec).unwrap();
    let p = dir.join("data.csv");
    csvio::write_dataset(&data, &p).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
