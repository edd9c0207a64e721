//! A configuration small enough for end-to-end runs inside unit-test time.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub const TINY: &str = "\
n_offline = 16
horizon = 8
diffusion_steps = 10
channels = 8
blocks = 1
embed_dim = 8
embed_hidden = 16
diffuser_steps = 150
idm_hidden = 32, 32
idm_steps = 150
dyn_hidden = 16, 16
dyn_steps = 150
ensemble_size = 3
ensemble_best = 2
value_hidden = 16, 16
value_steps = 150
bc_hidden = 16, 16
bc_steps = 150
stitch_epochs = 1
n_new = 8
eval_episodes = 3
seeds = 1
n_sweep = 2, 8
omega_sweep = 0, 1
";

pub fn tiny() -> dits::config::DitsConfig {
    dits::config::DitsConfig::parse(TINY).unwrap()
}

/// Runs the binary in `dir`; panics with its stderr on failure.
pub fn dits(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dits"))
        .current_dir(dir)
        .args(["--config", "tiny.cfg", "--seed", "3"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every CLI stage in order; returns the produced artifact paths.
pub fn run_all_stages(dir: &Path) -> Vec<PathBuf> {
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let stages: &[&[&str]] = &[
        &["gen-data", "--out", "d0.bin"],
        &["gen-data", "--tier", "expert", "--out", "expert.bin"],
        &["train-models", "--dataset", "d0.bin", "--out", "bundle.ck"],
        &["train-diffuser", "--dataset", "d0.bin", "--out", "diffuser.ck"],
        &["train-diffuser", "--dataset", "d0.bin", "--pair", "--out", "pair.ck"],
        &["generate", "--diffuser", "diffuser.ck", "--bundle", "bundle.ck", "--out", "gen.bin"],
        &["stitch", "--dataset", "d0.bin", "--diffuser", "diffuser.ck", "--bundle", "bundle.ck", "--pair", "pair.ck", "--out", "dits.bin"],
        &["train-bc", "--dataset", "dits.bin", "--out", "policy.ck"],
        &["eval", "--policy", "policy.ck", "--out", "eval.json"],
        &["analyze", "--a", "gen.bin", "--b", "expert.bin", "--marginal", "--correlation", "--out", "analysis.json"],
        &["ablate", "--kind", "no_generator", "--out", "ablation.csv"],
    ];
    for args in stages {
        dits(dir, args);
    }
    [
        "d0.bin",
        "expert.bin",
        "bundle.ck",
        "diffuser.ck",
        "pair.ck",
        "gen.bin",
        "dits.bin",
        "dits.bin.provenance.json",
        "policy.ck",
        "eval.json",
        "analysis.json",
        "ablation.csv",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}
