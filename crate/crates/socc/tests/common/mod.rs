#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Narrow network so CLI round trips finish in seconds.
pub const SMALL_MODEL: [&str; 4] = [
    "model.enc_widths=8,16,16,16",
    "model.dec_widths=16,16,8",
    "model.seg_widths=8,16,16",
    "model.se_reduction=4",
];

pub fn socc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn socc")
}

pub fn ok(args: &[&str]) -> String {
    let out = socc(args);
    assert!(
        out.status.success(),
        "socc {args:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn synth(dir: &Path, frames: usize, seed: u64, extra: &[&str]) {
    let (f, s) = (frames.to_string(), seed.to_string());
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--frames", &f, "--seed", &s];
    args.extend_from_slice(extra);
    ok(&args);
}

/// `train` arguments with the small model and every `--set` in `sets`.
pub fn train_args<'a>(data: &'a str, out: &'a str, epochs: &'a str, sets: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--data", data, "--out", out, "--epochs", epochs];
    for s in SMALL_MODEL.iter().copied().chain(sets.iter().copied()) {
        args.push("--set");
        args.push(s);
    }
    args
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
