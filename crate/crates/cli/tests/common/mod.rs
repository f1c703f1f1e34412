#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small scenes and a short schedule: the whole pipeline runs in a few seconds.
pub const SMALL: &str = "\
val_modulus = 5
image_width = 64
image_height = 32
superpixels = 16
epochs = 3
em_min_iterations = 1
em_max_iterations = 2
";

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

pub fn weaklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaklab")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = weaklab(args);
    assert!(out.status.success(), "weaklab {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// synth 0..4 -> label -> superpixel -> em -> eval under `root`.
pub fn run_pipeline(root: &Path) {
    let cfg = write_config(root);
    let c = cfg.to_str().unwrap();
    let d = |n: &str| root.join(n).to_str().unwrap().to_string();
    ok(&["synth", "--config", c, "--seeds", "0..4", "--out", &d("scenes")]);
    ok(&["label", "--config", c, "--in", &d("scenes"), "--out", &d("labels")]);
    ok(&["superpixel", "--config", c, "--in", &d("scenes"), "--out", &d("sp")]);
    ok(&[
        "em",
        "--config",
        c,
        "--scenes",
        &d("scenes"),
        "--labels",
        &d("labels"),
        "--superpixels",
        &d("sp"),
        "--out",
        &d("em"),
    ]);
    ok(&["eval", "--config", c, "--scenes", &d("scenes"), "--model", &d("em"), "--out", &d("eval")]);
}

/// Every file under `root`, keyed by its relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
