#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A model and dataset small enough for a full pipeline in seconds.
pub const TINY: &str = r#"
checkpoint_every = 10

[model]
d_model = 16
n_heads = 2
n_text_layers = 1
n_vit_layers = 1
image_size = 16
patch_size = 8

[data]
it2i_groups = 40
t2it_records = 160
splits = [0.6, 0.2, 0.2]

[stage1]
total_steps = 20
batch_size = 8

[stage2]
total_steps = 20
batch_size = 4

[pseudo_map]
total_steps = 10
batch_size = 8

[ablation]
seeds = [5]
"#;

pub fn vista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vista")).args(args).env("VISTA_THREADS", "2").output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = vista(args);
    assert!(out.status.success(), "vista {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 output")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path → bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
