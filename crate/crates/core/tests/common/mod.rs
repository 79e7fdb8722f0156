#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough for every command to finish in seconds.
pub const TINY: &str = "\
corpus.vocab_size = 12
corpus.feature_dim = 8
corpus.train_size = 30
corpus.test_size = 8
corpus.valid_size = 8
corpus.min_len = 2
corpus.max_len = 4
corpus.domains = src,far,near
corpus.domain.far.noise_sigma = 0.3
corpus.domain.near.channel_mix = 0.3
corpus.domain.near.channel_seed = 3
model.enc_layers = 1
model.dec_layers = 1
model.heads = 2
model.model_dim = 16
model.ff_dim = 32
model.max_len = 12
train.min_epochs = 1
train.max_epochs = 2
train.grad_accum = 4
train.target_ter = 10
adapt.k = 2
adapt.epochs = 1
adapt.grad_accum = 4
adapt.rounds = 2
study.seeds = 0,1
study.max_rounds = 2
study.train_sizes = 5,10,15,20,25
study.thresholds = 0.5,1.0
study.alphas = 10,30
";

/// Writes [`TINY`] with the keys of `extra` replaced or added.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = TINY
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = dir.join(format!("config-{:016x}.txt", starlab::seed::derive_str(0, extra)));
    std::fs::write(&path, text).unwrap();
    path
}

pub fn starlab(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starlab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

pub fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
