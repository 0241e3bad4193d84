#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A config small enough to run every command in seconds.
pub const TINY: &str = r#"
seed = 5
out = "unused"

[dataset]
n_images = 90
classes = 3
fractions = [0.6, 0.2, 0.2]

[dataset.shape]
edge = 32
channels = 1
size_min = 8.0
size_max = 16.0
intensity_min = 0.6
intensity_max = 1.0
noise = 0.05
distractors = 2

[model]
widths = [4, 4, 6, 6, 8, 8]

[train]
k = 6

[train.e2e]
epochs = 2
learning_rate = 0.01
momentum = 0.9
batch_size = 16

[train.cl]
epochs = 1
learning_rate = 0.05
momentum = 0.9
batch_size = 16

[train.probe]
epochs = 2
learning_rate = 0.1
momentum = 0.9
batch_size = 16

[explain]
methods = ["saliency", "gradcam", "lime"]
taps = [2, 4]
percentile = 85.0
sigma = 2.0
images = 6
scorer = "probe"

[explain.lime]
samples = 24
ridge_lambda = 1.0
keep_prob = 0.5
top_k = 4
patch = 8

[detect]
grid = 4
boxes = 2
taps = [3, 5]
conf_threshold = 0.1
nms_threshold = 0.5
lambda_coord = 5.0
lambda_noobj = 0.5
seeds = 2

[detect.optim]
epochs = 2
learning_rate = 0.01
momentum = 0.9
batch_size = 16

[granulometry]
max_size = 4
"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_layerloc")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Runs the CLI with `--config` and `--out` prepended.
pub fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawning layerloc")
}

pub fn run_ok(config: &Path, out: &Path, args: &[&str]) -> Output {
    let o = run(config, out, args);
    assert!(
        o.status.success(),
        "layerloc {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// The full pipeline: every verb, both schemes.
pub fn run_pipeline(config: &Path, out: &Path, jobs: usize) {
    let j = jobs.to_string();
    run_ok(config, out, &["generate"]);
    for scheme in ["e2e", "cl"] {
        run_ok(config, out, &["train", "--scheme", scheme]);
    }
    let cl = out.join("weights/cl.llw");
    let e2e = out.join("weights/e2e.llw");
    let (cl, e2e) = (cl.to_str().unwrap(), e2e.to_str().unwrap());
    for w in [cl, e2e] {
        run_ok(config, out, &["--jobs", &j, "explain", "--weights", w]);
        run_ok(config, out, &["--jobs", &j, "granulometry", "--weights", w]);
        run_ok(config, out, &["detect", "--weights", w]);
    }
    run_ok(config, out, &["--jobs", &j, "compare", "--cl", cl, "--e2e", e2e]);
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
