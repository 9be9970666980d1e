#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retina_core::dataset::{encode_idx_images, encode_idx_labels, Split};

pub fn rlat() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rlat"));
    cmd.env_remove("RLAT_THREADS");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    rlat().args(args).output().expect("spawn rlat")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Stand-in for MNIST: `count` 28x28 glyphs whose class sets the column and
/// length of a bright bar, so short runs have something learnable.
pub fn write_fake_mnist(dir: &Path, count: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut pixels = vec![0u8; count * 28 * 28];
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        labels.push(class);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        let col = 4 + 2 * class as usize;
        for row in 4..(8 + 2 * class as usize) {
            img[row * 28 + col] = 255;
            img[row * 28 + col + 1] = 200;
        }
    }
    for split in [Split::Train, Split::Test] {
        let (ip, lp) = split.file_names();
        std::fs::write(dir.join(ip), encode_idx_images(28, 28, &pixels)).unwrap();
        std::fs::write(dir.join(lp), encode_idx_labels(&labels)).unwrap();
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a dataset from the fake MNIST in `dir` and returns its path.
pub fn fake_dataset(dir: &Path, name: &str, variant: &str, n: u32, seed: u64) -> PathBuf {
    let mnist = dir.join("mnist");
    if !mnist.exists() {
        write_fake_mnist(&mnist, 60);
    }
    let out = dir.join(name);
    let o = run(&[
        "generate",
        "--variant",
        variant,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--mnist-dir",
        path_str(&mnist),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "generate failed: {}", stderr(&o));
    out
}

/// Flags for a model small enough to train in seconds.
pub const TINY: &[&str] = &["--grid-side", "3", "--hidden", "8", "--batch-size", "8"];
