#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_ibrobust");

pub struct Ran {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Ran {
    /// Run directory printed on success.
    pub fn dir(&self) -> PathBuf {
        assert_eq!(self.code, 0, "command failed: {}", self.stderr);
        PathBuf::from(self.stdout.trim())
    }
}

pub fn ibrobust(out: &Path, args: &[&str]) -> Ran {
    let Output { status, stdout, stderr } = Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("IBROBUST_DATA_DIR")
        .output()
        .expect("binary runs");
    Ran {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

/// Header plus data rows.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

pub fn column(path: &Path, name: &str) -> Vec<String> {
    let (header, rows) = read_csv(path);
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[i].clone()).collect()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every CSV under `dir`, relative path to bytes.
pub fn csv_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                found.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    found.sort();
    found
}

/// Ten classes of 28×28 images: class `c` lights a horizontal band at a
/// class-specific height over faint noise.
fn synthetic_split(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    images.extend_from_slice(&0x0803u32.to_be_bytes());
    for v in [n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        for row in 0..28 {
            for _ in 0..28 {
                let band = row >= 2 + 2 * c && row < 4 + 2 * c;
                let px = if band { rng.random_range(180..=255) } else { rng.random_range(0..40) };
                images.push(px);
            }
        }
    }
    (images, labels)
}

/// IDX files under `dir` with the canonical MNIST names.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (n, seed, img, lbl) in [
        (train, 1, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (test, 2, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let (i, l) = synthetic_split(n, seed);
        fs::write(dir.join(img), i).unwrap();
        fs::write(dir.join(lbl), l).unwrap();
    }
}

/// Synthetic MNIST plus one small trained checkpoint of `model`.
pub struct MnistFixture {
    pub root: tempfile::TempDir,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

impl MnistFixture {
    pub fn new(model: &str) -> Self {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("mnist");
        write_synthetic_mnist(&data, 300, 60);
        let run = ibrobust(
            &root.path().join("runs"),
            &[
                "train", "--model", model, "--dataset", "mnist", "--seed", "0", "--epochs", "2",
                "--hidden", "32", "--bottleneck", "8", "--data-dir", data.to_str().unwrap(),
            ],
        )
        .dir();
        Self {
            checkpoint: run.join("seed-0"),
            root,
            data,
        }
    }

    pub fn out(&self) -> PathBuf {
        self.root.path().join("runs")
    }

    pub fn path_args(&self) -> Vec<String> {
        vec![
            "--checkpoint".into(),
            self.checkpoint.display().to_string(),
            "--data-dir".into(),
            self.data.display().to_string(),
        ]
    }

    /// `command` on this checkpoint with extra `args`.
    pub fn run(&self, command: &str, args: &[&str]) -> Ran {
        let mut all: Vec<String> = vec![command.into()];
        all.extend(self.path_args());
        all.extend(args.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        ibrobust(&self.out(), &refs)
    }
}
