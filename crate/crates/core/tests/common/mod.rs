//! Synthetic MNIST-format data for pipeline tests.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

/// A 28×28 glyph per label: a horizontal and a vertical bar whose
/// positions encode the class, plus a little per-sample jitter.
fn glyph(label: u8, sample: usize) -> Vec<u8> {
    let mut px = vec![0u8; 28 * 28];
    let row = 4 + 2 * label as usize + sample % 2;
    let col = 22 - 2 * label as usize - (sample / 2) % 2;
    for i in 4..24 {
        px[row * 28 + i] = 255;
        px[i * 28 + col] = 200;
    }
    px
}

fn write_split(dir: &Path, prefix: &str, n: usize) {
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut img = Vec::new();
    for v in [0x0803u32, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for (i, &l) in labels.iter().enumerate() {
        img.extend(glyph(l, i));
    }
    let mut lab = Vec::new();
    for v in [0x0801u32, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(&labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

pub fn write_fake_mnist(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    write_split(dir, "train", n_train);
    write_split(dir, "t10k", n_test);
}

/// A configuration small enough to run the whole pipeline in seconds.
pub fn tiny_config_toml(mnist: &Path, workspace: &Path) -> String {
    format!(
        r#"seed = 3

[paths]
mnist_dir = "{}"
workspace = "{}"

[dataset]
height = 16
train_digits = 12
test_digits = 3

[train]
epochs = 1
batch_size = 8

[source]
train_images = 40

[equirect]
epochs = 1

[distill]
n_images = 4
heldout_images = 3

[distill.recipe]
epochs = 1
batch_size = 2

[eval]
timing_images = 2
"#,
        mnist.display(),
        workspace.display()
    )
}

/// Every file under `dir` with its contents, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
