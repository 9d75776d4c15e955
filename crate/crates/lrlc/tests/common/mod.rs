#![allow(dead_code)]

use std::fs;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use lrlc::config::ExperimentConfig;
use lrlc::data::{encode_idx_images, encode_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Digits-like stand-in: each class stamps its own fixed 8×8 binary pattern,
/// jittered around the centre of a 28×28 noisy background.
pub fn synthetic_digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut shapes = ChaCha8Rng::seed_from_u64(0xD161);
    let patterns: Vec<[bool; 64]> = (0..10).map(|_| std::array::from_fn(|_| shapes.random_bool(0.5))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for img in px.chunks_exact_mut(784) {
        let class = rng.random_range(0..10u8);
        labels.push(class);
        for v in img.iter_mut() {
            *v = rng.random_range(0..60);
        }
        let (r0, c0) = (rng.random_range(7..=13), rng.random_range(7..=13));
        for (p, &on) in patterns[class as usize].iter().enumerate() {
            if on {
                img[(r0 + p / 8) * 28 + c0 + p % 8] = rng.random_range(180..=255);
            }
        }
    }
    (px, labels)
}

/// Writes train/t10k IDX files; `gz` compresses the training images.
pub fn write_mnist(dir: &Path, train: usize, test: usize, gz: bool) {
    fs::create_dir_all(dir).unwrap();
    let (px, l) = synthetic_digits(train, 1);
    let images = encode_idx_images(train, 28, 28, &px);
    if gz {
        let mut e = GzEncoder::new(Vec::new(), Compression::fast());
        std::io::Write::write_all(&mut e, &images).unwrap();
        fs::write(dir.join("train-images-idx3-ubyte.gz"), e.finish().unwrap()).unwrap();
    } else {
        fs::write(dir.join("train-images-idx3-ubyte"), images).unwrap();
    }
    fs::write(dir.join("train-labels-idx1-ubyte"), encode_idx_labels(&l)).unwrap();
    let (px, l) = synthetic_digits(test, 2);
    fs::write(dir.join("t10k-images-idx3-ubyte"), encode_idx_images(test, 28, 28, &px)).unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), encode_idx_labels(&l)).unwrap();
}

/// Small, fast configuration over a synthetic dataset at `data`.
pub fn small_config(data: &Path, overrides: &[&str]) -> ExperimentConfig {
    let text = format!(
        "[data]\ndir = {:?}\nvalidation = 100\n[model]\nchannels = 4\ndepth = 2\n[train]\nepochs = 2\nbatch = 25\npeak_lr = 0.01\nwarmup_epochs = 1\ntest_mode = true\neval_batch = 50\n",
        data.display().to_string()
    );
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse(&text, &overrides).unwrap()
}
