#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2t_core::audio::FeatureSequence;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

pub fn run(args: &[&str]) -> i32 {
    let mut all = vec!["s2t"];
    all.extend_from_slice(args);
    s2t::cli::run(all)
}

pub fn arg(p: &Path) -> String {
    p.display().to_string()
}

pub fn symbol(i: usize) -> String {
    format!("w{i}")
}

/// Random sentences over `vocab` symbols with lengths in `lens`.
pub fn random_sentences(
    seed: u64,
    count: usize,
    vocab: usize,
    lens: std::ops::RangeInclusive<usize>,
) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(lens.clone());
            (0..n).map(|_| symbol(rng.gen_range(0..vocab))).collect()
        })
        .collect()
}

pub fn lines(sentences: &[Vec<String>]) -> String {
    sentences.iter().map(|s| s.join(" ") + "\n").collect()
}

/// Fixed pseudo-random 41-dim pattern per symbol.
pub fn symbol_patterns(vocab: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..vocab)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Each symbol rendered as its pattern repeated 4 to 8 frames with Gaussian noise.
pub fn render_frames(
    sentence: &[String],
    patterns: &[Vec<f64>],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> FeatureSequence {
    let dim = patterns[0].len();
    let mut data = Vec::new();
    for tok in sentence {
        let id: usize = tok[1..].parse().unwrap();
        for _ in 0..rng.gen_range(4..=8) {
            for &v in &patterns[id] {
                data.push(v + noise * gaussian(rng));
            }
        }
    }
    FeatureSequence::new(dim, data).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
