//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::{RgbFrame, SampledClip};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_frame(seed: u64, width: usize, height: usize) -> RgbFrame {
    let mut r = rng(seed);
    let data = (0..3 * width * height).map(|_| r.random_range(0.0..1.0)).collect();
    RgbFrame::new(width, height, data).expect("sized above")
}

pub fn random_clip(seed: u64, frames: usize, width: usize, height: usize) -> SampledClip {
    SampledClip {
        frames: (0..frames).map(|k| random_frame(seed + k as u64, width, height)).collect(),
        source_indices: (0..frames).collect(),
    }
}

pub fn random_scores(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
    let y = (0..n).map(|_| r.random_range(0..20) as f64 * 0.25).collect();
    (x, y)
}
