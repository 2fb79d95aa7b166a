//! Separable bicubic resampling.
//!
//! Cubic convolution kernel with `a = -0.5`, half-pixel-centre coordinate
//! mapping (`src = (dst + 0.5) * in / out - 0.5`), out-of-range taps clamped
//! to the nearest edge sample. The kernel is not widened when downscaling.
//! Only the final output is clamped to `[0, 1]`.

use super::RgbFrame;
use crate::error::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four (clamped index, weight) taps for every output coordinate.
fn taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
            [
                (clamp(base - 1), cubic_weight(1.0 + t)),
                (clamp(base), cubic_weight(t)),
                (clamp(base + 1), cubic_weight(1.0 - t)),
                (clamp(base + 2), cubic_weight(2.0 - t)),
            ]
        })
        .collect()
}

pub fn bicubic_resize(frame: &RgbFrame, out_height: usize, out_width: usize) -> Result<RgbFrame> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Config(format!(
            "resize target {out_width}x{out_height} must be at least 1x1"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    if (w, h) == (out_width, out_height) {
        return Ok(frame.clone());
    }
    let xt = taps(w, out_width);
    let yt = taps(h, out_height);
    let mut out = Vec::with_capacity(3 * out_width * out_height);
    let mut rows = vec![0.0; h * out_width];
    for c in 0..3 {
        let src = frame.channel(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, tap) in xt.iter().enumerate() {
                rows[y * out_width + x] = tap.iter().fold(0.0, |acc, &(i, wt)| acc + wt * row[i]);
            }
        }
        for tap in &yt {
            for x in 0..out_width {
                let v = tap
                    .iter()
                    .fold(0.0, |acc, &(i, wt)| acc + wt * rows[i * out_width + x]);
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    RgbFrame::new(out_width, out_height, out)
}
