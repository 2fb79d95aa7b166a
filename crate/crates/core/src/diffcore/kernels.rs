//! Raw loops shared by the graph ops and the plain inference paths.
//!
//! All accumulations run in a fixed sequential order per output element, so
//! results are bit-reproducible regardless of how work is split across
//! threads.

use rayon::prelude::*;

/// Geometry of a single-image 2-D convolution (no batch axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

// Below this many multiply-adds per call the rayon split costs more than it saves.
const PARALLEL_THRESHOLD: usize = 1 << 18;

impl ConvGeometry {
    /// Output spatial size, or `None` if the kernel does not fit.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return None;
        }
        let h = self.in_height + 2 * self.padding;
        let w = self.in_width + 2 * self.padding;
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    fn macs(&self) -> usize {
        let (oh, ow) = self.output_size().unwrap_or((0, 0));
        oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Range of output columns whose tap `kx` lands inside the input row.
    fn valid_range(&self, tap: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // need 0 <= o*stride + tap - padding < in_len
        let lo = if tap >= self.padding {
            0
        } else {
            (self.padding - tap).div_ceil(self.stride)
        };
        let limit = in_len + self.padding;
        let hi = if limit <= tap {
            0
        } else {
            ((limit - tap - 1) / self.stride + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_channel(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: f64,
    oc: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let (c, h, w, k, s) = (g.in_channels, g.in_height, g.in_width, g.kernel, g.stride);
    out.fill(bias);
    for ic in 0..c {
        let plane = &input[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let wv = weight[((oc * c + ic) * k + ky) * k + kx];
                let (ox_lo, ox_hi) = g.valid_range(kx, w, ow);
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.padding;
                    let row = &plane[iy * w..(iy + 1) * w];
                    let out_row = &mut out[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        out_row[ox] += wv * row[ox * s + kx - g.padding];
                    }
                }
            }
        }
    }
}

/// `input` is `[C, H, W]`, `weight` is `[O, C, k, k]`, `bias` is `[O]`.
/// Returns the `[O, oh, ow]` output.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.output_size().expect("conv geometry checked by caller");
    let plane = oh * ow;
    let mut out = vec![0.0; g.out_channels * plane];
    if g.macs() >= PARALLEL_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(oc, chunk)| {
            conv_forward_channel(g, input, weight, bias[oc], oc, oh, ow, chunk)
        });
    } else {
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            conv_forward_channel(g, input, weight, bias[oc], oc, oh, ow, chunk);
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn conv_weight_grad_channel(
    g: &ConvGeometry,
    input: &[f64],
    grad_out: &[f64],
    oc: usize,
    oh: usize,
    ow: usize,
    dw: &mut [f64],
) {
    let (c, h, w, k, s) = (g.in_channels, g.in_height, g.in_width, g.kernel, g.stride);
    let go = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
    for ic in 0..c {
        let plane = &input[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, w, ow);
                let mut acc = 0.0;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.padding;
                    let row = &plane[iy * w..(iy + 1) * w];
                    let grow = &go[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        acc += grow[ox] * row[ox * s + kx - g.padding];
                    }
                }
                dw[(ic * k + ky) * k + kx] = acc;
            }
        }
    }
}

fn conv_input_grad_channel(
    g: &ConvGeometry,
    weight: &[f64],
    grad_out: &[f64],
    ic: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let (c, h, w, k, s) = (g.in_channels, g.in_height, g.in_width, g.kernel, g.stride);
    for oc in 0..g.out_channels {
        let go = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let wv = weight[((oc * c + ic) * k + ky) * k + kx];
                let (ox_lo, ox_hi) = g.valid_range(kx, w, ow);
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.padding;
                    let grow = &go[oy * ow..(oy + 1) * ow];
                    let row = &mut dx[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        row[ox * s + kx - g.padding] += wv * grow[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let (oh, ow) = g.output_size().expect("conv geometry checked by caller");
    let (c, h, w, k) = (g.in_channels, g.in_height, g.in_width, g.kernel);
    let per_oc = c * k * k;
    let parallel = g.macs() >= PARALLEL_THRESHOLD;

    let bias: Vec<f64> = grad_out
        .chunks(oh * ow)
        .map(|ch| ch.iter().fold(0.0, |a, &v| a + v))
        .collect();

    let mut dw = vec![0.0; g.out_channels * per_oc];
    if parallel {
        dw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, chunk)| {
            conv_weight_grad_channel(g, input, grad_out, oc, oh, ow, chunk)
        });
    } else {
        for (oc, chunk) in dw.chunks_mut(per_oc).enumerate() {
            conv_weight_grad_channel(g, input, grad_out, oc, oh, ow, chunk);
        }
    }

    let dx = need_input.then(|| {
        let mut dx = vec![0.0; c * h * w];
        if parallel {
            dx.par_chunks_mut(h * w).enumerate().for_each(|(ic, chunk)| {
                conv_input_grad_channel(g, weight, grad_out, ic, oh, ow, chunk)
            });
        } else {
            for (ic, chunk) in dx.chunks_mut(h * w).enumerate() {
                conv_input_grad_channel(g, weight, grad_out, ic, oh, ow, chunk);
            }
        }
        dx
    });

    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}

/// `x[n] · W[n, m] + b[m]`.
pub fn affine_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let m = bias.len();
    let mut out = bias.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &weight[i * m..(i + 1) * m];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// Per-channel mean over the trailing spatial extent of a `[C, n]` buffer.
pub fn channel_means(x: &[f64], channels: usize) -> Vec<f64> {
    let n = x.len() / channels;
    x.chunks(n)
        .map(|ch| ch.iter().fold(0.0, |a, &v| a + v) / n as f64)
        .collect()
}

/// Population covariance per channel. With `x == y` this is the variance,
/// computed with exactly the same operations.
pub fn channel_covariances(x: &[f64], y: &[f64], channels: usize) -> Vec<f64> {
    let n = x.len() / channels;
    let mx = channel_means(x, channels);
    let my = channel_means(y, channels);
    x.chunks(n)
        .zip(y.chunks(n))
        .enumerate()
        .map(|(c, (xs, ys))| {
            let acc = xs
                .iter()
                .zip(ys)
                .fold(0.0, |a, (&xv, &yv)| a + (xv - mx[c]) * (yv - my[c]));
            acc / n as f64
        })
        .collect()
}
