//! YCbCr → RGB in the coded (non-linear) domain.
//!
//! 8-bit content uses BT.709 coefficients, 10-bit content BT.2020
//! non-constant luminance. Limited-range code values are expanded, no
//! transfer function is undone, and results are clamped to `[0, 1]`.

use super::frame::{ColorRange, PixelFormat, PlanarFrame};
use super::RgbFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct LumaCoefficients {
    kr: f64,
    kb: f64,
}

const BT709: LumaCoefficients = LumaCoefficients {
    kr: 0.2126,
    kb: 0.0722,
};
const BT2020: LumaCoefficients = LumaCoefficients {
    kr: 0.2627,
    kb: 0.0593,
};

/// Describes how a planar frame's samples are to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorSpec {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub pixel_format: PixelFormat,
    pub range: ColorRange,
}

pub fn to_rgb(frame: &PlanarFrame, spec: &ColorSpec) -> Result<RgbFrame> {
    let depth = spec.bit_depth;
    if !(1..=16).contains(&depth) {
        return Err(Error::Data(format!("unsupported bit depth {depth}")));
    }
    let (w, h) = (spec.width, spec.height);
    let max_code = ((1u32 << depth) - 1) as f64;
    let mut data = vec![0.0; 3 * w * h];

    if spec.pixel_format == PixelFormat::Rgb {
        for (c, plane) in frame.planes.iter().enumerate() {
            if plane.len() != w * h {
                return Err(Error::Data(format!("rgb plane {c} has wrong size")));
            }
            for (dst, &s) in data[c * w * h..(c + 1) * w * h].iter_mut().zip(plane) {
                *dst = (s as f64 / max_code).clamp(0.0, 1.0);
            }
        }
        return RgbFrame::new(w, h, data);
    }

    if depth < 8 {
        return Err(Error::Data(format!("YCbCr needs at least 8 bits, got {depth}")));
    }
    let coeffs = if depth > 8 { BT2020 } else { BT709 };
    let kg = 1.0 - coeffs.kr - coeffs.kb;
    let scale = (1u32 << (depth - 8)) as f64;
    let (y_off, y_range, c_range) = match spec.range {
        ColorRange::Limited => (16.0 * scale, 219.0 * scale, 224.0 * scale),
        ColorRange::Full => (0.0, max_code, max_code),
    };
    let c_mid = (1u32 << (depth - 1)) as f64;

    let (cw, ch) = spec.pixel_format.plane_size(1, w, h);
    let sub_x = w.div_ceil(cw);
    let sub_y = h.div_ceil(ch);
    for (i, plane) in frame.planes.iter().enumerate() {
        let (pw, ph) = spec.pixel_format.plane_size(i, w, h);
        if plane.len() != pw * ph {
            return Err(Error::Data(format!("plane {i} has wrong size")));
        }
    }

    let plane = w * h;
    for y in 0..h {
        for x in 0..w {
            let ci = (y / sub_y) * cw + x / sub_x;
            let luma = (frame.planes[0][y * w + x] as f64 - y_off) / y_range;
            let cb = (frame.planes[1][ci] as f64 - c_mid) / c_range;
            let cr = (frame.planes[2][ci] as f64 - c_mid) / c_range;
            let r = luma + 2.0 * (1.0 - coeffs.kr) * cr;
            let b = luma + 2.0 * (1.0 - coeffs.kb) * cb;
            let g = (luma - coeffs.kr * r - coeffs.kb * b) / kg;
            let idx = y * w + x;
            data[idx] = r.clamp(0.0, 1.0);
            data[plane + idx] = g.clamp(0.0, 1.0);
            data[2 * plane + idx] = b.clamp(0.0, 1.0);
        }
    }
    RgbFrame::new(w, h, data)
}

/// Inverse of [`to_rgb`] for limited or full range, used to write synthetic
/// clips. Chroma is averaged over each 2×2 block for 4:2:0.
pub fn from_rgb(rgb: &RgbFrame, spec: &ColorSpec) -> Result<PlanarFrame> {
    if spec.pixel_format == PixelFormat::Rgb {
        return Err(Error::Data("from_rgb targets YCbCr formats".into()));
    }
    let depth = spec.bit_depth;
    if !(8..=16).contains(&depth) {
        return Err(Error::Data(format!("unsupported bit depth {depth}")));
    }
    let coeffs = if depth > 8 { BT2020 } else { BT709 };
    let kg = 1.0 - coeffs.kr - coeffs.kb;
    let max_code = ((1u32 << depth) - 1) as f64;
    let scale = (1u32 << (depth - 8)) as f64;
    let (y_off, y_range, c_range) = match spec.range {
        ColorRange::Limited => (16.0 * scale, 219.0 * scale, 224.0 * scale),
        ColorRange::Full => (0.0, max_code, max_code),
    };
    let c_mid = (1u32 << (depth - 1)) as f64;
    let (w, h) = (rgb.width(), rgb.height());
    let quant = |v: f64| v.round().clamp(0.0, max_code) as u16;

    let mut luma = vec![0u16; w * h];
    let mut cb_full = vec![0.0; w * h];
    let mut cr_full = vec![0.0; w * h];
    for i in 0..w * h {
        let (r, g, b) = (rgb.channel(0)[i], rgb.channel(1)[i], rgb.channel(2)[i]);
        let yv = coeffs.kr * r + kg * g + coeffs.kb * b;
        luma[i] = quant(y_off + y_range * yv);
        cb_full[i] = (b - yv) / (2.0 * (1.0 - coeffs.kb));
        cr_full[i] = (r - yv) / (2.0 * (1.0 - coeffs.kr));
    }
    let (cw, chh) = spec.pixel_format.plane_size(1, w, h);
    let (sx, sy) = (w.div_ceil(cw), h.div_ceil(chh));
    let mut cb = vec![0u16; cw * chh];
    let mut cr = vec![0u16; cw * chh];
    for cy in 0..chh {
        for cx in 0..cw {
            let (mut sb, mut sr, mut n) = (0.0, 0.0, 0.0);
            for y in cy * sy..((cy + 1) * sy).min(h) {
                for x in cx * sx..((cx + 1) * sx).min(w) {
                    sb += cb_full[y * w + x];
                    sr += cr_full[y * w + x];
                    n += 1.0;
                }
            }
            cb[cy * cw + cx] = quant(c_mid + c_range * sb / n);
            cr[cy * cw + cx] = quant(c_mid + c_range * sr / n);
        }
    }
    Ok(PlanarFrame {
        planes: [luma, cb, cr],
    })
}
