use serde::{Deserialize, Serialize};

use super::rational::Rational;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelFormat {
    Yuv420,
    Yuv444,
    Rgb,
}

impl PixelFormat {
    /// Dimensions of plane `index` for a `width × height` frame.
    pub fn plane_size(self, index: usize, width: usize, height: usize) -> (usize, usize) {
        match (self, index) {
            (PixelFormat::Yuv420, 1 | 2) => (width.div_ceil(2), height.div_ceil(2)),
            _ => (width, height),
        }
    }

    pub fn samples_per_frame(self, width: usize, height: usize) -> usize {
        (0..3)
            .map(|i| {
                let (w, h) = self.plane_size(i, width, height);
                w * h
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorRange {
    #[default]
    Limited,
    Full,
}

/// One decoded frame: three planes of integer samples (Y, Cb, Cr or R, G, B).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanarFrame {
    pub planes: [Vec<u16>; 3],
}

/// A decoded video. All frames share the sequence's geometry and format.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub frame_rate: Rational,
    pub bit_depth: u8,
    pub pixel_format: PixelFormat,
    pub range: ColorRange,
    /// Informational only (`"pq"`, `"bt709"`, ...); no transfer function is applied.
    pub transfer_tag: Option<String>,
    pub frames: Vec<PlanarFrame>,
}

impl FrameSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn max_sample(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    /// Checks geometry and sample range of every frame.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bit_depth, 8 | 10) {
            return Err(Error::Data(format!("unsupported bit depth {}", self.bit_depth)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("zero-sized frames".into()));
        }
        let max = self.max_sample();
        for (fi, frame) in self.frames.iter().enumerate() {
            for (pi, plane) in frame.planes.iter().enumerate() {
                let (w, h) = self.pixel_format.plane_size(pi, self.width, self.height);
                if plane.len() != w * h {
                    return Err(Error::Data(format!(
                        "frame {fi} plane {pi} has {} samples, expected {}",
                        plane.len(),
                        w * h
                    )));
                }
                if let Some(pos) = plane.iter().position(|&s| s > max) {
                    return Err(Error::Data(format!(
                        "frame {fi} plane {pi} sample {pos} = {} exceeds {max}",
                        plane[pos]
                    )));
                }
            }
        }
        Ok(())
    }
}
