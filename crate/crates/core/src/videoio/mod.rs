//! Video ingestion and preprocessing.
//!
//! Decoded videos are sampled at one frame per second of content
//! (`K = floor(N / R)` frames at source indices `floor(R * i)`), converted
//! to RGB in `[0, 1]` and bicubically resized.

mod color;
mod frame;
mod rational;
mod raw;
mod resize;
mod y4m;

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use color::{from_rgb, to_rgb, ColorSpec};
pub use frame::{ColorRange, FrameSequence, PixelFormat, PlanarFrame};
pub use rational::Rational;
pub use raw::{decode_raw, load_sidecar, sidecar_path, RawSidecar};
pub use resize::{bicubic_resize, cubic_weight, CUBIC_A};
pub use y4m::{open_y4m, read_y4m, save_y4m, write_y4m, Y4mHeader, Y4mReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default preprocessing resolution (square).
pub const DEFAULT_SIZE: usize = 384;

/// Planar RGB frame, channel-major (`[3, H, W]`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "RGB frame {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbFrame {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
            .expect("frame dimensions validated at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] => RgbFrame::new(*w, *h, t.data().to_vec()),
            s => Err(Error::Data(format!("expected [3, H, W] tensor, got {s:?}"))),
        }
    }

    /// Little-endian f64 payload, channel-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 24 * width * height {
            return Err(Error::Data(format!(
                "RGB payload for {width}x{height} must be {} bytes, got {}",
                24 * width * height,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        RgbFrame::new(width, height, data)
    }
}

/// Frames selected for scoring, already converted and resized.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub frames: Vec<RgbFrame>,
    pub source_indices: Vec<usize>,
}

impl SampledClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Decodes a Y4M file, or raw planar YUV described by a JSON sidecar.
pub fn decode(path: &Path) -> Result<FrameSequence> {
    let mut magic = [0u8; 9];
    let is_y4m = std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == b"YUV4MPEG2")
        .unwrap_or(false);
    let seq = if is_y4m {
        let reader = open_y4m(path).map_err(|e| with_path(e, path))?;
        let header = reader.header().clone();
        let frames = reader
            .collect::<Result<Vec<_>>>()
            .map_err(|e| with_path(e, path))?;
        FrameSequence {
            width: header.width,
            height: header.height,
            frame_rate: header.frame_rate,
            bit_depth: header.bit_depth,
            pixel_format: header.pixel_format,
            range: header.range,
            transfer_tag: header.transfer_tag,
            frames,
        }
    } else {
        if !path.exists() {
            return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
        }
        let sidecar = sidecar_path(path).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "not a Y4M file and no JSON sidecar found".into(),
        })?;
        decode_raw(path, &load_sidecar(&sidecar)?)?
    };
    seq.validate()?;
    Ok(seq)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Format {
            path: path.to_path_buf(),
            message: format!("byte {offset}: {message}"),
        },
        other => other,
    }
}

/// Indices of the frames kept by one-frame-per-second sampling.
pub fn temporal_sample(frame_count: usize, rate: Rational) -> Result<Vec<usize>> {
    let k = rate.floor_div_into(frame_count as u64);
    if k == 0 {
        return Err(Error::Data(format!(
            "video shorter than one second ({frame_count} frames at {rate} fps)"
        )));
    }
    Ok((0..k).map(|i| rate.floor_mul(i) as usize).collect())
}

fn color_spec(video: &FrameSequence) -> ColorSpec {
    ColorSpec {
        width: video.width,
        height: video.height,
        bit_depth: video.bit_depth,
        pixel_format: video.pixel_format,
        range: video.range,
    }
}

/// Temporal sampling, RGB conversion and resize to `height × width`.
pub fn preprocess(video: &FrameSequence, height: usize, width: usize) -> Result<SampledClip> {
    let indices = temporal_sample(video.frame_count(), video.frame_rate)?;
    let spec = color_spec(video);
    let frames = indices
        .par_iter()
        .map(|&i| bicubic_resize(&to_rgb(&video.frames[i], &spec)?, height, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampledClip {
        frames,
        source_indices: indices,
    })
}

/// Same result as [`preprocess`] but never holds more than one decoded
/// frame in memory.
pub fn preprocess_stream<R: Read>(
    mut reader: Y4mReader<R>,
    height: usize,
    width: usize,
) -> Result<SampledClip> {
    let h = reader.header().clone();
    let spec = ColorSpec {
        width: h.width,
        height: h.height,
        bit_depth: h.bit_depth,
        pixel_format: h.pixel_format,
        range: h.range,
    };
    let rate = h.frame_rate;
    let mut frames = Vec::new();
    let mut indices = Vec::new();
    let mut next = 0u64;
    let mut count = 0usize;
    for frame in reader.by_ref() {
        let frame = frame?;
        if count as u64 == rate.floor_mul(next) {
            frames.push(bicubic_resize(&to_rgb(&frame, &spec)?, height, width)?);
            indices.push(count);
            next += 1;
        }
        count += 1;
    }
    let k = temporal_sample(count, rate)?.len();
    frames.truncate(k);
    indices.truncate(k);
    Ok(SampledClip {
        frames,
        source_indices: indices,
    })
}

/// Preprocesses a reference/distorted pair, requiring matching frame
/// counts, frame rates and source resolutions.
pub fn preprocess_pair(
    reference: &FrameSequence,
    distorted: &FrameSequence,
    height: usize,
    width: usize,
) -> Result<(SampledClip, SampledClip)> {
    if (reference.width, reference.height) != (distorted.width, distorted.height) {
        return Err(Error::Data(format!(
            "reference is {}x{} but distorted is {}x{}",
            reference.width, reference.height, distorted.width, distorted.height
        )));
    }
    if reference.frame_rate != distorted.frame_rate
        || reference.frame_count() != distorted.frame_count()
    {
        return Err(Error::Data(format!(
            "reference has {} frames at {}, distorted {} frames at {}",
            reference.frame_count(),
            reference.frame_rate,
            distorted.frame_count(),
            distorted.frame_rate
        )));
    }
    Ok((
        preprocess(reference, height, width)?,
        preprocess(distorted, height, width)?,
    ))
}

/// Index written next to exported frames by [`export_clip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub width: usize,
    pub height: usize,
    pub layout: String,
    pub frames: Vec<FrameIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIndexEntry {
    pub file: String,
    pub source_index: usize,
}

pub const FRAME_LAYOUT: &str = "rgb-chw-f64le";
pub const FRAME_INDEX_FILE: &str = "index.json";

/// Writes each frame as a raw little-endian f64 file plus `index.json`.
pub fn export_clip(clip: &SampledClip, dir: &Path) -> Result<FrameIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = clip
        .frames
        .first()
        .ok_or_else(|| Error::Data("cannot export an empty clip".into()))?;
    let mut entries = Vec::with_capacity(clip.len());
    for (i, (frame, &src)) in clip.frames.iter().zip(&clip.source_indices).enumerate() {
        let file = format!("frame_{i:05}.rgb");
        let path = dir.join(&file);
        std::fs::write(&path, frame.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        entries.push(FrameIndexEntry {
            file,
            source_index: src,
        });
    }
    let index = FrameIndex {
        width: first.width(),
        height: first.height(),
        layout: FRAME_LAYOUT.into(),
        frames: entries,
    };
    let path = dir.join(FRAME_INDEX_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn import_clip(dir: &Path) -> Result<SampledClip> {
    let path = dir.join(FRAME_INDEX_FILE);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: FrameIndex = serde_json::from_slice(&text)?;
    if index.layout != FRAME_LAYOUT {
        return Err(Error::Format {
            path,
            message: format!("unsupported frame layout '{}'", index.layout),
        });
    }
    let mut clip = SampledClip {
        frames: Vec::new(),
        source_indices: Vec::new(),
    };
    for entry in &index.frames {
        let p = dir.join(&entry.file);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        clip.frames
            .push(RgbFrame::from_le_bytes(index.width, index.height, &bytes)?);
        clip.source_indices.push(entry.source_index);
    }
    Ok(clip)
}
