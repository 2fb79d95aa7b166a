//! Headerless planar YUV with a JSON sidecar describing the geometry.
//!
//! Sidecar schema:
//! `{"width":int,"height":int,"fps":"num/den","bit_depth":8|10,
//!   "pixel_format":"yuv420"|"yuv444","range":"limited"|"full"}`.
//! The sidecar is looked up as `<video>.json`, then `<video stem>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::{ColorRange, FrameSequence, PixelFormat};
use super::rational::Rational;
use super::y4m::unpack_frame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub fps: Rational,
    pub bit_depth: u8,
    pub pixel_format: PixelFormat,
    #[serde(default)]
    pub range: ColorRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<String>,
}

pub fn sidecar_path(video: &Path) -> Option<PathBuf> {
    let mut appended = video.as_os_str().to_owned();
    appended.push(".json");
    let appended = PathBuf::from(appended);
    if appended.exists() {
        return Some(appended);
    }
    let replaced = video.with_extension("json");
    (replaced != video && replaced.exists()).then_some(replaced)
}

pub fn decode_raw(video: &Path, sidecar: &RawSidecar) -> Result<FrameSequence> {
    let fail = |offset: u64, message: String| Error::Format {
        path: video.to_path_buf(),
        message: format!("byte {offset}: {message}"),
    };
    if !matches!(sidecar.bit_depth, 8 | 10) {
        return Err(fail(0, format!("unsupported bit depth {}", sidecar.bit_depth)));
    }
    if sidecar.pixel_format == PixelFormat::Rgb {
        return Err(fail(0, "raw input must be yuv420 or yuv444".into()));
    }
    if sidecar.width == 0 || sidecar.height == 0 {
        return Err(fail(0, "zero frame size in sidecar".into()));
    }
    let bytes = std::fs::read(video).map_err(|e| Error::io(video, e))?;
    let per_sample = if sidecar.bit_depth > 8 { 2 } else { 1 };
    let frame_bytes =
        sidecar.pixel_format.samples_per_frame(sidecar.width, sidecar.height) * per_sample;
    let complete = bytes.len() / frame_bytes;
    if bytes.len() % frame_bytes != 0 {
        return Err(fail(
            (complete * frame_bytes) as u64,
            format!(
                "frame {complete} truncated: expected {frame_bytes} bytes, found {}",
                bytes.len() % frame_bytes
            ),
        ));
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .enumerate()
        .map(|(i, chunk)| {
            unpack_frame(
                sidecar.pixel_format,
                sidecar.width,
                sidecar.height,
                sidecar.bit_depth,
                chunk,
            )
            .map_err(|m| fail((i * frame_bytes) as u64, format!("frame {i}: {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        width: sidecar.width,
        height: sidecar.height,
        frame_rate: sidecar.fps,
        bit_depth: sidecar.bit_depth,
        pixel_format: sidecar.pixel_format,
        range: sidecar.range,
        transfer_tag: sidecar.transfer.clone(),
        frames,
    })
}

pub fn load_sidecar(path: &Path) -> Result<RawSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("invalid sidecar: {e}"),
    })
}
