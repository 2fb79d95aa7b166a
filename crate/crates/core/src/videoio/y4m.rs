//! YUV4MPEG2 reading and writing.
//!
//! Supported colorspaces: `C420` (and its `jpeg`/`paldv`/`mpeg2` siting
//! variants), `C444`, `C420p10`, `C444p10`. Ten-bit samples are stored as
//! little-endian 16-bit words. Colour range comes from an
//! `XCOLORRANGE=FULL|LIMITED` tag and defaults to limited.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::frame::{ColorRange, FrameSequence, PixelFormat, PlanarFrame};
use super::rational::Rational;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"YUV4MPEG2";
const MAX_LINE: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Y4mHeader {
    pub width: usize,
    pub height: usize,
    pub frame_rate: Rational,
    pub bit_depth: u8,
    pub pixel_format: PixelFormat,
    pub range: ColorRange,
    pub transfer_tag: Option<String>,
}

impl Y4mHeader {
    fn bytes_per_sample(&self) -> usize {
        if self.bit_depth > 8 { 2 } else { 1 }
    }

    pub fn frame_bytes(&self) -> usize {
        self.pixel_format.samples_per_frame(self.width, self.height) * self.bytes_per_sample()
    }
}

fn parse_colorspace(tag: &str, offset: u64) -> Result<(PixelFormat, u8)> {
    Ok(match tag {
        "420" | "420jpeg" | "420paldv" | "420mpeg2" => (PixelFormat::Yuv420, 8),
        "444" => (PixelFormat::Yuv444, 8),
        "420p10" => (PixelFormat::Yuv420, 10),
        "444p10" => (PixelFormat::Yuv444, 10),
        other => {
            return Err(Error::parse(offset, format!("unsupported chroma format 'C{other}'")))
        }
    })
}

fn parse_header(line: &[u8]) -> Result<Y4mHeader> {
    let text = std::str::from_utf8(line).map_err(|_| Error::parse(0, "header is not ASCII"))?;
    if !text.starts_with("YUV4MPEG2") {
        return Err(Error::parse(0, "missing YUV4MPEG2 signature"));
    }
    let (mut width, mut height, mut rate) = (None, None, None);
    let mut format = (PixelFormat::Yuv420, 8);
    let mut range = ColorRange::Limited;
    let mut transfer_tag = None;

    let mut offset = MAGIC.len() as u64;
    for token in text[MAGIC.len()..].split(' ') {
        let here = offset;
        offset += token.len() as u64 + 1;
        if token.is_empty() {
            continue;
        }
        let (key, value) = token.split_at(1);
        let bad = |what: &str| Error::parse(here, format!("bad {what} tag '{token}'"));
        match key {
            "W" => width = Some(value.parse::<usize>().map_err(|_| bad("width"))?),
            "H" => height = Some(value.parse::<usize>().map_err(|_| bad("height"))?),
            "F" => rate = Some(value.parse::<Rational>().map_err(|_| bad("frame rate"))?),
            "I" => {
                if !matches!(value, "p" | "t" | "b" | "m" | "?") {
                    return Err(bad("interlace"));
                }
            }
            "A" => {
                let ok = value
                    .split_once(':')
                    .is_some_and(|(a, b)| a.parse::<u64>().is_ok() && b.parse::<u64>().is_ok());
                if !ok {
                    return Err(bad("aspect"));
                }
            }
            "C" => format = parse_colorspace(value, here)?,
            "X" => {
                if let Some(v) = value.strip_prefix("COLORRANGE=") {
                    range = match v {
                        "FULL" => ColorRange::Full,
                        "LIMITED" => ColorRange::Limited,
                        _ => return Err(bad("color range")),
                    };
                } else if let Some(v) = value.strip_prefix("TRANSFER=") {
                    transfer_tag = Some(v.to_ascii_lowercase());
                }
            }
            _ => return Err(Error::parse(here, format!("unknown header tag '{token}'"))),
        }
    }
    let width = width.filter(|&w| w > 0).ok_or_else(|| Error::parse(0, "missing or zero W tag"))?;
    let height = height.filter(|&h| h > 0).ok_or_else(|| Error::parse(0, "missing or zero H tag"))?;
    let frame_rate = rate.ok_or_else(|| Error::parse(0, "missing F tag"))?;
    Ok(Y4mHeader {
        width,
        height,
        frame_rate,
        bit_depth: format.1,
        pixel_format: format.0,
        range,
        transfer_tag,
    })
}

/// Reads until `buf` is full or EOF; returns bytes read.
fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads one `\n`-terminated line. `Ok(None)` on clean EOF.
fn read_line<R: Read>(r: &mut R, offset: u64) -> Result<Option<Vec<u8>>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = read_fully(r, &mut byte).map_err(|e| Error::parse(offset, e.to_string()))?;
        if n == 0 {
            if line.is_empty() {
                return Ok(None);
            }
            return Err(Error::parse(offset, "unterminated line at end of file"));
        }
        if byte[0] == b'\n' {
            return Ok(Some(line));
        }
        line.push(byte[0]);
        if line.len() > MAX_LINE {
            return Err(Error::parse(offset, "header line too long"));
        }
    }
}

/// Streaming Y4M decoder yielding one frame at a time.
pub struct Y4mReader<R: Read> {
    inner: R,
    header: Y4mHeader,
    offset: u64,
    index: usize,
    done: bool,
}

impl<R: Read> Y4mReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let line = read_line(&mut inner, 0)?.ok_or_else(|| Error::parse(0, "empty file"))?;
        let header = parse_header(&line)?;
        Ok(Y4mReader {
            inner,
            header,
            offset: line.len() as u64 + 1,
            index: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &Y4mHeader {
        &self.header
    }

    fn read_frame(&mut self) -> Result<Option<PlanarFrame>> {
        let start = self.offset;
        let Some(line) = read_line(&mut self.inner, start)? else {
            return Ok(None);
        };
        if !line.starts_with(b"FRAME") {
            return Err(Error::parse(start, format!("frame {}: expected FRAME marker", self.index)));
        }
        self.offset += line.len() as u64 + 1;

        let h = &self.header;
        let mut payload = vec![0u8; h.frame_bytes()];
        let got = read_fully(&mut self.inner, &mut payload)
            .map_err(|e| Error::parse(self.offset, e.to_string()))?;
        if got < payload.len() {
            return Err(Error::parse(
                self.offset + got as u64,
                format!(
                    "frame {} truncated: expected {} payload bytes, found {got}",
                    self.index,
                    payload.len()
                ),
            ));
        }
        let frame = unpack_frame(h.pixel_format, h.width, h.height, h.bit_depth, &payload)
            .map_err(|msg| Error::parse(self.offset, format!("frame {}: {msg}", self.index)))?;
        self.offset += payload.len() as u64;
        self.index += 1;
        Ok(Some(frame))
    }
}

impl<R: Read> Iterator for Y4mReader<R> {
    type Item = Result<PlanarFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.read_frame().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

/// Splits a packed planar payload into three planes, checking the sample range.
pub(crate) fn unpack_frame(
    format: PixelFormat,
    width: usize,
    height: usize,
    bit_depth: u8,
    payload: &[u8],
) -> std::result::Result<PlanarFrame, String> {
    let wide = bit_depth > 8;
    let max = ((1u32 << bit_depth) - 1) as u16;
    let mut cursor = 0;
    let mut planes: [Vec<u16>; 3] = Default::default();
    for (i, plane) in planes.iter_mut().enumerate() {
        let (w, h) = format.plane_size(i, width, height);
        let n = w * h;
        *plane = if wide {
            payload[cursor..cursor + 2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        } else {
            payload[cursor..cursor + n].iter().map(|&b| u16::from(b)).collect()
        };
        cursor += if wide { 2 * n } else { n };
        if let Some(pos) = plane.iter().position(|&s| s > max) {
            return Err(format!("plane {i} sample {pos} = {} exceeds {max}", plane[pos]));
        }
    }
    Ok(PlanarFrame { planes })
}

pub fn read_y4m<R: Read>(reader: R) -> Result<FrameSequence> {
    let mut r = Y4mReader::new(reader)?;
    let header = r.header().clone();
    let frames = r.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        width: header.width,
        height: header.height,
        frame_rate: header.frame_rate,
        bit_depth: header.bit_depth,
        pixel_format: header.pixel_format,
        range: header.range,
        transfer_tag: header.transfer_tag,
        frames,
    })
}

pub fn open_y4m(path: &Path) -> Result<Y4mReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Y4mReader::new(BufReader::new(f))
}

pub fn write_y4m<W: Write>(mut w: W, seq: &FrameSequence) -> Result<()> {
    let cs = match (seq.pixel_format, seq.bit_depth) {
        (PixelFormat::Yuv420, 8) => "420jpeg",
        (PixelFormat::Yuv444, 8) => "444",
        (PixelFormat::Yuv420, 10) => "420p10",
        (PixelFormat::Yuv444, 10) => "444p10",
        (fmt, depth) => {
            return Err(Error::Data(format!("cannot write {fmt:?} at {depth} bits as Y4M")))
        }
    };
    let range = match seq.range {
        ColorRange::Limited => "LIMITED",
        ColorRange::Full => "FULL",
    };
    let mut header = format!(
        "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 C{cs} XCOLORRANGE={range}",
        seq.width,
        seq.height,
        seq.frame_rate.num(),
        seq.frame_rate.den()
    );
    if let Some(t) = &seq.transfer_tag {
        header.push_str(&format!(" XTRANSFER={}", t.to_ascii_uppercase()));
    }
    header.push('\n');
    let io = |e| Error::io("<y4m output>", e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for frame in &seq.frames {
        w.write_all(b"FRAME\n").map_err(io)?;
        for plane in &frame.planes {
            let bytes: Vec<u8> = if seq.bit_depth > 8 {
                plane.iter().flat_map(|s| s.to_le_bytes()).collect()
            } else {
                plane.iter().map(|&s| s as u8).collect()
            };
            w.write_all(&bytes).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn save_y4m(path: &Path, seq: &FrameSequence) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_y4m(BufWriter::new(f), seq).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
