//! Multi-stage convolutional feature pyramid.
//!
//! Each stage is a `k × k` convolution (padding `k / 2`) followed by relu.
//! Every stage's output is kept, so later code sees feature maps at
//! decreasing spatial resolution. Pyramids computed elsewhere can be loaded
//! through the `VQAP0001` container (see [`write_pyramid`]).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{self, ConvGeometry};
use crate::diffcore::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::videoio::RgbFrame;

pub const PARAM_PREFIX: &str = "backbone.";
pub const PYRAMID_MAGIC: &[u8; 8] = b"VQAP0001";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_count: usize,
    pub channels_per_stage: Vec<usize>,
    pub stride_per_stage: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_count: 4,
            channels_per_stage: vec![16, 32, 64, 128],
            stride_per_stage: vec![2, 2, 2, 2],
            kernel_size: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_count == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.channels_per_stage.len() != self.stage_count
            || self.stride_per_stage.len() != self.stage_count
        {
            return Err(Error::Config(format!(
                "stage_count {} but {} channel and {} stride entries",
                self.stage_count,
                self.channels_per_stage.len(),
                self.stride_per_stage.len()
            )));
        }
        if self.channels_per_stage.contains(&0) || self.stride_per_stage.contains(&0) {
            return Err(Error::Config("channels and strides must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stride_per_stage.iter().product()
    }

    pub fn last_channels(&self) -> usize {
        *self.channels_per_stage.last().expect("validated config")
    }

    pub fn channel_sum(&self) -> usize {
        self.channels_per_stage.iter().sum()
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// `[C, h, w]` of every stage for an `height × width` input.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let stride = self.total_stride();
        if height % stride != 0 || width % stride != 0 {
            return Err(Error::Config(format!(
                "input {width}x{height} is not divisible by the cumulative stride {stride}"
            )));
        }
        let mut shapes = Vec::with_capacity(self.stage_count);
        let (mut c, mut h, mut w) = (3, height, width);
        for s in 0..self.stage_count {
            let g = self.geometry(s, c, h, w);
            let (oh, ow) = g
                .output_size()
                .ok_or_else(|| Error::Config(format!("stage {s} kernel does not fit {w}x{h}")))?;
            c = self.channels_per_stage[s];
            (h, w) = (oh, ow);
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    fn geometry(&self, stage: usize, c: usize, h: usize, w: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            in_height: h,
            in_width: w,
            out_channels: self.channels_per_stage[stage],
            kernel: self.kernel_size,
            stride: self.stride_per_stage[stage],
            padding: self.padding(),
        }
    }

    fn in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            3
        } else {
            self.channels_per_stage[stage - 1]
        }
    }

    pub fn weight_name(stage: usize) -> String {
        format!("{PARAM_PREFIX}stage{stage}.weight")
    }

    pub fn bias_name(stage: usize) -> String {
        format!("{PARAM_PREFIX}stage{stage}.bias")
    }

    pub fn weight_shape(&self, stage: usize) -> [usize; 4] {
        let k = self.kernel_size;
        [self.channels_per_stage[stage], self.in_channels(stage), k, k]
    }

    /// Kaiming-uniform (fan-in, relu gain) weights and zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        for s in 0..self.stage_count {
            let shape = self.weight_shape(s);
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(Self::weight_name(s), Tensor::new(shape.to_vec(), w)?);
            store.insert(Self::bias_name(s), Tensor::zeros(&[shape[0]]));
        }
        Ok(store)
    }

    /// Adds the backbone to `graph` on top of an `[3, H, W]` input node and
    /// returns one node per stage.
    pub fn build_graph(&self, graph: &mut Graph, input: NodeId, trainable: bool) -> Result<Vec<NodeId>> {
        let [_, h, w] = <[usize; 3]>::try_from(graph.shape(input))
            .map_err(|_| Error::Config("backbone input must be [3, H, W]".into()))?;
        self.stage_shapes(h, w)?;
        let mut x = input;
        let mut stages = Vec::with_capacity(self.stage_count);
        for s in 0..self.stage_count {
            let weight = graph.param(&Self::weight_name(s), &self.weight_shape(s), trainable)?;
            let bias = graph.param(&Self::bias_name(s), &[self.channels_per_stage[s]], trainable)?;
            let conv = graph.conv2d(x, weight, bias, self.stride_per_stage[s], self.padding())?;
            x = graph.relu(conv);
            stages.push(x);
        }
        Ok(stages)
    }
}

/// Per-stage feature maps for one frame, each `[C_s, h_s, w_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        let p = FeaturePyramid { stages };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Data("pyramid has no stages".into()));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (s, t) in self.stages.iter().enumerate() {
            let &[_, h, w] = t.shape() else {
                return Err(Error::Data(format!("stage {s} is not [C, h, w]: {:?}", t.shape())));
            };
            if let Some((ph, pw)) = prev {
                if h > ph || w > pw {
                    return Err(Error::Data(format!(
                        "stage {s} ({w}x{h}) is larger than stage {} ({pw}x{ph})",
                        s - 1
                    )));
                }
            }
            prev = Some((h, w));
            if let Some(i) = t.first_non_finite() {
                let idx = t.unravel(i);
                return Err(Error::Data(format!(
                    "non-finite value {} at stage {s}, channel {}, y {}, x {}",
                    t.data()[i],
                    idx[0],
                    idx[1],
                    idx[2]
                )));
            }
        }
        Ok(())
    }

    pub fn last(&self) -> &Tensor {
        self.stages.last().expect("validated pyramid")
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn scale(&self, k: f64) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.stages.iter().map(|t| t.scale(k)).collect(),
        }
    }
}

/// Runs the backbone on one frame without recording a graph.
pub fn extract(frame: &RgbFrame, params: &ParamStore, config: &BackboneConfig) -> Result<FeaturePyramid> {
    let shapes = config.stage_shapes(frame.height(), frame.width())?;
    let mut x = frame.data().to_vec();
    let (mut c, mut h, mut w) = (3, frame.height(), frame.width());
    let mut stages = Vec::with_capacity(shapes.len());
    for (s, shape) in shapes.iter().enumerate() {
        let weight = lookup(params, &BackboneConfig::weight_name(s), &config.weight_shape(s))?;
        let bias = lookup(params, &BackboneConfig::bias_name(s), &[shape[0]])?;
        let g = config.geometry(s, c, h, w);
        let mut out = kernels::conv2d_forward(&g, &x, weight.data(), bias.data());
        for v in &mut out {
            *v = v.max(0.0);
        }
        stages.push(Tensor::new(shape.to_vec(), out.clone())?);
        x = out;
        [c, h, w] = *shape;
    }
    FeaturePyramid::new(stages)
}

fn lookup<'a>(params: &'a ParamStore, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing backbone parameter '{name}'")))?;
    if t.shape() != shape {
        return Err(Error::Config(format!(
            "parameter '{name}' has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Serializes a pyramid.
///
/// ```text
/// magic        "VQAP0001"
/// stage_count  u32 LE
/// shapes       stage_count × (C, h, w) as u32 LE
/// payload      per stage, C·h·w f64 LE values
/// ```
pub fn write_pyramid<W: Write>(mut w: W, pyramid: &FeaturePyramid) -> Result<()> {
    let io = |e| Error::io("<pyramid output>", e);
    let mut header = PYRAMID_MAGIC.to_vec();
    header.extend((pyramid.stages.len() as u32).to_le_bytes());
    for t in &pyramid.stages {
        for &d in t.shape() {
            header.extend((d as u32).to_le_bytes());
        }
    }
    w.write_all(&header).map_err(io)?;
    for t in &pyramid.stages {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pyramid<R: Read>(mut r: R) -> Result<FeaturePyramid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<pyramid input>", e))?;
    if bytes.len() < 12 || &bytes[..8] != PYRAMID_MAGIC {
        return Err(Error::parse(0, "missing VQAP0001 magic"));
    }
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::parse(off as u64, "header truncated"))
    };
    let count = u32_at(8)?;
    if count == 0 {
        return Err(Error::parse(8, "pyramid declares zero stages"));
    }
    let mut shapes = Vec::with_capacity(count);
    for s in 0..count {
        let base = 12 + 12 * s;
        let shape = vec![u32_at(base)?, u32_at(base + 4)?, u32_at(base + 8)?];
        if shape.contains(&0) {
            return Err(Error::parse(base as u64, format!("stage {s} has an empty dimension")));
        }
        shapes.push(shape);
    }
    let mut offset = 12 + 12 * count;
    let mut stages = Vec::with_capacity(count);
    for (s, shape) in shapes.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(Error::parse(
                offset as u64,
                format!("stage {s} payload truncated: need {} bytes, have {}", 8 * n, bytes.len() - offset),
            ));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stages.push(Tensor::new(shape, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::parse(offset as u64, "trailing bytes after last stage"));
    }
    FeaturePyramid::new(stages)
}

pub fn export_pyramid(path: &Path, pyramid: &FeaturePyramid) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pyramid(std::io::BufWriter::new(f), pyramid)
}

pub fn import_pyramid(path: &Path) -> Result<FeaturePyramid> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pyramid(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Format {
            path: path.to_path_buf(),
            message: format!("byte {offset}: {message}"),
        },
        Error::Data(message) => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Feeds for a graph built by [`BackboneConfig::build_graph`].
pub fn frame_feed(name: &str, frame: &RgbFrame) -> HashMap<String, Tensor> {
    HashMap::from([(name.to_string(), frame.to_tensor())])
}
