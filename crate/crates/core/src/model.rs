//! Frame regressor, video aggregation and complete FR/NR models.
//!
//! A model owns one backbone and one or more regression heads. FR models
//! have a single head; NR models trained on several datasets keep one head
//! per dataset over a shared trunk.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::diffcore::kernels;
use crate::diffcore::{Checkpoint, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::features::{self, QualityFeatureVector, SimilarityConfig};
use crate::seed;
use crate::tensor::Tensor;
use crate::videoio::{RgbFrame, SampledClip};

/// Hidden width of the regressor.
pub const HIDDEN: usize = 128;
pub const DEFAULT_HEAD: &str = "default";
const CHECKPOINT_FORMAT: &str = "vqa-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fr,
    Nr,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fr => "fr",
            ModelKind::Nr => "nr",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fr" => Ok(ModelKind::Fr),
            "nr" => Ok(ModelKind::Nr),
            other => Err(Error::Config(format!("unknown model kind '{other}' (expected fr or nr)"))),
        }
    }
}

/// `affine(in → 128) → relu → affine(128 → 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl RegressorParams {
    /// Kaiming-uniform first layer. The output layer gets small uniform
    /// weights in `±1/sqrt(HIDDEN)` and a zero bias: an all-zero output layer
    /// would give constant predictions, whose correlation loss has no
    /// gradient, so training could never start.
    pub fn init<R: Rng>(in_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("regressor input dimension must be positive".into()));
        }
        let b = (6.0 / in_dim as f64).sqrt();
        let w1 = (0..in_dim * HIDDEN).map(|_| rng.random_range(-b..b)).collect();
        let b = 1.0 / (HIDDEN as f64).sqrt();
        let w2 = (0..HIDDEN).map(|_| rng.random_range(-b..b)).collect();
        Ok(RegressorParams {
            w1: Tensor::new(vec![in_dim, HIDDEN], w1)?,
            b1: Tensor::zeros(&[HIDDEN]),
            w2: Tensor::new(vec![HIDDEN, 1], w2)?,
            b2: Tensor::zeros(&[1]),
        })
    }

    pub fn zeros(in_dim: usize) -> Self {
        RegressorParams {
            w1: Tensor::zeros(&[in_dim, HIDDEN]),
            b1: Tensor::zeros(&[HIDDEN]),
            w2: Tensor::zeros(&[HIDDEN, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_name(head: &str, part: &str) -> String {
        format!("head.{head}.{part}")
    }

    fn parts(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("fc1.weight", &self.w1),
            ("fc1.bias", &self.b1),
            ("fc2.weight", &self.w2),
            ("fc2.bias", &self.b2),
        ]
    }

    pub fn to_store(&self, head: &str) -> ParamStore {
        self.parts()
            .into_iter()
            .map(|(part, t)| (Self::param_name(head, part), t.clone()))
            .collect()
    }

    pub fn from_store(store: &ParamStore, head: &str, in_dim: usize) -> Result<Self> {
        let get = |part: &str, shape: &[usize]| -> Result<Tensor> {
            let name = Self::param_name(head, part);
            let t = store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing regressor parameter '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        Ok(RegressorParams {
            w1: get("fc1.weight", &[in_dim, HIDDEN])?,
            b1: get("fc1.bias", &[HIDDEN])?,
            w2: get("fc2.weight", &[HIDDEN, 1])?,
            b2: get("fc2.bias", &[1])?,
        })
    }
}

pub fn regress(feature: &[f64], params: &RegressorParams) -> Result<f64> {
    if feature.len() != params.in_dim() {
        return Err(Error::Data(format!(
            "feature length {} does not match regressor input {}",
            feature.len(),
            params.in_dim()
        )));
    }
    let mut hidden = kernels::affine_forward(feature, params.w1.data(), params.b1.data());
    for h in &mut hidden {
        *h = h.max(0.0);
    }
    Ok(kernels::affine_forward(&hidden, params.w2.data(), params.b2.data())[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub frame_scores: Vec<f64>,
    pub video_score: f64,
}

impl VideoScore {
    pub fn from_frames(frame_scores: Vec<f64>) -> Result<Self> {
        if frame_scores.is_empty() {
            return Err(Error::Data("no frame scores to average".into()));
        }
        let video_score = frame_scores.iter().fold(0.0, |a, &v| a + v) / frame_scores.len() as f64;
        Ok(VideoScore {
            frame_scores,
            video_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    version: String,
    kind: ModelKind,
    backbone: BackboneConfig,
    similarity: SimilarityConfig,
    input_height: usize,
    input_width: usize,
    heads: Vec<String>,
}

/// Backbone, feature extractor and regression heads bound together.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    kind: ModelKind,
    backbone: BackboneConfig,
    similarity: SimilarityConfig,
    input_height: usize,
    input_width: usize,
    heads: Vec<String>,
    params: ParamStore,
}

/// A per-video graph whose output is the `[1]` video score.
pub struct VideoGraph {
    pub graph: Graph,
    pub inputs: HashMap<String, Tensor>,
    pub frame_scores: Vec<NodeId>,
}

impl QualityModel {
    /// Fresh model; all random draws come from the `init` substream of `seed`.
    pub fn new(
        kind: ModelKind,
        backbone: BackboneConfig,
        similarity: SimilarityConfig,
        input_size: (usize, usize),
        heads: &[String],
        seed: u64,
    ) -> Result<Self> {
        similarity.validate()?;
        backbone.stage_shapes(input_size.0, input_size.1)?;
        if heads.is_empty() {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        if kind == ModelKind::Fr && heads.len() != 1 {
            return Err(Error::Config("FR models have exactly one head".into()));
        }
        for (i, h) in heads.iter().enumerate() {
            if h.is_empty() || h.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid head name '{h}'")));
            }
            if heads[..i].contains(h) {
                return Err(Error::Config(format!("duplicate head '{h}'")));
            }
        }
        let mut rng = seed::substream(seed, "init");
        let mut params = backbone.init_params(&mut rng)?;
        let mut model = QualityModel {
            kind,
            backbone,
            similarity,
            input_height: input_size.0,
            input_width: input_size.1,
            heads: heads.to_vec(),
            params: ParamStore::new(),
        };
        let dim = model.feature_dim();
        for h in heads {
            params.extend(RegressorParams::init(dim, &mut rng)?.to_store(h));
        }
        model.params = params;
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn similarity(&self) -> &SimilarityConfig {
        &self.similarity
    }

    /// Preprocessing size `(height, width)` the model was built for.
    pub fn input_size(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }

    pub fn heads(&self) -> &[String] {
        &self.heads
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::Fr => 2 * self.backbone.channel_sum(),
            ModelKind::Nr => self.backbone.last_channels(),
        }
    }

    /// Resolves `None` to the first head and checks that a named head exists.
    pub fn resolve_head<'a>(&'a self, head: Option<&'a str>) -> Result<&'a str> {
        match head {
            None => Ok(&self.heads[0]),
            Some(h) if self.heads.iter().any(|x| x == h) => Ok(h),
            Some(h) => Err(Error::Config(format!(
                "model has no head '{h}' (heads: {})",
                self.heads.join(", ")
            ))),
        }
    }

    pub fn head(&self, head: &str) -> Result<RegressorParams> {
        RegressorParams::from_store(&self.params, self.resolve_head(Some(head))?, self.feature_dim())
    }

    /// Names of the parameters a training step may update.
    pub fn trainable_names(&self, head: &str, trunk: bool) -> Vec<String> {
        let prefix = format!("head.{head}.");
        self.params
            .names()
            .filter(|n| n.starts_with(&prefix) || (trunk && n.starts_with(backbone::PARAM_PREFIX)))
            .cloned()
            .collect()
    }

    pub fn frame_feature(&self, dist: &RgbFrame, reference: Option<&RgbFrame>) -> Result<QualityFeatureVector> {
        let dp = backbone::extract(dist, &self.params, &self.backbone)?;
        match self.kind {
            ModelKind::Nr => features::nr_feature(&dp),
            ModelKind::Fr => {
                let r = reference.ok_or_else(|| Error::Data("FR scoring needs a reference".into()))?;
                if (r.width(), r.height()) != (dist.width(), dist.height()) {
                    return Err(Error::Data(format!(
                        "reference frame {}x{} does not match distorted {}x{}",
                        r.width(),
                        r.height(),
                        dist.width(),
                        dist.height()
                    )));
                }
                let rp = backbone::extract(r, &self.params, &self.backbone)?;
                features::fr_feature(&rp, &dp, &self.similarity)
            }
        }
    }

    /// Per-frame features for a clip, computed in parallel over frames.
    pub fn clip_features(&self, dist: &SampledClip, reference: Option<&SampledClip>) -> Result<Vec<QualityFeatureVector>> {
        let reference = self.check_pair(dist, reference)?;
        (0..dist.len())
            .into_par_iter()
            .map(|k| self.frame_feature(&dist.frames[k], reference.map(|r| &r.frames[k])))
            .collect()
    }

    fn check_pair<'a>(&self, dist: &SampledClip, reference: Option<&'a SampledClip>) -> Result<Option<&'a SampledClip>> {
        if dist.is_empty() {
            return Err(Error::Data("clip has no frames".into()));
        }
        match self.kind {
            ModelKind::Nr => Ok(None),
            ModelKind::Fr => {
                let r = reference.ok_or_else(|| Error::Data("FR scoring needs a reference clip".into()))?;
                if r.len() != dist.len() {
                    return Err(Error::Data(format!(
                        "reference has {} sampled frames, distorted has {}",
                        r.len(),
                        dist.len()
                    )));
                }
                Ok(Some(r))
            }
        }
    }

    /// Scores a clip. NR models ignore `reference`.
    pub fn score_clip(&self, dist: &SampledClip, reference: Option<&SampledClip>, head: Option<&str>) -> Result<VideoScore> {
        let head = self.head(self.resolve_head(head)?)?;
        let feats = self.clip_features(dist, reference)?;
        let scores = feats
            .iter()
            .map(|f| regress(&f.values, &head))
            .collect::<Result<Vec<_>>>()?;
        VideoScore::from_frames(scores)
    }

    /// Builds the differentiable graph for one video. The output node is the
    /// mean of the frame scores.
    pub fn video_graph(
        &self,
        dist: &SampledClip,
        reference: Option<&SampledClip>,
        head: &str,
        train_trunk: bool,
    ) -> Result<VideoGraph> {
        let head = self.resolve_head(Some(head))?;
        let reference = self.check_pair(dist, reference)?;
        let mut graph = Graph::new();
        let mut inputs = HashMap::new();
        let dim = self.feature_dim();
        let w1 = graph.param(&RegressorParams::param_name(head, "fc1.weight"), &[dim, HIDDEN], true)?;
        let b1 = graph.param(&RegressorParams::param_name(head, "fc1.bias"), &[HIDDEN], true)?;
        let w2 = graph.param(&RegressorParams::param_name(head, "fc2.weight"), &[HIDDEN, 1], true)?;
        let b2 = graph.param(&RegressorParams::param_name(head, "fc2.bias"), &[1], true)?;
        let mut frame_scores = Vec::with_capacity(dist.len());
        for (k, frame) in dist.frames.iter().enumerate() {
            let d = frame_input(&mut graph, &mut inputs, format!("dist.{k}"), frame)?;
            let d_stages = self.backbone.build_graph(&mut graph, d, train_trunk)?;
            let feat = match reference {
                None => features::nr_feature_graph(&mut graph, &d_stages)?,
                Some(r) => {
                    let rf = &r.frames[k];
                    if (rf.width(), rf.height()) != (frame.width(), frame.height()) {
                        return Err(Error::Data(format!("reference frame {k} size differs from distorted")));
                    }
                    let rn = frame_input(&mut graph, &mut inputs, format!("ref.{k}"), rf)?;
                    let r_stages = self.backbone.build_graph(&mut graph, rn, train_trunk)?;
                    features::fr_feature_graph(&mut graph, &r_stages, &d_stages, &self.similarity)?
                }
            };
            let h = graph.affine(feat, w1, b1)?;
            let h = graph.relu(h);
            frame_scores.push(graph.affine(h, w2, b2)?);
        }
        let all = graph.concat(&frame_scores)?;
        let out = graph.mean(all);
        graph.set_output(out);
        Ok(VideoGraph {
            graph,
            inputs,
            frame_scores,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: self.kind,
            backbone: self.backbone.clone(),
            similarity: self.similarity,
            input_height: self.input_height,
            input_width: self.input_width,
            heads: self.heads.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_value(meta)?, self.params.clone()))
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a model checkpoint (format '{}')", meta.format)));
        }
        let model = QualityModel {
            kind: meta.kind,
            backbone: meta.backbone,
            similarity: meta.similarity,
            input_height: meta.input_height,
            input_width: meta.input_width,
            heads: meta.heads,
            params: ckpt.params,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks that the parameter store holds exactly what the config implies.
    pub fn validate(&self) -> Result<()> {
        self.similarity.validate()?;
        self.backbone.stage_shapes(self.input_height, self.input_width)?;
        if self.heads.is_empty() {
            return Err(Error::Config("model has no heads".into()));
        }
        let mut expected = 0;
        for s in 0..self.backbone.stage_count {
            for (name, shape) in [
                (BackboneConfig::weight_name(s), self.backbone.weight_shape(s).to_vec()),
                (BackboneConfig::bias_name(s), vec![self.backbone.channels_per_stage[s]]),
            ] {
                match self.params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => expected += 1,
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "parameter '{name}' has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Config(format!("missing parameter '{name}'"))),
                }
            }
        }
        for h in &self.heads {
            RegressorParams::from_store(&self.params, h, self.feature_dim())?;
            expected += 4;
        }
        if expected != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                self.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            if let Some(i) = t.first_non_finite() {
                return Err(Error::Numeric(format!("parameter '{name}' index {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

fn frame_input(graph: &mut Graph, inputs: &mut HashMap<String, Tensor>, name: String, frame: &RgbFrame) -> Result<NodeId> {
    let id = graph.input(&name, &[3, frame.height(), frame.width()])?;
    inputs.insert(name, frame.to_tensor());
    Ok(id)
}
