//! Quality-aware feature vectors built from feature pyramids.
//!
//! FR: per stage and channel, a texture index comparing global means and a
//! structure index comparing variances with the cross covariance. NR: the
//! channel means of the final stage.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::diffcore::kernels;
use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig { c1: 1e-6, c2: 1e-6 }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite() && self.c2 > 0.0 && self.c2.is_finite()) {
            return Err(Error::Config(format!(
                "c1 and c2 must be positive and finite, got {} and {}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    Texture,
    Structure,
    Mean,
}

/// Where one entry of a feature vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTag {
    pub stage: usize,
    pub feature: FeatureType,
    pub channel: usize,
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.feature {
            FeatureType::Texture => "texture",
            FeatureType::Structure => "structure",
            FeatureType::Mean => "mean",
        };
        write!(f, "s{}_{}_c{}", self.stage, kind, self.channel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityFeatureVector {
    pub values: Vec<f64>,
    pub kind: ModelKind,
    pub layout: Vec<FeatureTag>,
}

impl QualityFeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Stage-major; within a stage all texture entries, then all structure
/// entries, each in channel order.
pub fn fr_layout(channels_per_stage: &[usize]) -> Vec<FeatureTag> {
    let mut layout = Vec::with_capacity(2 * channels_per_stage.iter().sum::<usize>());
    for (stage, &c) in channels_per_stage.iter().enumerate() {
        for feature in [FeatureType::Texture, FeatureType::Structure] {
            layout.extend((0..c).map(|channel| FeatureTag { stage, feature, channel }));
        }
    }
    layout
}

pub fn nr_layout(stage: usize, channels: usize) -> Vec<FeatureTag> {
    (0..channels)
        .map(|channel| FeatureTag {
            stage,
            feature: FeatureType::Mean,
            channel,
        })
        .collect()
}

/// Population statistics of one `[C, h, w]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn channel_stats(map: &Tensor) -> Result<ChannelStats> {
    let c = map_channels(map)?;
    Ok(ChannelStats {
        mean: kernels::channel_means(map.data(), c),
        variance: kernels::channel_covariances(map.data(), map.data(), c),
    })
}

/// Statistics of a reference/distorted map pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub reference: ChannelStats,
    pub distorted: ChannelStats,
    pub covariance: Vec<f64>,
}

pub fn pair_stats(reference: &Tensor, distorted: &Tensor) -> Result<PairStats> {
    if reference.shape() != distorted.shape() {
        return Err(Error::Data(format!(
            "paired maps differ in shape: {:?} vs {:?}",
            reference.shape(),
            distorted.shape()
        )));
    }
    let c = map_channels(reference)?;
    Ok(PairStats {
        reference: channel_stats(reference)?,
        distorted: channel_stats(distorted)?,
        covariance: kernels::channel_covariances(reference.data(), distorted.data(), c),
    })
}

fn map_channels(map: &Tensor) -> Result<usize> {
    match map.shape() {
        &[c, _, _] => Ok(c),
        s => Err(Error::Data(format!("feature map must be [C, h, w], got {s:?}"))),
    }
}

pub fn texture_index(mu_r: f64, mu_d: f64, c1: f64) -> f64 {
    (2.0 * (mu_r * mu_d) + c1) / (mu_r * mu_r + mu_d * mu_d + c1)
}

pub fn structure_index(var_r: f64, var_d: f64, cov: f64, c2: f64) -> f64 {
    (2.0 * cov + c2) / (var_r + var_d + c2)
}

pub fn texture_similarity(stats: &PairStats, c1: f64) -> Vec<f64> {
    stats
        .reference
        .mean
        .iter()
        .zip(&stats.distorted.mean)
        .map(|(&r, &d)| texture_index(r, d, c1))
        .collect()
}

pub fn structure_similarity(stats: &PairStats, c2: f64) -> Vec<f64> {
    stats
        .reference
        .variance
        .iter()
        .zip(&stats.distorted.variance)
        .zip(&stats.covariance)
        .map(|((&vr, &vd), &cov)| structure_index(vr, vd, cov, c2))
        .collect()
}

pub fn fr_feature(
    reference: &FeaturePyramid,
    distorted: &FeaturePyramid,
    cfg: &SimilarityConfig,
) -> Result<QualityFeatureVector> {
    if reference.shapes() != distorted.shapes() {
        return Err(Error::Data(format!(
            "pyramid shapes differ: {:?} vs {:?}",
            reference.shapes(),
            distorted.shapes()
        )));
    }
    let mut values = Vec::new();
    let mut channels = Vec::with_capacity(reference.stages.len());
    for (r, d) in reference.stages.iter().zip(&distorted.stages) {
        let stats = pair_stats(r, d)?;
        channels.push(stats.covariance.len());
        values.extend(texture_similarity(&stats, cfg.c1));
        values.extend(structure_similarity(&stats, cfg.c2));
    }
    Ok(QualityFeatureVector {
        values,
        kind: ModelKind::Fr,
        layout: fr_layout(&channels),
    })
}

pub fn nr_feature(pyramid: &FeaturePyramid) -> Result<QualityFeatureVector> {
    let last = pyramid.last();
    let c = map_channels(last)?;
    Ok(QualityFeatureVector {
        values: kernels::channel_means(last.data(), c),
        kind: ModelKind::Nr,
        layout: nr_layout(pyramid.stages.len() - 1, c),
    })
}

/// Graph counterpart of [`fr_feature`]; returns a flat node in the same order.
pub fn fr_feature_graph(
    graph: &mut Graph,
    reference: &[NodeId],
    distorted: &[NodeId],
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    if reference.len() != distorted.len() || reference.is_empty() {
        return Err(Error::Config(format!(
            "stage count mismatch: {} vs {}",
            reference.len(),
            distorted.len()
        )));
    }
    let mut parts = Vec::with_capacity(2 * reference.len());
    for (&r, &d) in reference.iter().zip(distorted) {
        let mr = graph.spatial_mean(r)?;
        let md = graph.spatial_mean(d)?;
        let vr = graph.channel_variance(r)?;
        let vd = graph.channel_variance(d)?;
        let cov = graph.channel_covariance(r, d)?;

        let prod = graph.mul(mr, md)?;
        let twice = graph.mul_scalar(prod, 2.0);
        let num = graph.add_scalar(twice, cfg.c1);
        let rr = graph.mul(mr, mr)?;
        let dd = graph.mul(md, md)?;
        let sq = graph.add(rr, dd)?;
        let den = graph.add_scalar(sq, cfg.c1);
        parts.push(graph.div(num, den)?);

        let twice = graph.mul_scalar(cov, 2.0);
        let num = graph.add_scalar(twice, cfg.c2);
        let var = graph.add(vr, vd)?;
        let den = graph.add_scalar(var, cfg.c2);
        parts.push(graph.div(num, den)?);
    }
    graph.concat(&parts)
}

/// Graph counterpart of [`nr_feature`].
pub fn nr_feature_graph(graph: &mut Graph, stages: &[NodeId]) -> Result<NodeId> {
    let last = *stages
        .last()
        .ok_or_else(|| Error::Config("no stages to pool".into()))?;
    graph.spatial_mean(last)
}

/// One row per frame, header `frame,<tag>...`.
pub fn write_feature_csv<W: Write>(writer: W, frames: &[QualityFeatureVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = frames.first() else {
        return Err(Error::Data("no feature vectors to write".into()));
    };
    let mut header = vec!["frame".to_string()];
    header.extend(first.layout.iter().map(ToString::to_string));
    w.write_record(&header)?;
    for (i, f) in frames.iter().enumerate() {
        if f.layout != first.layout {
            return Err(Error::Data(format!("frame {i} has a different feature layout")));
        }
        let mut row = vec![i.to_string()];
        row.extend(f.values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<feature csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStore;
    use std::collections::HashMap;

    fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn pyramid(seed: u64) -> FeaturePyramid {
        let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64
        };
        let s0 = map(2, 4, 4, (0..32).map(|_| next()).collect());
        let s1 = map(3, 2, 2, (0..12).map(|_| next() * 3.0).collect());
        FeaturePyramid::new(vec![s0, s1]).unwrap()
    }

    #[test]
    fn channel_stat_examples() {
        let s = channel_stats(&map(1, 2, 2, vec![3.0; 4])).unwrap();
        assert_eq!((s.mean[0], s.variance[0]), (3.0, 0.0));
        let s = channel_stats(&map(1, 1, 2, vec![0.0, 2.0])).unwrap();
        assert_eq!((s.mean[0], s.variance[0]), (1.0, 1.0));
        assert!(pair_stats(&map(1, 1, 2, vec![0.0; 2]), &map(1, 2, 1, vec![0.0; 2])).is_err());
    }

    #[test]
    fn similarity_formula_examples() {
        assert_eq!(texture_index(5.0, 5.0, 0.3), 1.0);
        assert!((texture_index(1.0, 0.0, 1e-6) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-18);
        assert!((texture_index(2.0, 1.0, 0.1) - 4.1 / 5.1).abs() < 1e-15);
        let anti = structure_index(1.0, 1.0, -1.0, 1e-6);
        assert!((anti - (-2.0 + 1e-6) / (2.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(structure_index(0.0, 0.0, 0.0, 1e-6), 1.0);
    }

    #[test]
    fn negated_zero_mean_map_is_anticorrelated() {
        let r = map(1, 1, 4, vec![1.0, -1.0, 1.0, -1.0]);
        let d = r.scale(-1.0);
        let s = structure_similarity(&pair_stats(&r, &d).unwrap(), 1e-6);
        assert!((s[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn fr_identity_symmetry_and_length() {
        let cfg = SimilarityConfig::default();
        let (a, b) = (pyramid(1), pyramid(2));
        let same = fr_feature(&a, &a, &cfg).unwrap();
        assert_eq!(same.len(), 2 * (2 + 3));
        assert!(same.values.iter().all(|&v| v == 1.0));
        let ab = fr_feature(&a, &b, &cfg).unwrap();
        let ba = fr_feature(&b, &a, &cfg).unwrap();
        assert_eq!(ab.values, ba.values);
        assert_eq!(ab.layout[2].feature, FeatureType::Structure);
        assert_eq!(ab.layout[4].stage, 1);
        assert_eq!(fr_layout(&[16, 32, 64, 128]).len(), 480);
    }

    #[test]
    fn fr_rejects_mismatched_pyramids() {
        let a = pyramid(1);
        let b = FeaturePyramid::new(vec![a.stages[0].clone()]).unwrap();
        assert!(fr_feature(&a, &b, &SimilarityConfig::default()).is_err());
    }

    #[test]
    fn nr_examples() {
        let p = FeaturePyramid::new(vec![map(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        assert_eq!(nr_feature(&p).unwrap().values, vec![2.5]);
        let p = FeaturePyramid::new(vec![map(3, 2, 2, vec![0.5; 12])]).unwrap();
        assert_eq!(nr_feature(&p).unwrap().values, vec![0.5; 3]);
    }

    #[test]
    fn graph_features_match_plain_bitwise() {
        let cfg = SimilarityConfig::default();
        let (a, b) = (pyramid(3), pyramid(4));
        let mut g = Graph::new();
        let mut inputs = HashMap::new();
        let mut ids = |g: &mut Graph, tag: &str, p: &FeaturePyramid| -> Vec<NodeId> {
            p.stages
                .iter()
                .enumerate()
                .map(|(s, t)| {
                    let name = format!("{tag}{s}");
                    inputs.insert(name.clone(), t.clone());
                    g.input(&name, t.shape()).unwrap()
                })
                .collect()
        };
        let ra = ids(&mut g, "r", &a);
        let db = ids(&mut g, "d", &b);
        let fr = fr_feature_graph(&mut g, &ra, &db, &cfg).unwrap();
        let nr = nr_feature_graph(&mut g, &db).unwrap();
        g.set_output(fr);
        g.forward(&inputs, &ParamStore::new()).unwrap();
        assert_eq!(g.value(fr).unwrap().data(), &fr_feature(&a, &b, &cfg).unwrap().values[..]);
        assert_eq!(g.value(nr).unwrap().data(), &nr_feature(&b).unwrap().values[..]);
    }

    #[test]
    fn csv_header_follows_layout() {
        let f = nr_feature(&pyramid(5)).unwrap();
        let mut out = Vec::new();
        write_feature_csv(&mut out, &[f.clone(), f]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "frame,s1_mean_c0,s1_mean_c1,s1_mean_c2");
        assert_eq!(lines.count(), 2);
    }
}
