//! Manifests, train/val splits, sample loading and synthetic datasets.
//!
//! Manifest CSV header: `dataset_id,video,reference,mos,split`. An empty
//! `reference` marks a record usable only for NR. Relative paths are
//! resolved against the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::videoio::{self, ColorRange, ColorSpec, FrameSequence, PixelFormat, Rational, RgbFrame, SampledClip};

pub const MANIFEST_HEADER: [&str; 5] = ["dataset_id", "video", "reference", "mos", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split '{other}' (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub dataset_id: String,
    pub video: String,
    pub reference: Option<String>,
    pub mos: f64,
    pub split: Split,
}

impl ManifestRecord {
    /// Key used to keep all versions of one source together.
    pub fn group_key(&self) -> &str {
        self.reference.as_deref().unwrap_or(&self.video)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = DatasetManifest {
            dataset_id: dataset_id.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.is_empty() {
            return Err(Error::Data("empty dataset_id".into()));
        }
        if self.records.is_empty() {
            return Err(Error::Data(format!("dataset '{}' has no records", self.dataset_id)));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.dataset_id != self.dataset_id {
                return Err(Error::Data(format!(
                    "record {} belongs to dataset '{}', manifest is '{}'",
                    i + 1,
                    r.dataset_id,
                    self.dataset_id
                )));
            }
            if !r.mos.is_finite() {
                return Err(Error::Data(format!("record {} has non-finite mos", i + 1)));
            }
            if r.video.is_empty() {
                return Err(Error::Data(format!("record {} has an empty video path", i + 1)));
            }
            if !seen.insert(r.video.as_str()) {
                return Err(Error::Data(format!("duplicate video '{}'", r.video)));
            }
        }
        Ok(())
    }

    /// FR training and scoring need a reference for every record.
    pub fn require_references(&self) -> Result<()> {
        match self.records.iter().position(|r| r.reference.is_none()) {
            Some(i) => Err(Error::Data(format!(
                "dataset '{}' record {} ('{}') has no reference",
                self.dataset_id,
                i + 1,
                self.records[i].video
            ))),
            None => Ok(()),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

/// Parses a manifest. `origin` names the source in error messages.
pub fn read_manifest<R: Read>(reader: R, origin: &str) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Data(format!(
            "{origin}: header must be '{}', got '{}'",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Data(format!("{origin}: row {row_no}: {e}")))?;
        let bad = |msg: String| Error::Data(format!("{origin}: row {row_no}: {msg}"));
        let mos: f64 = row[3]
            .parse()
            .map_err(|_| bad(format!("mos '{}' is not a number", &row[3])))?;
        if !mos.is_finite() {
            return Err(bad(format!("mos '{}' is not finite", &row[3])));
        }
        let split = row[4].parse().map_err(|e: Error| bad(e.to_string()))?;
        records.push(ManifestRecord {
            dataset_id: row[0].to_string(),
            video: row[1].to_string(),
            reference: (!row[2].is_empty()).then(|| row[2].to_string()),
            mos,
            split,
        });
    }
    let id = records
        .first()
        .map(|r| r.dataset_id.clone())
        .ok_or_else(|| Error::Data(format!("{origin}: no records")))?;
    DatasetManifest::new(id, records).map_err(|e| Error::Data(format!("{origin}: {e}")))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn write_manifest<W: Write>(writer: W, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for r in &manifest.records {
        w.write_record([
            r.dataset_id.as_str(),
            &r.video,
            r.reference.as_deref().unwrap_or(""),
            &r.mos.to_string(),
            &r.split.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(std::io::BufWriter::new(f), manifest)
}

/// Assigns splits by source: `round(ratio · n_sources)` sources (after a
/// seeded shuffle) go to train, the rest to val. Records without a
/// reference are their own source.
pub fn split_by_reference(records: &mut [ManifestRecord], ratio: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio must be in [0, 1], got {ratio}")));
    }
    let mut keys: Vec<String> = records
        .iter()
        .map(|r| r.group_key().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if keys.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 distinct references to split, found {}",
            keys.len()
        )));
    }
    keys.shuffle(&mut seed::substream(seed, "split"));
    let n_train = (ratio * keys.len() as f64).round() as usize;
    let train: HashSet<&str> = keys[..n_train].iter().map(String::as_str).collect();
    for r in records.iter_mut() {
        r.split = if train.contains(r.group_key()) {
            Split::Train
        } else {
            Split::Val
        };
    }
    Ok(())
}

/// A preprocessed, labelled video ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub dist: SampledClip,
    pub reference: Option<Arc<SampledClip>>,
    pub mos: f64,
}

/// Where a manifest's relative paths are anchored.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Decodes and preprocesses the records of `split` (all records when
/// `None`). Each reference is decoded once and shared.
pub fn load_samples(
    manifest: &DatasetManifest,
    base: &Path,
    split: Option<Split>,
    size: (usize, usize),
    with_reference: bool,
) -> Result<Vec<VideoSample>> {
    let records: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "dataset '{}' has no {} records",
            manifest.dataset_id,
            split.map_or("".to_string(), |s| s.to_string())
        )));
    }
    let (h, w) = size;
    let refs: BTreeMap<&str, ()> = if with_reference {
        let mut m = BTreeMap::new();
        for r in &records {
            let reference = r.reference.as_deref().ok_or_else(|| {
                Error::Data(format!("'{}' has no reference but FR needs one", r.video))
            })?;
            m.insert(reference, ());
        }
        m
    } else {
        BTreeMap::new()
    };
    type Decoded = (FrameSequence, Arc<SampledClip>);
    let decoded_refs: HashMap<&str, Decoded> = refs
        .keys()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&name| {
            let seq = videoio::decode(&resolve(base, name))?;
            let clip = videoio::preprocess(&seq, h, w)?;
            // Only the metadata is needed afterwards.
            let meta = FrameSequence { frames: Vec::new(), ..seq };
            Ok((name, (meta, Arc::new(clip))))
        })
        .collect::<Result<_>>()?;
    let frame_counts: HashMap<&str, usize> = decoded_refs
        .iter()
        .map(|(k, (_, clip))| (*k, clip.source_indices.len()))
        .collect();
    records
        .par_iter()
        .map(|r| {
            let seq = videoio::decode(&resolve(base, &r.video))?;
            let reference = match r.reference.as_deref().filter(|_| with_reference) {
                None => None,
                Some(name) => {
                    let (meta, clip) = &decoded_refs[name];
                    if (meta.width, meta.height) != (seq.width, seq.height) || meta.frame_rate != seq.frame_rate {
                        return Err(Error::Data(format!(
                            "'{}' is {}x{} at {}, its reference '{name}' is {}x{} at {}",
                            r.video, seq.width, seq.height, seq.frame_rate, meta.width, meta.height, meta.frame_rate
                        )));
                    }
                    Some(Arc::clone(clip))
                }
            };
            let dist = videoio::preprocess(&seq, h, w)?;
            if let Some(name) = r.reference.as_deref().filter(|_| with_reference) {
                if frame_counts[name] != dist.len() {
                    return Err(Error::Data(format!(
                        "'{}' samples {} frames but its reference samples {}",
                        r.video,
                        dist.len(),
                        frame_counts[name]
                    )));
                }
            }
            Ok(VideoSample {
                id: r.video.clone(),
                dist,
                reference,
                mos: r.mos,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Blur,
    Noise,
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dataset_id: String,
    pub n_refs: usize,
    pub levels: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: Rational,
    pub distortions: Vec<Distortion>,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dataset_id: "synthetic".into(),
            n_refs: 5,
            levels: 4,
            width: 64,
            height: 64,
            frames: 8,
            fps: Rational::integer(4).expect("non-zero"),
            distortions: vec![Distortion::Blur, Distortion::Noise],
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_refs < 2 || self.levels < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs n_refs >= 2 and levels >= 2, got {} and {}",
                self.n_refs, self.levels
            )));
        }
        if self.width < 2 || self.height < 2 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Config("synthetic frame size must be even and at least 2x2".into()));
        }
        if self.frames == 0 || self.distortions.is_empty() {
            return Err(Error::Config("need at least one frame and one distortion".into()));
        }
        Ok(())
    }

    /// MOS before jitter.
    pub fn base_mos(&self, severity: usize) -> f64 {
        5.0 - 4.0 * severity as f64 / (self.levels - 1) as f64
    }

    /// Jitter is uniform in `±0.1 × gap`, well under half the inter-level gap.
    pub fn jitter_amplitude(&self) -> f64 {
        0.1 * 4.0 / (self.levels - 1) as f64
    }
}

const TEXTURE_FREQS: [f64; 8] = [2.0, 3.0, 4.0, 6.0, 8.0, 11.0, 16.0, 22.0];

struct Content {
    base: [f64; 3],
    grad: [[f64; 2]; 3],
    waves: Vec<Wave>,
    patch: Patch,
}

struct Wave {
    freq: [f64; 2],
    phase: f64,
    speed: f64,
    amp: [f64; 3],
}

struct Patch {
    pos: [f64; 2],
    vel: [f64; 2],
    size: f64,
    color: [f64; 3],
}

impl Content {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut c3 = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let base = c3(0.4, 0.6);
        let grad = [0; 3].map(|_| [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
        // Many gratings at fixed frequencies with random orientation and a
        // 1/sqrt(f) amplitude falloff: every reference shares roughly the
        // same spectrum, as natural content does.
        let waves = TEXTURE_FREQS
            .iter()
            .map(|&f| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Wave {
                    freq: [f * angle.cos(), f * angle.sin()],
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    speed: rng.random_range(-0.6..0.6),
                    amp: [0.1 / f.sqrt(); 3],
                }
            })
            .collect();
        let patch = Patch {
            pos: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
            vel: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
            size: rng.random_range(0.1..0.25),
            color: [0; 3].map(|_| rng.random_range(0.3..0.7)),
        };
        Content {
            base,
            grad,
            waves,
            patch,
        }
    }

    fn frame(&self, t: usize, width: usize, height: usize) -> RgbFrame {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        let t = t as f64;
        let px = (self.patch.pos[0] + self.patch.vel[0] * t).rem_euclid(1.0);
        let py = (self.patch.pos[1] + self.patch.vel[1] * t).rem_euclid(1.0);
        for y in 0..height {
            let v = y as f64 / height as f64;
            for x in 0..width {
                let u = x as f64 / width as f64;
                let in_patch = (u - px).abs() < self.patch.size / 2.0 && (v - py).abs() < self.patch.size / 2.0;
                for c in 0..3 {
                    let mut val = if in_patch {
                        self.patch.color[c]
                    } else {
                        self.base[c] + self.grad[c][0] * u + self.grad[c][1] * v
                    };
                    for w in &self.waves {
                        let arg = std::f64::consts::TAU * (w.freq[0] * u + w.freq[1] * v) + w.phase + w.speed * t;
                        val += w.amp[c] * arg.sin();
                    }
                    data[c * plane + y * width + x] = val.clamp(0.02, 0.98);
                }
            }
        }
        RgbFrame::new(width, height, data).expect("sized above")
    }
}

fn gaussian_blur(frame: &RgbFrame, sigma: f64) -> RgbFrame {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let (w, h) = (frame.width(), frame.height());
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        let src = frame.channel(c);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[y * w + clampi(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    taps.iter()
                        .enumerate()
                        .map(|(k, t)| t * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                        .sum(),
                );
            }
        }
    }
    RgbFrame::new(w, h, out).expect("same size")
}

fn add_noise<R: Rng>(frame: &RgbFrame, sigma: f64, rng: &mut R) -> RgbFrame {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = frame
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    RgbFrame::new(frame.width(), frame.height(), data).expect("same size")
}

fn distort(frames: &[RgbFrame], kind: Distortion, severity: usize, rng_name: &str, seed: u64) -> Vec<RgbFrame> {
    let s = severity as f64;
    match kind {
        Distortion::Blur => frames.iter().map(|f| gaussian_blur(f, 0.7 * s)).collect(),
        Distortion::Noise => {
            let mut rng = seed::substream(seed, rng_name);
            frames.iter().map(|f| add_noise(f, 0.035 * s, &mut rng)).collect()
        }
    }
}

/// Writes reference clips, their blurred and noisy versions and
/// `manifest.csv` under `out_dir`, and returns the manifest.
pub fn generate_synthetic(out_dir: &Path, cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["refs", "dist"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let spec = ColorSpec {
        width: cfg.width,
        height: cfg.height,
        bit_depth: 8,
        pixel_format: PixelFormat::Yuv420,
        range: ColorRange::Limited,
    };
    let encode = |frames: &[RgbFrame]| -> Result<FrameSequence> {
        Ok(FrameSequence {
            width: cfg.width,
            height: cfg.height,
            frame_rate: cfg.fps,
            bit_depth: 8,
            pixel_format: PixelFormat::Yuv420,
            range: ColorRange::Limited,
            transfer_tag: None,
            frames: frames.iter().map(|f| videoio::from_rgb(f, &spec)).collect::<Result<_>>()?,
        })
    };

    let jobs: Vec<(usize, Distortion, usize)> = (0..cfg.n_refs)
        .flat_map(|r| {
            cfg.distortions
                .iter()
                .flat_map(move |&d| (0..cfg.levels).map(move |s| (r, d, s)))
        })
        .collect();

    let refs: Vec<(String, FrameSequence, Vec<RgbFrame>)> = (0..cfg.n_refs)
        .into_par_iter()
        .map(|r| {
            let content = Content::random(&mut seed::substream(cfg.seed, &format!("content/{r}")));
            let frames: Vec<RgbFrame> = (0..cfg.frames).map(|t| content.frame(t, cfg.width, cfg.height)).collect();
            let seq = encode(&frames)?;
            let name = format!("refs/ref{r:03}.y4m");
            videoio::save_y4m(&out_dir.join(&name), &seq)?;
            Ok((name, seq, frames))
        })
        .collect::<Result<_>>()?;

    let videos: Vec<String> = jobs
        .par_iter()
        .map(|&(r, d, s)| {
            let name = format!("dist/ref{r:03}_{d}_{s}.y4m");
            let (_, ref_seq, ref_frames) = &refs[r];
            let seq = if s == 0 {
                ref_seq.clone()
            } else {
                encode(&distort(ref_frames, d, s, &format!("noise/{r}/{d}/{s}"), cfg.seed))?
            };
            videoio::save_y4m(&out_dir.join(&name), &seq)?;
            Ok(name)
        })
        .collect::<Result<_>>()?;

    let mut jitter = seed::substream(cfg.seed, "jitter");
    let amp = cfg.jitter_amplitude();
    let mut records: Vec<ManifestRecord> = jobs
        .iter()
        .zip(videos)
        .map(|(&(r, _, s), video)| ManifestRecord {
            dataset_id: cfg.dataset_id.clone(),
            video,
            reference: Some(refs[r].0.clone()),
            mos: cfg.base_mos(s) + jitter.random_range(-amp..=amp),
            split: Split::Train,
        })
        .collect();
    split_by_reference(&mut records, cfg.train_ratio, cfg.seed)?;
    let manifest = DatasetManifest::new(cfg.dataset_id.clone(), records)?;
    save_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "dataset_id,video,reference,mos,split
d,a.y4m,r1.y4m,4.5,train
d,b.y4m,r1.y4m,3.25,train
d,c.y4m,r2.y4m,2,val
d,e.y4m,,1.5,val
";

    #[test]
    fn loads_fixture() {
        let m = read_manifest(FIXTURE.as_bytes(), "fixture").unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!((m.count(Split::Train), m.count(Split::Val)), (2, 2));
        assert_eq!(m.records[3].reference, None);
        assert!(m.require_references().is_err());
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let bad = FIXTURE.replace("3.25", "abc");
        let err = read_manifest(bad.as_bytes(), "f").unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("abc"), "{err}");
        let dup = FIXTURE.replace("b.y4m", "a.y4m");
        assert!(read_manifest(dup.as_bytes(), "f").is_err());
        let split = FIXTURE.replace(",val\nd,e", ",test\nd,e");
        assert!(read_manifest(split.as_bytes(), "f").unwrap_err().to_string().contains("test"));
        assert!(read_manifest("a,b\n".as_bytes(), "f").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let m = read_manifest(FIXTURE.as_bytes(), "f").unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &m).unwrap();
        assert_eq!(read_manifest(&buf[..], "f").unwrap(), m);
    }

    fn grid(refs: usize, per: usize) -> Vec<ManifestRecord> {
        (0..refs)
            .flat_map(|r| {
                (0..per).map(move |i| ManifestRecord {
                    dataset_id: "d".into(),
                    video: format!("v{r}_{i}"),
                    reference: Some(format!("r{r}")),
                    mos: i as f64,
                    split: Split::Val,
                })
            })
            .collect()
    }

    #[test]
    fn split_keeps_sources_together() {
        let mut recs = grid(20, 18);
        split_by_reference(&mut recs, 0.8, 7).unwrap();
        let train = recs.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 288);
        let mut by_ref: HashMap<&str, Split> = HashMap::new();
        for r in &recs {
            assert_eq!(*by_ref.entry(r.group_key()).or_insert(r.split), r.split);
        }
        let mut again = grid(20, 18);
        split_by_reference(&mut again, 0.8, 7).unwrap();
        assert_eq!(again, recs);

        let mut all = grid(3, 2);
        split_by_reference(&mut all, 1.0, 1).unwrap();
        assert!(all.iter().all(|r| r.split == Split::Train));
        assert!(split_by_reference(&mut grid(1, 4), 0.8, 1).is_err());
    }

    #[test]
    fn synthetic_dataset_structure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            n_refs: 2,
            levels: 3,
            width: 16,
            height: 16,
            frames: 4,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let m = generate_synthetic(dir.path(), &cfg).unwrap();
        assert_eq!(m.records.len(), 2 * 3 * 2);
        assert_eq!(load_manifest(&dir.path().join("manifest.csv")).unwrap(), m);
        for r in &m.records {
            let v = std::fs::read(dir.path().join(&r.video)).unwrap();
            let reference = std::fs::read(dir.path().join(r.reference.as_ref().unwrap())).unwrap();
            let sev: usize = r.video[r.video.len() - 6..r.video.len() - 4].trim_start_matches('_').parse().unwrap();
            assert_eq!(v == reference, sev == 0, "{}", r.video);
            assert!((r.mos - cfg.base_mos(sev)).abs() <= cfg.jitter_amplitude());
        }
        let samples = load_samples(&m, dir.path(), None, (8, 8), true).unwrap();
        assert_eq!(samples.len(), 12);
        assert!(samples.iter().all(|s| s.dist.len() == 1 && s.reference.as_ref().unwrap().len() == 1));
    }
}
