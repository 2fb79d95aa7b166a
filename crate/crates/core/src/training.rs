//! Correlation-loss training: FR pretrain/fine-tune transfer and NR
//! iterative mixed-dataset training (IMDT) with per-dataset heads.
//!
//! A batch is a set of videos. Each video gets its own graph; forwards and
//! backwards run in parallel, the loss and its gradient with respect to the
//! video scores are computed outside the graphs, and per-video parameter
//! gradients are summed in batch order so results do not depend on thread
//! scheduling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasetio::VideoSample;
use crate::diffcore::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ModelKind, QualityModel, VideoGraph};
use crate::seed;
use crate::tensor::Tensor;

/// Predictions with a smaller standard deviation than this are treated as
/// constant by [`plcc_loss`].
pub const PREDICTION_STD_FLOOR: f64 = 1e-12;

/// Above this many activation values per batch, graphs are rebuilt for the
/// backward pass instead of being held from the forward pass.
const KEEP_GRAPHS_BUDGET: usize = 1 << 25;

#[derive(Debug, Clone, PartialEq)]
pub struct PlccLoss {
    pub loss: f64,
    /// d loss / d prediction.
    pub grad: Vec<f64>,
    /// Set when predictions were constant; the loss is then 0.5 and the
    /// gradient is zero.
    pub degenerate: bool,
}

/// `(1 - r) / 2` with `r` the Pearson correlation of `pred` and `labels`.
pub fn plcc_loss(pred: &[f64], labels: &[f64]) -> Result<PlccLoss> {
    let n = pred.len();
    if n != labels.len() || n < 2 {
        return Err(Error::Config(format!(
            "PLCC loss needs two equal-length vectors of at least 2, got {} and {}",
            n,
            labels.len()
        )));
    }
    if let Some(i) = pred.iter().chain(labels).position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input to PLCC loss at position {i}")));
    }
    let center = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / n as f64;
        x.iter().map(|v| v - m).collect::<Vec<f64>>()
    };
    let (a, b) = (center(pred), center(labels));
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let (saa, sbb) = (sq(&a), sq(&b));
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    let sqrt_n = (n as f64).sqrt();
    if nb / sqrt_n < PREDICTION_STD_FLOOR {
        return Err(Error::Config("constant labels: PLCC loss is undefined for this batch".into()));
    }
    if na / sqrt_n < PREDICTION_STD_FLOOR {
        return Ok(PlccLoss {
            loss: 0.5,
            grad: vec![0.0; n],
            degenerate: true,
        });
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    // sqrt of the product keeps r exactly ±1 when pred is ±labels.
    let r = dot / (saa * sbb).sqrt();
    // The centred vectors sum to zero, so dr/da is already dr/dp.
    let grad = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| -0.5 * (bi / (na * nb) - r * ai / (na * na)))
        .collect();
    Ok(PlccLoss {
        loss: 0.5 - 0.5 * r,
        grad,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs of the main (FR fine-tune, NR post-IMDT fine-tune) stage.
    pub epochs: usize,
    /// FR pretraining epochs.
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn fr() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 6,
            epochs: 30,
            pretrain_epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn nr() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            ..Self::fr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it gives a dry run that leaves parameters intact.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-dataset epoch counts `E_i = max(floor(N_max / N_i), E_min)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImdtSchedule {
    pub dataset_sizes: Vec<usize>,
    pub e_min: usize,
    pub loops: usize,
    pub epochs_per_dataset: Vec<usize>,
}

impl ImdtSchedule {
    pub const DEFAULT_E_MIN: usize = 10;
    pub const DEFAULT_LOOPS: usize = 3;

    pub fn new(dataset_sizes: &[usize], e_min: usize, loops: usize, batch_size: usize) -> Result<Self> {
        if dataset_sizes.is_empty() {
            return Err(Error::Config("IMDT needs at least one dataset".into()));
        }
        if let Some(i) = dataset_sizes.iter().position(|&n| n < batch_size.max(2)) {
            return Err(Error::Config(format!(
                "dataset {i} has {} training videos, fewer than the batch size {batch_size}",
                dataset_sizes[i]
            )));
        }
        if loops == 0 {
            return Err(Error::Config("IMDT needs at least one loop".into()));
        }
        let n_max = *dataset_sizes.iter().max().expect("non-empty");
        Ok(ImdtSchedule {
            dataset_sizes: dataset_sizes.to_vec(),
            e_min,
            loops,
            epochs_per_dataset: dataset_sizes.iter().map(|&n| (n_max / n).max(e_min)).collect(),
        })
    }

    pub fn epochs_per_loop(&self) -> usize {
        self.epochs_per_dataset.iter().sum()
    }

    pub fn total_epochs(&self) -> usize {
        self.loops * self.epochs_per_loop()
    }
}

/// Training samples of one dataset.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub dataset_id: String,
    pub samples: Vec<VideoSample>,
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    #[serde(rename = "loop")]
    pub loop_index: Option<usize>,
    pub dataset_id: String,
    pub epoch: usize,
    pub global_epoch: usize,
    pub mean_batch_loss: Option<f64>,
    pub batch_losses: Vec<f64>,
    /// Batches skipped because their labels were constant.
    pub skipped_batches: usize,
    /// Optimizer steps taken.
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: QualityModel,
    pub optimizer: Adam,
    pub global_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: QualityModel, adam: AdamConfig) -> Self {
        TrainState {
            model,
            optimizer: Adam::new(adam),
            global_epoch: 0,
            log: Vec::new(),
        }
    }
}

/// What one epoch trains.
#[derive(Debug, Clone)]
pub struct EpochPlan<'a> {
    pub phase: &'a str,
    pub loop_index: Option<usize>,
    pub dataset_id: &'a str,
    pub epoch: usize,
    pub head: &'a str,
    pub train_trunk: bool,
}

enum BatchOutcome {
    SkippedConstantLabels,
    Stepped { loss: f64 },
}

/// Called after every epoch with the log entry and the updated model.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &QualityModel) -> Result<()> + 'a;

/// One pass over `samples` in a seeded shuffled order. The last batch is
/// kept when it has at least 2 videos.
pub fn train_epoch(state: &mut TrainState, samples: &[VideoSample], plan: &EpochPlan, config: &TrainConfig) -> Result<EpochLog> {
    config.validate()?;
    if samples.len() < config.batch_size {
        return Err(Error::Data(format!(
            "{} has {} videos, fewer than the batch size {}",
            plan.dataset_id,
            samples.len(),
            config.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::substream(config.seed, &format!("shuffle/{}", state.global_epoch)));
    let mut log = EpochLog {
        phase: plan.phase.to_string(),
        loop_index: plan.loop_index,
        dataset_id: plan.dataset_id.to_string(),
        epoch: plan.epoch,
        global_epoch: state.global_epoch,
        mean_batch_loss: None,
        batch_losses: Vec::new(),
        skipped_batches: 0,
        steps: 0,
    };
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let outcome = batch_step(state, &batch, plan, config.learning_rate).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!(
                "{} epoch {} batch {b} ({}): {m}",
                plan.phase,
                plan.epoch,
                batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")
            )),
            other => other,
        })?;
        match outcome {
            BatchOutcome::SkippedConstantLabels => log.skipped_batches += 1,
            BatchOutcome::Stepped { loss } => {
                log.batch_losses.push(loss);
                log.steps += 1;
            }
        }
    }
    if !log.batch_losses.is_empty() {
        log.mean_batch_loss = Some(log.batch_losses.iter().sum::<f64>() / log.batch_losses.len() as f64);
    }
    state.global_epoch += 1;
    state.log.push(log.clone());
    Ok(log)
}

fn activation_estimate(model: &QualityModel, batch: &[&VideoSample]) -> usize {
    batch
        .iter()
        .map(|s| {
            let Some(f) = s.dist.frames.first() else { return 0 };
            let per_frame: usize = model
                .backbone()
                .stage_shapes(f.height(), f.width())
                .map(|shapes| shapes.iter().map(|[c, h, w]| 2 * c * h * w).sum())
                .unwrap_or(0);
            let streams = if model.kind() == ModelKind::Fr { 2 } else { 1 };
            per_frame * streams * s.dist.len()
        })
        .sum()
}

fn forward_video(model: &QualityModel, s: &VideoSample, plan: &EpochPlan) -> Result<(VideoGraph, f64)> {
    let mut vg = model.video_graph(&s.dist, s.reference.as_deref(), plan.head, plan.train_trunk)?;
    let score = vg.graph.forward(&vg.inputs, model.params())?.item();
    if !score.is_finite() {
        return Err(Error::Numeric(format!("video '{}' scored {score}", s.id)));
    }
    Ok((vg, score))
}

fn batch_step(state: &mut TrainState, batch: &[&VideoSample], plan: &EpochPlan, lr: f64) -> Result<BatchOutcome> {
    let labels: Vec<f64> = batch.iter().map(|s| s.mos).collect();
    if labels.iter().all(|&m| m == labels[0]) {
        return Ok(BatchOutcome::SkippedConstantLabels);
    }
    let model = &state.model;
    let keep = activation_estimate(model, batch) <= KEEP_GRAPHS_BUDGET;
    let forwards: Vec<(Option<VideoGraph>, f64)> = batch
        .par_iter()
        .map(|s| forward_video(model, s, plan).map(|(g, score)| (keep.then_some(g), score)))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = forwards.iter().map(|(_, s)| *s).collect();
    let loss = match plcc_loss(&scores, &labels) {
        Ok(l) => l,
        Err(Error::Config(_)) => return Ok(BatchOutcome::SkippedConstantLabels),
        Err(e) => return Err(e),
    };
    if loss.degenerate {
        // Zero gradient: nothing to apply.
        return Ok(BatchOutcome::Stepped { loss: loss.loss });
    }
    let per_video: Vec<BTreeMap<String, Tensor>> = forwards
        .into_par_iter()
        .zip(batch.par_iter())
        .zip(loss.grad.par_iter())
        .map(|(((graph, _), s), &g)| {
            let vg = match graph {
                Some(vg) => vg,
                None => forward_video(model, s, plan)?.0,
            };
            vg.graph.backward(&Tensor::scalar(g))
        })
        .collect::<Result<_>>()?;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for grads in per_video {
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let TrainState { model, optimizer, .. } = state;
    optimizer.step(model.params_mut(), &total, lr)?;
    Ok(BatchOutcome::Stepped { loss: loss.loss })
}

fn require_references(set: &LabeledSet) -> Result<()> {
    match set.samples.iter().find(|s| s.reference.is_none()) {
        Some(s) => Err(Error::Data(format!(
            "dataset '{}': '{}' has no reference, FR training needs one",
            set.dataset_id, s.id
        ))),
        None => Ok(()),
    }
}

/// FR recipe: `pretrain_epochs` on `pretrain` (if given), then a fresh
/// optimizer and `epochs` on `finetune`. All parameters train throughout.
pub fn transfer_train_fr(
    model: QualityModel,
    pretrain: Option<&LabeledSet>,
    finetune: &LabeledSet,
    config: &TrainConfig,
    on_epoch: &mut EpochHook,
) -> Result<TrainState> {
    config.validate()?;
    if model.kind() != ModelKind::Fr {
        return Err(Error::Config("transfer_train_fr needs an FR model".into()));
    }
    for set in pretrain.into_iter().chain([finetune]) {
        require_references(set)?;
    }
    let head = model.heads()[0].clone();
    let mut state = TrainState::new(model, config.adam);
    let stages = [
        ("pretrain", pretrain.filter(|_| config.pretrain_epochs > 0), config.pretrain_epochs),
        ("finetune", Some(finetune), config.epochs),
    ];
    for (phase, set, epochs) in stages {
        let Some(set) = set else { continue };
        state.optimizer = Adam::new(config.adam);
        for epoch in 0..epochs {
            let plan = EpochPlan {
                phase,
                loop_index: None,
                dataset_id: &set.dataset_id,
                epoch,
                head: &head,
                train_trunk: true,
            };
            let log = train_epoch(&mut state, &set.samples, &plan, config)?;
            on_epoch(&log, &state.model)?;
        }
    }
    Ok(state)
}

/// NR recipe: `schedule.loops` passes over the datasets in order, `E_i`
/// epochs each on the shared trunk plus that dataset's head, then `epochs`
/// of fine-tuning on `target` with its existing head and a fresh optimizer.
pub fn imdt_train_nr(
    model: QualityModel,
    datasets: &[LabeledSet],
    target: &str,
    schedule: &ImdtSchedule,
    config: &TrainConfig,
    freeze_trunk_in_finetune: bool,
    on_epoch: &mut EpochHook,
) -> Result<TrainState> {
    config.validate()?;
    if model.kind() != ModelKind::Nr {
        return Err(Error::Config("imdt_train_nr needs an NR model".into()));
    }
    let sizes: Vec<usize> = datasets.iter().map(|d| d.samples.len()).collect();
    if sizes != schedule.dataset_sizes {
        return Err(Error::Config(format!(
            "schedule was built for sizes {:?} but datasets have {sizes:?}",
            schedule.dataset_sizes
        )));
    }
    for (i, d) in datasets.iter().enumerate() {
        if datasets[..i].iter().any(|o| o.dataset_id == d.dataset_id) {
            return Err(Error::Config(format!("dataset '{}' listed twice", d.dataset_id)));
        }
        model.resolve_head(Some(&d.dataset_id))?;
    }
    if model.heads().len() != datasets.len() {
        return Err(Error::Config(format!(
            "model has {} heads for {} datasets",
            model.heads().len(),
            datasets.len()
        )));
    }
    let target_set = datasets
        .iter()
        .find(|d| d.dataset_id == target)
        .ok_or_else(|| Error::Config(format!("target '{target}' is not one of the datasets")))?;

    let mut state = TrainState::new(model, config.adam);
    for l in 0..schedule.loops {
        for (d, &epochs) in datasets.iter().zip(&schedule.epochs_per_dataset) {
            for epoch in 0..epochs {
                let plan = EpochPlan {
                    phase: "imdt",
                    loop_index: Some(l),
                    dataset_id: &d.dataset_id,
                    epoch,
                    head: &d.dataset_id,
                    train_trunk: true,
                };
                let log = train_epoch(&mut state, &d.samples, &plan, config)?;
                on_epoch(&log, &state.model)?;
            }
        }
    }
    state.optimizer = Adam::new(config.adam);
    for epoch in 0..config.epochs {
        let plan = EpochPlan {
            phase: "finetune",
            loop_index: None,
            dataset_id: target,
            epoch,
            head: target,
            train_trunk: !freeze_trunk_in_finetune,
        };
        let log = train_epoch(&mut state, &target_set.samples, &plan, config)?;
        on_epoch(&log, &state.model)?;
    }
    Ok(state)
}

/// Writes one JSON object per line.
pub fn write_epoch_log<W: std::io::Write>(mut w: W, log: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut w, log)?;
    w.write_all(b"\n").map_err(|e| Error::io("<epoch log>", e))
}
