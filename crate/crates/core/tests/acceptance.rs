//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, followed by a summary.
//!
//! `cargo test -p vqa-core --test acceptance -- <filter>` runs only the
//! criteria whose name contains `<filter>`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::backbone;
use vqa_core::datasetio::{generate_synthetic, load_samples, Split, SyntheticConfig, VideoSample};
use vqa_core::diffcore::check_gradients;
use vqa_core::features::fr_feature;
use vqa_core::metrics::{self, evaluate, kendall_counts};
use vqa_core::training::{imdt_train_nr, plcc_loss, transfer_train_fr, EpochLog, ImdtSchedule, LabeledSet};
use vqa_core::videoio::{bicubic_resize, temporal_sample};
use vqa_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: Option<fn() -> Outcome>,
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let secs = |s: u64| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "benchmark-scale-results", limit: None, run: None },
        Criterion { id: 2, name: "identity-fidelity", limit: secs(10), run: Some(identity_fidelity) },
        Criterion { id: 3, name: "gradient-suite", limit: mins(2), run: Some(gradient_suite) },
        Criterion { id: 4, name: "metric-oracles", limit: secs(30), run: Some(metric_oracles) },
        Criterion { id: 5, name: "imdt-schedule", limit: None, run: Some(imdt_schedule) },
        Criterion { id: 6, name: "fr-end-to-end", limit: mins(15), run: Some(fr_end_to_end) },
        Criterion { id: 7, name: "nr-imdt-end-to-end", limit: mins(20), run: Some(nr_end_to_end) },
        Criterion { id: 8, name: "plcc-loss-properties", limit: secs(5), run: Some(plcc_loss_properties) },
        Criterion { id: 9, name: "determinism", limit: None, run: Some(determinism) },
        Criterion { id: 10, name: "preprocessing-conformance", limit: None, run: Some(preprocessing) },
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let Some(run) = c.run else {
            println!(
                "criterion {:>2} SKIP {}: absolute benchmark numbers need the original datasets and pretrained backbones; covered by the property criteria below",
                c.id, c.name
            );
            continue;
        };
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let mut pass = result.pass;
        let mut detail = result.detail;
        if let Some(limit) = c.limit {
            if elapsed > limit {
                pass = false;
                detail.push_str(&format!("; exceeded the {} s limit", limit.as_secs()));
            }
        }
        println!(
            "criterion {:>2} {} {}: {} ({:.1} s)",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(c.id);
        }
    }
    println!("acceptance: {} run, {} passed, {} failed {:?}", ran, ran - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_frame(r: &mut ChaCha8Rng, w: usize, h: usize) -> RgbFrame {
    RgbFrame::new(w, h, (0..3 * w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_count: 2,
        channels_per_stage: vec![2, 2],
        stride_per_stage: vec![2, 2],
        kernel_size: 3,
    }
}

fn synthetic(dir: &Path, cfg: &SyntheticConfig) -> DatasetManifest {
    generate_synthetic(dir, cfg).expect("synthetic dataset")
}

fn split_samples(m: &DatasetManifest, dir: &Path, split: Split, size: usize, fr: bool) -> Vec<VideoSample> {
    load_samples(m, dir, Some(split), (size, size), fr).expect("samples")
}

// ------------------------------------------------------ 2 identity fidelity

fn identity_fidelity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        seed: 11,
        ..SyntheticConfig::default()
    };
    let m = synthetic(dir.path(), &cfg);
    let refs: Vec<VideoSample> = load_samples(&m, dir.path(), None, (cfg.height, cfg.width), true)
        .unwrap()
        .into_iter()
        .filter(|s| s.id.contains("_blur_0"))
        .collect();
    let model = QualityModel::new(
        ModelKind::Fr,
        BackboneConfig::default(),
        SimilarityConfig::default(),
        (cfg.height, cfg.width),
        &["default".into()],
        5,
    )
    .unwrap();
    let mut vectors = Vec::new();
    for s in &refs {
        let clip = s.reference.as_ref().unwrap();
        for f in &clip.frames {
            let p = backbone::extract(f, model.params(), model.backbone()).unwrap();
            vectors.push(fr_feature(&p, &p, model.similarity()).unwrap().values);
        }
    }
    let all_ones = vectors.iter().all(|v| v.iter().all(|&x| x == 1.0));
    let identical = vectors.windows(2).all(|w| w[0] == w[1]);
    let distinct_clips = refs.len();
    outcome(
        all_ones && identical && distinct_clips >= 2,
        format!(
            "{} frames from {distinct_clips} distinct pristine clips, feature length {}, all exactly 1.0: {all_ones}",
            vectors.len(),
            vectors[0].len()
        ),
    )
}

// -------------------------------------------------------- 3 gradient suite

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

/// Builds a scalar graph from one op applied to trainable random leaves
/// and returns the worst relative error over all seeds.
fn op_check(build: &dyn Fn(&mut Graph, &mut ParamStore, &mut ChaCha8Rng) -> NodeId, tally: &mut Tally) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(1000 + seed);
        let mut g = Graph::new();
        let mut params = ParamStore::new();
        let out = build(&mut g, &mut params, &mut r);
        // Random weighting so every output element matters.
        let shape = g.shape(out).to_vec();
        let w = leaf(&mut g, &mut params, &mut r, "probe", &shape, false);
        let m = g.mul(out, w).unwrap();
        let s = g.sum(m);
        g.set_output(s);
        let res = check_gradients(&mut g, &HashMap::new(), &params, 1e-5).unwrap();
        tally.add(&res);
        worst = worst.max(res.worst_relative_error);
    }
    worst
}

#[derive(Default)]
struct Tally {
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn add(&mut self, r: &vqa_core::diffcore::GradCheck) {
        self.checked += r.checked;
        self.skipped += r.skipped;
    }
}

fn leaf(g: &mut Graph, p: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, shape: &[usize], trainable: bool) -> NodeId {
    let n: usize = shape.iter().product();
    p.insert(name, Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
    g.param(name, shape, trainable).unwrap()
}

fn positive_leaf(g: &mut Graph, p: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    let n: usize = shape.iter().product();
    p.insert(name, Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.5..2.0)).collect()).unwrap());
    g.param(name, shape, true).unwrap()
}

fn pipeline_check(kind: ModelKind, tally: &mut Tally) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(2000 + seed);
        let model = QualityModel::new(
            kind,
            tiny_backbone(),
            SimilarityConfig::default(),
            (8, 8),
            &["default".into()],
            seed,
        )
        .unwrap();
        let reference = SampledClip {
            frames: (0..2).map(|_| random_frame(&mut r, 8, 8)).collect(),
            source_indices: vec![0, 1],
        };
        let dist = SampledClip {
            frames: reference
                .frames
                .iter()
                .map(|f| {
                    let d = f.data().iter().map(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
                    RgbFrame::new(8, 8, d).unwrap()
                })
                .collect(),
            source_indices: vec![0, 1],
        };
        let refp = (kind == ModelKind::Fr).then_some(&reference);
        let mut vg = model.video_graph(&dist, refp, "default", true).unwrap();
        let res = check_gradients(&mut vg.graph, &vg.inputs, model.params(), 1e-5).unwrap();
        tally.add(&res);
        worst = worst.max(res.worst_relative_error);
    }
    worst
}

fn gradient_suite() -> Outcome {
    type Build = Box<dyn Fn(&mut Graph, &mut ParamStore, &mut ChaCha8Rng) -> NodeId>;
    let ops: Vec<(&str, Build)> = vec![
        ("conv2d/s1", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[2, 5, 5], true);
            let w = leaf(g, p, r, "w", &[3, 2, 3, 3], true);
            let b = leaf(g, p, r, "b", &[3], true);
            g.conv2d(x, w, b, 1, 1).unwrap()
        })),
        ("conv2d/s2", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[2, 6, 6], true);
            let w = leaf(g, p, r, "w", &[2, 2, 3, 3], true);
            let b = leaf(g, p, r, "b", &[2], true);
            g.conv2d(x, w, b, 2, 1).unwrap()
        })),
        ("relu", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[3, 4], true);
            g.relu(x)
        })),
        ("affine", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[5], true);
            let w = leaf(g, p, r, "w", &[5, 3], true);
            let b = leaf(g, p, r, "b", &[3], true);
            g.affine(x, w, b).unwrap()
        })),
        ("spatial_mean", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[3, 4, 5], true);
            g.spatial_mean(x).unwrap()
        })),
        ("channel_variance", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[3, 4, 5], true);
            g.channel_variance(x).unwrap()
        })),
        ("channel_covariance", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[3, 4, 5], true);
            let y = leaf(g, p, r, "y", &[3, 4, 5], true);
            g.channel_covariance(x, y).unwrap()
        })),
        ("concat", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[3], true);
            let y = leaf(g, p, r, "y", &[4], true);
            g.concat(&[x, y]).unwrap()
        })),
        ("add", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[6], true);
            let y = leaf(g, p, r, "y", &[6], true);
            g.add(x, y).unwrap()
        })),
        ("sub", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[6], true);
            let y = leaf(g, p, r, "y", &[6], true);
            g.sub(x, y).unwrap()
        })),
        ("mul", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[6], true);
            let y = leaf(g, p, r, "y", &[6], true);
            g.mul(x, y).unwrap()
        })),
        ("div", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[6], true);
            let y = positive_leaf(g, p, r, "y", &[6]);
            g.div(x, y).unwrap()
        })),
        ("add_scalar", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[4], true);
            g.add_scalar(x, 0.7)
        })),
        ("mul_scalar", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[4], true);
            g.mul_scalar(x, -1.3)
        })),
        ("sum", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[2, 3], true);
            g.sum(x)
        })),
        ("mean", Box::new(|g, p, r| {
            let x = leaf(g, p, r, "x", &[2, 3], true);
            g.mean(x)
        })),
    ];
    let mut tally = Tally::default();
    let mut worst = (0.0f64, "");
    for (name, build) in &ops {
        let e = op_check(build.as_ref(), &mut tally);
        if e >= worst.0 {
            worst = (e, name);
        }
    }
    let fr = pipeline_check(ModelKind::Fr, &mut tally);
    let nr = pipeline_check(ModelKind::Nr, &mut tally);
    let pass = worst.0 < GRAD_TOL && fr < GRAD_TOL && nr < GRAD_TOL && tally.checked > 10 * tally.skipped;
    outcome(
        pass,
        format!(
            "{} ops x {GRAD_SEEDS} seeds worst {:.2e} ({}); FR pipeline {fr:.2e}; NR pipeline {nr:.2e}; tolerance {GRAD_TOL:.0e}; {} coordinates compared, {} skipped at relu kinks",
            ops.len(),
            worst.0,
            worst.1,
            tally.checked,
            tally.skipped
        ),
    )
}

// -------------------------------------------------------- 4 metric oracles

/// Ranks by sorting, ties get the average of the positions they occupy.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Tau-b from exhaustive pair counting; also returns the raw counts.
fn oracle_kendall(x: &[f64], y: &[f64]) -> (i64, i64, i64, i64, Option<f64>) {
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                ties_x += 1;
            }
            if dy == 0.0 {
                ties_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    let tau = (denom > 0.0).then(|| (concordant - discordant) as f64 / denom);
    (concordant, discordant, ties_x, ties_y, tau)
}

fn agree(got: Result<f64>, want: Option<f64>, tol: f64) -> bool {
    match (got, want) {
        (Ok(g), Some(w)) => (g - w).abs() <= tol,
        (Err(_), None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Outcome {
    let mut r = rng(4);
    let mut failures = Vec::new();
    let mut tied = 0;
    let mut undefined = 0;
    for inst in 0..200 {
        let n = r.random_range(2..=50);
        // A third of instances draw from a few levels so ties are common.
        let levels = match inst % 3 {
            0 => None,
            _ => Some(r.random_range(2..6)),
        };
        let draw = |r: &mut ChaCha8Rng| match levels {
            None => r.random_range(-10.0..10.0),
            Some(l) => r.random_range(0..l) as f64 * 0.5,
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        if levels.is_some() {
            tied += 1;
        }
        let want_srcc = oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y));
        let want_plcc = oracle_pearson(&x, &y);
        let (c, d, tx, ty, want_krcc) = oracle_kendall(&x, &y);
        let want_rmse = (x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        if want_srcc.is_none() {
            undefined += 1;
        }
        let ranks_ok = metrics::rank(&x)
            .iter()
            .zip(oracle_ranks(&x))
            .all(|(a, b)| *a == b);
        let kc = kendall_counts(&x, &y);
        let counts_ok = kc.score == c - d && kc.ties_x == tx && kc.ties_y == ty && kc.pairs == (n * (n - 1) / 2) as i64;
        let checks = [
            ("rank", ranks_ok),
            ("srcc", agree(metrics::srcc(&x, &y), want_srcc, 1e-9)),
            ("plcc", agree(metrics::plcc(&x, &y), want_plcc, 1e-9)),
            ("krcc", agree(metrics::krcc(&x, &y), want_krcc, 1e-9)),
            ("krcc-counts", counts_ok),
            ("rmse", agree(metrics::rmse(&x, &y), Some(want_rmse), 1e-9)),
        ];
        for (name, ok) in checks {
            if !ok {
                failures.push(format!("{name}@{inst}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "200 instances (n 2..50, {tied} with heavy ties, {undefined} with an undefined rank correlation) vs brute force at 1e-9; mismatches: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join(", ") }
        ),
    )
}

// --------------------------------------------------------- 5 IMDT schedule

fn imdt_schedule() -> Outcome {
    let sizes = [6400usize, 1200, 360, 315, 200];
    let got = ImdtSchedule::new(&sizes, 10, 3, 6).unwrap().epochs_per_dataset;
    let oracle: Vec<usize> = sizes.iter().map(|&n| (6400 / n).max(10)).collect();
    let pass = got == oracle && got == [10, 10, 17, 20, 32];
    outcome(pass, format!("N {sizes:?}, E_min 10 -> {got:?}, oracle {oracle:?}"))
}

// ------------------------------------------------------ 6 FR end-to-end

const E2E_SEED: u64 = 7;
const E2E_SIZE: usize = 64;

fn fr_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        seed: E2E_SEED,
        ..SyntheticConfig::default()
    };
    let m = synthetic(dir.path(), &cfg);
    let train = split_samples(&m, dir.path(), Split::Train, E2E_SIZE, true);
    let val = split_samples(&m, dir.path(), Split::Val, E2E_SIZE, true);
    let model = QualityModel::new(
        ModelKind::Fr,
        BackboneConfig::default(),
        SimilarityConfig::default(),
        (E2E_SIZE, E2E_SIZE),
        &["default".into()],
        E2E_SEED,
    )
    .unwrap();
    let before = evaluate(&model, &val, None, false).unwrap().report.srcc;
    let tc = TrainConfig {
        learning_rate: 1e-4,
        batch_size: 6,
        epochs: 30,
        seed: E2E_SEED,
        ..TrainConfig::fr()
    };
    let set = LabeledSet {
        dataset_id: m.dataset_id.clone(),
        samples: train,
    };
    let state = transfer_train_fr(model, None, &set, &tc, &mut |_, _| Ok(())).unwrap();
    let after = evaluate(&state.model, &val, None, false).unwrap().report.srcc;
    let (b, a) = (before.unwrap_or(f64::NAN), after.unwrap_or(f64::NAN));
    outcome(
        a >= 0.85 && a > b,
        format!(
            "{} refs x {} levels x 2 distortions, {} train / {} val videos, 30 epochs: val SRCC {a:.4} (untrained {b:.4}, need >= 0.85)",
            cfg.n_refs,
            cfg.levels,
            set.samples.len(),
            val.len()
        ),
    )
}

// ------------------------------------------------------ 7 NR end-to-end

const NR_LARGE_REFS: usize = 80;
const NR_SMALL_REFS: usize = 20;
const NR_LR: f64 = 1e-3;

fn nr_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = Vec::new();
    let mut val = Vec::new();
    for (i, (id, refs)) in [("large", NR_LARGE_REFS), ("small", NR_SMALL_REFS)].into_iter().enumerate() {
        let d = dir.path().join(id);
        let cfg = SyntheticConfig {
            dataset_id: id.into(),
            n_refs: refs,
            seed: E2E_SEED + i as u64,
            ..SyntheticConfig::default()
        };
        let m = synthetic(&d, &cfg);
        if id == "small" {
            val = split_samples(&m, &d, Split::Val, E2E_SIZE, false);
        }
        sets.push(LabeledSet {
            dataset_id: id.into(),
            samples: split_samples(&m, &d, Split::Train, E2E_SIZE, false),
        });
    }
    let heads: Vec<String> = sets.iter().map(|s| s.dataset_id.clone()).collect();
    let model = QualityModel::new(
        ModelKind::Nr,
        BackboneConfig::default(),
        SimilarityConfig::default(),
        (E2E_SIZE, E2E_SIZE),
        &heads,
        E2E_SEED,
    )
    .unwrap();
    let sizes: Vec<usize> = sets.iter().map(|s| s.samples.len()).collect();
    let tc = TrainConfig {
        learning_rate: NR_LR,
        seed: E2E_SEED,
        ..TrainConfig::nr()
    };
    let schedule = ImdtSchedule::new(&sizes, 2, 3, tc.batch_size).unwrap();

    // Head isolation: after every epoch, each head other than the one just
    // trained must be bit-identical to its state before that epoch.
    let mut previous = model.params().clone();
    let mut isolation_checks = 0usize;
    let mut violations = Vec::new();
    let mut hook = |log: &EpochLog, m: &QualityModel| -> Result<()> {
        for head in m.heads() {
            if *head == log.dataset_id {
                continue;
            }
            for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
                let name = vqa_core::model::RegressorParams::param_name(head, part);
                let now = m.params().get(&name).unwrap().data();
                let before = previous.get(&name).unwrap().data();
                isolation_checks += 1;
                if now.iter().zip(before).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    violations.push(format!("{name} during {} {} epoch {}", log.phase, log.dataset_id, log.epoch));
                }
            }
        }
        previous = m.params().clone();
        Ok(())
    };
    let untrained = evaluate(&model, &val, Some("small"), false).unwrap().report.srcc.unwrap_or(f64::NAN);
    let state = imdt_train_nr(model, &sets, "small", &schedule, &tc, false, &mut hook).unwrap();
    let srcc = evaluate(&state.model, &val, Some("small"), false)
        .unwrap()
        .report
        .srcc
        .unwrap_or(f64::NAN);
    let ratio = sizes[0] as f64 / sizes[1] as f64;
    outcome(
        srcc >= 0.80 && violations.is_empty() && ratio >= 4.0,
        format!(
            "train sizes {sizes:?} (ratio {ratio:.1}), epochs per loop {:?}, {} fine-tune epochs, lr {NR_LR:e}: target val SRCC {srcc:.4} over {} videos (untrained {untrained:.4}, need >= 0.80); head isolation {} checks, {} violations{}",
            schedule.epochs_per_dataset,
            tc.epochs,
            val.len(),
            isolation_checks,
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

// --------------------------------------------------- 8 PLCC loss properties

fn plcc_loss_properties() -> Outcome {
    let mut r = rng(8);
    let (mut worst_id, mut worst_anti, mut worst_affine) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    while checked < 100 {
        let n = r.random_range(3..40);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(1.0..5.0)).collect();
        let mean = p.iter().sum::<f64>() / n as f64;
        if p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() < 1e-6 {
            continue;
        }
        checked += 1;
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        let a = r.random_range(0.01..100.0);
        let b = r.random_range(-50.0..50.0);
        let affine: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        worst_id = worst_id.max(plcc_loss(&p, &p).unwrap().loss.abs());
        worst_anti = worst_anti.max((plcc_loss(&neg, &p).unwrap().loss - 1.0).abs());
        let base = plcc_loss(&p, &y).unwrap().loss;
        worst_affine = worst_affine.max((plcc_loss(&affine, &y).unwrap().loss - base).abs());
    }
    let eps = f64::EPSILON;
    outcome(
        worst_id <= eps && worst_anti <= eps && worst_affine <= 1e-10,
        format!(
            "100 vectors: |loss(p,p)| <= {worst_id:.1e}, |loss(-p,p) - 1| <= {worst_anti:.1e} (allowed 1 ulp), affine drift {worst_affine:.1e} (allowed 1e-10)"
        ),
    )
}

// --------------------------------------------------------- 9 determinism

struct PipelineOutput {
    files: Vec<(String, Vec<u8>)>,
}

/// Synthetic data, FR training, NR IMDT and evaluation on a reduced
/// configuration, executed on a private thread pool of `threads` workers.
fn pipeline(threads: usize) -> PipelineOutput {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = 21;
        let size = 32;
        let mut files = Vec::new();
        let mut sets = Vec::new();
        let mut fr_val = Vec::new();
        for (i, id) in ["a", "b"].into_iter().enumerate() {
            let d = dir.path().join(id);
            let cfg = SyntheticConfig {
                dataset_id: id.into(),
                n_refs: 4,
                levels: 3,
                width: size,
                height: size,
                frames: 4,
                seed: root + i as u64,
                ..SyntheticConfig::default()
            };
            let m = synthetic(&d, &cfg);
            let mut names: Vec<_> = walk(&d);
            names.sort();
            for p in names {
                files.push((p.strip_prefix(dir.path()).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
            if i == 0 {
                fr_val = split_samples(&m, &d, Split::Val, size, true);
            }
            sets.push((
                LabeledSet {
                    dataset_id: id.into(),
                    samples: split_samples(&m, &d, Split::Train, size, true),
                },
                split_samples(&m, &d, Split::Val, size, false),
            ));
        }
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            seed: root,
            ..TrainConfig::fr()
        };
        let fr = QualityModel::new(
            ModelKind::Fr,
            BackboneConfig::default(),
            SimilarityConfig::default(),
            (size, size),
            &["default".into()],
            root,
        )
        .unwrap();
        let fr = transfer_train_fr(fr, Some(&sets[1].0), &sets[0].0, &TrainConfig { pretrain_epochs: 1, ..tc }, &mut |_, _| Ok(()))
            .unwrap()
            .model;
        let ck = dir.path().join("fr.ckpt");
        fr.save(&ck).unwrap();
        files.push(("fr.ckpt".into(), std::fs::read(&ck).unwrap()));
        let report = evaluate(&fr, &fr_val, None, true).unwrap();
        files.push(("fr.report".into(), serde_json::to_vec(&report.report).unwrap()));

        let nr_sets: Vec<LabeledSet> = sets
            .iter()
            .map(|(s, _)| LabeledSet {
                dataset_id: s.dataset_id.clone(),
                samples: s
                    .samples
                    .iter()
                    .map(|v| VideoSample {
                        reference: None::<Arc<SampledClip>>,
                        ..v.clone()
                    })
                    .collect(),
            })
            .collect();
        let nr = QualityModel::new(
            ModelKind::Nr,
            BackboneConfig::default(),
            SimilarityConfig::default(),
            (size, size),
            &["a".into(), "b".into()],
            root,
        )
        .unwrap();
        let sizes: Vec<usize> = nr_sets.iter().map(|s| s.samples.len()).collect();
        let sched = ImdtSchedule::new(&sizes, 1, 2, tc.batch_size).unwrap();
        let nr = imdt_train_nr(nr, &nr_sets, "b", &sched, &tc, false, &mut |_, _| Ok(())).unwrap().model;
        let ck = dir.path().join("nr.ckpt");
        nr.save(&ck).unwrap();
        files.push(("nr.ckpt".into(), std::fs::read(&ck).unwrap()));
        let report = evaluate(&nr, &sets[1].1, Some("b"), false).unwrap();
        files.push(("nr.report".into(), serde_json::to_vec(&report.report).unwrap()));
        PipelineOutput { files }
    })
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> Outcome {
    let a = pipeline(1);
    let b = pipeline(3);
    let names_match = a.files.iter().map(|f| &f.0).eq(b.files.iter().map(|f| &f.0));
    let differing: Vec<&str> = a
        .files
        .iter()
        .zip(&b.files)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = a.files.iter().map(|f| f.1.len()).sum();
    outcome(
        names_match && differing.is_empty(),
        format!(
            "two runs (1 and 3 worker threads), {} artefacts / {bytes} bytes incl. FR and NR checkpoints and reports; differing: {}",
            a.files.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

// ------------------------------------------------- 10 preprocessing

/// Straight-line bicubic: 16 taps per output pixel, no shared tables.
fn oracle_bicubic(src: &RgbFrame, oh: usize, ow: usize) -> Vec<f64> {
    fn k(x: f64) -> f64 {
        let a = -0.5;
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    }
    let (w, h) = (src.width() as isize, src.height() as isize);
    let mut out = Vec::new();
    for c in 0..3 {
        let plane = src.channel(c);
        for oy in 0..oh {
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                let mut acc = 0.0;
                for j in -1..=2 {
                    let yy = sy.floor() as isize + j;
                    let wy = k(sy - yy as f64);
                    for i in -1..=2 {
                        let xx = sx.floor() as isize + i;
                        let wx = k(sx - xx as f64);
                        let v = plane[(yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)) as usize];
                        acc += wy * wx * v;
                    }
                }
                out.push(acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn preprocessing() -> Outcome {
    let mut r = rng(10);
    let mut rates: Vec<Ratio<u64>> = vec![Ratio::new(30000, 1001), Ratio::new(24000, 1001)];
    while rates.len() < 50 {
        let den = r.random_range(1..=1001);
        rates.push(Ratio::new(r.random_range(den..=120 * den), den));
    }
    let mut index_mismatch = 0;
    for (i, rate) in rates.iter().enumerate() {
        let n: u64 = if i < 2 { [900, 7193][i] } else { r.random_range(1..2000) };
        let want_k = (Ratio::from_integer(n) / rate).floor().to_integer();
        let want: Vec<usize> = (0..want_k).map(|i| (rate * i).floor().to_integer() as usize).collect();
        let got = temporal_sample(n as usize, Rational::new(*rate.numer(), *rate.denom()).unwrap());
        let ok = match got {
            Ok(g) => g == want,
            Err(_) => want.is_empty(),
        };
        if !ok {
            index_mismatch += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (w, h) = (r.random_range(3..40), r.random_range(3..40));
        let (ow, oh) = (r.random_range(1..48), r.random_range(1..48));
        let f = random_frame(&mut r, w, h);
        let got = bicubic_resize(&f, oh, ow).unwrap();
        let want = oracle_bicubic(&f, oh, ow);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        index_mismatch == 0 && worst <= 1e-6,
        format!(
            "50 (N, R) pairs incl. 30000/1001 and 24000/1001: {index_mismatch} index mismatches vs exact rationals; 20 bicubic cases max |diff| {worst:.1e} (allowed 1e-6)"
        ),
    )
}
