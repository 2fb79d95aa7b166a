mod config;
mod record;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::Value;
use vqa_core::backbone::{self, FeaturePyramid};
use vqa_core::datasetio::{self, Split, SyntheticConfig};
use vqa_core::features::{self, QualityFeatureVector};
use vqa_core::metrics;
use vqa_core::model::DEFAULT_HEAD;
use vqa_core::training::{self, EpochLog, ImdtSchedule, LabeledSet};
use vqa_core::videoio::{self, SampledClip};
use vqa_core::{Error, ModelKind, QualityModel, Rational, Result};

use config::{resolve, Resolved, RunConfig};
use record::RunRecord;

#[derive(Parser)]
#[command(name = "vqa", version, about = "Video quality assessment toolkit")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, convert and resize a video; writes per-frame RGB files and index.json.
    Preprocess(PreprocessArgs),
    /// Compute feature pyramids and quality features for preprocessed frames.
    Extract(ExtractArgs),
    /// Train a full-reference model (optional pretraining, then fine-tuning).
    TrainFr(TrainFrArgs),
    /// Train a no-reference model with iterative mixed-dataset training.
    TrainNr(TrainNrArgs),
    /// Score one video and print frame and video scores as JSON.
    Score(ScoreArgs),
    /// Evaluate a model on a manifest split and write a metrics report.
    Eval(EvalArgs),
    /// Generate a synthetic distorted-video dataset with a manifest.
    GenSynthetic(GenArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output frames are SIZE x SIZE.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory written by `preprocess` (distorted frames).
    #[arg(long, required_unless_present = "pyramids", conflicts_with = "pyramids")]
    frames: Option<PathBuf>,
    /// Reference frames; switches to full-reference features.
    #[arg(long, requires = "frames")]
    ref_frames: Option<PathBuf>,
    /// Directory of precomputed `.vqap` pyramids to use instead of the backbone.
    #[arg(long)]
    pyramids: Option<PathBuf>,
    /// Precomputed reference pyramids; switches to full-reference features.
    #[arg(long, requires = "pyramids")]
    ref_pyramids: Option<PathBuf>,
    /// Take backbone weights and similarity constants from a checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training frames are SIZE x SIZE.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainFrArgs {
    /// Manifest used for pretraining (all records).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Manifest whose train split is used for fine-tuning.
    #[arg(long)]
    finetune: PathBuf,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainNrArgs {
    /// Manifests in training order; each dataset gets its own head.
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    /// Dataset id to fine-tune on after the loops.
    #[arg(long)]
    target: String,
    #[arg(long)]
    e_min: Option<usize>,
    #[arg(long)]
    loops: Option<usize>,
    /// Keep the backbone fixed while fine-tuning.
    #[arg(long)]
    freeze_trunk: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fr,
    Nr,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Regressor head (NR models with several heads).
    #[arg(long)]
    head: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Predictions CSV (default: next to the report).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Fit a 4-parameter logistic before PLCC and RMSE.
    #[arg(long)]
    logistic: bool,
    #[arg(long)]
    head: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    dataset_id: String,
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    fps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_) => 2,
        Error::Numeric(_) | Error::UndefinedCorrelation(_) | Error::Shape { .. } | Error::State(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(a),
        Command::Extract(a) => extract(a),
        Command::TrainFr(a) => train_fr(a),
        Command::TrainNr(a) => train_nr(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Format {
        path: dir.into(),
        message: format!("cannot create directory: {e}"),
    })
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Format {
        path: path.into(),
        message: format!("cannot create file: {e}"),
    })
}

fn resolve_with(nr: bool, cfg: &ConfigArgs, mut flags: Vec<(&'static str, Value)>) -> Result<Resolved> {
    if let Some(seed) = cfg.seed {
        flags.push(("seed", Value::Integer(seed as i64)));
    }
    resolve(&RunConfig::defaults(nr), cfg.config.as_deref(), &flags)
}

fn train_flags(t: &TrainOverrides) -> Vec<(&'static str, Value)> {
    let mut flags = Vec::new();
    if let Some(v) = t.lr {
        flags.push(("train.learning_rate", Value::Float(v)));
    }
    if let Some(v) = t.epochs {
        flags.push(("train.epochs", Value::Integer(v as i64)));
    }
    if let Some(v) = t.batch_size {
        flags.push(("train.batch_size", Value::Integer(v as i64)));
    }
    if let Some(v) = t.size {
        flags.push(("preprocess.size", Value::Integer(v as i64)));
    }
    flags
}

/// Decodes and preprocesses a single video, streaming Y4M input.
fn load_clip(path: &Path, height: usize, width: usize) -> Result<SampledClip> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) {
        videoio::preprocess_stream(videoio::open_y4m(path)?, height, width)
    } else {
        videoio::preprocess(&videoio::decode(path)?, height, width)
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = a.size {
        flags.push(("preprocess.size", Value::Integer(s as i64)));
    }
    let resolved = resolve_with(false, &a.cfg, flags)?;
    let size = resolved.config.preprocess.size;
    let clip = load_clip(&a.input, size, size)?;
    let index = videoio::export_clip(&clip, &a.out)?;
    let mut rec = RunRecord::new("preprocess", &resolved);
    rec.input("video", &a.input);
    rec.output("index", a.out.join(videoio::FRAME_INDEX_FILE));
    rec.write(&a.out.join(record::RUN_FILE))?;
    eprintln!("wrote {} frames to {}", index.frames.len(), a.out.display());
    Ok(())
}

fn pyramid_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Format {
        path: dir.into(),
        message: format!("cannot list directory: {e}"),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vqap"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .vqap files in {}", dir.display())));
    }
    Ok(files)
}

fn import_all(dir: &Path) -> Result<Vec<FeaturePyramid>> {
    pyramid_files(dir)?.iter().map(|p| backbone::import_pyramid(p)).collect()
}

fn extract(a: ExtractArgs) -> Result<()> {
    let resolved = resolve_with(false, &a.cfg, Vec::new())?;
    let mut rec = RunRecord::new("extract", &resolved);
    create_dir(&a.out)?;

    let (dist, reference, similarity) = if let Some(dir) = &a.pyramids {
        rec.input("pyramids", dir);
        let dist = import_all(dir)?;
        let reference = match &a.ref_pyramids {
            Some(r) => {
                rec.input("ref_pyramids", r);
                Some(import_all(r)?)
            }
            None => None,
        };
        let similarity = match &a.model {
            Some(m) => *QualityModel::load(m)?.similarity(),
            None => resolved.config.similarity,
        };
        (dist, reference, similarity)
    } else {
        let frames = a.frames.as_ref().expect("clap requires --frames without --pyramids");
        rec.input("frames", frames);
        let clip = videoio::import_clip(frames)?;
        let first = clip.frames.first().ok_or_else(|| Error::Data("no frames".into()))?;
        let size = (first.height(), first.width());
        let model = match &a.model {
            Some(m) => {
                rec.input("model", m);
                QualityModel::load(m)?
            }
            None => QualityModel::new(
                ModelKind::Nr,
                resolved.config.backbone.clone(),
                resolved.config.similarity,
                size,
                &[DEFAULT_HEAD.to_string()],
                resolved.config.seed,
            )?,
        };
        let run = |clip: &SampledClip| -> Result<Vec<FeaturePyramid>> {
            use rayon::prelude::*;
            clip.frames
                .par_iter()
                .map(|f| backbone::extract(f, model.params(), model.backbone()))
                .collect()
        };
        let dist = run(&clip)?;
        let reference = match &a.ref_frames {
            Some(r) => {
                rec.input("ref_frames", r);
                let rc = videoio::import_clip(r)?;
                if rc.len() != clip.len() {
                    return Err(Error::Data(format!(
                        "reference has {} frames but distorted has {}",
                        rc.len(),
                        clip.len()
                    )));
                }
                Some(run(&rc)?)
            }
            None => None,
        };
        let pdir = a.out.join("pyramids");
        create_dir(&pdir)?;
        for (i, p) in dist.iter().enumerate() {
            backbone::export_pyramid(&pdir.join(format!("frame_{i:05}.vqap")), p)?;
        }
        rec.output("pyramids", &pdir);
        if let Some(refs) = &reference {
            let rdir = a.out.join("ref_pyramids");
            create_dir(&rdir)?;
            for (i, p) in refs.iter().enumerate() {
                backbone::export_pyramid(&rdir.join(format!("frame_{i:05}.vqap")), p)?;
            }
            rec.output("ref_pyramids", &rdir);
        }
        (dist, reference, *model.similarity())
    };

    let feats: Vec<QualityFeatureVector> = match &reference {
        Some(refs) => {
            if refs.len() != dist.len() {
                return Err(Error::Data(format!(
                    "{} reference pyramids for {} distorted",
                    refs.len(),
                    dist.len()
                )));
            }
            refs.iter()
                .zip(&dist)
                .map(|(r, d)| features::fr_feature(r, d, &similarity))
                .collect::<Result<_>>()?
        }
        None => dist.iter().map(features::nr_feature).collect::<Result<_>>()?,
    };
    let csv_path = a.out.join("features.csv");
    features::write_feature_csv(create_file(&csv_path)?, &feats)?;
    rec.output("features", &csv_path);
    rec.write(&a.out.join(record::RUN_FILE))
}

struct EpochSink {
    writer: BufWriter<File>,
}

impl EpochSink {
    fn log(&mut self, log: &EpochLog) -> Result<()> {
        training::write_epoch_log(&mut self.writer, log)?;
        self.writer.flush().map_err(|e| Error::Data(format!("epoch log: {e}")))?;
        let loss = log.mean_batch_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"));
        eprintln!("{} {} epoch {} loss {loss}", log.phase, log.dataset_id, log.epoch);
        Ok(())
    }
}

fn train_fr(a: TrainFrArgs) -> Result<()> {
    let mut flags = train_flags(&a.train);
    if let Some(v) = a.pretrain_epochs {
        flags.push(("train.pretrain_epochs", Value::Integer(v as i64)));
    }
    let resolved = resolve_with(false, &a.cfg, flags)?;
    let cfg = &resolved.config;
    let size = (cfg.preprocess.size, cfg.preprocess.size);
    let mut rec = RunRecord::new("train-fr", &resolved);

    let finetune_manifest = datasetio::load_manifest(&a.finetune)?;
    finetune_manifest.require_references()?;
    rec.input("finetune", &a.finetune);
    let finetune = LabeledSet {
        dataset_id: finetune_manifest.dataset_id.clone(),
        samples: datasetio::load_samples(
            &finetune_manifest,
            &datasetio::manifest_dir(&a.finetune),
            Some(Split::Train),
            size,
            true,
        )?,
    };
    let pretrain = match &a.pretrain {
        Some(p) => {
            rec.input("pretrain", p);
            let m = datasetio::load_manifest(p)?;
            m.require_references()?;
            Some(LabeledSet {
                dataset_id: m.dataset_id.clone(),
                samples: datasetio::load_samples(&m, &datasetio::manifest_dir(p), None, size, true)?,
            })
        }
        None => None,
    };

    let model = QualityModel::new(
        ModelKind::Fr,
        cfg.backbone.clone(),
        cfg.similarity,
        size,
        &[DEFAULT_HEAD.to_string()],
        cfg.seed,
    )?;
    create_dir(&a.out)?;
    let log_path = a.out.join("epochs.jsonl");
    let mut sink = EpochSink {
        writer: create_file(&log_path)?,
    };
    let state = training::transfer_train_fr(
        model,
        pretrain.as_ref(),
        &finetune,
        &cfg.train_config(),
        &mut |log, _| sink.log(log),
    )?;
    let ckpt = a.out.join("model.ckpt");
    state.model.save(&ckpt)?;
    rec.output("model", &ckpt);
    rec.output("epoch_log", &log_path);
    rec.write(&a.out.join(record::RUN_FILE))
}

fn train_nr(a: TrainNrArgs) -> Result<()> {
    let mut flags = train_flags(&a.train);
    if let Some(v) = a.e_min {
        flags.push(("imdt.e_min", Value::Integer(v as i64)));
    }
    if let Some(v) = a.loops {
        flags.push(("imdt.loops", Value::Integer(v as i64)));
    }
    if a.freeze_trunk {
        flags.push(("imdt.freeze_trunk", Value::Boolean(true)));
    }
    let resolved = resolve_with(true, &a.cfg, flags)?;
    let cfg = &resolved.config;
    let size = (cfg.preprocess.size, cfg.preprocess.size);
    let mut rec = RunRecord::new("train-nr", &resolved);

    let mut sets = Vec::new();
    for path in &a.datasets {
        rec.input(&format!("dataset.{}", sets.len()), path);
        let m = datasetio::load_manifest(path)?;
        let samples =
            datasetio::load_samples(&m, &datasetio::manifest_dir(path), Some(Split::Train), size, false)?;
        sets.push(LabeledSet {
            dataset_id: m.dataset_id.clone(),
            samples,
        });
    }
    let heads: Vec<String> = sets.iter().map(|s| s.dataset_id.clone()).collect();
    let sizes: Vec<usize> = sets.iter().map(|s| s.samples.len()).collect();
    let schedule = ImdtSchedule::new(&sizes, cfg.imdt.e_min, cfg.imdt.loops, cfg.train.batch_size)?;
    eprintln!("epochs per dataset per loop: {:?}", schedule.epochs_per_dataset);

    let model = QualityModel::new(
        ModelKind::Nr,
        cfg.backbone.clone(),
        cfg.similarity,
        size,
        &heads,
        cfg.seed,
    )?;
    create_dir(&a.out)?;
    let log_path = a.out.join("epochs.jsonl");
    let mut sink = EpochSink {
        writer: create_file(&log_path)?,
    };
    let state = training::imdt_train_nr(
        model,
        &sets,
        &a.target,
        &schedule,
        &cfg.train_config(),
        cfg.imdt.freeze_trunk,
        &mut |log, _| sink.log(log),
    )?;
    let ckpt = a.out.join("model.ckpt");
    state.model.save(&ckpt)?;
    rec.output("model", &ckpt);
    rec.output("epoch_log", &log_path);
    rec.write(&a.out.join(record::RUN_FILE))
}

fn score(a: ScoreArgs) -> Result<()> {
    let mode = match a.mode {
        Mode::Fr => ModelKind::Fr,
        Mode::Nr => ModelKind::Nr,
    };
    if mode == ModelKind::Fr && a.reference.is_none() {
        return Err(Error::Config("--mode fr requires --ref <video>".into()));
    }
    let model = QualityModel::load(&a.model)?;
    if model.kind() != mode {
        return Err(Error::Config(format!(
            "--mode {mode} does not match the {} model in {}",
            model.kind(),
            a.model.display()
        )));
    }
    let (h, w) = model.input_size();
    let (dist, reference) = match &a.reference {
        Some(r) if mode == ModelKind::Fr => {
            let (rc, dc) = videoio::preprocess_pair(&videoio::decode(r)?, &videoio::decode(&a.dist)?, h, w)?;
            (dc, Some(rc))
        }
        _ => (load_clip(&a.dist, h, w)?, None),
    };
    let head = model.resolve_head(a.head.as_deref())?.to_string();
    let s = model.score_clip(&dist, reference.as_ref(), Some(&head))?;
    let out = serde_json::json!({
        "schema": "vqa-score/1",
        "version": vqa_core::VERSION,
        "mode": mode,
        "head": head,
        "frame_indices": dist.source_indices,
        "frame_scores": s.frame_scores,
        "video_score": s.video_score,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = QualityModel::load(&a.model)?;
    let manifest = datasetio::load_manifest(&a.manifest)?;
    let fr = model.kind() == ModelKind::Fr;
    if fr {
        manifest.require_references()?;
    }
    // An NR model trained on several datasets defaults to the head named
    // after the manifest's dataset.
    let head = match a.head.clone() {
        Some(h) => Some(h),
        None if model.heads().len() > 1 && model.heads().contains(&manifest.dataset_id) => {
            Some(manifest.dataset_id.clone())
        }
        None => None,
    };
    let head = model.resolve_head(head.as_deref())?.to_string();
    let samples = datasetio::load_samples(
        &manifest,
        &datasetio::manifest_dir(&a.manifest),
        Some(a.split),
        model.input_size(),
        fr,
    )?;
    let evaluation = metrics::evaluate(&model, &samples, Some(&head), a.logistic)?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = create_file(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &evaluation.report)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::Data(format!("report: {e}")))?;
    let pred_path = a.predictions.clone().unwrap_or_else(|| a.out.with_extension("predictions.csv"));
    metrics::write_predictions_csv(create_file(&pred_path)?, &evaluation.predictions)?;

    let resolved = Resolved {
        config: RunConfig::defaults(!fr),
        provenance: Default::default(),
    };
    let mut rec = RunRecord::new("eval", &resolved);
    rec.input("model", &a.model);
    rec.input("manifest", &a.manifest);
    rec.note("split", a.split.to_string());
    rec.note("head", head);
    rec.note("logistic", a.logistic.to_string());
    rec.output("report", &a.out);
    rec.output("predictions", &pred_path);
    rec.write(&a.out.with_extension("run.json"))?;
    if let Some(reason) = &evaluation.report.reason {
        eprintln!("note: {reason}");
    }
    println!("{}", serde_json::to_string_pretty(&evaluation.report)?);
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        dataset_id: a.dataset_id,
        n_refs: a.refs,
        levels: a.levels,
        width: a.width,
        height: a.height,
        frames: a.frames,
        fps: Rational::integer(a.fps)?,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let manifest = datasetio::generate_synthetic(&a.out, &cfg)?;
    let resolved = Resolved {
        config: RunConfig {
            seed: a.seed,
            ..RunConfig::defaults(false)
        },
        provenance: Default::default(),
    };
    let mut rec = RunRecord::new("gen-synthetic", &resolved);
    rec.note("refs", cfg.n_refs.to_string());
    rec.note("levels", cfg.levels.to_string());
    rec.note("size", format!("{}x{}", cfg.width, cfg.height));
    rec.note("frames", cfg.frames.to_string());
    rec.note("fps", cfg.fps.to_string());
    rec.output("manifest", a.out.join("manifest.csv"));
    rec.write(&a.out.join(record::RUN_FILE))?;
    eprintln!(
        "wrote {} videos ({} train, {} val) to {}",
        manifest.records.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        a.out.display()
    );
    Ok(())
}
