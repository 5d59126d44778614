use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sonar_kd::boxes::DetBox;
use sonar_kd::checkpoint;
use sonar_kd::dataaug::{
    build_dataset, import_originals, resize, synth_sonar_with, Dataset, Image8, Sample, Split, SynthConfig,
    CLASS_NAMES, DEFAULT_SIGMA, WALL_CLASS,
};
use sonar_kd::detector::{Model, ModelSpec, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
use sonar_kd::distill::{
    detect, dump_teacher_logits, train as run_training, CombineMode, KdNormalization, KdSetup, KdWeights, LogitStore,
    LrSchedule, Optimizer, Teacher, TrainConfig, TrainReport,
};
use sonar_kd::evalmetrics::{
    evaluate, evaluate_timeline, read_predictions, read_timeline, render_csv, render_table, EvalReport,
};
use sonar_kd::Error;

use crate::config::Resolver;
use crate::draw::draw_detections;
use crate::{DumpLogitsArgs, EvalArgs, EvalVideoArgs, InferArgs, MakeDatasetArgs, TrainArgs};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSSES_FILE: &str = "losses.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const REPORT_STEM: &str = "report";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: Error| e.into())
}

pub fn make_dataset(a: MakeDatasetArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new("make-dataset", config)?;
    let out = r.require_path("out", a.out)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let sigma = r.get("sigma", a.sigma, DEFAULT_SIGMA)?;
    let size = r.get("size", a.size, 64usize)?;
    let import = r.path("import", a.import)?;
    let synth = match import {
        Some(_) => None,
        None => Some(r.get("synth", a.synth, 50usize)?),
    };
    let no_augment = r.switch("no-augment", a.no_augment)?;
    let snapshot = r.finish()?;

    let originals = match (&import, synth) {
        (Some(dir), _) => import_originals(dir)
            .with_context(|| format!("importing {}", dir.display()))?
            .iter()
            .map(|s| resize(s, size, size))
            .collect::<sonar_kd::Result<Vec<_>>>()?,
        (None, n) => {
            let cfg = SynthConfig {
                width: size,
                height: size,
                ..SynthConfig::default()
            };
            synth_sonar_with(&cfg, seed, n.unwrap_or(0))?
        }
    };
    if originals.is_empty() {
        bail!(invalid("no original images to build a dataset from"));
    }
    let samples = build_dataset(&originals, sigma, seed, !no_augment)?;
    let ds = Dataset::write(&out, &samples, &CLASS_NAMES)?;
    snapshot.write(&out)?;
    let count = |s| ds.entries(Some(s)).count();
    println!(
        "wrote {} images to {} (train {}, val {}, test {})",
        samples.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a str,
    params: usize,
    iterations: usize,
    first_loss: Option<f64>,
    last10_loss: Option<f64>,
    decrease: Option<f64>,
    report: &'a TrainReport,
}

pub fn train(a: TrainArgs, config: Option<&Path>) -> Result<()> {
    let defaults = TrainConfig::default();
    let kd_defaults = KdWeights::default();
    let mut r = Resolver::new("train", config)?;
    let dataset_dir = r.require_path("dataset", a.dataset)?;
    let out = r.require_path("out", a.out)?;
    let preset = r.get("preset", a.preset, "nano".to_string())?;
    let vit = r.get("vit", a.vit, "off".to_string())?;
    let base_channels = r.get("base-channels", a.base_channels, sonar_kd::detector::YOLOX_BASE_CHANNELS)?;
    let no_aug = r.switch("no-aug", a.no_aug)?;
    let kd = r.switch("kd", a.kd)?;
    let teacher_logits = r.path("teacher-logits", a.teacher_logits)?;
    let teacher_ckpt = r.path("teacher", a.teacher)?;
    let iters = r.get("iters", a.iters, defaults.iters)?;
    let batch_size = r.get("batch-size", a.batch_size, defaults.batch_size)?;
    let lr = r.get("lr", a.lr, defaults.lr)?;
    let optimizer = r.get("optimizer", a.optimizer, "adam".to_string())?;
    let schedule = r.get("schedule", a.schedule, "cosine".to_string())?;
    let momentum = r.get("momentum", a.momentum, defaults.momentum)?;
    let weight_decay = r.get("weight-decay", a.weight_decay, defaults.weight_decay)?;
    let grad_clip = r.get("grad-clip", a.grad_clip, defaults.grad_clip.unwrap_or(0.0))?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let sigma = r.get("sigma", a.sigma, DEFAULT_SIGMA)?;
    let log_every = r.get("log-every", a.log_every, 50usize)?;
    let weights = if kd {
        let mode = r.get("kd-mode", a.kd_mode, "additive".to_string())?;
        let mode = match mode.as_str() {
            "additive" => CombineMode::Additive,
            "blend" => CombineMode::Blend(r.get("kd-lambda", a.kd_lambda, 0.5)?),
            other => bail!(invalid(format!("kd-mode must be additive or blend, got `{other}`"))),
        };
        let normalization = match r.get("kd-norm", a.kd_norm, "batch-scales".to_string())?.as_str() {
            "batch-scales" => KdNormalization::BatchScales,
            "element-mean" => KdNormalization::ElementMean,
            other => bail!(invalid(format!("kd-norm must be batch-scales or element-mean, got `{other}`"))),
        };
        Some(KdWeights {
            bbox: r.get("kd-bbox", a.kd_bbox, kd_defaults.bbox)?,
            obj: r.get("kd-obj", a.kd_obj, kd_defaults.obj)?,
            cls: r.get("kd-cls", a.kd_cls, kd_defaults.cls)?,
            mode,
            normalization,
        })
    } else {
        None
    };
    let snapshot = r.finish()?;

    match (kd, &teacher_logits, &teacher_ckpt) {
        (true, None, None) => bail!(invalid("--kd needs --teacher-logits DIR (offline) or --teacher CHECKPOINT (online)")),
        (true, Some(_), Some(_)) => bail!(invalid("give either --teacher-logits or --teacher, not both")),
        (true, Some(_), None) if !no_aug => bail!(invalid(
            "offline KD reuses logits of the stored images, so it needs --no-aug"
        )),
        (false, Some(_), _) | (false, _, Some(_)) => bail!(invalid("--teacher-logits / --teacher require --kd")),
        _ => {}
    }
    let optimizer = match optimizer.as_str() {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => bail!(invalid(format!("optimizer must be adam or sgd, got `{other}`"))),
    };
    let lr_schedule = match schedule.as_str() {
        "cosine" => LrSchedule::Cosine,
        "constant" => LrSchedule::Constant,
        other => bail!(invalid(format!("schedule must be cosine or constant, got `{other}`"))),
    };
    let vit = match vit.as_str() {
        "on" => true,
        "off" => false,
        other => bail!(invalid(format!("vit must be on or off, got `{other}`"))),
    };

    let dataset = Dataset::open(&dataset_dir)?;
    let samples = dataset.load(Some(Split::Train))?;
    let first = samples
        .first()
        .ok_or_else(|| invalid(format!("{} has no training images", dataset_dir.display())))?;
    let mut spec = ModelSpec::preset(&preset)?
        .with_input_size(first.image.height, first.image.width)
        .with_base_channels(base_channels)
        .with_num_classes(dataset.manifest.class_names.len());
    if vit {
        spec = spec.with_default_vit();
    }
    spec.validate()?;
    let mut model = Model::build(&spec, seed)?;
    let cfg = TrainConfig {
        iters,
        batch_size,
        optimizer,
        lr,
        lr_schedule,
        momentum,
        weight_decay,
        grad_clip: (grad_clip > 0.0).then_some(grad_clip),
        seed,
        online_aug: !no_aug,
        aug_sigma: sigma,
        log_every,
    };

    let store;
    let teacher_model;
    let setup = match (weights, &teacher_logits, &teacher_ckpt) {
        (Some(weights), Some(dir), _) => {
            store = LogitStore::open(dir).with_context(|| format!("opening teacher logits {}", dir.display()))?;
            Some(KdSetup {
                teacher: Teacher::Offline(&store),
                weights,
            })
        }
        (Some(weights), None, Some(dir)) => {
            teacher_model = checkpoint::load(dir).with_context(|| format!("loading teacher {}", dir.display()))?;
            Some(KdSetup {
                teacher: Teacher::Online(&teacher_model),
                weights,
            })
        }
        _ => None,
    };
    log::info!("training {} ({} parameters) on {} images", spec.name, model.num_params(), samples.len());
    let report = run_training(&mut model, &samples, &cfg, setup.as_ref())?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    checkpoint::save(&model, &out.join(CHECKPOINT_DIR))?;
    write_file(&out.join(LOSSES_FILE), report.to_csv())?;
    let summary = TrainSummary {
        model: &spec.name,
        params: model.num_params(),
        iterations: report.losses.len(),
        first_loss: report.first_total(),
        last10_loss: report.tail_total(10),
        decrease: report.decrease(10),
        report: &report,
    };
    write_file(&out.join(TRAIN_REPORT_FILE), serde_json::to_string_pretty(&summary)?)?;
    snapshot.write(&out)?;
    println!(
        "trained {} for {} iterations: loss {:.4} -> {:.4} (last 10 mean); checkpoint in {}",
        spec.name,
        report.losses.len(),
        summary.first_loss.unwrap_or(f64::NAN),
        summary.last10_loss.unwrap_or(f64::NAN),
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

pub fn dump_logits(a: DumpLogitsArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new("dump-logits", config)?;
    let ckpt = r.require_path("checkpoint", a.checkpoint)?;
    let dataset_dir = r.require_path("dataset", a.dataset)?;
    let out = r.require_path("out", a.out)?;
    let split = r.get("split", a.split, "train".to_string())?;
    let batch = r.get("batch-size", a.batch_size, 16usize)?;
    let snapshot = r.finish()?;

    let teacher = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = Dataset::open(&dataset_dir)?.load(Some(parse_split(&split)?))?;
    let store = dump_teacher_logits(&teacher, &samples, &out, batch)?;
    snapshot.write(&out)?;
    println!("stored logits of {} images in {}", store.len(), out.display());
    Ok(())
}

/// Loads a checkpoint and brings samples to its input size.
fn model_inputs(ckpt: &Path, samples: Vec<Sample>) -> Result<(Model, Vec<Sample>)> {
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (h, w) = model.spec.input_size;
    let samples = samples
        .into_iter()
        .map(|s| {
            if (s.image.height, s.image.width) == (h, w) {
                Ok(s)
            } else {
                resize(&s, w, h)
            }
        })
        .collect::<sonar_kd::Result<Vec<_>>>()?;
    Ok((model, samples))
}

fn prediction_file(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.txt"))
}

fn write_reports(out: &Path, label: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rows = [(label, report)];
    write_file(&out.join(format!("{REPORT_STEM}.json")), serde_json::to_string_pretty(report)?)?;
    write_file(&out.join(format!("{REPORT_STEM}.csv")), render_csv(&rows))?;
    write_file(&out.join(format!("{REPORT_STEM}.txt")), render_table(&rows))
}

fn one_source(ckpt: &Option<PathBuf>, preds: &Option<PathBuf>) -> Result<()> {
    match (ckpt, preds) {
        (Some(_), Some(_)) => bail!(invalid("give either --checkpoint or --predictions, not both")),
        (None, None) => bail!(invalid("--checkpoint or --predictions is required")),
        _ => Ok(()),
    }
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new("eval", config)?;
    let dataset_dir = r.require_path("dataset", a.dataset)?;
    let split = r.get("split", a.split, "test".to_string())?;
    let ckpt = r.path("checkpoint", a.checkpoint)?;
    let pred_dir = r.path("predictions", a.predictions)?;
    let iou = r.get("iou", a.iou, 0.5)?;
    let score_thresh = r.get("score-thresh", a.score_thresh, DEFAULT_SCORE_THRESH)?;
    let nms_iou = r.get("nms-iou", a.nms_iou, DEFAULT_NMS_IOU)?;
    let label = r.get("label", a.label, "model".to_string())?;
    let out = r.path("out", a.out)?;
    let snapshot = r.finish()?;
    one_source(&ckpt, &pred_dir)?;

    let dataset = Dataset::open(&dataset_dir)?;
    let samples = dataset.load(Some(parse_split(&split)?))?;
    let (samples, preds) = match (&ckpt, &pred_dir) {
        (Some(ckpt), _) => {
            let (model, samples) = model_inputs(ckpt, samples)?;
            let preds = detect(&model, &samples, score_thresh, nms_iou, 16)?;
            (samples, preds)
        }
        (None, Some(dir)) => {
            let preds = samples
                .iter()
                .map(|s| read_predictions(&prediction_file(dir, &s.id), s.image.width, s.image.height))
                .collect::<sonar_kd::Result<Vec<_>>>()?;
            (samples, preds)
        }
        (None, None) => unreachable!("checked above"),
    };
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    let report = evaluate(&preds, &gts, dataset.manifest.class_names.len(), WALL_CLASS, iou)?;
    print!("{}", render_table(&[(&label, &report)]));
    if let Some(out) = out {
        write_reports(&out, &label, &report)?;
        snapshot.write(&out)?;
    }
    Ok(())
}

fn find_frame(dir: &Path, stem: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| invalid(format!("no image for frame `{stem}` in {}", dir.display())))
}

pub fn eval_video(a: EvalVideoArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new("eval-video", config)?;
    let frames = r.path("frames", a.frames)?;
    let timeline_path = r.require_path("gt-timeline", a.gt_timeline)?;
    let ckpt = r.path("checkpoint", a.checkpoint)?;
    let pred_dir = r.path("predictions", a.predictions)?;
    let score_thresh = r.get("score-thresh", a.score_thresh, DEFAULT_SCORE_THRESH)?;
    let nms_iou = r.get("nms-iou", a.nms_iou, DEFAULT_NMS_IOU)?;
    let wall_class = r.get("wall-class", a.wall_class, WALL_CLASS)?;
    let label = r.get("label", a.label, "model".to_string())?;
    let out = r.path("out", a.out)?;
    let snapshot = r.finish()?;
    one_source(&ckpt, &pred_dir)?;

    let timeline = read_timeline(&timeline_path)?;
    let present: Vec<bool> = timeline.iter().map(|(_, p)| *p).collect();
    let preds: Vec<Vec<DetBox>> = match (&ckpt, &pred_dir) {
        (Some(ckpt), _) => {
            let dir = frames.as_ref().ok_or_else(|| invalid("--frames is required with --checkpoint"))?;
            let samples = timeline
                .iter()
                .map(|(stem, _)| Ok(Sample::original(stem.clone(), Image8::load(&find_frame(dir, stem)?)?, Vec::new())))
                .collect::<Result<Vec<_>>>()?;
            let (model, samples) = model_inputs(ckpt, samples)?;
            detect(&model, &samples, score_thresh, nms_iou, 16)?
        }
        // frame-level statistics only need classes, so geometry stays normalized
        (None, Some(dir)) => timeline
            .iter()
            .map(|(stem, _)| read_predictions(&prediction_file(dir, stem), 1, 1))
            .collect::<sonar_kd::Result<Vec<_>>>()?,
        (None, None) => unreachable!("checked above"),
    };
    let report = evaluate_timeline(&preds, &present, wall_class)?;
    println!(
        "{label}: {} frames, detection {:.2}%, video FP {:.2}%",
        report.frames, report.detection_duration_pct, report.video_fp_pct
    );
    if let Some(out) = out {
        write_reports(&out, &label, &report)?;
        snapshot.write(&out)?;
    }
    Ok(())
}

pub fn infer(a: InferArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new("infer", config)?;
    let ckpt = r.require_path("checkpoint", a.checkpoint)?;
    let image_path = r.require_path("image", a.image)?;
    let out = r.path("out", a.out)?;
    let annotated = r.path("annotated", a.annotated)?;
    let score_thresh = r.get("score-thresh", a.score_thresh, DEFAULT_SCORE_THRESH)?;
    let nms_iou = r.get("nms-iou", a.nms_iou, DEFAULT_NMS_IOU)?;
    r.finish()?;

    let image = Image8::load(&image_path)?;
    let (iw, ih) = (image.width, image.height);
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let (model, samples) = model_inputs(&ckpt, vec![Sample::original(stem, image.clone(), Vec::new())])?;
    let (mh, mw) = model.spec.input_size;
    let dets: Vec<DetBox> = detect(&model, &samples, score_thresh, nms_iou, 1)?
        .remove(0)
        .into_iter()
        .map(|d| DetBox {
            bbox: d.bbox.scaled(iw as f64 / mw as f64, ih as f64 / mh as f64),
            ..d
        })
        .collect();
    let text = sonar_kd::evalmetrics::format_predictions(&dets, iw, ih);
    match &out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = annotated {
        draw_detections(&image, &dets).save(&path)?;
    }
    Ok(())
}
