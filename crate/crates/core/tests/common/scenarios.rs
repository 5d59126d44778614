//! Results-table arithmetic, shape contract, augmentation statistics and the
//! offline-distillation pipeline, shared by the per-topic tests and the
//! acceptance run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use sonar_kd::dataaug::{build_dataset, hflip, noise_samples, split_counts, synth_sonar, Sample, Split, DEFAULT_SIGMA};
use sonar_kd::detector::{Model, ModelSpec, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
use sonar_kd::distill::{
    decode_record, detect, dump_teacher_logits, encode_record, train, KdSetup, KdWeights, LogitStore, Teacher,
    TrainConfig, TrainReport,
};
use sonar_kd::evalmetrics::{ap50, precision};
use sonar_kd::nn::{Activation, Init, ParamStore};
use sonar_kd::vit::{ViTBlock, ViTConfig};
use sonar_kd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(model, TP %, FP %, printed Pr %)` from the box-level results table.
pub const BOX_TABLE: [(&str, f64, f64, f64); 6] = [
    ("YOLOX-L", 12.27, 55.00, 18.24),
    ("YOLOX-L-ViT", 15.58, 58.70, 20.97),
    ("YOLOX-Nano", 12.30, 26.70, 31.53),
    ("YOLOX-Nano-ViT", 24.90, 36.90, 40.29),
    ("YOLOX-L (no aug)", 26.33, 49.66, 34.64),
    ("YOLOX-L-ViT (no aug)", 30.15, 50.93, 37.18),
];

/// Same columns from the distillation table.
pub const KD_TABLE: [(&str, f64, f64, f64); 4] = [
    ("L -> Nano", 27.22, 56.83, 32.38),
    ("L-ViT -> Nano-ViT", 22.32, 46.89, 32.25),
    ("L -> Nano (no aug)", 30.59, 59.80, 33.84),
    ("L -> Nano-ViT (no aug)", 29.79, 60.10, 33.31),
];

pub const PR_TOL_PP: f64 = 0.01;

/// Rows whose printed Pr differs from `TP / (TP + FP)` by more than
/// [`PR_TOL_PP`], with the recomputed value.
pub fn pr_mismatches(rows: &[(&'static str, f64, f64, f64)]) -> Vec<(&'static str, f64, f64)> {
    rows.iter()
        .map(|&(name, tp, fp, pr)| (name, 100.0 * precision(tp, fp), pr))
        .filter(|(_, got, pr)| (got - pr).abs() > PR_TOL_PP)
        .collect()
}

/// Checks grid sizes (spec and an actual forward pass) and ViT token counts
/// for one input side; returns the grids.
pub fn shape_contract(side: usize, base: usize) -> Result<Vec<(usize, usize)>, String> {
    let spec = ModelSpec::preset("nano")
        .unwrap()
        .with_input_size(side, side)
        .with_base_channels(base)
        .with_default_vit();
    let want: Vec<(usize, usize)> = [8, 16, 32].iter().map(|s| (side / s, side / s)).collect();
    if spec.grid_sizes() != want {
        return Err(format!("{side}: spec grids {:?}, want {want:?}", spec.grid_sizes()));
    }
    let model = Model::build(&spec, 0).map_err(|e| e.to_string())?;
    let out = model
        .infer(&Tensor::zeros(&[1, 3, side, side]).unwrap())
        .map_err(|e| e.to_string())?;
    for (s, &(h, w)) in out.scales.iter().zip(&want) {
        for (t, c) in [(&s.cls, 2), (&s.reg, 4), (&s.obj, 1)] {
            if t.shape() != [1, c, h, w] {
                return Err(format!("{side}: logits {:?}, want [1,{c},{h},{w}]", t.shape()));
            }
        }
    }

    let cells = (side / 32) * (side / 32);
    let pos = model
        .layers()
        .into_iter()
        .find(|l| l.name.ends_with("pos_embed"))
        .ok_or("no positional embedding in the ViT variant")?;
    if pos.shape[0] != cells {
        return Err(format!("{side}: model ViT has {} tokens, want {cells}", pos.shape[0]));
    }
    let c = spec.stage_channels()[4];
    let cfg = ViTConfig::for_channels(c);
    let mut store = ParamStore::new();
    let block = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        ViTBlock::new(&mut init, "vit", &cfg, c, side / 32, side / 32, Activation::Silu).map_err(|e| e.to_string())?
    };
    let x = Tensor::zeros(&[1, c, side / 32, side / 32]).unwrap();
    let tokens = block.embed_tokens(&store.bind(false), &x).map_err(|e| e.to_string())?;
    if tokens.shape() != [1, cells, c] {
        return Err(format!("{side}: tokens {:?}, want [1,{cells},{c}]", tokens.shape()));
    }
    Ok(want)
}

/// Relative deviation of the sample std of `n` noise draws from `sigma`.
pub fn noise_std_deviation(sigma: f64, n: usize, seed: u64) -> f64 {
    let v = noise_samples(sigma, seed, n);
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var.sqrt() - sigma).abs() / sigma
}

/// Flipping every sample twice restores it exactly.
pub fn hflip_involution(samples: &[Sample]) -> Result<(), String> {
    match samples.iter().find(|s| hflip(&hflip(s)) != **s) {
        None => Ok(()),
        Some(s) => Err(format!("{} changes under a double flip", s.id)),
    }
}

/// Split sizes per group and per image, and that no group spans two splits.
pub fn check_split(samples: &[Sample], groups: usize) -> Result<[usize; 3], String> {
    let mut split_of: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for s in samples {
        split_of.entry(&s.group).or_default().insert(s.split);
    }
    if split_of.len() != groups {
        return Err(format!("{} groups, want {groups}", split_of.len()));
    }
    if let Some((g, sp)) = split_of.iter().find(|(_, sp)| sp.len() != 1) {
        return Err(format!("group {g} leaks into {sp:?}"));
    }
    let mut counts = [0usize; 3];
    for sp in split_of.values() {
        counts[*sp.iter().next().unwrap() as usize] += 1;
    }
    let (tr, va, te) = split_counts(groups);
    if counts != [tr, va, te] {
        return Err(format!("group counts {counts:?}, want {:?}", [tr, va, te]));
    }
    Ok(counts)
}

pub struct PipelineConfig {
    pub originals: usize,
    pub seed: u64,
    pub teacher_preset: &'static str,
    pub teacher_base: usize,
    pub teacher_iters: usize,
    pub teacher_lr: f64,
    pub student_preset: &'static str,
    pub student_base: usize,
    pub student_iters: usize,
    pub student_lr: f64,
}

impl PipelineConfig {
    /// The desk configuration: 50 originals expanded four-fold to 200 images.
    pub fn desk() -> Self {
        PipelineConfig {
            originals: 50,
            seed: 7,
            teacher_preset: "l",
            teacher_base: 8,
            teacher_iters: 600,
            teacher_lr: 0.003,
            student_preset: "nano",
            student_base: 16,
            student_iters: 800,
            student_lr: 0.005,
        }
    }
}

pub struct PipelineOutcome {
    pub images: usize,
    pub train_images: usize,
    pub teacher_train_ap50: f64,
    pub records: usize,
    /// Record files that do not re-encode to the same bytes, plus records whose
    /// values are not the f32 rounding of the teacher's output.
    pub round_trip_mismatches: usize,
    pub student: TrainReport,
    pub student_train_ap50: f64,
    pub elapsed: Duration,
}

fn train_ap50(model: &Model, samples: &[Sample]) -> f64 {
    let preds = detect(model, samples, DEFAULT_SCORE_THRESH, DEFAULT_NMS_IOU, 16).unwrap();
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    ap50(&preds, &gts, 2).unwrap()
}

/// Teacher training, logit dump to `dir`, bit-level round-trip check and
/// offline-KD student training on a synthetic 64×64 set.
pub fn offline_kd(cfg: &PipelineConfig, dir: &Path) -> PipelineOutcome {
    let start = Instant::now();
    let originals = synth_sonar(cfg.seed, cfg.originals).unwrap();
    let all = build_dataset(&originals, DEFAULT_SIGMA, cfg.seed, true).unwrap();
    let images = all.len();
    let train_set: Vec<Sample> = all.into_iter().filter(|s| s.split == Split::Train).collect();

    let tspec = ModelSpec::preset(cfg.teacher_preset)
        .unwrap()
        .with_input_size(64, 64)
        .with_base_channels(cfg.teacher_base);
    let mut teacher = Model::build(&tspec, 1).unwrap();
    let base = TrainConfig {
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let tcfg = TrainConfig {
        iters: cfg.teacher_iters,
        lr: cfg.teacher_lr,
        ..base.clone()
    };
    train(&mut teacher, &train_set, &tcfg, None).unwrap();
    let teacher_train_ap50 = train_ap50(&teacher, &train_set);

    let store = dump_teacher_logits(&teacher, &train_set, dir, 16).unwrap();
    let reopened = LogitStore::open(dir).unwrap();
    let mut round_trip_mismatches = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "kdl") {
            let bytes = std::fs::read(&path).unwrap();
            if encode_record(&decode_record(&bytes).unwrap()) != bytes {
                round_trip_mismatches += 1;
            }
        }
    }
    for s in &train_set {
        let rec = reopened.load(&s.id).unwrap();
        let live = teacher
            .infer(&sonar_kd::distill::batch_images(&[s], &tspec).unwrap())
            .unwrap();
        let same_values = rec.logits.scales.iter().zip(&live.scales).all(|(a, b)| {
            a.tensors()
                .iter()
                .zip(b.tensors())
                .all(|(x, y)| x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == (*v as f32 as f64).to_bits()))
        });
        if !same_values {
            round_trip_mismatches += 1;
        }
    }

    let sspec = ModelSpec::preset(cfg.student_preset)
        .unwrap()
        .with_input_size(64, 64)
        .with_base_channels(cfg.student_base);
    let mut student = Model::build(&sspec, 2).unwrap();
    let kd = KdSetup {
        teacher: Teacher::Offline(&store),
        weights: KdWeights::default(),
    };
    let scfg = TrainConfig {
        iters: cfg.student_iters,
        lr: cfg.student_lr,
        ..base
    };
    let report = train(&mut student, &train_set, &scfg, Some(&kd)).unwrap();
    let student_train_ap50 = train_ap50(&student, &train_set);
    PipelineOutcome {
        images,
        train_images: train_set.len(),
        teacher_train_ap50,
        records: store.len(),
        round_trip_mismatches,
        student: report,
        student_train_ap50,
        elapsed: start.elapsed(),
    }
}

/// `(seed, KD student video FP %, plain student video FP %)` on the test
/// split, students sharing init and batch order per seed.
pub fn kd_video_fp_by_seed(cfg: &PipelineConfig, seeds: &[u64], dir: &Path) -> Vec<(u64, f64, f64)> {
    let originals = synth_sonar(cfg.seed, cfg.originals).unwrap();
    let all = build_dataset(&originals, DEFAULT_SIGMA, cfg.seed, true).unwrap();
    let (train_set, test_set): (Vec<Sample>, Vec<Sample>) = all
        .into_iter()
        .filter(|s| s.split != Split::Val)
        .partition(|s| s.split == Split::Train);
    let tspec = ModelSpec::preset(cfg.teacher_preset)
        .unwrap()
        .with_input_size(64, 64)
        .with_base_channels(cfg.teacher_base);
    let mut teacher = Model::build(&tspec, 1).unwrap();
    let tcfg = TrainConfig {
        iters: cfg.teacher_iters,
        lr: cfg.teacher_lr,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train(&mut teacher, &train_set, &tcfg, None).unwrap();
    let store = dump_teacher_logits(&teacher, &train_set, dir, 16).unwrap();
    let kd = KdSetup {
        teacher: Teacher::Offline(&store),
        weights: KdWeights::default(),
    };
    let sspec = ModelSpec::preset(cfg.student_preset)
        .unwrap()
        .with_input_size(64, 64)
        .with_base_channels(cfg.student_base);
    let gts: Vec<_> = test_set.iter().map(|s| s.boxes.clone()).collect();
    seeds
        .iter()
        .map(|&seed| {
            let scfg = TrainConfig {
                iters: cfg.student_iters,
                lr: cfg.student_lr,
                seed,
                ..TrainConfig::default()
            };
            let mut fp = [0.0; 2];
            for (slot, with_kd) in [(0, Some(&kd)), (1, None)] {
                let mut student = Model::build(&sspec, seed).unwrap();
                train(&mut student, &train_set, &scfg, with_kd).unwrap();
                let preds = detect(&student, &test_set, DEFAULT_SCORE_THRESH, DEFAULT_NMS_IOU, 16).unwrap();
                let r = sonar_kd::evalmetrics::evaluate(&preds, &gts, 2, sonar_kd::dataaug::WALL_CLASS, 0.5).unwrap();
                fp[slot] = r.video_fp_pct;
            }
            (seed, fp[0], fp[1])
        })
        .collect()
}
