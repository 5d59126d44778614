use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hard::hard_loss;
use super::logits::LogitStore;
use super::losses::{soft_loss, total_loss, KdWeights};
use super::batch_images;
use crate::dataaug::{hflip, noise, Sample, DEFAULT_SIGMA};
use crate::detector::{FpnLogits, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// SGD with heavy-ball momentum.
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8; `momentum` is ignored.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `lr / 20` at the last iteration.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based iteration `it` of `iters`.
    pub fn rate(self, lr: f64, it: usize, iters: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let floor = lr / 20.0;
                let t = (it - 1) as f64 / (iters.max(2) - 1) as f64;
                floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Heavy-ball momentum for SGD; 0 is plain SGD.
    pub momentum: f64,
    /// L2 penalty added to every parameter gradient.
    pub weight_decay: f64,
    /// Global gradient-norm cap, applied before weight decay.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Random flip / noise per sample and iteration.
    pub online_aug: bool,
    pub aug_sigma: f64,
    /// Log a progress line every this many iterations (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 600,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            lr: 0.003,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: Some(10.0),
            seed: 0,
            online_aug: false,
            aug_sigma: DEFAULT_SIGMA,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iters == 0 || self.batch_size == 0 {
            return bad("iters and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Where teacher logits come from.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    /// Precomputed records, one per training image.
    Offline(&'a LogitStore),
    /// Teacher inference on every batch.
    Online(&'a Model),
}

#[derive(Debug, Clone, Copy)]
pub struct KdSetup<'a> {
    pub teacher: Teacher<'a>,
    pub weights: KdWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftParts {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLoss {
    /// 1-based.
    pub iteration: usize,
    pub hard: f64,
    pub hard_obj: f64,
    pub hard_cls: f64,
    pub hard_iou: f64,
    pub num_pos: usize,
    pub soft: Option<SoftParts>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<IterLoss>,
}

impl TrainReport {
    pub fn first_total(&self) -> Option<f64> {
        self.losses.first().map(|l| l.total)
    }

    /// Mean total loss over the last `window` iterations.
    pub fn tail_total(&self, window: usize) -> Option<f64> {
        let n = window.min(self.losses.len());
        if n == 0 {
            return None;
        }
        Some(self.losses[self.losses.len() - n..].iter().map(|l| l.total).sum::<f64>() / n as f64)
    }

    /// `1 − tail / first`: the fraction by which the loss fell.
    pub fn decrease(&self, window: usize) -> Option<f64> {
        Some(1.0 - self.tail_total(window)? / self.first_total()?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total,hard,hard_obj,hard_cls,hard_iou,num_pos,soft,soft_bbox,soft_obj,soft_cls\n");
        for l in &self.losses {
            let soft = l.soft.map_or_else(
                || ",,,".to_string(),
                |s| format!("{},{},{},{}", s.total, s.bbox, s.obj, s.cls),
            );
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.iteration, l.total, l.hard, l.hard_obj, l.hard_cls, l.hard_iou, l.num_pos, soft
            ));
        }
        out
    }
}

/// Seeded epoch shuffler yielding index batches; a short tail wraps into the
/// next epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Batches {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// SGD over `samples`. With `kd`, the soft loss against the teacher is added
/// to the ground-truth loss. Images must already match the model input size.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, kd: Option<&KdSetup<'_>>) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut offline: HashMap<&str, FpnLogits> = HashMap::new();
    if let Some(kd) = kd {
        kd.weights.validate()?;
        match kd.teacher {
            Teacher::Offline(store) => {
                if cfg.online_aug {
                    return Err(Error::InvalidArgument(
                        "offline KD uses stored logits of unaugmented images; disable online augmentation".into(),
                    ));
                }
                store.check_contract(&model.spec)?;
                for s in samples {
                    offline.insert(&s.id, store.load(&s.id)?.logits);
                }
            }
            Teacher::Online(teacher) => {
                if teacher.spec.logit_contract_hash() != model.spec.logit_contract_hash() {
                    return Err(Error::SpecHashMismatch(format!(
                        "teacher `{}` and student `{}` disagree on input size or classes",
                        teacher.spec.name, model.spec.name
                    )));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches = Batches::new(samples.len(), ChaCha8Rng::seed_from_u64(rng.gen()));
    let zeros = || -> Vec<Vec<f64>> { model.store.params().iter().map(|p| vec![0.0; p.numel()]).collect() };
    let (mut m1, mut m2) = (zeros(), zeros());
    let mut report = TrainReport::default();

    for it in 1..=cfg.iters {
        let idx = batches.next(cfg.batch_size);
        let mut batch: Vec<Sample> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut s = samples[i].clone();
            if cfg.online_aug {
                if rng.gen_bool(0.5) {
                    s = hflip(&s);
                }
                if rng.gen_bool(0.5) {
                    s = noise(&s, cfg.aug_sigma, rng.gen())?;
                }
            }
            batch.push(s);
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let images = batch_images(&refs, &model.spec)?;
        let targets: Vec<_> = batch.iter().map(|s| s.boxes.clone()).collect();

        let bound = model.store.bind(true);
        let logits = model.forward(&bound, &images)?;
        let hard = hard_loss(&logits, &targets, &model.spec)?;
        let (total, soft) = match kd {
            None => (hard.total.clone(), None),
            Some(kd) => {
                let teacher = match kd.teacher {
                    Teacher::Offline(_) => {
                        let items: Vec<FpnLogits> = batch.iter().map(|s| offline[s.id.as_str()].clone()).collect();
                        FpnLogits::stack(&items)?
                    }
                    Teacher::Online(t) => t.infer(&images)?,
                };
                let soft = soft_loss(&logits, &teacher, &kd.weights)?;
                let total = total_loss(&hard.total, &soft.total, &kd.weights)?;
                let parts = SoftParts {
                    bbox: soft.bbox.item()?,
                    obj: soft.obj.item()?,
                    cls: soft.cls.item()?,
                    total: soft.total.item()?,
                };
                (total, Some(parts))
            }
        };
        let loss = total.item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        report.losses.push(IterLoss {
            iteration: it,
            hard: hard.total.item()?,
            hard_obj: hard.obj.item()?,
            hard_cls: hard.cls.item()?,
            hard_iou: hard.iou.item()?,
            num_pos: hard.num_pos,
            soft,
            total: loss,
        });
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it == 1) {
            log::info!("iter {it}/{}: loss {loss:.5}", cfg.iters);
        }

        total.backward()?;
        let grads: Vec<Vec<f64>> = bound
            .tensors()
            .iter()
            .map(|t| t.grad_vec().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let scale = match cfg.grad_clip {
            Some(cap) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cap {
                    cap / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = cfg.lr_schedule.rate(cfg.lr, it, cfg.iters);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((p, g), v) in model.store.params_mut().iter_mut().zip(&grads).zip(&mut m1) {
                    for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = cfg.momentum * *vi + scale * gi + cfg.weight_decay * *w;
                        *w -= lr * *vi;
                    }
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                let c1 = 1.0 - B1.powi(it as i32);
                let c2 = 1.0 - B2.powi(it as i32);
                for (((p, g), a), b) in model.store.params_mut().iter_mut().zip(&grads).zip(&mut m1).zip(&mut m2) {
                    for (((w, &gi), ai), bi) in p.data.iter_mut().zip(g).zip(a.iter_mut()).zip(b.iter_mut()) {
                        let gi = scale * gi + cfg.weight_decay * *w;
                        *ai = B1 * *ai + (1.0 - B1) * gi;
                        *bi = B2 * *bi + (1.0 - B2) * gi * gi;
                        *w -= lr * (*ai / c1) / ((*bi / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        if model.store.params().iter().any(|p| p.data.iter().any(|w| !w.is_finite())) {
            return Err(Error::Diverged { iteration: it, loss });
        }
    }
    Ok(report)
}
