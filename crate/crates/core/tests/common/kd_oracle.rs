//! Scalar triple-loop reference for the distillation terms.

use sonar_kd::detector::FpnLogits;
use sonar_kd::distill::KdNormalization;

pub struct OracleTerms {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    /// Mean binary entropy of the teacher objectness, reduced like `obj`.
    pub obj_floor: f64,
}

fn at(t: &sonar_kd::Tensor, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn oracle(s: &FpnLogits, t: &FpnLogits, norm: KdNormalization) -> OracleTerms {
    let batch = s.scales[0].obj.shape()[0];
    let (mut bbox, mut obj, mut cls, mut floor) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in s.scales.iter().zip(&t.scales) {
        let (h, w) = (a.obj.shape()[2], a.obj.shape()[3]);
        let classes = a.cls.shape()[1];
        let (mut sb, mut so, mut sc, mut sf) = (0.0, 0.0, 0.0, 0.0);
        for n in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..4 {
                        let d = at(&a.reg, n, c, y, x) - at(&b.reg, n, c, y, x);
                        sb += d * d;
                    }
                    let p = sig(at(&a.obj, n, 0, y, x));
                    let q = sig(at(&b.obj, n, 0, y, x));
                    so -= q * p.ln() + (1.0 - q) * (1.0 - p).ln();
                    sf -= q * q.ln() + (1.0 - q) * (1.0 - q).ln();
                    let zs: Vec<f64> = (0..classes).map(|c| at(&a.cls, n, c, y, x).exp()).collect();
                    let zt: Vec<f64> = (0..classes).map(|c| at(&b.cls, n, c, y, x).exp()).collect();
                    let (ns, nt): (f64, f64) = (zs.iter().sum(), zt.iter().sum());
                    for c in 0..classes {
                        let (ps, pt) = (zs[c] / ns, zt[c] / nt);
                        sc += pt * (pt / ps).ln();
                    }
                }
            }
        }
        match norm {
            KdNormalization::BatchScales => {
                bbox += sb;
                obj += so;
                cls += sc;
                floor += sf;
            }
            KdNormalization::ElementMean => {
                let cells = (batch * h * w) as f64;
                bbox += sb / (4.0 * cells);
                obj += so / cells;
                cls += sc / (classes as f64 * cells);
                floor += sf / cells;
            }
        }
    }
    let div = match norm {
        KdNormalization::BatchScales => batch as f64 * 3.0,
        KdNormalization::ElementMean => 3.0,
    };
    OracleTerms {
        bbox: bbox / div,
        obj: obj / div,
        cls: cls / div,
        obj_floor: floor / div,
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonar_kd::detector::ScaleLogits;
use sonar_kd::distill::{kd_bbox_loss, kd_cls_loss, kd_obj_loss, soft_loss, KdWeights};
use sonar_kd::Tensor;

use super::gradsuite::random_logits;

pub const GRIDS: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];
pub const TOL: f64 = 1e-9;

fn crate_terms(s: &FpnLogits, t: &FpnLogits, norm: KdNormalization) -> [f64; 3] {
    [
        kd_bbox_loss(s, t, norm).unwrap().item().unwrap(),
        kd_obj_loss(s, t, norm).unwrap().item().unwrap(),
        kd_cls_loss(s, t, norm).unwrap().item().unwrap(),
    ]
}

/// Largest deviation of the crate's terms from the loop oracle over `trials`
/// random student/teacher pairs (B = 2, C = 2), both normalizations.
pub fn max_oracle_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let s = scaled(&random_logits(&mut rng, 2, 2, &GRIDS), 2.0);
        let t = scaled(&random_logits(&mut rng, 2, 2, &GRIDS), 2.0);
        for norm in [KdNormalization::BatchScales, KdNormalization::ElementMean] {
            let o = oracle(&s, &t, norm);
            let c = crate_terms(&s, &t, norm);
            for (a, b) in c.iter().zip([o.bbox, o.obj, o.cls]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// With S = T: `(|bbox|, |cls|, |obj − entropy floor|)`, worst over trials.
pub fn self_distill_residuals(trials: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let t = scaled(&random_logits(&mut rng, 2, 2, &GRIDS), 2.0);
        for norm in [KdNormalization::BatchScales, KdNormalization::ElementMean] {
            let floor = oracle(&t, &t, norm).obj_floor;
            let [b, o, c] = crate_terms(&t, &t, norm);
            for (w, v) in worst.iter_mut().zip([b.abs(), c.abs(), (o - floor).abs()]) {
                *w = w.max(v);
            }
        }
    }
    worst
}

pub fn scaled(l: &FpnLogits, k: f64) -> FpnLogits {
    let m = |t: &Tensor| t.mul_scalar(k);
    FpnLogits {
        scales: l
            .scales
            .iter()
            .map(|s| ScaleLogits {
                cls: m(&s.cls),
                reg: m(&s.reg),
                obj: m(&s.obj),
            })
            .collect(),
    }
}

fn perturbed(t: &FpnLogits, rng: &mut ChaCha8Rng) -> FpnLogits {
    let scale = 10f64.powf(rng.gen_range(-2.0..0.0));
    // perturb every term, or one term alone so each is exercised by itself
    let which = rng.gen_range(0..4);
    let mut bump = |x: &Tensor, k: usize| {
        if which == 3 || which == k {
            x.add(&Tensor::randn(x.shape(), scale, rng).unwrap()).unwrap()
        } else {
            x.clone()
        }
    };
    FpnLogits {
        scales: t
            .scales
            .iter()
            .map(|s| ScaleLogits {
                reg: bump(&s.reg, 0),
                obj: bump(&s.obj, 1),
                cls: bump(&s.cls, 2),
            })
            .collect(),
    }
}

pub struct Minimality {
    pub comparisons: usize,
    pub violations: usize,
    /// Largest `L_soft(T, T) − λ_obj·floor`, which should be ~0.
    pub max_self_excess: f64,
}

/// `L_soft(S = T) ≤ L_soft(T + δ)` with the objectness entropy floor
/// subtracted from both sides.
pub fn soft_minimality(teachers: usize, perturbations: usize, seed: u64) -> Minimality {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Minimality {
        comparisons: 0,
        violations: 0,
        max_self_excess: 0.0,
    };
    for ti in 0..teachers {
        let norm = if ti % 2 == 0 {
            KdNormalization::BatchScales
        } else {
            KdNormalization::ElementMean
        };
        let w = KdWeights {
            normalization: norm,
            ..KdWeights::default()
        };
        let t = scaled(&random_logits(&mut rng, 2, 2, &GRIDS), 2.0);
        let floor = w.obj * oracle(&t, &t, norm).obj_floor;
        let base = soft_loss(&t, &t, &w).unwrap().total.item().unwrap() - floor;
        out.max_self_excess = out.max_self_excess.max(base.abs());
        for _ in 0..perturbations {
            let s = perturbed(&t, &mut rng);
            let v = soft_loss(&s, &t, &w).unwrap().total.item().unwrap() - floor;
            out.comparisons += 1;
            if !(base <= v) {
                out.violations += 1;
            }
        }
    }
    out
}
