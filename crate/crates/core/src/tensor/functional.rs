//! Probability-space functions: softmax family, layer norm and the loss
//! primitives (MSE, BCE, KL divergence).

use super::{split_axis, Tensor};
use crate::error::{shape_err, Error, Result};

/// Probability clamp window for BCE: `p ∈ [ε, 1−ε]`.
pub const BCE_EPS: f64 = 1e-7;
/// Lower clamp on the approximating distribution in KL divergence.
pub const KL_EPS: f64 = 1e-7;
/// Tolerance for "is a probability vector" checks.
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{op} input at flat index {i} (value {})",
            t.data()[i]
        )));
    }
    Ok(())
}

impl Tensor {
    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite(self, "softmax")?;
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * extent + a) * inner + i;
                let max = (0..extent).map(|a| self.data()[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..extent {
                    let e = (self.data()[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..extent {
                    out[idx(a)] /= z;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], "softmax", move |g| {
            // dx = y ⊙ (g − Σ g⊙y)
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * extent + a) * inner + i;
                    let dot: f64 = (0..extent).map(|a| g[idx(a)] * y[idx(a)]).sum();
                    for a in 0..extent {
                        gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `log(softmax(x))` in the fused form `x − max − log Σ exp(x − max)`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite(self, "log_softmax")?;
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * extent + a) * inner + i;
                let max = (0..extent).map(|a| self.data()[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..extent)
                    .map(|a| (self.data()[idx(a)] - max).exp())
                    .sum::<f64>()
                    .ln()
                    + max;
                for a in 0..extent {
                    out[idx(a)] = self.data()[idx(a)] - lse;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], "log_softmax", move |g| {
            // dx = g − softmax · Σ g
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * extent + a) * inner + i;
                    let gs: f64 = (0..extent).map(|a| g[idx(a)]).sum();
                    for a in 0..extent {
                        gx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes the last axis to zero mean and unit variance (biased variance),
    /// without affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        if self.rank() == 0 {
            return shape_err("layer_norm on rank-0 tensor");
        }
        let d = *self.shape().last().unwrap();
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], "layer_norm", move |g| {
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean squared error `(1/N) Σ (self − other)²`.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return shape_err(format!("mse: shapes {:?} and {:?} differ", self.shape(), other.shape()));
        }
        let n = self.numel() as f64;
        let diff: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let v = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let (wa, wb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(vec![1], vec![v], vec![self.clone(), other.clone()], "mse", move |g| {
            let scale = 2.0 * g[0] / n;
            vec![
                wa.then(|| diff.iter().map(|d| scale * d).collect()),
                wb.then(|| diff.iter().map(|d| -scale * d).collect()),
            ]
        }))
    }

    /// Binary cross-entropy `−(1/N) Σ [y log p + (1−y) log(1−p)]` with `self = p`
    /// clamped to `[ε, 1−ε]` and soft targets `y ∈ [0, 1]`.
    pub fn bce(&self, target: &Tensor) -> Result<Tensor> {
        check_bce_args(self, target)?;
        let n = self.numel() as f64;
        let clamped: Vec<f64> = self.data().iter().map(|p| p.clamp(BCE_EPS, 1.0 - BCE_EPS)).collect();
        let v = -clamped
            .iter()
            .zip(target.data())
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / n;
        let (p, y) = (self.clone(), target.clone());
        Ok(Tensor::from_op(vec![1], vec![v], vec![self.clone(), target.clone()], "bce", move |g| {
            let s = g[0] / n;
            let gp = p.requires_grad().then(|| {
                p.data()
                    .iter()
                    .zip(&clamped)
                    .zip(y.data())
                    .map(|((&raw, &pc), &yv)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&raw) {
                            0.0
                        } else {
                            -s * (yv / pc - (1.0 - yv) / (1.0 - pc))
                        }
                    })
                    .collect()
            });
            let gy = y.requires_grad().then(|| {
                clamped.iter().map(|pc| -s * (pc.ln() - (1.0 - pc).ln())).collect()
            });
            vec![gp, gy]
        }))
    }

    /// Elementwise BCE terms (no reduction); same conventions as [`Tensor::bce`].
    pub fn bce_elementwise(&self, target: &Tensor) -> Result<Tensor> {
        check_bce_args(self, target)?;
        let p = self.clamp_probability();
        let one_minus_p = p.neg().add_scalar(1.0);
        let one_minus_y = target.neg().add_scalar(1.0);
        let pos = target.mul(&p.ln())?;
        let neg = one_minus_y.mul(&one_minus_p.ln())?;
        Ok(pos.add(&neg)?.neg())
    }

    fn clamp_probability(&self) -> Tensor {
        self.unary(
            "clamp_prob",
            |p| p.clamp(BCE_EPS, 1.0 - BCE_EPS),
            |p, _| if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) { 1.0 } else { 0.0 },
        )
    }

    /// KL divergence `Σ P log(P / Q)` with `self = P`, `q = Q`, both probability
    /// vectors along `axis`. Terms with `P = 0` contribute 0; `Q` is clamped to `≥ ε`.
    pub fn kl_div(&self, q: &Tensor, axis: usize) -> Result<Tensor> {
        if self.shape() != q.shape() {
            return shape_err(format!("kl_div: shapes {:?} and {:?} differ", self.shape(), q.shape()));
        }
        check_distribution(self, axis, "P")?;
        check_distribution(q, axis, "Q")?;
        let qc: Vec<f64> = q.data().iter().map(|v| v.max(KL_EPS)).collect();
        let v: f64 = self
            .data()
            .iter()
            .zip(&qc)
            .map(|(&p, &qv)| if p > 0.0 { p * (p / qv).ln() } else { 0.0 })
            .sum();
        let (p, qq) = (self.clone(), q.clone());
        Ok(Tensor::from_op(vec![1], vec![v], vec![self.clone(), q.clone()], "kl_div", move |g| {
            let gp = p.requires_grad().then(|| {
                p.data()
                    .iter()
                    .zip(&qc)
                    .map(|(&pv, &qv)| if pv > 0.0 { g[0] * ((pv / qv).ln() + 1.0) } else { 0.0 })
                    .collect()
            });
            let gq = qq.requires_grad().then(|| {
                p.data()
                    .iter()
                    .zip(qq.data())
                    .zip(&qc)
                    .map(|((&pv, &raw), &qv)| if raw < KL_EPS { 0.0 } else { -g[0] * pv / qv })
                    .collect()
            });
            vec![gp, gq]
        }))
    }

    /// KL divergence with the approximating distribution given in log space:
    /// `Σ P (log P − log_q)`, `self = log_q`. This is the form used when the
    /// student side comes out of `log_softmax`.
    pub fn kl_div_log_input(&self, p: &Tensor) -> Result<Tensor> {
        if self.shape() != p.shape() {
            return shape_err(format!(
                "kl_div_log_input: shapes {:?} and {:?} differ",
                self.shape(),
                p.shape()
            ));
        }
        let v: f64 = p
            .data()
            .iter()
            .zip(self.data())
            .map(|(&pv, &lq)| if pv > 0.0 { pv * (pv.ln() - lq) } else { 0.0 })
            .sum();
        let (lq, pp) = (self.clone(), p.clone());
        Ok(Tensor::from_op(vec![1], vec![v], vec![self.clone(), p.clone()], "kl_div_log", move |g| {
            let glq = lq.requires_grad().then(|| pp.data().iter().map(|pv| -g[0] * pv).collect());
            let gp = pp.requires_grad().then(|| {
                pp.data()
                    .iter()
                    .zip(lq.data())
                    .map(|(&pv, &l)| if pv > 0.0 { g[0] * (pv.ln() - l + 1.0) } else { 0.0 })
                    .collect()
            });
            vec![glq, gp]
        }))
    }
}

fn check_bce_args(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() {
        return shape_err(format!("bce: shapes {:?} and {:?} differ", p.shape(), y.shape()));
    }
    for (name, t) in [("prediction", p), ("target", y)] {
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("bce {name} value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

fn check_distribution(t: &Tensor, axis: usize, name: &str) -> Result<()> {
    let (outer, extent, inner) = split_axis(t.shape(), axis)?;
    for o in 0..outer {
        for i in 0..inner {
            let mut s = 0.0;
            for a in 0..extent {
                let v = t.data()[(o * extent + a) * inner + i];
                if !(0.0..=1.0 + NORMALIZATION_TOL).contains(&v) {
                    return Err(Error::InvalidArgument(format!("kl_div {name} has entry {v} outside [0, 1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidArgument(format!(
                    "kl_div {name} is not normalized along axis {axis} (sum {s})"
                )));
            }
        }
    }
    Ok(())
}
