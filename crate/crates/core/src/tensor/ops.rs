use super::{numel_of, split_axis, strides_of, Tensor};
use crate::error::{shape_err, Result};

// ---------------------------------------------------------------------------
// gemm kernels: row-major, accumulate into `out`.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn want(t: &Tensor) -> bool {
    t.requires_grad()
}

impl Tensor {
    // -- elementwise binary ------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let (wa, wb) = (want(self), want(other));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "add",
            move |g| vec![wa.then(|| g.to_vec()), wb.then(|| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let (wa, wb) = (want(self), want(other));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "sub",
            move |g| {
                vec![
                    wa.then(|| g.to_vec()),
                    wb.then(|| g.iter().map(|v| -v).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "mul",
            move |g| {
                vec![
                    want(&a).then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect()),
                    want(&b).then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect()),
                ]
            },
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "div")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "div",
            move |g| {
                vec![
                    want(&a).then(|| g.iter().zip(b.data()).map(|(g, y)| g / y).collect()),
                    want(&b).then(|| {
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect()
                    }),
                ]
            },
        ))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.select_binary(other, "minimum", |a, b| a <= b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.select_binary(other, "maximum", |a, b| a >= b)
    }

    fn select_binary(
        &self,
        other: &Tensor,
        op: &'static str,
        pick_self: fn(f64, f64) -> bool,
    ) -> Result<Tensor> {
        same_shape(self, other, op)?;
        let mask: Vec<bool> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| pick_self(a, b))
            .collect();
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .zip(&mask)
            .map(|((&a, &b), &m)| if m { a } else { b })
            .collect();
        let (wa, wb) = (want(self), want(other));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            op,
            move |g| {
                vec![
                    wa.then(|| g.iter().zip(&mask).map(|(g, &m)| if m { *g } else { 0.0 }).collect()),
                    wb.then(|| g.iter().zip(&mask).map(|(g, &m)| if m { 0.0 } else { *g }).collect()),
                ]
            },
        ))
    }

    // -- broadcasting over leading dimensions ----------------------------------

    fn check_trailing(&self, b: &Tensor, op: &str) -> Result<usize> {
        let r = b.rank();
        if r > self.rank() || self.shape()[self.rank() - r..] != *b.shape() {
            return shape_err(format!(
                "{op}: {:?} is not a trailing sub-shape of {:?}",
                b.shape(),
                self.shape()
            ));
        }
        Ok(b.numel())
    }

    /// `self + b` where `b`'s shape equals the trailing dims of `self`.
    pub fn add_broadcast(&self, b: &Tensor) -> Result<Tensor> {
        let inner = self.check_trailing(b, "add_broadcast")?;
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % inner])
            .collect();
        let (wa, wb) = (want(self), want(b));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), b.clone()],
            "add_broadcast",
            move |g| {
                let gb = wb.then(|| {
                    let mut acc = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![wa.then(|| g.to_vec()), gb]
            },
        ))
    }

    /// `self * b` where `b`'s shape equals the trailing dims of `self`.
    pub fn mul_broadcast(&self, b: &Tensor) -> Result<Tensor> {
        let inner = self.check_trailing(b, "mul_broadcast")?;
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * b.data()[i % inner])
            .collect();
        let (a, bb) = (self.clone(), b.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), b.clone()],
            "mul_broadcast",
            move |g| {
                let ga = want(&a).then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * bb.data()[i % inner])
                        .collect()
                });
                let gb = want(&bb).then(|| {
                    let mut acc = vec![0.0; inner];
                    for (i, (g, x)) in g.iter().zip(a.data()).enumerate() {
                        acc[i % inner] += g * x;
                    }
                    acc
                });
                vec![ga, gb]
            },
        ))
    }

    // -- scalar ----------------------------------------------------------------

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary("mul_scalar", |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // -- unary -----------------------------------------------------------------

    /// Elementwise map with derivative `df(x, y)`.
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            op,
            move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.data().iter().zip(&y))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    // -- reductions ------------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], "sum", move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], "mean", move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Sum over one axis, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data()[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(shape, data, vec![self.clone()], "sum_axis", move |g| {
            let mut gx = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                for a in 0..extent {
                    let base = (o * extent + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    // -- shape -----------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            "reshape",
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for rank {rank}"));
        }
        let in_strides = strides_of(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        // source offset for every output element
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            src.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = src.iter().map(|&s| self.data()[s]).collect();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], "permute", move |g| {
            let mut gx = vec![0.0; n];
            for (gv, &s) in g.iter().zip(&src) {
                gx[s] = *gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("transpose_last2 needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = tensors.first() else {
            return shape_err("concat of zero tensors");
        };
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        let mut extents = Vec::with_capacity(tensors.len());
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(format!(
                    "concat axis {axis}: {:?} incompatible with {:?}",
                    t.shape(),
                    first.shape()
                ));
            }
            extents.push(t.shape()[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                data.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let wants: Vec<bool> = tensors.iter().map(want).collect();
        Ok(Tensor::from_op(shape, data, tensors.to_vec(), "concat", move |g| {
            let mut out: Vec<Option<Vec<f64>>> = wants
                .iter()
                .zip(&extents)
                .map(|(&w, &e)| w.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for o in 0..outer {
                let _ = o;
                for (slot, &e) in out.iter_mut().zip(&extents) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            out
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        if len == 0 || start + len > extent {
            return shape_err(format!("narrow {start}+{len} out of range for extent {extent}"));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], "narrow", move |g| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Picks elements by flat (row-major) index into a rank-1 tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return shape_err("gather with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return shape_err(format!("gather index {bad} out of range {}", self.numel()));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        let idx = indices.to_vec();
        let n = self.numel();
        Ok(Tensor::from_op(vec![indices.len()], data, vec![self.clone()], "gather", move |g| {
            let mut gx = vec![0.0; n];
            for (gv, &i) in g.iter().zip(&idx) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    // -- matmul ----------------------------------------------------------------

    /// `[..., M, K] × [K, N]` (right operand shared across leading dims) or
    /// `[B.., M, K] × [B.., K, N]` (batched, identical leading dims).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() < 2 {
            return shape_err("matmul operands need rank >= 2");
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner dims {:?} x {:?}", self.shape(), other.shape()));
        }
        let shared = rb == 2;
        if !shared && self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return shape_err(format!("matmul batch dims {:?} x {:?}", self.shape(), other.shape()));
        }
        let batch = numel_of(&self.shape()[..ra - 2]);
        let mut out = vec![0.0; batch * m * n];
        if shared {
            gemm_nn(batch * m, k, n, self.data(), other.data(), &mut out);
        } else {
            for bi in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    &other.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], "matmul", move |g| {
            let ga = want(&a).then(|| {
                let mut ga = vec![0.0; a.numel()];
                if shared {
                    gemm_nt(batch * m, n, k, g, b.data(), &mut ga);
                } else {
                    for bi in 0..batch {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                ga
            });
            let gb = want(&b).then(|| {
                let mut gb = vec![0.0; b.numel()];
                if shared {
                    gemm_tn(k, batch * m, n, a.data(), g, &mut gb);
                } else {
                    for bi in 0..batch {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `self · w + b`, `w: [K, N]`, `b: [N]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
