//! Spatial ops over `[N, C, H, W]` tensors.

use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, padding: 0 }
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return shape_err(format!(
            "kernel {kernel} (stride {stride}, padding {padding}) does not fit extent {input}"
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// `[C·kh·kw, oh·ow]` patch matrix for one image.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let l = self.oh * self.ow;
        let mut col = vec![0.0; self.c * self.kh * self.kw * l];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let l = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation. `self: [N, C, H, W]`, `weight: [O, C, kh, kw]`,
    /// `bias: [O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOptions) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 {
            return shape_err(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wc != c {
            return shape_err(format!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return shape_err(format!("conv2d bias shape {:?}, expected [{o}]", b.shape()));
            }
        }
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh: out_extent(h, kh, opts.stride, opts.padding)?,
            ow: out_extent(w, kw, opts.stride, opts.padding)?,
            stride: opts.stride,
            pad: opts.padding,
        };
        let k = c * kh * kw;
        let l = geo.oh * geo.ow;
        let img_len = c * h * w;
        let pointwise = geo.is_pointwise();

        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut out = vec![0.0; n * o * l];
        for b in 0..n {
            let img = &self.data()[b * img_len..(b + 1) * img_len];
            let dst = &mut out[b * o * l..(b + 1) * o * l];
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    dst[oc * l..(oc + 1) * l].iter_mut().for_each(|v| *v = bv);
                }
            }
            if pointwise {
                gemm_nn(o, k, l, weight.data(), img, dst);
            } else {
                let col = geo.im2col(img);
                gemm_nn(o, k, l, weight.data(), &col, dst);
                if self.requires_grad() || weight.requires_grad() {
                    cols.push(col);
                }
            }
        }

        let x = self.clone();
        let wt = weight.clone();
        let has_bias = bias.is_some();
        let want_bias = bias.is_some_and(|b| b.requires_grad());
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(vec![n, o, geo.oh, geo.ow], out, parents, "conv2d", move |g| {
            let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
            let mut gw = wt.requires_grad().then(|| vec![0.0; wt.numel()]);
            let mut gb = want_bias.then(|| vec![0.0; o]);
            let mut dcol = vec![0.0; if pointwise { 0 } else { k * l }];
            for b in 0..n {
                let gout = &g[b * o * l..(b + 1) * o * l];
                if let Some(gb) = gb.as_mut() {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        *acc += gout[oc * l..(oc + 1) * l].iter().sum::<f64>();
                    }
                }
                let col: &[f64] = if pointwise {
                    &x.data()[b * img_len..(b + 1) * img_len]
                } else {
                    &cols[b]
                };
                if let Some(gw) = gw.as_mut() {
                    gemm_nt(o, l, k, gout, col, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * img_len..(b + 1) * img_len];
                    if pointwise {
                        gemm_tn(k, o, l, wt.data(), gout, dst);
                    } else {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(k, o, l, wt.data(), gout, &mut dcol);
                        geo.col2im(&dcol, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        }))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return shape_err(format!("max_pool2d expects rank 4, got {:?}", self.shape()));
        }
        if kernel == 0 || padding > kernel / 2 {
            return shape_err(format!("max_pool2d: padding {padding} too large for kernel {kernel}"));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let oh = out_extent(h, kernel, stride, padding)?;
        let ow = out_extent(w, kernel, stride, padding)?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if self.data()[i] > best {
                                best = self.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::from_op(vec![n, c, oh, ow], out, vec![self.clone()], "max_pool2d", move |g| {
            let mut gx = vec![0.0; len];
            for (gv, &i) in g.iter().zip(&argmax) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if self.rank() != 4 || factor == 0 {
            return shape_err(format!("upsample_nearest: shape {:?}, factor {factor}", self.shape()));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                let row = &self.data()[plane * h * w + (oy / factor) * w..];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::from_op(vec![n, c, oh, ow], out, vec![self.clone()], "upsample", move |g| {
            let mut gx = vec![0.0; len];
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[plane * h * w + (oy / factor) * w + ox / factor] +=
                            g[(plane * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Per-channel affine `x·scale[c] + shift[c]` over `[N, C, H, W]`.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        if self.rank() != 4 {
            return shape_err(format!("channel_affine expects rank 4, got {:?}", self.shape()));
        }
        let c = self.shape()[1];
        if scale.shape() != [c] || shift.shape() != [c] {
            return shape_err(format!("channel_affine parameters must have shape [{c}]"));
        }
        let hw = self.shape()[2] * self.shape()[3];
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let ch = (i / hw) % c;
                x * scale.data()[ch] + shift.data()[ch]
            })
            .collect();
        let (x, s, t) = (self.clone(), scale.clone(), shift.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), scale.clone(), shift.clone()],
            "channel_affine",
            move |g| {
                let gx = x.requires_grad().then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * s.data()[(i / hw) % c])
                        .collect()
                });
                let gs = s.requires_grad().then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, (g, xv)) in g.iter().zip(x.data()).enumerate() {
                        acc[(i / hw) % c] += g * xv;
                    }
                    acc
                });
                let gt = t.requires_grad().then(|| {
                    let mut acc = vec![0.0; c];
                    for (i, g) in g.iter().enumerate() {
                        acc[(i / hw) % c] += g;
                    }
                    acc
                });
                vec![gx, gs, gt]
            },
        ))
    }
}
