//! Transformer encoder applied to a detector feature map.
//!
//! The map `[N, C, H, W]` is cut into `P×P` patches, each flattened in
//! (row, column, channel) order and linearly embedded to `D` dimensions. With
//! `P = 1` and `D = C` the embedding is skipped and every spatial cell is a
//! token. Tokens pass through `L` post-norm encoder layers
//!
//! ```text
//! y   = LayerNorm(x + MHSA(x))
//! out = LayerNorm(y + FFN(y))
//! ```
//!
//! and are folded back to the input map shape.
//!
//! Per-head projections `W^Q_i` (`D × d_k`) are stored side by side as one
//! `D × D` matrix: columns `i·d_k .. (i+1)·d_k` belong to head `i`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Bound, Init, LayerNorm, Linear, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub patch_size: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub ffn_ratio: f64,
    pub use_positional_embedding: bool,
}

impl ViTConfig {
    /// Default insert for a map with `channels` channels: 4 heads, one encoder
    /// layer, one token per cell, `D = C`.
    pub fn for_channels(channels: usize) -> Self {
        ViTConfig {
            embed_dim: channels,
            num_heads: 4,
            num_encoder_layers: 1,
            patch_size: 1,
            ffn_ratio: 2.0,
            use_positional_embedding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.ffn_ratio).round() as usize).max(1)
    }

    /// Whether a patch embedding / un-embedding pair is needed for `channels`.
    pub fn needs_embedding(&self, channels: usize) -> bool {
        self.patch_size != 1 || self.embed_dim != channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return Err(Error::InvalidSpec("ViT dims must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidSpec(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.num_encoder_layers == 0 {
            return Err(Error::InvalidSpec("at least one encoder layer is required".into()));
        }
        if !(self.ffn_ratio > 0.0) {
            return Err(Error::InvalidSpec("ffn_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Token count for an `h × w` map.
    pub fn num_tokens(&self, h: usize, w: usize) -> Result<usize> {
        if !h.is_multiple_of(self.patch_size) || !w.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidSpec(format!(
                "patch size {} does not divide feature map {h}x{w}",
                self.patch_size
            )));
        }
        Ok((h / self.patch_size) * (w / self.patch_size))
    }
}

/// `[N, C, H, W]` → `[N, T, P·P·C]`, patches in raster order, each flattened
/// as (row, column, channel).
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return shape_err(format!("patchify expects [N,C,H,W], got {:?}", x.shape()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("patch size {p} does not divide {h}x{w}"));
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[n, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[n, gh * gw, p * p * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let n = tokens.shape()[0];
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != [n, gh * gw, p * p * c] {
        return shape_err(format!("unpatchify: tokens {:?} do not fit {c}x{h}x{w}", tokens.shape()));
    }
    tokens
        .reshape(&[n, gh, gw, p, p, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[n, c, h, w])
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V` over the last two axes;
/// leading axes are batch.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let weights = attention_weights(q, k)?;
    weights.matmul(v)
}

/// The row-stochastic matrix `softmax(QKᵀ/√d_k)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() < 2 || q.shape() != k.shape() {
        return shape_err(format!("attention: q {:?} and k {:?} must match", q.shape(), k.shape()));
    }
    let dk = *q.shape().last().unwrap();
    let scores = q.matmul(&k.transpose_last2()?)?.mul_scalar(1.0 / (dk as f64).sqrt());
    scores.softmax(scores.rank() - 1)
}

/// Weights of one multi-head self-attention sublayer.
#[derive(Debug, Clone)]
pub struct MhsaWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// `Concat(head_1..head_h)·W^O + b^O` with `head_i = Attention(xW^Q_i, xW^K_i, xW^V_i)`.
pub fn mhsa(x: &Tensor, w: &MhsaWeights, num_heads: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return shape_err(format!("mhsa expects [N,T,D], got {:?}", x.shape()));
    }
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::InvalidSpec(format!("num_heads {num_heads} does not divide D = {d}")));
    }
    let dk = d / num_heads;
    let split = |y: Tensor| -> Result<Tensor> {
        y.reshape(&[n, t, num_heads, dk])?.permute(&[0, 2, 1, 3])
    };
    let q = split(x.linear(&w.wq, Some(&w.bq))?)?;
    let k = split(x.linear(&w.wk, Some(&w.bk))?)?;
    let v = split(x.linear(&w.wv, Some(&w.bv))?)?;
    let heads = attention(&q, &k, &v)?; // [N, h, T, dk]
    let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
    merged.linear(&w.wo, Some(&w.bo))
}

/// Weights of one encoder layer (MHSA + position-wise FFN, each followed by a
/// residual LayerNorm).
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub attn: MhsaWeights,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

fn affine_ln(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    x.layer_norm(LN_EPS)?.mul_broadcast(gamma)?.add_broadcast(beta)
}

pub fn encoder_layer(x: &Tensor, w: &EncoderWeights, num_heads: usize, act: Activation) -> Result<Tensor> {
    let y = affine_ln(&x.add(&mhsa(x, &w.attn, num_heads)?)?, &w.ln1_gamma, &w.ln1_beta)?;
    let hidden = act.apply(&y.linear(&w.ffn_w1, Some(&w.ffn_b1))?);
    let ffn = hidden.linear(&w.ffn_w2, Some(&w.ffn_b2))?;
    affine_ln(&y.add(&ffn)?, &w.ln2_gamma, &w.ln2_beta)
}

#[derive(Debug, Clone)]
struct MhsaParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct EncoderParams {
    attn: MhsaParams,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
}

impl EncoderParams {
    fn weights(&self, p: &Bound) -> EncoderWeights {
        let g = |id: ParamId| p.get(id).clone();
        EncoderWeights {
            attn: MhsaWeights {
                wq: g(self.attn.q.weight),
                bq: g(self.attn.q.bias),
                wk: g(self.attn.k.weight),
                bk: g(self.attn.k.bias),
                wv: g(self.attn.v.weight),
                bv: g(self.attn.v.bias),
                wo: g(self.attn.o.weight),
                bo: g(self.attn.o.bias),
            },
            ln1_gamma: g(self.ln1.gamma),
            ln1_beta: g(self.ln1.beta),
            ffn_w1: g(self.ffn1.weight),
            ffn_b1: g(self.ffn1.bias),
            ffn_w2: g(self.ffn2.weight),
            ffn_b2: g(self.ffn2.bias),
            ln2_gamma: g(self.ln2.gamma),
            ln2_beta: g(self.ln2.beta),
        }
    }
}

/// The transformer insert with its parameters, for a fixed input map shape.
#[derive(Debug, Clone)]
pub struct ViTBlock {
    pub cfg: ViTConfig,
    channels: usize,
    height: usize,
    width: usize,
    embed: Option<(Linear, Linear)>,
    pos: Option<ParamId>,
    layers: Vec<EncoderParams>,
    act: Activation,
}

impl ViTBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cfg: &ViTConfig,
        channels: usize,
        height: usize,
        width: usize,
        act: Activation,
    ) -> Result<Self> {
        cfg.validate()?;
        let tokens = cfg.num_tokens(height, width)?;
        let d = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * channels;
        init.scope(name, |init| {
            let embed = if cfg.needs_embedding(channels) {
                Some((
                    Linear::new(init, "patch_embed", patch_dim, d)?,
                    Linear::new(init, "patch_unembed", d, patch_dim)?,
                ))
            } else {
                None
            };
            let pos = if cfg.use_positional_embedding {
                Some(init.normal("pos_embed", &[tokens, d], 0.02)?)
            } else {
                None
            };
            let mut layers = Vec::with_capacity(cfg.num_encoder_layers);
            for i in 0..cfg.num_encoder_layers {
                layers.push(init.scope(&format!("encoder.{i}"), |init| {
                    Ok(EncoderParams {
                        attn: MhsaParams {
                            q: Linear::new(init, "attn.q", d, d)?,
                            k: Linear::new(init, "attn.k", d, d)?,
                            v: Linear::new(init, "attn.v", d, d)?,
                            o: Linear::new(init, "attn.o", d, d)?,
                        },
                        ln1: LayerNorm::new(init, "ln1", d)?,
                        ffn1: Linear::new(init, "ffn.0", d, cfg.ffn_hidden())?,
                        ffn2: Linear::new(init, "ffn.1", cfg.ffn_hidden(), d)?,
                        ln2: LayerNorm::new(init, "ln2", d)?,
                    })
                })?);
            }
            Ok(ViTBlock {
                cfg: cfg.clone(),
                channels,
                height,
                width,
                embed,
                pos,
                layers,
                act,
            })
        })
    }

    /// Patch tokens (after the optional embedding and positional term).
    pub fn embed_tokens(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let patches = patchify(x, self.cfg.patch_size)?;
        let tokens = match &self.embed {
            Some((embed, _)) => embed.forward(p, &patches)?,
            None => patches,
        };
        match self.pos {
            Some(pos) => tokens.add_broadcast(p.get(pos)),
            None => Ok(tokens),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let expect = [self.channels, self.height, self.width];
        if x.rank() != 4 || x.shape()[1..] != expect {
            return shape_err(format!(
                "ViT block built for [N,{},{},{}], got {:?}",
                self.channels,
                self.height,
                self.width,
                x.shape()
            ));
        }
        let mut tokens = self.embed_tokens(p, x)?;
        for layer in &self.layers {
            tokens = encoder_layer(&tokens, &layer.weights(p), self.cfg.num_heads, self.act)?;
        }
        if let Some((_, unembed)) = &self.embed {
            tokens = unembed.forward(p, &tokens)?;
        }
        unpatchify(&tokens, self.cfg.patch_size, self.channels, self.height, self.width)
    }
}
