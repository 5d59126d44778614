//! Parameter storage and the small layer vocabulary shared by the detector and
//! the transformer insert.
//!
//! Parameters live as plain `f64` buffers in a [`ParamStore`]. A forward pass
//! first [`bind`](ParamStore::bind)s them into leaf tensors; after `backward`
//! the bound leaves carry the gradients that the optimizer folds back into the
//! store.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dOptions, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Parameters bound as tensor leaves for a single forward/backward pass.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!("parameter `{name}`: shape {shape:?} vs {} values", data.len())));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Wraps every parameter as a leaf tensor. With `trainable = false` no
    /// graph is recorded downstream.
    pub fn bind(&self, trainable: bool) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new(&p.shape, p.data.clone()).expect("store holds valid shapes");
                if trainable {
                    t.requiring_grad()
                } else {
                    t
                }
            })
            .collect();
        Bound { tensors }
    }

    /// Binds caller-supplied tensors in store order, e.g. perturbed copies
    /// for finite differences. Shapes must match the store.
    pub fn bind_tensors(&self, tensors: Vec<Tensor>) -> Result<Bound> {
        if tensors.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for (t, p) in tensors.iter().zip(&self.params) {
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` is {:?}, got {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
        }
        Ok(Bound { tensors })
    }

    /// Overwrites the values of one parameter, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.data.len() != data.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` expects {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Seeded parameter factory with a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut sub = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut sub)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        self.store.add(self.full_name(name), shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.add(self.full_name(name), shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.store.add(self.full_name(name), shape, vec![value; n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Silu => x.silu(),
            Activation::LeakyRelu => x.leaky_relu(0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

/// He-normal standard deviation for a layer with `fan_in` inputs.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Conv2d {
    /// Normal weights with the given std (He-normal when `None`); the bias, when
    /// present, starts at `bias_init`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        weight_std: Option<f64>,
        bias_init: Option<f64>,
    ) -> Result<Self> {
        init.scope(name, |init| {
            let std = weight_std.unwrap_or_else(|| he_std(in_ch * kernel * kernel));
            let weight = init.normal("weight", &[out_ch, in_ch, kernel, kernel], std)?;
            let bias = match bias_init {
                Some(b) => Some(init.constant("bias", &[out_ch], b)?),
                None => None,
            };
            Ok(Conv2d {
                weight,
                bias,
                opts: Conv2dOptions {
                    stride,
                    padding: (kernel - 1) / 2,
                },
            })
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.opts)
    }
}

/// Convolution → per-channel affine → activation.
///
/// The affine stands in for batch norm with frozen statistics, so inference
/// does not depend on the batch composition.
#[derive(Debug, Clone)]
pub struct BaseConv {
    pub conv: Conv2d,
    pub scale: ParamId,
    pub shift: ParamId,
    pub act: Activation,
}

impl BaseConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        Self::with_scale(init, name, in_ch, out_ch, kernel, stride, act, 1.0)
    }

    /// As [`BaseConv::new`] with a chosen initial affine scale (0 turns a
    /// residual branch into the identity at initialization).
    #[allow(clippy::too_many_arguments)]
    pub fn with_scale(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        scale_init: f64,
    ) -> Result<Self> {
        init.scope(name, |init| {
            let conv = Conv2d::new(init, "conv", in_ch, out_ch, kernel, stride, None, None)?;
            let scale = init.constant("norm.scale", &[out_ch], scale_init)?;
            let shift = init.constant("norm.shift", &[out_ch], 0.0)?;
            Ok(BaseConv { conv, scale, shift, act })
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(p, x)?;
        let y = y.channel_affine(p.get(self.scale), p.get(self.shift))?;
        Ok(self.act.apply(&y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform `[in, out]` weight, zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        init.scope(name, |init| {
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let weight = init.uniform("weight", &[in_dim, out_dim], bound)?;
            let bias = init.constant("bias", &[out_dim], 0.0)?;
            Ok(Linear { weight, bias })
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.linear(p.get(self.weight), Some(p.get(self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(LayerNorm {
                gamma: init.constant("gamma", &[dim], 1.0)?,
                beta: init.constant("beta", &[dim], 0.0)?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.eps)?
            .mul_broadcast(p.get(self.gamma))?
            .add_broadcast(p.get(self.beta))
    }
}
