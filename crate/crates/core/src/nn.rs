//! Minimal neural-network building blocks on top of `candle_core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialisation is
//! driven by a seeded ChaCha stream so that two stores built with the same seed
//! and the same construction order hold bit-identical weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named, trainable parameters.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                expected: var.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zero every parameter whose name starts with `prefix`. Returns how many were touched.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if name.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Deep copy of every parameter; later updates do not leak into it.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_detached_tensor().copy()?)))
            .collect()
    }

    pub fn load_snapshot(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.vars.keys() {
            let t = snapshot
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            self.set(name, t)?;
        }
        Ok(())
    }
}

/// Dense layer applied over the last axis. Weight is stored `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::build(store, name, input, output, true)
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::build(store, name, input, output, false)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[output, input], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear on scalar"))?;
        if last != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects {} input features, got {last}",
                self.in_features()
            )));
        }
        let rows = x.elem_count() / last;
        let flat = x.reshape((rows, last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_features();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Border replication; keeps spatially constant inputs constant.
    Replicate,
}

/// 2-D convolution over `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    pad: usize,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[output, input, kernel, kernel],
            bound,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[output], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            padding,
        })
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::new(store, name, input, output, 1, 1, 0, Padding::Zeros)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, conv_pad) = match (self.padding, self.pad) {
            (_, 0) => (x.clone(), 0),
            (Padding::Zeros, p) => (x.clone(), p),
            (Padding::Replicate, p) => (x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?, 0),
        };
        let y = x.conv2d(&self.weight, conv_pad, self.stride, 1, 1)?;
        let out = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

/// Layer normalisation over the last axis with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)
    }
}

/// [`LayerNorm`] over the channel axis of a `(B, C, H, W)` map.
pub fn channel_norm(x: &Tensor, norm: &LayerNorm) -> Result<Tensor> {
    let y = norm.forward(&x.permute((0, 2, 3, 1))?)?;
    Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Logistic sigmoid written through `tanh` so the backward pass stays finite
/// for saturated inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax attention over text tokens with a padding mask.
///
/// * `q`: `(B, T, C)` queries
/// * `k`: `(B, N, C)` keys
/// * `v`: `(B, N, Cv)` values
/// * `mask`: `(B, N)`, 1 for real tokens, 0 for padding
///
/// Padding tokens get exactly zero weight. Returns `(output, weights)`.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &Tensor,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let logits = (q.matmul(&k.t()?)? * scale)?;
    let m = mask.unsqueeze(1)?.to_dtype(logits.dtype())?;
    let bias = ((&m - 1.0)? * 1e9)?;
    let logits = logits.broadcast_add(&bias)?;
    let peak = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&peak)?.exp()?.broadcast_mul(&m)?;
    let weights = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Check that every row of a `(B, N)` mask has at least one real token.
pub fn check_mask(mask: &Tensor) -> Result<()> {
    let rows = mask.to_dtype(DType::F64)?.sum(D::Minus1)?.to_vec1::<f64>()?;
    match rows.iter().position(|&s| s < 0.5) {
        Some(row) => Err(Error::AllMasked { row }),
        None => Ok(()),
    }
}

/// `(B, C, H, W)` to row-major `(B, H*W, C)` tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens do not tile a {h}x{w} grid")));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Interpolation matrix `(out, in)` for 1-D linear resampling with half-pixel
/// centres and edge clamping. Every row sums to one.
pub fn linear_interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let ratio = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` expressed as two matrix products, so it
/// is differentiable end to end.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(linear_interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(linear_interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let flat = x.reshape((b * c, h, w))?;
    // (BC, H, W) x (W, Ow) -> (BC, H, Ow)
    let cols = flat.broadcast_matmul(&aw.t()?)?;
    // (BC, Ow, H) x (H, Oh) -> (BC, Ow, Oh)
    let rows = cols.transpose(1, 2)?.contiguous()?.broadcast_matmul(&ah.t()?)?;
    Ok(rows.transpose(1, 2)?.contiguous()?.reshape((b, c, out_h, out_w))?)
}
