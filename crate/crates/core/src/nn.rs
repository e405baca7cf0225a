//! Small layer library on top of candle tensors.
//!
//! Parameters are candle `Var`s registered by name in a [`ParamStore`] and
//! initialised from a seeded stream, so a model built twice from the same
//! seed is bit-identical.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Named, ordered parameter collection of one model.
#[derive(Clone)]
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn n_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of the current values, for best-epoch checkpointing.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.vars.len()
            )));
        }
        for ((_, var), t) in self.vars.iter().zip(snapshot) {
            var.set(t)?;
        }
        Ok(())
    }

    /// Current values keyed by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Registers parameters with seeded initial values.
pub struct Init {
    store: ParamStore,
    rng: Rng,
}

impl Init {
    pub fn new(dtype: DType, rng: Rng) -> Self {
        Self {
            store: ParamStore::new(dtype),
            rng,
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn register(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.store.get(&name).is_some() {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.store.vars.push((name, var));
        Ok(tensor)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    self.rng.random_range(-bound..bound)
                }
            })
            .collect();
        self.register(name, shape, values)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![value; n])
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = crate::rng::normal_vec_f64(&mut self.rng, n)
            .into_iter()
            .map(|v| v * std)
            .collect();
        self.register(name, shape, values)
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_gain(init, name, c_in, c_out, kernel, stride, 1.0)
    }

    /// `gain` scales the default fan-in bound; 0 gives a zero-initialised layer.
    pub fn with_gain(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let bound = gain / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = init.uniform(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = init.uniform(format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_gain(init, name, d_in, d_out, 1.0)
    }

    pub fn with_gain(init: &mut Init, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        let bound = gain / (d_in as f64).sqrt();
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: init.uniform(format!("{name}.bias"), &[d_out], bound)?,
        })
    }

    /// Applies to the last dimension of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: init.constant(format!("{name}.bias"), &[channels], 0.0)?,
            groups: group_count(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xs = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Pre-activation residual block with an optional additive conditioning
/// vector (e.g. a timestep embedding) projected per block.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), c_in)?,
            conv1: Conv2d::new(init, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            cond_proj: cond_dim
                .map(|d| Linear::new(init, &format!("{name}.cond_proj"), d, c_out))
                .transpose()?,
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), c_out)?,
            conv2: Conv2d::with_gain(init, &format!("{name}.conv2"), c_out, c_out, 3, 1, 0.5)?,
            skip: (c_in != c_out)
                .then(|| Conv2d::new(init, &format!("{name}.skip"), c_in, c_out, 1, 1))
                .transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(cond)) = (&self.cond_proj, cond) {
            let e = proj.forward(&cond.silu()?)?;
            let (b, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Stride-2 3×3 convolution.
pub struct Downsample(Conv2d);

impl Downsample {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(init, name, c_in, c_out, 3, 2)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x)
    }
}

/// Nearest-neighbour ×2 upsampling followed by a 3×3 convolution.
pub struct Upsample(Conv2d);

impl Upsample {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(init, name, c_in, c_out, 3, 1)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.0.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Single-head cross-attention from spatial positions to a context sequence.
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    scale: f64,
}

impl CrossAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, context_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(init, &format!("{name}.norm"), channels)?,
            to_q: Linear::new(init, &format!("{name}.to_q"), channels, channels)?,
            to_k: Linear::new(init, &format!("{name}.to_k"), context_dim, channels)?,
            to_v: Linear::new(init, &format!("{name}.to_v"), context_dim, channels)?,
            to_out: Linear::with_gain(init, &format!("{name}.to_out"), channels, channels, 0.5)?,
            scale: 1.0 / (channels as f64).sqrt(),
        })
    }

    /// `x`: (B, C, H, W); `context`: (B, L, E). Returns `x` plus the attended
    /// context, same shape as `x`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = self.to_out.forward(&attn.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Learned lookup table.
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(init: &mut Init, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: init.normal(format!("{name}.weight"), &[rows, dim], 1.0)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn forward(&self, indices: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(indices, self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

/// Stacks equally shaped (C, H, W) samples into a (B, C, H, W) tensor.
pub fn batch(samples: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(samples, 0)?)
}

/// Mean squared difference as an f64.
pub fn mse_scalar(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
