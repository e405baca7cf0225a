//! Noise-prediction UNet over concatenated latent grids.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, CrossAttention, Downsample, Embedding, GroupNorm, Init, Linear, ParamStore, ResBlock, Upsample};
use crate::rng;
use crate::vqvae::LatentGrid;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channels `d` of each latent stream; the network reads `3 d`.
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level, finest first.
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    /// Resolution levels whose blocks are followed by class cross-attention.
    pub attention_levels: Vec<usize>,
    /// Cross-attention in the bottleneck.
    pub mid_attention: bool,
    pub n_real_classes: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_mult: vec![1, 2],
            res_blocks: 1,
            attention_levels: vec![1],
            mid_attention: true,
            n_real_classes: 2,
            embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("denoiser: {m}")));
        if self.latent_channels == 0 || self.base_channels == 0 || self.embed_dim == 0 {
            return bad("latent_channels, base_channels and embed_dim must be positive".into());
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be a non-empty list of positive multipliers".into());
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be positive".into());
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.channel_mult.len()) {
            return bad(format!("attention level {l} out of range"));
        }
        if self.base_channels % 2 != 0 {
            return bad("base_channels must be even for the sinusoidal timestep encoding".into());
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        3 * self.latent_channels
    }

    /// Row index of the reserved unconditional token.
    pub fn null_class(&self) -> u32 {
        self.n_real_classes as u32
    }

    pub fn class_vocabulary(&self) -> usize {
        self.n_real_classes + 1
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Latent side lengths must survive this many halvings.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Sinusoidal encoding of integer timesteps, `(B, dim)`: the first half holds
/// `sin(t ω_i)`, the second `cos(t ω_i)` with `ω_i = 10000^(-i / (dim/2))`.
pub fn timestep_encoding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row: Vec<f64> = (0..half)
            .map(|i| step as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        values.extend(row.iter().map(|a| a.sin()));
        values.extend(row.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(values, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Channel concatenation in the fixed order (pre, gtv, post_t).
pub fn concat_latents(z_pre: &LatentGrid, z_gtv: &LatentGrid, z_post_t: &LatentGrid) -> Result<LatentGrid> {
    if z_pre.shape() != z_gtv.shape() || z_pre.shape() != z_post_t.shape() {
        return Err(Error::Shape(format!(
            "latent shapes differ: pre {:?}, gtv {:?}, post {:?}",
            z_pre.shape(),
            z_gtv.shape(),
            z_post_t.shape()
        )));
    }
    let (h, w, c) = z_pre.shape();
    let mut values = Vec::with_capacity(h * w * 3 * c);
    for pos in 0..h * w {
        for z in [z_pre, z_gtv, z_post_t] {
            values.extend_from_slice(&z.values[pos * c..(pos + 1) * c]);
        }
    }
    LatentGrid::new(h, w, 3 * c, values)
}

/// Tensor form of [`concat_latents`] for `(B, d, h, w)` batches.
pub fn concat_latent_tensors(z_pre: &Tensor, z_gtv: &Tensor, z_post_t: &Tensor) -> Result<Tensor> {
    if z_pre.dims() != z_gtv.dims() || z_pre.dims() != z_post_t.dims() {
        return Err(Error::Shape(format!(
            "latent shapes differ: pre {:?}, gtv {:?}, post {:?}",
            z_pre.dims(),
            z_gtv.dims(),
            z_post_t.dims()
        )));
    }
    Ok(Tensor::cat(&[z_pre, z_gtv, z_post_t], 1)?)
}

struct Stage {
    block: ResBlock,
    attn: Option<CrossAttention>,
}

impl Stage {
    fn forward(&self, h: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let h = self.block.forward(h, Some(temb))?;
        match &self.attn {
            Some(a) => a.forward(&h, context),
            None => Ok(h),
        }
    }
}

pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    conv_in: Conv2d,
    time_1: Linear,
    time_2: Linear,
    classes: Embedding,
    down: Vec<(Vec<Stage>, Option<Downsample>)>,
    mid: (Stage, Stage),
    up: Vec<(Vec<Stage>, Option<Upsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = Init::new(dtype, rng::stream(seed, &["denoiser", "init"]));
        let init = &mut store;
        let levels = config.channel_mult.len();
        let c0 = config.channels(0);
        let tdim = 4 * config.base_channels;
        let e = config.embed_dim;
        let attn = |init: &mut Init, name: String, level: Option<usize>, c: usize| -> Result<Option<CrossAttention>> {
            let wanted = match level {
                Some(l) => config.attention_levels.contains(&l),
                None => config.mid_attention,
            };
            wanted.then(|| CrossAttention::new(init, &name, c, e)).transpose()
        };

        let conv_in = Conv2d::new(init, "conv_in", config.input_channels(), c0, 3, 1)?;
        let time_1 = Linear::new(init, "time.fc1", config.base_channels, tdim)?;
        let time_2 = Linear::new(init, "time.fc2", tdim, tdim)?;
        let classes = Embedding::new(init, "class_embedding", config.class_vocabulary(), e)?;

        let mut skips = vec![c0];
        let mut ch = c0;
        let mut down = Vec::with_capacity(levels);
        for level in 0..levels {
            let c = config.channels(level);
            let mut stages = Vec::with_capacity(config.res_blocks);
            for i in 0..config.res_blocks {
                let name = format!("down.{level}.{i}");
                stages.push(Stage {
                    block: ResBlock::new(init, &format!("{name}.res"), ch, c, Some(tdim))?,
                    attn: attn(init, format!("{name}.attn"), Some(level), c)?,
                });
                ch = c;
                skips.push(ch);
            }
            let ds = (level + 1 < levels)
                .then(|| Downsample::new(init, &format!("down.{level}.downsample"), ch, ch))
                .transpose()?;
            if ds.is_some() {
                skips.push(ch);
            }
            down.push((stages, ds));
        }

        let mid = (
            Stage {
                block: ResBlock::new(init, "mid.res1", ch, ch, Some(tdim))?,
                attn: attn(init, "mid.attn".into(), None, ch)?,
            },
            Stage {
                block: ResBlock::new(init, "mid.res2", ch, ch, Some(tdim))?,
                attn: None,
            },
        );

        let mut up = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let c = config.channels(level);
            let mut stages = Vec::with_capacity(config.res_blocks + 1);
            for i in 0..=config.res_blocks {
                let skip = skips.pop().expect("one skip per up block");
                let name = format!("up.{level}.{i}");
                stages.push(Stage {
                    block: ResBlock::new(init, &format!("{name}.res"), ch + skip, c, Some(tdim))?,
                    attn: attn(init, format!("{name}.attn"), Some(level), c)?,
                });
                ch = c;
            }
            let us = (level > 0)
                .then(|| Upsample::new(init, &format!("up.{level}.upsample"), ch, ch))
                .transpose()?;
            up.push((stages, us));
        }
        debug_assert!(skips.is_empty());

        let norm_out = GroupNorm::new(init, "norm_out", ch)?;
        let conv_out = Conv2d::with_gain(init, "conv_out", ch, config.latent_channels, 3, 1, 0.1)?;
        Ok(Self {
            config,
            params: store.finish(),
            conv_in,
            time_1,
            time_2,
            classes,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn check(&self, x: &Tensor, t: &[usize], classes: &[u32]) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.input_channels() {
            return Err(Error::Shape(format!(
                "denoiser expects {} input channels, got {c}",
                self.config.input_channels()
            )));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} not divisible by {div}")));
        }
        if t.len() != b || classes.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} with {} timesteps and {} classes",
                t.len(),
                classes.len()
            )));
        }
        if let Some(s) = t.iter().find(|s| **s == 0) {
            return Err(Error::InvalidInput(format!("timestep {s} out of range (must be ≥ 1)")));
        }
        if let Some(k) = classes.iter().find(|k| **k as usize >= self.config.class_vocabulary()) {
            return Err(Error::InvalidInput(format!(
                "class index {k} out of range 0..={}",
                self.config.null_class()
            )));
        }
        Ok(())
    }

    /// `x`: `(B, 3d, h, w)` concatenation, `t`: one timestep per sample,
    /// `classes`: one class index per sample (the null token for
    /// unconditional passes). Returns `(B, d, h, w)`.
    pub fn forward(&self, x: &Tensor, t: &[usize], classes: &[u32]) -> Result<Tensor> {
        self.check(x, t, classes)?;
        let x = x.to_dtype(self.dtype())?;
        let temb = timestep_encoding(t, self.config.base_channels, self.dtype())?;
        let temb = self.time_2.forward(&self.time_1.forward(&temb)?.silu()?)?;
        let context = self.classes.forward(classes)?.unsqueeze(1)?;

        let mut h = self.conv_in.forward(&x)?;
        let mut skips = vec![h.clone()];
        for (stages, ds) in &self.down {
            for s in stages {
                h = s.forward(&h, &temb, &context)?;
                skips.push(h.clone());
            }
            if let Some(ds) = ds {
                h = ds.forward(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.mid.0.forward(&h, &temb, &context)?;
        h = self.mid.1.forward(&h, &temb, &context)?;
        for (stages, us) in &self.up {
            for s in stages {
                let skip = skips.pop().expect("skip per up block");
                h = s.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, &context)?;
            }
            if let Some(us) = us {
                h = us.forward(&h)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }

    /// Single-sample prediction on latent grids.
    pub fn predict_noise(&self, z_concat: &LatentGrid, t: usize, class: u32) -> Result<LatentGrid> {
        let x = z_concat.to_tensor(self.dtype())?;
        LatentGrid::from_tensor(&self.forward(&x, &[t], &[class])?)
    }
}
