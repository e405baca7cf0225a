use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{quantize_tensor, straight_through, LatentGrid, CHECKPOINT_KIND};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{ImageGrid, ValueRange};
use crate::nn::{Conv2d, Downsample, GroupNorm, Init, ParamStore, ResBlock, Upsample};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqTarget {
    Mri,
    Gtv,
}

impl VqTarget {
    pub fn name(self) -> &'static str {
        match self {
            VqTarget::Mri => "mri",
            VqTarget::Gtv => "gtv",
        }
    }

    pub fn value_range(self) -> ValueRange {
        match self {
            VqTarget::Mri => ValueRange::Intensity,
            VqTarget::Gtv => ValueRange::Binary,
        }
    }
}

impl std::str::FromStr for VqTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mri" => Ok(VqTarget::Mri),
            "gtv" => Ok(VqTarget::Gtv),
            other => Err(Error::Config(format!("unknown vqvae target `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    Gradient,
    /// Exponential moving average updates; accepted by the config parser but
    /// rejected at model construction.
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// Uniform in (-1/K, 1/K).
    Uniform,
    /// Entries copied from encoder outputs of the first training batch.
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqVaeConfig {
    pub image_size: usize,
    /// Spatial downsampling factor, a power of two.
    pub downsample_factor: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub commitment: f64,
    pub codebook_update: CodebookUpdate,
    pub codebook_init: CodebookInit,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample_factor: 2,
            base_channels: 16,
            res_blocks: 1,
            codebook_size: 256,
            latent_dim: 4,
            commitment: 0.25,
            codebook_update: CodebookUpdate::Gradient,
            codebook_init: CodebookInit::Data,
            epochs: 40,
            batch_size: 4,
            learning_rate: 2e-3,
            weight_decay: 0.0,
        }
    }
}

impl VqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample factor {f} is not a power of two")));
        }
        if self.image_size % f != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by downsample factor {f}",
                self.image_size
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("latent_dim and base_channels must be positive".into()));
        }
        if self.codebook_update == CodebookUpdate::Ema {
            return Err(Error::Config(
                "EMA codebook updates are not supported; use `gradient`".into(),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }

    /// (h, w, d) of the latent grid.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_size(), self.latent_size(), self.latent_dim)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level).min(2)
    }
}

struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<ResBlock>, Option<Downsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

struct Decoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<ResBlock>, Option<Upsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(init: &mut Init, cfg: &VqVaeConfig) -> Result<Self> {
        let n = cfg.levels();
        let conv_in = Conv2d::new(init, "encoder.conv_in", 1, cfg.channels(0), 3, 1)?;
        let mut levels = Vec::with_capacity(n + 1);
        for level in 0..=n {
            let c = cfg.channels(level);
            let blocks = (0..cfg.res_blocks)
                .map(|i| ResBlock::new(init, &format!("encoder.l{level}.res{i}"), c, c, None))
                .collect::<Result<Vec<_>>>()?;
            let down = (level < n)
                .then(|| Downsample::new(init, &format!("encoder.l{level}.down"), c, cfg.channels(level + 1)))
                .transpose()?;
            levels.push((blocks, down));
        }
        let c = cfg.channels(n);
        Ok(Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(init, "encoder.norm_out", c)?,
            conv_out: Conv2d::new(init, "encoder.conv_out", c, cfg.latent_dim, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(&h, None)?;
            }
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

impl Decoder {
    fn new(init: &mut Init, cfg: &VqVaeConfig) -> Result<Self> {
        let n = cfg.levels();
        let conv_in = Conv2d::new(init, "decoder.conv_in", cfg.latent_dim, cfg.channels(n), 3, 1)?;
        let mut levels = Vec::with_capacity(n + 1);
        for level in (0..=n).rev() {
            let c = cfg.channels(level);
            let blocks = (0..cfg.res_blocks)
                .map(|i| ResBlock::new(init, &format!("decoder.l{level}.res{i}"), c, c, None))
                .collect::<Result<Vec<_>>>()?;
            let up = (level > 0)
                .then(|| Upsample::new(init, &format!("decoder.l{level}.up"), c, cfg.channels(level - 1)))
                .transpose()?;
            levels.push((blocks, up));
        }
        let c = cfg.channels(0);
        Ok(Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(init, "decoder.norm_out", c)?,
            conv_out: Conv2d::new(init, "decoder.conv_out", c, 1, 3, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (blocks, up) in &self.levels {
            for b in blocks {
                h = b.forward(&h, None)?;
            }
            if let Some(u) = up {
                h = u.forward(&h)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?.tanh()?)
    }
}

/// Output of one differentiable pass through the autoencoder.
pub struct VqForward {
    pub x_hat: Tensor,
    pub z_e: Tensor,
    pub z_q: Tensor,
    pub indices: Vec<u32>,
}

pub struct VqVae {
    config: VqVaeConfig,
    target: VqTarget,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
}

impl VqVae {
    pub fn new(config: VqVaeConfig, target: VqTarget, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(dtype, rng::stream(seed, &["vqvae", target.name(), "init"]));
        let encoder = Encoder::new(&mut init, &config)?;
        let decoder = Decoder::new(&mut init, &config)?;
        let k = config.codebook_size;
        let codebook = init.uniform("codebook.embeddings".into(), &[k, config.latent_dim], 1.0 / k as f64)?;
        Ok(Self {
            config,
            target,
            params: init.finish(),
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.config
    }

    pub fn target(&self) -> VqTarget {
        self.target
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.config.latent_shape()
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_values(&self) -> Result<Vec<f32>> {
        Ok(self.codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn set_codebook(&self, values: &Tensor) -> Result<()> {
        let var = self.params.get("codebook.embeddings").expect("codebook registered");
        var.set(&values.to_dtype(self.dtype())?)?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.config.downsample_factor;
        if c != 1 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "input {:?} must be (B, 1, H, W) with H, W divisible by {f}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// (B, 1, H, W) → (B, d, H/f, W/f) pre-quantization latents.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.forward(x)
    }

    pub fn quantize_tensor(&self, z_e: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        quantize_tensor(z_e, &self.codebook)
    }

    /// (B, d, h, w) → (B, 1, h·f, w·f), values in (-1, 1).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d, _, _) = z.dims4()?;
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {d} channels, model expects {}",
                self.config.latent_dim
            )));
        }
        self.decoder.forward(z)
    }

    /// Encode, quantize with the straight-through estimator, decode.
    pub fn forward(&self, x: &Tensor) -> Result<VqForward> {
        let z_e = self.encode_tensor(x)?;
        let (z_q, indices) = self.quantize_tensor(&z_e)?;
        let x_hat = self.decode_tensor(&straight_through(&z_e, &z_q)?)?;
        Ok(VqForward {
            x_hat,
            z_e,
            z_q,
            indices,
        })
    }

    pub fn image_tensor(&self, image: &ImageGrid) -> Result<Tensor> {
        Ok(Tensor::from_vec(image.values().to_vec(), (1, 1, image.height(), image.width()), &Device::Cpu)?
            .to_dtype(self.dtype())?)
    }

    pub fn images_tensor(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| self.image_tensor(im))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    pub fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        let f = self.config.downsample_factor;
        if image.height() % f != 0 || image.width() % f != 0 {
            return Err(Error::Shape(format!(
                "image {:?} not divisible by downsample factor {f}",
                image.dims()
            )));
        }
        LatentGrid::from_tensor(&self.encode_tensor(&self.image_tensor(image)?)?)
    }

    pub fn quantize(&self, z_e: &LatentGrid) -> Result<(LatentGrid, Vec<usize>)> {
        super::quantize(z_e, &self.codebook_values()?, self.config.latent_dim)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<ImageGrid> {
        let (h, w, _) = self.latent_shape();
        if (z.height, z.width, z.channels) != self.latent_shape() {
            return Err(Error::Shape(format!(
                "latent {:?} vs model latent shape {:?}",
                z.shape(),
                (h, w, self.config.latent_dim)
            )));
        }
        let x = self.decode_tensor(&z.to_tensor(self.dtype())?)?;
        let f = self.config.downsample_factor;
        let values = x.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        ImageGrid::intensity_clamped(h * f, w * f, values)
    }

    /// decode(quantize(encode(image))).
    pub fn reconstruct(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let (z_q, _) = self.quantize(&self.encode(image)?)?;
        self.decode(&z_q)
    }

    /// Quantized latents of a batch of images, as a (B, d, h, w) tensor.
    pub fn encode_quantized(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let z_e = self.encode_tensor(&self.images_tensor(images)?)?;
        Ok(self.quantize_tensor(&z_e)?.0)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "target": self.target, "model": self.config });
        checkpoint::save(path, CHECKPOINT_KIND, &config, extra, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let target: VqTarget = serde_json::from_value(ck.config["target"].clone())?;
        let config: VqVaeConfig = serde_json::from_value(ck.config["model"].clone())?;
        let dtype = ck
            .tensors
            .get("codebook.embeddings")
            .map(|t| t.dtype())
            .unwrap_or(DType::F32);
        let model = Self::new(config, target, dtype, 0)?;
        model.params.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}
