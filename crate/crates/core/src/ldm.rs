//! The trained latent diffusion bundle: denoiser, noise schedule and the
//! scale factors that bring autoencoder latents to unit variance, plus the
//! glue that turns image triples into latent batches and samples back into
//! images.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{ImageGrid, SliceKey, SliceTriple};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{
    latent_std, sample_post_from, train_ldm, LatentBatch, LdmTrainConfig, LdmTrainReport, NoisePredictor,
    NoiseSchedule, SamplerConfig, ScheduleConfig,
};
use crate::rng;
use crate::vqvae::VqVae;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "ldm";

/// Multipliers applied to quantized latents before diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScales {
    pub mri: f64,
    pub gtv: f64,
}

impl Default for LatentScales {
    fn default() -> Self {
        Self { mri: 1.0, gtv: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LdmHeader {
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    scales: LatentScales,
    mri_latent: (usize, usize, usize),
    gtv_latent: (usize, usize, usize),
    #[serde(default = "yes")]
    quantized_conditioning: bool,
}

fn yes() -> bool {
    true
}

pub struct LatentDiffusion {
    header: LdmHeader,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
}

impl LatentDiffusion {
    pub fn new(
        denoiser: Denoiser,
        schedule: ScheduleConfig,
        scales: LatentScales,
        mri_latent: (usize, usize, usize),
        gtv_latent: (usize, usize, usize),
        quantized_conditioning: bool,
    ) -> Result<Self> {
        let d = denoiser.config().latent_channels;
        if mri_latent != gtv_latent {
            return Err(Error::Config(format!(
                "MRI latent {mri_latent:?} and GTV latent {gtv_latent:?} must match"
            )));
        }
        if mri_latent.2 != d {
            return Err(Error::Config(format!(
                "latents have {} channels, denoiser expects {d}",
                mri_latent.2
            )));
        }
        Ok(Self {
            schedule: schedule.build()?,
            header: LdmHeader {
                denoiser: denoiser.config().clone(),
                schedule,
                scales,
                mri_latent,
                gtv_latent,
                quantized_conditioning,
            },
            denoiser,
        })
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.header.schedule
    }

    pub fn scales(&self) -> LatentScales {
        self.header.scales
    }

    /// Whether `z_pre` and `z_gtv` are codebook vectors (otherwise raw
    /// encoder outputs).
    pub fn quantized_conditioning(&self) -> bool {
        self.header.quantized_conditioning
    }

    /// Refuses autoencoders whose latent grids differ from the ones the
    /// denoiser was trained on, listing every differing field.
    pub fn check_codecs(&self, mri: &VqVae, gtv: &VqVae) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, want, got) in [
            ("mri", self.header.mri_latent, mri.latent_shape()),
            ("gtv", self.header.gtv_latent, gtv.latent_shape()),
        ] {
            for (field, a, b) in [("height", want.0, got.0), ("width", want.1, got.1), ("channels", want.2, got.2)] {
                if a != b {
                    diffs.push(format!("{name}.latent_{field}: diffusion model {a}, autoencoder {b}"));
                }
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("latent shape mismatch: {}", diffs.join("; "))))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.header, extra, self.denoiser.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let header: LdmHeader = ck.config_as()?;
        let denoiser = Denoiser::new(header.denoiser.clone(), DType::F32, 0)?;
        denoiser.params().load(&ck.tensors)?;
        Self::new(
            denoiser,
            header.schedule,
            header.scales,
            header.mri_latent,
            header.gtv_latent,
            header.quantized_conditioning,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

const ENCODE_CHUNK: usize = 32;

/// Latents of `images`, `(B, d, h, w)`, multiplied by `scale`; codebook
/// vectors when `quantized`, raw encoder outputs otherwise.
pub fn encode_scaled(vq: &VqVae, images: &[&ImageGrid], scale: f64, quantized: bool) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidInput("nothing to encode".into()));
    }
    let parts = images
        .chunks(ENCODE_CHUNK)
        .map(|c| {
            if quantized {
                vq.encode_quantized(c)
            } else {
                vq.encode_tensor(&vq.images_tensor(c)?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::cat(&parts, 0)? * scale)?)
}

/// Scales bringing the training post latents and GTV latents to unit
/// standard deviation.
pub fn fit_scales(mri: &VqVae, gtv: &VqVae, triples: &[&SliceTriple]) -> Result<LatentScales> {
    let post: Vec<&ImageGrid> = triples.iter().map(|t| &t.post).collect();
    let masks: Vec<&ImageGrid> = triples.iter().map(|t| &t.gtv).collect();
    let inv = |z: Tensor| -> Result<f64> {
        let s = latent_std(&z)?;
        Ok(if s > 1e-8 { 1.0 / s } else { 1.0 })
    };
    Ok(LatentScales {
        mri: inv(encode_scaled(mri, &post, 1.0, true)?)?,
        gtv: inv(encode_scaled(gtv, &masks, 1.0, true)?)?,
    })
}

/// Scaled latent batch for `(triple, class)` pairs. The post target is
/// always quantized.
pub fn latent_batch(ldm: &LatentDiffusion, mri: &VqVae, gtv: &VqVae, items: &[(&SliceTriple, u32)]) -> Result<LatentBatch> {
    let (scales, q) = (ldm.scales(), ldm.quantized_conditioning());
    let pick = |f: fn(&SliceTriple) -> &ImageGrid| items.iter().map(|(t, _)| f(t)).collect::<Vec<_>>();
    Ok(LatentBatch {
        pre: encode_scaled(mri, &pick(|t| &t.pre), scales.mri, q)?,
        gtv: encode_scaled(gtv, &pick(|t| &t.gtv), scales.gtv, q)?,
        post: encode_scaled(mri, &pick(|t| &t.post), scales.mri, true)?,
        classes: items.iter().map(|(_, c)| *c).collect(),
    })
}

/// Fits latent scales on `train`, trains a fresh denoiser and returns the
/// bundle with the best-validation parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_latent_diffusion(
    mri: &VqVae,
    gtv: &VqVae,
    train: &[(&SliceTriple, u32)],
    val: &[(&SliceTriple, u32)],
    denoiser: &DenoiserConfig,
    schedule: &ScheduleConfig,
    config: &LdmTrainConfig,
    quantized_conditioning: bool,
    seed: u64,
) -> Result<(LatentDiffusion, LdmTrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("ldm: empty training set".into()));
    }
    let triples: Vec<&SliceTriple> = train.iter().map(|(t, _)| *t).collect();
    let scales = fit_scales(mri, gtv, &triples)?;
    let model = LatentDiffusion::new(
        Denoiser::new(denoiser.clone(), DType::F32, seed)?,
        *schedule,
        scales,
        mri.latent_shape(),
        gtv.latent_shape(),
        quantized_conditioning,
    )?;
    let train_batch = latent_batch(&model, mri, gtv, train)?;
    let val_batch = if val.is_empty() {
        train_batch.clone()
    } else {
        latent_batch(&model, mri, gtv, val)?
    };
    let report = train_ldm(&model.denoiser, &train_batch, &val_batch, &model.schedule, config, seed)?;
    Ok((model, report))
}

/// One slice to translate. `class` is `None` for unconditional generation.
#[derive(Clone, Debug)]
pub struct GenerationItem<'a> {
    pub key: SliceKey,
    pub pre: &'a ImageGrid,
    pub gtv: &'a ImageGrid,
    pub class: Option<u32>,
}

/// Initial noise for one slice; depends only on the seed and the slice key,
/// never on batch composition.
pub fn initial_noise(seed: u64, key: &SliceKey, shape: (usize, usize, usize)) -> Result<Tensor> {
    let (h, w, d) = shape;
    let mut r = rng::stream(seed, &["sample", "z_T", &key.patient_id, &key.slice.to_string()]);
    Ok(Tensor::from_vec(rng::normal_vec(&mut r, d * h * w), (1, d, h, w), &Device::Cpu)?)
}

/// Generates post-treatment images with `predictor` (normally the bundle's
/// denoiser, possibly wrapped in a call counter). Latents are requantized
/// against the MRI codebook before decoding.
#[allow(clippy::too_many_arguments)]
pub fn generate_with(
    predictor: &impl NoisePredictor,
    ldm: &LatentDiffusion,
    mri: &VqVae,
    gtv: &VqVae,
    items: &[GenerationItem<'_>],
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<ImageGrid>> {
    ldm.check_codecs(mri, gtv)?;
    sampler.validate(ldm.schedule())?;
    let (scales, q) = (ldm.scales(), ldm.quantized_conditioning());
    let null = predictor.null_class();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let pre: Vec<&ImageGrid> = chunk.iter().map(|i| i.pre).collect();
        let masks: Vec<&ImageGrid> = chunk.iter().map(|i| i.gtv).collect();
        let z_pre = encode_scaled(mri, &pre, scales.mri, q)?;
        let z_gtv = encode_scaled(gtv, &masks, scales.gtv, q)?;
        let z_t = Tensor::cat(
            &chunk
                .iter()
                .map(|i| initial_noise(seed, &i.key, ldm.header.mri_latent))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let classes: Vec<u32> = chunk.iter().map(|i| i.class.unwrap_or(null)).collect();
        let first = &chunk[0].key;
        let mut noise = rng::stream(seed, &["sample", "ddim", &first.patient_id, &first.slice.to_string()]);
        let z0 = sample_post_from(predictor, &z_pre, &z_gtv, &classes, z_t, sampler, ldm.schedule(), &mut noise)?;
        let (z_q, _) = mri.quantize_tensor(&(z0 / scales.mri)?)?;
        let x = mri.decode_tensor(&z_q)?;
        let (b, _, h, w) = x.dims4()?;
        let values = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for i in 0..b {
            out.push(ImageGrid::intensity_clamped(h, w, values[i * h * w..(i + 1) * h * w].to_vec())?);
        }
    }
    Ok(out)
}

pub fn generate(
    ldm: &LatentDiffusion,
    mri: &VqVae,
    gtv: &VqVae,
    items: &[GenerationItem<'_>],
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<ImageGrid>> {
    generate_with(ldm.denoiser(), ldm, mri, gtv, items, sampler, seed, batch_size)
}
