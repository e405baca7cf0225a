use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{vqvae_loss, CodebookInit, VqTarget, VqVae, VqVaeConfig};
use crate::data::{hflip, ImageGrid};
use crate::nn::scalar;
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_reconstruction: f64,
    pub val_reconstruction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqTrainReport {
    pub target: VqTarget,
    pub epochs: Vec<VqEpochMetrics>,
    pub best_epoch: usize,
    pub best_val_reconstruction: f64,
    /// Number of training vectors mapped to each codebook entry by the
    /// returned model.
    pub codebook_usage: Vec<usize>,
}

impl VqTrainReport {
    pub fn used_codes(&self) -> usize {
        self.codebook_usage.iter().filter(|c| **c > 0).count()
    }
}

fn divergence(target: VqTarget, epoch: usize, detail: String) -> Error {
    Error::Divergence {
        stage: format!("vqvae-{}", target.name()),
        epoch,
        detail,
    }
}

/// Mean reconstruction MSE over `images`, evaluated in batches.
pub fn reconstruction_loss(model: &VqVae, images: &[&ImageGrid], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(batch.max(1)) {
        let x = model.images_tensor(chunk)?;
        let out = model.forward(&x)?;
        let mse = scalar(&(&x - &out.x_hat)?.sqr()?.mean_all()?)?;
        total += mse * chunk.len() as f64;
    }
    Ok(total / images.len().max(1) as f64)
}

fn data_init_codebook(model: &VqVae, images: &[&ImageGrid], rng: &mut rng::Rng) -> Result<()> {
    let k = model.config().codebook_size;
    let d = model.config().latent_dim;
    let take = images.len().min(64);
    let z_e = model.encode_tensor(&model.images_tensor(&images[..take])?)?;
    let (b, _, h, w) = z_e.dims4()?;
    let vectors = z_e
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * h * w, d))?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    let mut entries = Vec::with_capacity(k * d);
    for _ in 0..k {
        let v = &vectors[rng.random_range(0..vectors.len())];
        entries.extend(v.iter().map(|x| x + rng.random_range(-1e-3..1e-3)));
    }
    model.set_codebook(&Tensor::from_vec(entries, (k, d), z_e.device())?)
}

/// Trains one autoencoder. `train` holds MRI slices (pre and post pooled)
/// for the MRI instance or GTV masks for the mask instance. Each epoch
/// shuffles and randomly flips the images; the returned model carries the
/// parameters of the epoch with the lowest validation reconstruction loss.
pub fn train_vqvae(
    train: &[&ImageGrid],
    val: &[&ImageGrid],
    config: &VqVaeConfig,
    target: VqTarget,
    seed: u64,
) -> Result<(VqVae, VqTrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training images for vqvae".into()));
    }
    let model = VqVae::new(config.clone(), target, DType::F32, seed)?;
    let mut rng = rng::stream(seed, &["vqvae", target.name(), "train"]);
    if config.codebook_init == CodebookInit::Data {
        data_init_codebook(&model, train, &mut rng)?;
    }
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let val_set: &[&ImageGrid] = if val.is_empty() { train } else { val };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs.max(1) {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rec_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let images: Vec<ImageGrid> = chunk
                .iter()
                .map(|&i| if rng.random_bool(0.5) { hflip(train[i]) } else { train[i].clone() })
                .collect();
            let refs: Vec<&ImageGrid> = images.iter().collect();
            let x = model.images_tensor(&refs)?;
            let out = model.forward(&x)?;
            let loss = vqvae_loss(&x, &out.x_hat, &out.z_e, &out.z_q, config.commitment)?;
            let value = scalar(&loss.total)?;
            if !value.is_finite() {
                return Err(divergence(target, epoch, format!("loss {value}")));
            }
            opt.backward_step(&loss.total)?;
            loss_sum += value * chunk.len() as f64;
            rec_sum += scalar(&loss.reconstruction)? * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_rec = reconstruction_loss(&model, val_set, config.batch_size)?;
        if !val_rec.is_finite() {
            return Err(divergence(target, epoch, format!("validation loss {val_rec}")));
        }
        log::info!(
            "vqvae[{}] epoch {epoch}: train {:.5} val rec {:.5}",
            target.name(),
            loss_sum / seen as f64,
            val_rec
        );
        epochs.push(VqEpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_reconstruction: rec_sum / seen as f64,
            val_reconstruction: val_rec,
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_rec < *b) {
            best = Some((epoch, val_rec, model.params().snapshot()?));
        }
    }

    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch ran");
    model.params().restore(&snapshot)?;
    let mut usage = vec![0usize; config.codebook_size];
    for chunk in train.chunks(config.batch_size.max(1)) {
        let z_e = model.encode_tensor(&model.images_tensor(chunk)?)?;
        for idx in model.quantize_tensor(&z_e)?.1 {
            usage[idx as usize] += 1;
        }
    }
    log::info!(
        "vqvae[{}] best epoch {best_epoch} (val rec {best_val:.5}), {} of {} codes used",
        target.name(),
        usage.iter().filter(|c| **c > 0).count(),
        config.codebook_size
    );
    Ok((
        model,
        VqTrainReport {
            target,
            epochs,
            best_epoch,
            best_val_reconstruction: best_val,
            codebook_usage: usage,
        },
    ))
}
