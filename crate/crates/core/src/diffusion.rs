//! Noise schedule, forward process, training objective and guided DDIM
//! sampling in latent space.

use std::cell::Cell;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{concat_latent_tensors, Denoiser};
use crate::nn::scalar;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Probability of replacing the class by the null token during training.
pub const CLASS_DROPOUT: f64 = 0.1;

/// β, α and ᾱ for t = 1..=T, stored zero-based (index t − 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// β linearly spaced from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    let ordered = if timesteps == 1 {
        beta_start <= beta_end
    } else {
        beta_start < beta_end
    };
    if !(beta_start > 0.0 && beta_end < 1.0 && ordered) {
        return Err(Error::Config(format!(
            "invalid beta endpoints {beta_start}..{beta_end}: need 0 < start < end < 1"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.resize(like.rank(), 1);
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `z_t = √ᾱ_t z_0 + √(1 − ᾱ_t) ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    let ab = schedule.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched [`forward_diffuse`] with one timestep per leading-axis sample.
pub fn forward_diffuse_batch(z0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() || z0.dim(0)? != t.len() {
        return Err(Error::Shape(format!(
            "z0 {:?}, eps {:?}, {} timesteps",
            z0.dims(),
            eps.dims(),
            t.len()
        )));
    }
    for &s in t {
        schedule.check_t(s)?;
    }
    let ab: Vec<f64> = t.iter().map(|s| schedule.alpha_bar(*s)).collect();
    let a = per_sample(&ab.iter().map(|v| v.sqrt()).collect::<Vec<_>>(), z0)?;
    let b = per_sample(&ab.iter().map(|v| (1.0 - v).sqrt()).collect::<Vec<_>>(), z0)?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// One exact transition of the forward chain,
/// `z_t = √α_t z_{t−1} + √β_t noise`.
pub fn forward_step(z_prev: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    Ok(((z_prev * schedule.alphas[t - 1].sqrt())? + (noise * schedule.beta(t).sqrt())?)?)
}

/// Anything that predicts noise from `(B, 3d, h, w)` concatenations.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: &[usize], classes: &[u32]) -> Result<Tensor>;
    fn null_class(&self) -> u32;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &Tensor, t: &[usize], classes: &[u32]) -> Result<Tensor> {
        self.forward(x, t, classes)
    }

    fn null_class(&self) -> u32 {
        self.config().null_class()
    }
}

/// Wraps a predictor and counts its evaluations.
pub struct CountingPredictor<'a, P: NoisePredictor> {
    pub inner: &'a P,
    calls: Cell<usize>,
}

impl<'a, P: NoisePredictor> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<'_, P> {
    fn predict(&self, x: &Tensor, t: &[usize], classes: &[u32]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, t, classes)
    }

    fn null_class(&self) -> u32 {
        self.inner.null_class()
    }
}

/// A batch of latent triples, each `(B, d, h, w)`, with one class per sample.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub pre: Tensor,
    pub gtv: Tensor,
    pub post: Tensor,
    pub classes: Vec<u32>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Sub-batch at the given sample positions.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids: Vec<u32> = idx.iter().map(|i| *i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        Ok(Self {
            pre: self.pre.index_select(&ids, 0)?,
            gtv: self.gtv.index_select(&ids, 0)?,
            post: self.post.index_select(&ids, 0)?,
            classes: idx.iter().map(|i| self.classes[*i]).collect(),
        })
    }
}

/// Random draws for one training step: timesteps, noise, and which samples
/// lose their class.
pub struct StepDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub dropped: Vec<bool>,
}

impl StepDraw {
    pub fn sample(batch: &LatentBatch, schedule: &NoiseSchedule, class_dropout: f64, rng: &mut Rng) -> Result<Self> {
        let n = batch.len();
        let t = (0..n).map(|_| rng.random_range(1..=schedule.timesteps())).collect();
        let dropped = (0..n).map(|_| rng.random_bool(class_dropout)).collect();
        let eps = Tensor::from_vec(
            rng::normal_vec(rng, batch.post.elem_count()),
            batch.post.dims(),
            &Device::Cpu,
        )?
        .to_dtype(batch.post.dtype())?;
        Ok(Self { t, eps, dropped })
    }
}

/// Loss `‖ε − ε_θ(z_pre ⊕ z_gtv ⊕ z_post_t, c, t)‖²` (mean) for given draws.
pub fn diffusion_loss(
    model: &impl NoisePredictor,
    batch: &LatentBatch,
    draw: &StepDraw,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = forward_diffuse_batch(&batch.post, &draw.t, &draw.eps, schedule)?;
    let x = concat_latent_tensors(&batch.pre, &batch.gtv, &z_t)?;
    let classes: Vec<u32> = batch
        .classes
        .iter()
        .zip(&draw.dropped)
        .map(|(c, d)| if *d { model.null_class() } else { *c })
        .collect();
    let eps_hat = model.predict(&x, &draw.t, &classes)?;
    Ok((eps_hat - &draw.eps)?.sqr()?.mean_all()?)
}

/// One draw of the training objective; the returned tensor is ready for
/// backpropagation. A non-finite loss is reported as divergence.
pub fn training_step(
    model: &impl NoisePredictor,
    batch: &LatentBatch,
    schedule: &NoiseSchedule,
    class_dropout: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let draw = StepDraw::sample(batch, schedule, class_dropout, rng)?;
    let loss = diffusion_loss(model, batch, &draw, schedule)?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(Error::Divergence {
            stage: "ldm".into(),
            epoch: 0,
            detail: format!("training loss {value}"),
        });
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceForm {
    /// `ε_c + s (ε_u − ε_c)`.
    #[default]
    Paper,
    /// `ε_u + w (ε_c − ε_u)`.
    Standard,
}

impl FromStr for GuidanceForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown guidance form `{other}`"))),
        }
    }
}

/// `from + t (to − from)`, evaluated from the nearer endpoint so that
/// `t = 0`, `t = 1` and `from = to` are all reproduced exactly.
fn lerp(from: &Tensor, to: &Tensor, t: f64) -> Result<Tensor> {
    let diff = (to - from)?;
    Ok(if t < 0.5 {
        (from + (diff * t)?)?
    } else {
        (to - (diff * (1.0 - t))?)?
    })
}

/// `eps_cond + scale (eps_uncond − eps_cond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    lerp(eps_cond, eps_uncond, scale)
}

/// `eps_uncond + weight (eps_cond − eps_uncond)`.
pub fn cfg_combine_standard(eps_cond: &Tensor, eps_uncond: &Tensor, weight: f64) -> Result<Tensor> {
    lerp(eps_uncond, eps_cond, weight)
}

pub fn guide(form: GuidanceForm, eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    match form {
        GuidanceForm::Paper => cfg_combine(eps_cond, eps_uncond, scale),
        GuidanceForm::Standard => cfg_combine_standard(eps_cond, eps_uncond, scale),
    }
}

/// `σ = η √((1 − ᾱ_prev)/(1 − ᾱ_t)) √(1 − ᾱ_t/ᾱ_prev)`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// One DDIM update from `t` to `t_prev` (0 denotes the clean latent).
pub fn ddim_step(
    z_t: &Tensor,
    eps_t: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidInput(format!("t_prev {t_prev} must be below t {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!("eta {eta} outside [0, 1]")));
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let x0 = ((z_t - (eps_t * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let sigma = ddim_sigma(schedule, t, t_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut z = ((x0 * ab_prev.sqrt())? + (eps_t * dir)?)?;
    if sigma > 0.0 {
        let xi = Tensor::from_vec(rng::normal_vec(rng, z_t.elem_count()), z_t.dims(), &Device::Cpu)?
            .to_dtype(z_t.dtype())?;
        z = (z + (xi * sigma)?)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub guidance_form: GuidanceForm,
    /// Clamp the predicted clean latent to `[-c, c]` at every step.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            eta: 0.0,
            guidance_scale: 10.0,
            guidance_form: GuidanceForm::Paper,
            clip_x0: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > schedule.timesteps() {
            return Err(Error::Config(format!(
                "n_steps {} must be in 1..={}",
                self.n_steps,
                schedule.timesteps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance_scale must be finite".into()));
        }
        if let Some(c) = self.clip_x0 {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_x0 {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Noise prediction whose implied clean latent is clamped to `[-clip, clip]`.
/// Unclamped elements keep their noise value up to rounding.
pub fn clip_eps(z_t: &Tensor, eps_t: &Tensor, t: usize, schedule: &NoiseSchedule, clip: f64) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let x0 = ((z_t - (eps_t * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-clip, clip)?;
    Ok(((z_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// `n` strictly increasing timesteps evenly spaced over `1..=T` (rounded),
/// starting at 1 and ending at T. A single step uses T alone.
pub fn ddim_timesteps(timesteps: usize, n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![timesteps],
        _ => (0..n)
            .map(|i| 1 + ((i * (timesteps - 1)) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Guided DDIM from `z_T` down to the clean latent. Each step makes one
/// conditional and one unconditional model call, or a single call when every
/// class already is the null token (both predictions would coincide).
pub fn sample_post_from(
    model: &impl NoisePredictor,
    z_pre: &Tensor,
    z_gtv: &Tensor,
    classes: &[u32],
    z_t: Tensor,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    sampler.validate(schedule)?;
    let n = z_t.dim(0)?;
    if classes.len() != n {
        return Err(Error::Shape(format!("{} classes for a batch of {n}", classes.len())));
    }
    let null = vec![model.null_class(); n];
    let unconditional = classes == null.as_slice();
    let steps = ddim_timesteps(schedule.timesteps(), sampler.n_steps);
    let mut z = z_t;
    for (i, &t) in steps.iter().enumerate().rev() {
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let ts = vec![t; n];
        let x = concat_latent_tensors(z_pre, z_gtv, &z)?;
        let eps_u = model.predict(&x, &ts, &null)?;
        let eps = if unconditional {
            eps_u
        } else {
            let eps_c = model.predict(&x, &ts, classes)?;
            guide(sampler.guidance_form, &eps_c, &eps_u, sampler.guidance_scale)?
        };
        let eps = match sampler.clip_x0 {
            Some(c) => clip_eps(&z, &eps, t, schedule, c)?,
            None => eps,
        };
        z = ddim_step(&z, &eps, t, t_prev, schedule, sampler.eta, rng)?.detach();
    }
    Ok(z)
}

/// [`sample_post_from`] with `z_T ~ N(0, I)` drawn from `rng`.
pub fn sample_post(
    model: &impl NoisePredictor,
    z_pre: &Tensor,
    z_gtv: &Tensor,
    classes: &[u32],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let z_t = Tensor::from_vec(rng::normal_vec(rng, z_pre.elem_count()), z_pre.dims(), &Device::Cpu)?
        .to_dtype(z_pre.dtype())?;
    sample_post_from(model, z_pre, z_gtv, classes, z_t, sampler, schedule, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub class_dropout: f64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 30,
            learning_rate: 2e-6,
            weight_decay: 0.01,
            class_dropout: CLASS_DROPOUT,
        }
    }
}

impl LdmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("ldm: epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(Error::Config("ldm: learning_rate must be positive and class_dropout in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmTrainReport {
    pub epochs: Vec<LdmEpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

/// Validation loss under draws fixed by `seed`, so epochs are comparable.
pub fn validation_loss(
    model: &impl NoisePredictor,
    val: &LatentBatch,
    schedule: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, &["ldm", "validation"]);
    let (mut total, mut count) = (0.0, 0);
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let b = val.select(chunk)?;
        let draw = StepDraw::sample(&b, schedule, 0.0, &mut rng)?;
        total += scalar(&diffusion_loss(model, &b, &draw, schedule)?)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains the denoiser in place and restores the parameters of the epoch
/// with the lowest validation loss (the training loss when `val` is empty).
pub fn train_ldm(
    model: &Denoiser,
    train: &LatentBatch,
    val: &LatentBatch,
    schedule: &NoiseSchedule,
    config: &LdmTrainConfig,
    seed: u64,
) -> Result<LdmTrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("ldm: empty training set".into()));
    }
    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.params().vars(), params)?;
    let mut rng = rng::stream(seed, &["ldm", "train"]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let b = train.select(chunk)?;
            let loss = training_step(model, &b, schedule, config.class_dropout, &mut rng)
                .map_err(|e| match e {
                    Error::Divergence { stage, detail, .. } => Error::Divergence { stage, epoch, detail },
                    other => other,
                })?;
            total += scalar(&loss)? * chunk.len() as f64;
            opt.backward_step(&loss)?;
            steps += 1;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(model, val, schedule, config.batch_size, seed)?
        };
        log::info!("ldm epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params().snapshot()?));
        }
        epochs.push(LdmEpochMetrics {
            epoch,
            train_loss,
            val_loss,
        });
    }
    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch");
    model.params().restore(&snapshot)?;
    Ok(LdmTrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        steps,
    })
}

/// Standard deviation of all latent values; its inverse rescales latents to
/// roughly unit variance before diffusion.
pub fn latent_std(z: &Tensor) -> Result<f64> {
    let z = z.to_dtype(DType::F64)?;
    let mean = z.mean_all()?.to_scalar::<f64>()?;
    let var = (z - mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::stream(seed, &["diffusion-test"]);
        let n = shape.iter().product();
        Tensor::from_vec(rng::normal_vec_f64(&mut r, n), shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn schedule_matches_direct_products() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas().len(), 1000);
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        assert!(s.alpha_bar(1000) < 0.01);
        let one = make_linear_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_endpoints() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = randn(1, &[4, 8, 8]);
        let zero = z0.zeros_like().unwrap();
        let zt = forward_diffuse(&z0, 300, &zero, &s).unwrap();
        let expect = (&z0 * s.alpha_bar(300).sqrt()).unwrap();
        assert_eq!(values(&zt), values(&expect));
        let eps = randn(2, &[4, 8, 8]);
        let zt = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        assert!(max_abs_diff(&zt, &eps) < 0.1 * 4.0);
        assert!(forward_diffuse(&z0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 5, &randn(3, &[4, 8, 7]), &s).is_err());
    }

    #[test]
    fn two_single_steps_equal_closed_form() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        for t in [2usize, 10, 500, 1000] {
            let z0 = randn(t as u64, &[4, 8, 8]);
            let n1 = randn(100 + t as u64, &[4, 8, 8]);
            let n2 = randn(200 + t as u64, &[4, 8, 8]);
            let mid = forward_diffuse(&z0, t - 1, &n1, &s).unwrap();
            let two = forward_step(&mid, t, &n2, &s).unwrap();
            // combined noise: (√(α_t (1−ᾱ_{t−1})) n1 + √β_t n2) / √(1−ᾱ_t)
            let a = (s.alphas()[t - 1] * (1.0 - s.alpha_bar(t - 1))).sqrt();
            let b = s.beta(t).sqrt();
            let eps = (((&n1 * a).unwrap() + (&n2 * b).unwrap()).unwrap() / (1.0 - s.alpha_bar(t)).sqrt()).unwrap();
            let closed = forward_diffuse(&z0, t, &eps, &s).unwrap();
            assert!(max_abs_diff(&two, &closed) < 1e-6);
        }
    }

    #[test]
    fn guidance_endpoints_and_identity() {
        let c = randn(1, &[2, 4, 3, 3]);
        let u = randn(2, &[2, 4, 3, 3]);
        assert_eq!(values(&cfg_combine(&c, &u, 0.0).unwrap()), values(&c));
        assert_eq!(values(&cfg_combine(&c, &u, 1.0).unwrap()), values(&u));
        assert_eq!(values(&cfg_combine(&c, &c, 7.5).unwrap()), values(&c));
        for (a, b) in [(0.0, 1.0), (2.0, 8.0), (10.0, -3.5)] {
            let step = (cfg_combine(&c, &u, a + b).unwrap() - cfg_combine(&c, &u, a).unwrap()).unwrap();
            let expect = ((&u - &c).unwrap() * b).unwrap();
            assert!(max_abs_diff(&step, &expect) < 1e-12);
        }
        for w in [-3.0, 0.0, 2.5, 10.0] {
            let paper = cfg_combine(&c, &u, 1.0 - w).unwrap();
            let standard = cfg_combine_standard(&c, &u, w).unwrap();
            assert!(max_abs_diff(&paper, &standard) < 1e-12);
        }
    }

    #[test]
    fn ddim_timesteps_shape() {
        let t = ddim_timesteps(1000, 200);
        assert_eq!(t.len(), 200);
        assert_eq!((t[0], t[199]), (1, 1000));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ddim_timesteps(10, 10), (1..=10).collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1000, 1), vec![1000]);
    }

    #[test]
    fn ddim_inverts_with_oracle_noise() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = randn(5, &[1, 4, 8, 8]);
        let eps = randn(6, &[1, 4, 8, 8]);
        let mut r = rng::stream(0, &["x"]);
        for t in [1usize, 50, 999] {
            let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let rec = ddim_step(&zt, &eps, t, 0, &s, 0.0, &mut r).unwrap();
            assert!(max_abs_diff(&rec, &z0) < 1e-5);
        }
        for (t, tp) in [(10, 3), (1000, 1), (2, 1)] {
            assert_eq!(ddim_sigma(&s, t, tp, 0.0), 0.0);
        }
        let zt = forward_diffuse(&z0, 10, &eps, &s).unwrap();
        assert!(ddim_step(&zt, &eps, 10, 10, &s, 0.0, &mut r).is_err());
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, x: &Tensor, _: &[usize], _: &[u32]) -> Result<Tensor> {
            let (b, c, h, w) = x.dims4()?;
            Ok(Tensor::zeros((b, c / 3, h, w), x.dtype(), x.device())?)
        }
        fn null_class(&self) -> u32 {
            2
        }
    }

    /// Knows the clean post latent and reports the exact noise.
    struct Oracle {
        z0: Tensor,
        schedule: NoiseSchedule,
    }
    impl NoisePredictor for Oracle {
        fn predict(&self, x: &Tensor, t: &[usize], _: &[u32]) -> Result<Tensor> {
            let c = x.dim(1)? / 3;
            let zt = x.narrow(1, 2 * c, c)?;
            let ab: Vec<f64> = t.iter().map(|s| self.schedule.alpha_bar(*s)).collect();
            let a = per_sample(&ab.iter().map(|v| v.sqrt()).collect::<Vec<_>>(), &zt)?;
            let b = per_sample(&ab.iter().map(|v| (1.0 - v).sqrt()).collect::<Vec<_>>(), &zt)?;
            Ok((zt - self.z0.broadcast_mul(&a)?)?.broadcast_div(&b)?)
        }
        fn null_class(&self) -> u32 {
            2
        }
    }

    fn latent_batch(n: usize, seed: u64) -> LatentBatch {
        LatentBatch {
            pre: randn(seed, &[n, 4, 8, 8]),
            gtv: randn(seed + 1, &[n, 4, 8, 8]),
            post: randn(seed + 2, &[n, 4, 8, 8]),
            classes: vec![0; n],
        }
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let b = latent_batch(8, 1);
        let oracle = Oracle {
            z0: b.post.clone(),
            schedule: s.clone(),
        };
        let loss = scalar(&training_step(&oracle, &b, &s, 0.1, &mut rng::stream(0, &["t"])).unwrap()).unwrap();
        assert!(loss < 1e-18, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_chi_square_mean() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let b = latent_batch(64, 2);
        let loss = scalar(&training_step(&Zero, &b, &s, 0.1, &mut rng::stream(0, &["t"])).unwrap()).unwrap();
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    #[test]
    fn sampling_counts_calls_and_is_deterministic() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let model = Denoiser::new(
            DenoiserConfig {
                latent_channels: 4,
                base_channels: 8,
                embed_dim: 8,
                ..Default::default()
            },
            DType::F32,
            0,
        )
        .unwrap();
        let b = latent_batch(2, 3);
        let (pre, gtv) = (b.pre.to_dtype(DType::F32).unwrap(), b.gtv.to_dtype(DType::F32).unwrap());
        let sampler = SamplerConfig::default();
        let counter = CountingPredictor::new(&model);
        let a = sample_post(&counter, &pre, &gtv, &[0, 1], &sampler, &s, &mut rng::stream(9, &["s"])).unwrap();
        assert_eq!(counter.calls(), 400);
        let null = CountingPredictor::new(&model);
        sample_post(&null, &pre, &gtv, &[2, 2], &sampler, &s, &mut rng::stream(9, &["s"])).unwrap();
        assert_eq!(null.calls(), 200);
        let again = sample_post(&model, &pre, &gtv, &[0, 1], &sampler, &s, &mut rng::stream(9, &["s"])).unwrap();
        assert_eq!(values(&a), values(&again));
        assert_eq!(a.dims(), &[2, 4, 8, 8]);
    }

    #[test]
    fn oracle_sampling_recovers_target() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let b = latent_batch(1, 4);
        let oracle = Oracle {
            z0: b.post.clone(),
            schedule: s.clone(),
        };
        let sampler = SamplerConfig {
            n_steps: 50,
            ..Default::default()
        };
        let out = sample_post(&oracle, &b.pre, &b.gtv, &[1], &sampler, &s, &mut rng::stream(1, &["s"])).unwrap();
        assert!(max_abs_diff(&out, &b.post) < 1e-6);
    }

    #[test]
    fn clip_eps_bounds_the_implied_clean_latent() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 1000;
        let ab = s.alpha_bar(t);
        let z = Tensor::new(&[0.0f64, 0.01, -0.02], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[0.0f64, 0.0, 0.5], &Device::Cpu).unwrap();
        let out = clip_eps(&z, &eps, t, &s, 1.0).unwrap().to_vec1::<f64>().unwrap();
        let x0: Vec<f64> = [0.0, 0.01, -0.02]
            .iter()
            .zip(&out)
            .map(|(z, e)| (z - (1.0 - ab).sqrt() * e) / ab.sqrt())
            .collect();
        assert_eq!(out[0], 0.0);
        assert!((x0[1] - 1.0).abs() < 1e-9);
        assert!((x0[2] + 1.0).abs() < 1e-9);
        let small = Tensor::new(&[0.005f64], &Device::Cpu).unwrap();
        let kept = clip_eps(&small, &Tensor::new(&[0.004f64], &Device::Cpu).unwrap(), t, &s, 1.0).unwrap();
        assert!((kept.to_vec1::<f64>().unwrap()[0] - 0.004).abs() < 1e-9);
        assert!(SamplerConfig { clip_x0: Some(0.0), ..Default::default() }.validate(&s).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let s = make_linear_schedule(100, 1e-4, 0.2).unwrap();
        let model = Denoiser::new(
            DenoiserConfig {
                latent_channels: 2,
                base_channels: 8,
                embed_dim: 8,
                ..Default::default()
            },
            DType::F32,
            0,
        )
        .unwrap();
        let mut b = latent_batch(16, 7);
        b.pre = b.pre.narrow(1, 0, 2).unwrap().to_dtype(DType::F32).unwrap();
        b.gtv = b.gtv.narrow(1, 0, 2).unwrap().to_dtype(DType::F32).unwrap();
        b.post = (b.pre.clone() * 0.5).unwrap();
        let before = validation_loss(&model, &b, &s, 8, 0).unwrap();
        let cfg = LdmTrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let report = train_ldm(&model, &b, &b, &s, &cfg, 0).unwrap();
        let after = validation_loss(&model, &b, &s, 8, 0).unwrap();
        assert_eq!(report.steps, 80);
        assert!(after < 0.7 * before, "{before} -> {after}");
        assert!((after - report.best_val_loss).abs() < 1e-6);
    }
}
