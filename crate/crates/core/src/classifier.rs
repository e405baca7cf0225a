//! Residual convolutional survival-class classifier on pre-treatment slices.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{hflip, shift, ImageGrid, SliceKey, SurvivalClassScheme};
use crate::nn::{scalar, Conv2d, Downsample, Init, Linear, ParamStore, ResBlock};
use crate::rng;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Residual blocks; every block but the last is followed by a stride-2
    /// downsampling.
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Largest random translation (pixels) applied to training images.
    pub max_shift: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 8,
            blocks: 4,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_shift: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier: blocks, base_channels and batch_size must be positive".into()));
        }
        let div = 1 << (self.blocks - 1);
        if self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "classifier: image size {} not divisible by {div}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn channels(&self, block: usize) -> usize {
        self.base_channels << block.min(2)
    }
}

pub struct SurvivalClassifier {
    config: ClassifierConfig,
    scheme: SurvivalClassScheme,
    params: ParamStore,
    stem: Conv2d,
    blocks: Vec<(ResBlock, Option<Downsample>)>,
    head: Linear,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl SurvivalClassifier {
    pub fn new(config: ClassifierConfig, scheme: SurvivalClassScheme, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = Init::new(dtype, rng::stream(seed, &["classifier", "init"]));
        let init = &mut store;
        let stem = Conv2d::new(init, "stem", 1, config.channels(0), 3, 1)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut ch = config.channels(0);
        for b in 0..config.blocks {
            let c = config.channels(b);
            let block = ResBlock::new(init, &format!("block{b}"), ch, c, None)?;
            let down = (b + 1 < config.blocks)
                .then(|| Downsample::new(init, &format!("block{b}.down"), c, c))
                .transpose()?;
            blocks.push((block, down));
            ch = c;
        }
        let head = Linear::with_gain(init, "head", ch, scheme.mode.n_classes(), 0.1)?;
        Ok(Self {
            config,
            scheme,
            params: store.finish(),
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn scheme(&self) -> &SurvivalClassScheme {
        &self.scheme
    }

    pub fn n_classes(&self) -> usize {
        self.scheme.mode.n_classes()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn images_tensor(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut values = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.dims() != (s, s) {
                return Err(Error::Shape(format!("classifier expects {s}x{s}, got {:?}", img.dims())));
            }
            values.extend_from_slice(img.values());
        }
        Ok(Tensor::from_vec(values, (images.len(), 1, s, s), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }

    /// `(B, 1, H, W)` → `(B, n_classes)` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for (block, down) in &self.blocks {
            h = block.forward(&h, None)?;
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        let pooled = h.silu()?.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }

    /// Class probabilities for each image.
    pub fn probabilities(&self, images: &[&ImageGrid]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(&self.images_tensor(images)?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(logits.iter().map(|l| softmax(l)).collect())
    }

    pub fn classify(&self, pre: &ImageGrid) -> Result<Vec<f64>> {
        Ok(self.probabilities(&[pre])?.remove(0))
    }

    pub fn predict(&self, pre: &ImageGrid) -> Result<u32> {
        Ok(argmax(&self.classify(pre)?) as u32)
    }

    pub fn predict_batch(&self, images: &[&ImageGrid]) -> Result<Vec<u32>> {
        Ok(self.probabilities(images)?.iter().map(|p| argmax(p) as u32).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        let config = serde_json::json!({ "model": self.config, "scheme": self.scheme });
        checkpoint::save(path, CHECKPOINT_KIND, &config, extra, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: ClassifierConfig = serde_json::from_value(ck.config["model"].clone())?;
        let scheme: SurvivalClassScheme = serde_json::from_value(ck.config["scheme"].clone())?;
        let dtype = ck.tensors.get("head.weight").map(|t| t.dtype()).unwrap_or(DType::F32);
        let model = Self::new(config, scheme, dtype, 0)?;
        model.params.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::new(labels, &Device::Cpu)?.unsqueeze(1)?;
    Ok(log_probs.gather(&idx, 1)?.mean_all()?.neg()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epochs: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Accuracy of always predicting the most frequent training label.
    pub majority_baseline: f64,
    pub final_train_accuracy: f64,
}

fn accuracy_and_loss(model: &SurvivalClassifier, items: &[(&ImageGrid, u32)], batch: usize) -> Result<(f64, f64)> {
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in items.chunks(batch) {
        let images: Vec<&ImageGrid> = chunk.iter().map(|(i, _)| *i).collect();
        let labels: Vec<u32> = chunk.iter().map(|(_, l)| *l).collect();
        let logits = model.logits(&model.images_tensor(&images)?)?;
        loss += scalar(&cross_entropy(&logits, &labels)?)? * chunk.len() as f64;
        let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        correct += rows.iter().zip(&labels).filter(|(r, l)| argmax(r) as u32 == **l).count();
    }
    let n = items.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Cross-entropy training with random horizontal flips and shifts; keeps the epoch with
/// the best validation accuracy (lower validation loss breaks ties).
pub fn train_classifier(
    train: &[(&ImageGrid, u32)],
    val: &[(&ImageGrid, u32)],
    scheme: &SurvivalClassScheme,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(SurvivalClassifier, ClassifierTrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training slices for the classifier".into()));
    }
    let n_classes = scheme.mode.n_classes();
    if let Some((_, l)) = train.iter().chain(val).find(|(_, l)| *l as usize >= n_classes) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {n_classes} classes")));
    }
    let model = SurvivalClassifier::new(config.clone(), scheme.clone(), DType::F32, seed)?;
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = rng::stream(seed, &["classifier", "train"]);
    let val_set = if val.is_empty() { train } else { val };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, Vec<Tensor>)> = None;
    for epoch in 1..=config.epochs.max(1) {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<ImageGrid> = chunk
                .iter()
                .map(|&i| {
                    let img = if rng.random_bool(0.5) { hflip(train[i].0) } else { train[i].0.clone() };
                    let m = config.max_shift as i64;
                    let (dr, dc) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
                    shift(&img, dr as isize, dc as isize, -1.0)
                })
                .collect();
            let refs: Vec<&ImageGrid> = images.iter().collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| train[i].1).collect();
            let logits = model.logits(&model.images_tensor(&refs)?)?;
            let loss = cross_entropy(&logits, &labels)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "classifier".into(),
                    epoch,
                    detail: format!("loss {value}"),
                });
            }
            let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            correct += rows.iter().zip(&labels).filter(|(r, l)| argmax(r) as u32 == **l).count();
            opt.backward_step(&loss)?;
            total += value * chunk.len() as f64;
        }
        let (val_accuracy, val_loss) = accuracy_and_loss(&model, val_set, config.batch_size)?;
        let row = ClassifierEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
            val_loss,
        };
        log::info!(
            "classifier epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
            row.train_loss,
            row.train_accuracy,
            val_accuracy
        );
        let better = match &best {
            None => true,
            Some((_, acc, loss, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if better {
            best = Some((epoch, val_accuracy, val_loss, model.params().snapshot()?));
        }
        epochs.push(row);
    }
    let (best_epoch, best_val_accuracy, _, snapshot) = best.expect("at least one epoch");
    model.params().restore(&snapshot)?;
    let mut counts = vec![0usize; n_classes];
    for (_, l) in train {
        counts[*l as usize] += 1;
    }
    let majority_baseline = *counts.iter().max().unwrap_or(&0) as f64 / train.len() as f64;
    let (final_train_accuracy, _) = accuracy_and_loss(&model, train, config.batch_size)?;
    Ok((
        model,
        ClassifierTrainReport {
            epochs,
            best_epoch,
            best_val_accuracy,
            majority_baseline,
            final_train_accuracy,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientVote {
    pub patient_id: String,
    pub true_class: u32,
    /// Majority of the slice predictions, lowest class on ties.
    pub predicted_class: u32,
    pub slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]` slice counts.
    pub confusion: Vec<Vec<usize>>,
    pub patient_votes: Vec<PatientVote>,
    pub patient_accuracy: f64,
    /// Survival thresholds the labels were derived from (fitted on the
    /// training split).
    pub scheme: SurvivalClassScheme,
    pub label_source: String,
}

/// Per-slice and per-patient accuracy on labelled slices.
pub fn evaluate_classifier(model: &SurvivalClassifier, items: &[(SliceKey, &ImageGrid, u32)]) -> Result<ClassifierReport> {
    let n = model.n_classes();
    let mut confusion = vec![vec![0usize; n]; n];
    let mut votes: BTreeMap<String, (u32, Vec<usize>, usize)> = BTreeMap::new();
    let images: Vec<&ImageGrid> = items.iter().map(|(_, i, _)| *i).collect();
    let mut predictions = Vec::with_capacity(items.len());
    for chunk in images.chunks(model.config.batch_size) {
        predictions.extend(model.predict_batch(chunk)?);
    }
    for ((key, _, truth), pred) in items.iter().zip(&predictions) {
        if *truth as usize >= n {
            return Err(Error::InvalidInput(format!("label {truth} out of range for {n} classes")));
        }
        confusion[*truth as usize][*pred as usize] += 1;
        let entry = votes
            .entry(key.patient_id.clone())
            .or_insert_with(|| (*truth, vec![0; n], 0));
        entry.1[*pred as usize] += 1;
        entry.2 += 1;
    }
    let correct: usize = (0..n).map(|k| confusion[k][k]).sum();
    let patient_votes: Vec<PatientVote> = votes
        .into_iter()
        .map(|(patient_id, (true_class, counts, slices))| {
            let counts: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
            PatientVote {
                patient_id,
                true_class,
                predicted_class: argmax(&counts) as u32,
                slices,
            }
        })
        .collect();
    let patient_correct = patient_votes.iter().filter(|v| v.true_class == v.predicted_class).count();
    Ok(ClassifierReport {
        accuracy: correct as f64 / items.len().max(1) as f64,
        confusion,
        patient_accuracy: patient_correct as f64 / patient_votes.len().max(1) as f64,
        patient_votes,
        scheme: model.scheme.clone(),
        label_source: "train_split".into(),
    })
}
