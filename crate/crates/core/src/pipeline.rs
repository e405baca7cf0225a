//! Experiment configuration, the staged training and inference run with
//! content-addressed caching, single-slice inference and run manifests.
//!
//! A run executes data → vqvae(MRI) → vqvae(GTV) → classifier (pred mode
//! only) → LDM → inference on the test split → evaluation. Every stage
//! writes into `out_dir/cache/<stage>-<key>/`, where the key hashes the
//! stage's configuration together with the keys of its inputs, so an
//! unchanged stage is loaded instead of retrained.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{bytes_hash, file_hash};
use crate::classifier::{evaluate_classifier, train_classifier, ClassifierConfig, SurvivalClassifier};
use crate::data::{
    fit_survival_scheme, generate_synthetic_cohort, lesion_area, read_cohort, read_grid, read_mask, split_patients, split_stratified,
    write_cohort, write_grid, write_split, ClassMode, Cohort, CohortSplit, ImageGrid, SliceKey, SliceTriple,
    SplitRatios, SurvivalClassScheme, SynthConfig,
};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{CountingPredictor, GuidanceForm, LdmTrainConfig, SamplerConfig, ScheduleConfig};
use crate::ldm::{generate_with, train_latent_diffusion, GenerationItem, LatentDiffusion};
use crate::metrics::{evaluate, mse, psnr, ssim, EvalItem, MetricReport, PairMetric, UnitGrid};
use crate::vqvae::{train_vqvae, VqTarget, VqVae, VqVaeConfig};
use crate::{rng, Error, Result};

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const GENERATED_DIR: &str = "generated";

/// Which class the diffusion model is conditioned on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningMode {
    /// Every class input is the null token.
    #[serde(rename = "none")]
    None,
    /// Two survival classes; at inference the class comes from the classifier.
    #[default]
    #[serde(rename = "pred_2class")]
    Pred2Class,
    #[serde(rename = "true_2class")]
    True2Class,
    #[serde(rename = "true_4class")]
    True4Class,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [
        ConditioningMode::None,
        ConditioningMode::Pred2Class,
        ConditioningMode::True2Class,
        ConditioningMode::True4Class,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Pred2Class => "pred_2class",
            ConditioningMode::True2Class => "true_2class",
            ConditioningMode::True4Class => "true_4class",
        }
    }

    pub fn survival_mode(self) -> Option<ClassMode> {
        match self {
            ConditioningMode::None => None,
            ConditioningMode::Pred2Class | ConditioningMode::True2Class => Some(ClassMode::TwoClass),
            ConditioningMode::True4Class => Some(ClassMode::FourClass),
        }
    }

    pub fn n_real_classes(self) -> usize {
        self.survival_mode().map_or(0, ClassMode::n_classes)
    }

    pub fn uses_classifier(self) -> bool {
        self == ConditioningMode::Pred2Class
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class mode `{s}` (none, pred_2class, true_2class, true_4class)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cohort directory (or its manifest). The synthetic generator is used
    /// when absent.
    pub cohort: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split: SplitRatios,
    /// Draw each split part at evenly spaced survival ranks instead of at
    /// random.
    pub stratify: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cohort: None,
            synth: SynthConfig::default(),
            split: SplitRatios::default(),
            stratify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Slices sampled together; results do not depend on it.
    pub batch_size: usize,
    /// Condition on codebook vectors rather than raw encoder outputs.
    pub quantized_conditioning: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            quantized_conditioning: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub class_mode: ConditioningMode,
    pub data: DataConfig,
    pub vqvae_mri: VqVaeConfig,
    pub vqvae_gtv: VqVaeConfig,
    pub classifier: ClassifierConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub ldm: LdmTrainConfig,
    pub sampler: SamplerConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small CPU profile: 32×32 synthetic slices, 10 patients, small networks.
    pub fn desk() -> Self {
        let mode = ConditioningMode::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            class_mode: mode,
            data: DataConfig::default(),
            vqvae_mri: VqVaeConfig::default(),
            vqvae_gtv: VqVaeConfig {
                epochs: 20,
                ..VqVaeConfig::default()
            },
            classifier: ClassifierConfig::default(),
            denoiser: DenoiserConfig {
                n_real_classes: mode.n_real_classes(),
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig::default(),
            ldm: LdmTrainConfig {
                epochs: 60,
                batch_size: 16,
                learning_rate: 1e-3,
                ..LdmTrainConfig::default()
            },
            sampler: SamplerConfig {
                n_steps: 50,
                guidance_scale: 7.0,
                guidance_form: GuidanceForm::Standard,
                clip_x0: Some(2.5),
                ..SamplerConfig::default()
            },
            inference: InferenceConfig::default(),
        }
    }

    /// Full-resolution profile with the published LDM hyperparameters
    /// (batch 30, AdamW at 2e-6, T = 1000, 200 epochs, DDIM 200 steps,
    /// guidance scale 10 in the printed form). Needs GPU-class compute.
    pub fn paper() -> Self {
        let mode = ConditioningMode::default();
        let vq = VqVaeConfig {
            image_size: 256,
            downsample_factor: 4,
            base_channels: 128,
            res_blocks: 2,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            ..VqVaeConfig::default()
        };
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/paper"),
            class_mode: mode,
            data: DataConfig {
                cohort: None,
                synth: SynthConfig {
                    seed: 0,
                    n_patients: 140,
                    slices_per_patient: 40,
                    size: 256,
                },
                split: SplitRatios::default(),
                stratify: false,
            },
            vqvae_mri: vq.clone(),
            vqvae_gtv: vq,
            classifier: ClassifierConfig {
                image_size: 256,
                base_channels: 64,
                blocks: 4,
                epochs: 50,
                batch_size: 32,
                learning_rate: 1e-4,
                ..ClassifierConfig::default()
            },
            denoiser: DenoiserConfig {
                base_channels: 128,
                channel_mult: vec![1, 2, 4],
                res_blocks: 2,
                attention_levels: vec![1, 2],
                n_real_classes: mode.n_real_classes(),
                embed_dim: 512,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig::default(),
            ldm: LdmTrainConfig::default(),
            sampler: SamplerConfig::default(),
            inference: InferenceConfig::default(),
        }
    }

    /// Switches the class mode and the denoiser's class vocabulary together.
    pub fn with_class_mode(mut self, mode: ConditioningMode) -> Self {
        self.class_mode = mode;
        self.denoiser.n_real_classes = mode.n_real_classes();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.vqvae_mri.validate()?;
        self.vqvae_gtv.validate()?;
        self.classifier.validate()?;
        self.denoiser.validate()?;
        self.ldm.validate()?;
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        if self.vqvae_mri.latent_shape() != self.vqvae_gtv.latent_shape() {
            return Err(Error::Config(format!(
                "MRI latent {:?} and GTV latent {:?} must match",
                self.vqvae_mri.latent_shape(),
                self.vqvae_gtv.latent_shape()
            )));
        }
        if self.denoiser.latent_channels != self.vqvae_mri.latent_dim {
            return Err(Error::Config(format!(
                "denoiser.latent_channels {} differs from vqvae latent_dim {}",
                self.denoiser.latent_channels, self.vqvae_mri.latent_dim
            )));
        }
        if self.vqvae_mri.latent_size() % self.denoiser.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by the denoiser's {}",
                self.vqvae_mri.latent_size(),
                self.denoiser.spatial_divisor()
            )));
        }
        if self.denoiser.n_real_classes != self.class_mode.n_real_classes() {
            return Err(Error::Config(format!(
                "class_mode {} needs denoiser.n_real_classes = {}, found {}",
                self.class_mode,
                self.class_mode.n_real_classes(),
                self.denoiser.n_real_classes
            )));
        }
        if self.data.cohort.is_none() {
            let size = self.data.synth.size;
            for (name, s) in [
                ("vqvae_mri", self.vqvae_mri.image_size),
                ("vqvae_gtv", self.vqvae_gtv.image_size),
                ("classifier", self.classifier.image_size),
            ] {
                if s != size {
                    return Err(Error::Config(format!(
                        "{name}.image_size {s} differs from data.synth.size {size}"
                    )));
                }
            }
        }
        if self.inference.batch_size == 0 {
            return Err(Error::Config("inference.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&json!(self))
    }
}

fn hash_json(v: &Value) -> String {
    bytes_hash(v.to_string().as_bytes())
}

fn short(key: &str) -> &str {
    &key[..16]
}

/// Content hash of a cohort: ids, survival times and every grid value.
pub fn cohort_hash(cohort: &Cohort) -> String {
    let mut h = Sha256::new();
    for p in &cohort.patients {
        h.update((p.patient_id.len() as u64).to_le_bytes());
        h.update(p.patient_id.as_bytes());
        h.update(p.survival_days.to_le_bytes());
        h.update((p.slices.len() as u64).to_le_bytes());
        for t in &p.slices {
            for g in [&t.pre, &t.gtv, &t.post] {
                h.update((g.height() as u64).to_le_bytes());
                h.update((g.width() as u64).to_le_bytes());
                for v in g.values() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

/// Seed of one stage, derived from the global seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    rng::stream(seed, &["stage", stage]).next_u64()
}

const STAGES: [&str; 6] = ["split", "vqvae_mri", "vqvae_gtv", "classifier", "ldm", "sampling"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub cached: bool,
    pub seconds: f64,
    pub dir: PathBuf,
    /// SHA-256 of the stage's checkpoint, when it has one.
    pub artifact_hash: Option<String>,
    pub metrics: Value,
}

/// Generated-versus-baseline summary of an evaluated run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalSummary {
    /// Fraction of test slices whose generated post has lower MSE to the
    /// true post than the post of a different test patient. `None` with a
    /// single test patient.
    pub baseline_win_rate: Option<f64>,
    /// Mean lesion area of the generated posts, keyed by conditioning class.
    pub generated_lesion_area: BTreeMap<String, f64>,
    pub true_lesion_area: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub generated_dir: PathBuf,
    pub eval_csv: PathBuf,
    pub eval_json: PathBuf,
    pub classifier_calls: usize,
    pub denoiser_calls: usize,
    pub signal: SignalSummary,
    pub aggregates: BTreeMap<String, crate::metrics::Aggregate>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

const DONE_FILE: &str = "stage.json";

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Per-class labels for one conditioning setup.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Labels {
    scheme: Option<SurvivalClassScheme>,
}

impl Labels {
    fn class_of(&self, survival_days: u32) -> Option<u32> {
        self.scheme.as_ref().map(|s| s.class_of(survival_days) as u32)
    }
}

/// Stage-by-stage driver behind [`run_full`]; the command line uses the
/// individual stages.
pub struct Pipeline {
    config: ExperimentConfig,
    cohort: Cohort,
    split: CohortSplit,
    data_key: String,
    data_hash: String,
    stages: Vec<StageRecord>,
    keys: HashMap<String, String>,
    classifier_calls: usize,
    denoiser_calls: usize,
}

impl Pipeline {
    /// Loads or generates the cohort and splits it by patient.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let t0 = Instant::now();
        let (cohort, source) = match &config.data.cohort {
            Some(path) => (read_cohort(path).map_err(|e| e.in_stage("data"))?, json!(path)),
            None => (
                generate_synthetic_cohort(&config.data.synth).map_err(|e| e.in_stage("data"))?,
                json!(config.data.synth),
            ),
        };
        let data_hash = cohort_hash(&cohort);
        let split_seed = stage_seed(config.seed, "split");
        let split = if config.data.stratify {
            let survival: Vec<(String, u32)> =
                cohort.patients.iter().map(|p| (p.patient_id.clone(), p.survival_days)).collect();
            split_stratified(&survival, config.data.split, split_seed)
        } else {
            split_patients(&cohort.ids(), config.data.split, split_seed)
        }
        .map_err(|e| e.in_stage("data"))?;
        if split.train.is_empty() || split.test.is_empty() {
            return Err(Error::InvalidInput(format!(
                "split {:?} leaves an empty train or test set",
                split.sizes()
            ))
            .in_stage("data"));
        }
        let data_key = hash_json(&json!({"stage": "data", "data": data_hash, "split": config.data.split, "stratify": config.data.stratify, "seed": split_seed}));
        let dir = config.out_dir.join("cache").join(format!("data-{}", short(&data_key)));
        let cached = dir.join(DONE_FILE).exists();
        if !cached {
            if config.data.cohort.is_none() {
                write_cohort(dir.join("cohort"), &cohort)?;
            }
            write_split(dir.join("split.json"), &split)?;
        }
        let metrics = json!({
            "source": source,
            "patients": cohort.len(),
            "triples": cohort.n_triples(),
            "split_sizes": split.sizes(),
        });
        if !cached {
            write_json(&dir.join(DONE_FILE), &metrics)?;
        }
        let mut keys = HashMap::new();
        keys.insert("data".to_string(), data_key.clone());
        Ok(Self {
            stages: vec![StageRecord {
                stage: "data".into(),
                key: data_key.clone(),
                cached,
                seconds: t0.elapsed().as_secs_f64(),
                dir,
                artifact_hash: None,
                metrics,
            }],
            config,
            cohort,
            split,
            data_key,
            data_hash,
            keys,
            classifier_calls: 0,
            denoiser_calls: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn cohort(&self) -> &Cohort {
        &self.cohort
    }

    pub fn split(&self) -> &CohortSplit {
        &self.split
    }

    fn triples(&self, ids: &[String]) -> Vec<(SliceKey, &SliceTriple, u32)> {
        self.cohort.triples(ids).expect("split ids come from the cohort")
    }

    fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.config.out_dir.join("cache").join(format!("{stage}-{}", short(key)))
    }

    /// Runs `produce` into the stage directory unless a finished copy with
    /// the same key exists. Returns the stage directory.
    fn cached(&mut self, stage: &str, key: String, produce: impl FnOnce(&Path) -> Result<Value>) -> Result<PathBuf> {
        if let Some(done) = self.stages.iter().find(|s| s.stage == stage && s.key == key) {
            return Ok(done.dir.clone());
        }
        let dir = self.stage_dir(stage, &key);
        let done = dir.join(DONE_FILE);
        let t0 = Instant::now();
        let (cached, metrics) = if done.exists() {
            log::info!("stage {stage}: reusing {}", dir.display());
            (true, read_json(&done)?)
        } else {
            log::info!("stage {stage}: running into {}", dir.display());
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let metrics = produce(&dir).map_err(|e| e.in_stage(stage))?;
            write_json(&done, &metrics)?;
            (false, metrics)
        };
        let ckpt = dir.join(CHECKPOINT_FILE);
        let artifact_hash = if ckpt.exists() { Some(file_hash(&ckpt)?) } else { None };
        self.keys.insert(stage.to_string(), key.clone());
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            key,
            cached,
            seconds: t0.elapsed().as_secs_f64(),
            dir: dir.clone(),
            artifact_hash,
            metrics,
        });
        Ok(dir)
    }

    /// Trains (or reloads) one autoencoder; returns its checkpoint path.
    pub fn vqvae(&mut self, target: VqTarget) -> Result<PathBuf> {
        let stage = format!("vqvae_{}", target.name());
        let cfg = match target {
            VqTarget::Mri => self.config.vqvae_mri.clone(),
            VqTarget::Gtv => self.config.vqvae_gtv.clone(),
        };
        let seed = stage_seed(self.config.seed, &stage);
        let key = hash_json(&json!({"stage": stage, "data": self.data_key, "config": cfg, "seed": seed}));
        let pick = |t: &SliceTriple| -> Vec<ImageGrid> {
            match target {
                VqTarget::Mri => vec![t.pre.clone(), t.post.clone()],
                VqTarget::Gtv => vec![t.gtv.clone()],
            }
        };
        let gather = |ids: &[String]| -> Vec<ImageGrid> {
            self.triples(ids).into_iter().flat_map(|(_, t, _)| pick(t)).collect()
        };
        let (train, val, test) = (gather(&self.split.train), gather(&self.split.val), gather(&self.split.test));
        let dir = self.cached(&stage, key, |dir| {
            let (tr, va): (Vec<&ImageGrid>, Vec<&ImageGrid>) = (train.iter().collect(), val.iter().collect());
            let (model, report) = train_vqvae(&tr, &va, &cfg, target, seed)?;
            let (mut p, mut s) = (0.0, 0.0);
            for x in &test {
                let (a, b) = (UnitGrid::from_image(&model.reconstruct(x)?), UnitGrid::from_image(x));
                p += psnr(&a, &b, 1.0)?.min(100.0);
                s += ssim(&a, &b)?;
            }
            let n = test.len().max(1) as f64;
            let metrics = json!({
                "best_epoch": report.best_epoch,
                "best_val_reconstruction": report.best_val_reconstruction,
                "used_codes": report.used_codes(),
                "test_psnr": p / n,
                "test_ssim": s / n,
                "epochs": report.epochs,
            });
            model.save(dir.join(CHECKPOINT_FILE), &metrics)?;
            Ok(metrics)
        })?;
        Ok(dir.join(CHECKPOINT_FILE))
    }

    fn scheme(&self, mode: ClassMode) -> Result<SurvivalClassScheme> {
        let days: Vec<u32> = self
            .cohort
            .subset(&self.split.train)?
            .iter()
            .map(|p| p.survival_days)
            .collect();
        fit_survival_scheme(&days, mode)
    }

    fn labels(&self) -> Result<Labels> {
        Ok(Labels {
            scheme: self.config.class_mode.survival_mode().map(|m| self.scheme(m)).transpose()?,
        })
    }

    /// Trains (or reloads) a survival classifier with labels from the
    /// training split's thresholds; returns its checkpoint path.
    pub fn classifier(&mut self, mode: ClassMode) -> Result<PathBuf> {
        let stage = "classifier";
        let scheme = self.scheme(mode)?;
        let cfg = self.config.classifier.clone();
        let seed = stage_seed(self.config.seed, stage);
        let key = hash_json(&json!({"stage": stage, "data": self.data_key, "config": cfg, "scheme": scheme, "seed": seed}));
        let label = |v: Vec<(SliceKey, &SliceTriple, u32)>| -> Vec<(SliceKey, ImageGrid, u32)> {
            v.into_iter()
                .map(|(k, t, d)| (k, t.pre.clone(), scheme.class_of(d) as u32))
                .collect()
        };
        let train = label(self.triples(&self.split.train));
        let val = label(self.triples(&self.split.val));
        let test = label(self.triples(&self.split.test));
        let dir = self.cached(stage, key, |dir| {
            let tr: Vec<(&ImageGrid, u32)> = train.iter().map(|(_, i, l)| (i, *l)).collect();
            let va: Vec<(&ImageGrid, u32)> = val.iter().map(|(_, i, l)| (i, *l)).collect();
            let (model, report) = train_classifier(&tr, &va, &scheme, &cfg, seed)?;
            let keyed: Vec<(SliceKey, &ImageGrid, u32)> = test.iter().map(|(k, i, l)| (k.clone(), i, *l)).collect();
            let test_report = evaluate_classifier(&model, &keyed)?;
            let metrics = json!({"train": report, "test": test_report});
            model.save(dir.join(CHECKPOINT_FILE), &metrics)?;
            Ok(metrics)
        })?;
        Ok(dir.join(CHECKPOINT_FILE))
    }

    /// Trains (or reloads) the diffusion model on the two autoencoders'
    /// latents; returns its checkpoint path.
    pub fn ldm(&mut self) -> Result<PathBuf> {
        let mri_path = self.vqvae(VqTarget::Mri)?;
        let gtv_path = self.vqvae(VqTarget::Gtv)?;
        let stage = "ldm";
        let seed = stage_seed(self.config.seed, stage);
        let labels = self.labels()?;
        let cfg = &self.config;
        let key = hash_json(&json!({
            "stage": stage,
            "data": self.data_key,
            "vqvae_mri": self.keys["vqvae_mri"],
            "vqvae_gtv": self.keys["vqvae_gtv"],
            "denoiser": cfg.denoiser,
            "schedule": cfg.schedule,
            "train": cfg.ldm,
            "class_mode": cfg.class_mode,
            "quantized_conditioning": cfg.inference.quantized_conditioning,
            "seed": seed,
        }));
        let (den, sched, train_cfg, quantized) = (
            cfg.denoiser.clone(),
            cfg.schedule,
            cfg.ldm.clone(),
            cfg.inference.quantized_conditioning,
        );
        let null = den.null_class();
        let label = |v: Vec<(SliceKey, &SliceTriple, u32)>| -> Vec<(SliceTriple, u32)> {
            v.into_iter()
                .map(|(_, t, d)| (t.clone(), labels.class_of(d).unwrap_or(null)))
                .collect()
        };
        let train = label(self.triples(&self.split.train));
        let val = label(self.triples(&self.split.val));
        let dir = self.cached(stage, key, |dir| {
            let (mri, gtv) = (VqVae::load(&mri_path)?, VqVae::load(&gtv_path)?);
            let tr: Vec<(&SliceTriple, u32)> = train.iter().map(|(t, c)| (t, *c)).collect();
            let va: Vec<(&SliceTriple, u32)> = val.iter().map(|(t, c)| (t, *c)).collect();
            let (model, report) = train_latent_diffusion(&mri, &gtv, &tr, &va, &den, &sched, &train_cfg, quantized, seed)?;
            let metrics = json!({
                "best_epoch": report.best_epoch,
                "best_val_loss": report.best_val_loss,
                "steps": report.steps,
                "scales": model.scales(),
                "scheme": labels.scheme,
                "epochs": report.epochs,
            });
            model.save(dir.join(CHECKPOINT_FILE), &metrics)?;
            Ok(metrics)
        })?;
        Ok(dir.join(CHECKPOINT_FILE))
    }

    /// Generates a post slice for every test triple; returns the directory
    /// holding `<patient>__<slice>.ltg` files.
    pub fn inference(&mut self) -> Result<PathBuf> {
        let ldm_path = self.ldm()?;
        let mode = self.config.class_mode;
        let clf_path = if mode.uses_classifier() {
            Some(self.classifier(ClassMode::TwoClass)?)
        } else {
            None
        };
        let stage = "inference";
        let seed = stage_seed(self.config.seed, "sampling");
        let labels = self.labels()?;
        let key = hash_json(&json!({
            "stage": stage,
            "ldm": self.keys["ldm"],
            "classifier": self.keys.get("classifier").filter(|_| mode.uses_classifier()),
            "class_mode": mode,
            "sampler": self.config.sampler,
            "seed": seed,
        }));
        let mri_path = self.config.out_dir.join("cache").join(format!("vqvae_mri-{}", short(&self.keys["vqvae_mri"]))).join(CHECKPOINT_FILE);
        let gtv_path = self.config.out_dir.join("cache").join(format!("vqvae_gtv-{}", short(&self.keys["vqvae_gtv"]))).join(CHECKPOINT_FILE);
        let sampler = self.config.sampler;
        let batch = self.config.inference.batch_size;
        let test: Vec<(SliceKey, SliceTriple, u32)> = self
            .triples(&self.split.test)
            .into_iter()
            .map(|(k, t, d)| (k, t.clone(), d))
            .collect();
        let mut calls = (0usize, 0usize);
        let dir = self.cached(stage, key, |dir| {
            let (mri, gtv) = (VqVae::load(&mri_path)?, VqVae::load(&gtv_path)?);
            let ldm = LatentDiffusion::load(&ldm_path)?;
            let (classes, source): (Vec<Option<u32>>, &str) = match &clf_path {
                Some(p) => {
                    let clf = SurvivalClassifier::load(p)?;
                    let pre: Vec<&ImageGrid> = test.iter().map(|(_, t, _)| &t.pre).collect();
                    calls.0 = pre.len();
                    (clf.predict_batch(&pre)?.into_iter().map(Some).collect(), "classifier")
                }
                None if mode == ConditioningMode::None => (vec![None; test.len()], "null"),
                None => (test.iter().map(|(_, _, d)| labels.class_of(*d)).collect(), "survival"),
            };
            let items: Vec<GenerationItem> = test
                .iter()
                .zip(&classes)
                .map(|((k, t, _), c)| GenerationItem {
                    key: k.clone(),
                    pre: &t.pre,
                    gtv: &t.gtv,
                    class: *c,
                })
                .collect();
            let counter = CountingPredictor::new(ldm.denoiser());
            let images = generate_with(&counter, &ldm, &mri, &gtv, &items, &sampler, seed, batch)?;
            calls.1 = counter.calls();
            let out = dir.join(GENERATED_DIR);
            let mut slices = Vec::with_capacity(items.len());
            for (item, image) in items.iter().zip(&images) {
                let file = out.join(format!("{}.ltg", item.key.file_stem()));
                write_grid(&file, image)?;
                slices.push(json!({"key": item.key, "class": item.class, "file_hash": file_hash(&file)?}));
            }
            Ok(json!({
                "class_source": source,
                "classifier_calls": calls.0,
                "denoiser_calls": calls.1,
                "slices": slices,
            }))
        })?;
        let record = self.stages.last().expect("inference stage recorded");
        if !record.cached {
            self.classifier_calls += calls.0;
            self.denoiser_calls += calls.1;
        }
        Ok(dir.join(GENERATED_DIR))
    }

    /// Scores the generated test slices and writes `eval/report.{csv,json}`.
    pub fn evaluate(&mut self) -> Result<(MetricReport, SignalSummary)> {
        let generated_dir = self.inference()?;
        let t0 = Instant::now();
        let record = self.stages.last().expect("inference stage recorded").clone();
        let classes: HashMap<SliceKey, Option<u32>> = record.metrics["slices"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|s| {
                Ok((
                    serde_json::from_value(s["key"].clone())?,
                    serde_json::from_value(s["class"].clone())?,
                ))
            })
            .collect::<Result<_>>()?;
        let test = self.triples(&self.split.test);
        let mut generated = HashMap::new();
        for (k, _, _) in &test {
            let file = generated_dir.join(format!("{}.ltg", k.file_stem()));
            generated.insert(k.clone(), read_grid(&file)?);
        }
        let items: Vec<EvalItem> = test
            .iter()
            .map(|(k, t, _)| EvalItem {
                key: k.clone(),
                truth: &t.post,
                gtv: &t.gtv,
            })
            .collect();
        let context = json!({
            "config_hash": self.config.hash(),
            "data_hash": self.data_hash,
            "inference_key": record.key,
            "class_mode": self.config.class_mode,
        });
        let report = evaluate(&items, &generated, None, context).map_err(|e| e.in_stage("evaluation"))?;
        let signal = signal_summary(&test, &generated, &classes)?;
        let eval_dir = self.config.out_dir.join("eval");
        std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
        report.write_csv(eval_dir.join("report.csv"))?;
        report.write_json(eval_dir.join("report.json"))?;
        self.stages.push(StageRecord {
            stage: "evaluation".into(),
            key: hash_json(&json!({"stage": "evaluation", "inference": record.key})),
            cached: false,
            seconds: t0.elapsed().as_secs_f64(),
            dir: eval_dir,
            artifact_hash: None,
            metrics: json!({"signal": signal, "aggregates": report.aggregates}),
        });
        Ok((report, signal))
    }

    fn manifest(&self, report: &MetricReport, signal: SignalSummary, generated_dir: PathBuf) -> RunManifest {
        let mut seeds = BTreeMap::from([("global".to_string(), self.config.seed)]);
        for s in STAGES {
            seeds.insert(s.to_string(), stage_seed(self.config.seed, s));
        }
        let checkpoints = self
            .stages
            .iter()
            .filter(|s| s.artifact_hash.is_some())
            .map(|s| (s.stage.clone(), s.dir.join(CHECKPOINT_FILE)))
            .collect();
        let eval_dir = self.config.out_dir.join("eval");
        RunManifest {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            data_hash: self.data_hash.clone(),
            seeds,
            stages: self.stages.clone(),
            checkpoints,
            generated_dir,
            eval_csv: eval_dir.join("report.csv"),
            eval_json: eval_dir.join("report.json"),
            classifier_calls: self.classifier_calls,
            denoiser_calls: self.denoiser_calls,
            signal,
            aggregates: report.aggregates.clone(),
        }
    }
}

fn signal_summary(
    test: &[(SliceKey, &SliceTriple, u32)],
    generated: &HashMap<SliceKey, ImageGrid>,
    classes: &HashMap<SliceKey, Option<u32>>,
) -> Result<SignalSummary> {
    let mut patients: Vec<&str> = test.iter().map(|(k, _, _)| k.patient_id.as_str()).collect();
    patients.dedup();
    let by_patient: BTreeMap<&str, Vec<&SliceTriple>> = patients
        .iter()
        .map(|p| (*p, test.iter().filter(|(k, _, _)| k.patient_id == *p).map(|(_, t, _)| *t).collect()))
        .collect();
    let baseline_win_rate = if patients.len() < 2 {
        None
    } else {
        let mut wins = 0usize;
        for (k, t, _) in test {
            let pos = patients.iter().position(|p| *p == k.patient_id).expect("listed");
            let other = &by_patient[patients[(pos + 1) % patients.len()]];
            let baseline = &other[k.slice % other.len()].post;
            let truth = UnitGrid::from_image(&t.post);
            if mse(&UnitGrid::from_image(&generated[k]), &truth)? < mse(&UnitGrid::from_image(baseline), &truth)? {
                wins += 1;
            }
        }
        Some(wins as f64 / test.len() as f64)
    };
    let mut gen_area: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut true_area: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, t, _) in test {
        let name = classes.get(k).copied().flatten().map_or("null".to_string(), |c| c.to_string());
        let g = gen_area.entry(name.clone()).or_default();
        g.0 += lesion_area(&generated[k], &t.gtv)? as f64;
        g.1 += 1;
        let a = true_area.entry(name).or_default();
        a.0 += lesion_area(&t.post, &t.gtv)? as f64;
        a.1 += 1;
    }
    let mean = |m: BTreeMap<String, (f64, usize)>| m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(SignalSummary {
        baseline_win_rate,
        generated_lesion_area: mean(gen_area),
        true_lesion_area: mean(true_area),
    })
}

/// Runs every stage, reusing cached stage outputs, and writes
/// `run_manifest.json` into the output directory.
pub fn run_full(config: &ExperimentConfig) -> Result<RunManifest> {
    let mut p = Pipeline::prepare(config.clone())?;
    let (report, signal) = p.evaluate()?;
    let generated = p
        .stages
        .iter()
        .find(|s| s.stage == "inference")
        .map(|s| s.dir.join(GENERATED_DIR))
        .expect("inference ran");
    let manifest = p.manifest(&report, signal, generated);
    write_json(&config.out_dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Checkpoints and settings needed to translate one slice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceSetup {
    pub vqvae_mri: PathBuf,
    pub vqvae_gtv: PathBuf,
    pub ldm: PathBuf,
    pub classifier: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl InferenceSetup {
    /// The checkpoints and sampler of a finished run.
    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        let get = |k: &str| {
            m.checkpoints
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("run manifest has no {k} checkpoint")))
        };
        Ok(Self {
            vqvae_mri: get("vqvae_mri")?,
            vqvae_gtv: get("vqvae_gtv")?,
            ldm: get("ldm")?,
            classifier: m.config.class_mode.uses_classifier().then(|| get("classifier")).transpose()?,
            sampler: m.config.sampler,
            seed: stage_seed(m.config.seed, "sampling"),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub image: ImageGrid,
    pub class: Option<u32>,
    pub provenance: Value,
}

/// Where the conditioning class of a generation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSource {
    Override,
    Classifier,
    Null,
}

/// Translates one pre slice and its GTV mask. The class is `class_override`
/// when given, else the classifier's prediction when a classifier is set
/// up, else the null token.
pub fn infer_one(
    pre_path: impl AsRef<Path>,
    gtv_path: impl AsRef<Path>,
    setup: &InferenceSetup,
    class_override: Option<u32>,
) -> Result<Inference> {
    let (pre_path, gtv_path) = (pre_path.as_ref(), gtv_path.as_ref());
    let pre = read_grid(pre_path)?;
    let gtv_mask = read_mask(gtv_path)?;
    if pre.dims() != gtv_mask.dims() {
        return Err(Error::Shape(format!("pre {:?} vs gtv {:?}", pre.dims(), gtv_mask.dims())));
    }
    let mri = VqVae::load(&setup.vqvae_mri)?;
    let gtv = VqVae::load(&setup.vqvae_gtv)?;
    let ldm = LatentDiffusion::load(&setup.ldm)?;
    ldm.check_codecs(&mri, &gtv)?;
    let n_real = ldm.denoiser().config().n_real_classes as u32;
    let (class, source) = match (class_override, &setup.classifier) {
        (Some(c), _) if c >= n_real => {
            return Err(Error::Config(format!(
                "class {c} out of range: the diffusion model knows {n_real} classes"
            )))
        }
        (Some(c), _) => (Some(c), ClassSource::Override),
        (None, Some(p)) => {
            let clf = SurvivalClassifier::load(p)?;
            if clf.n_classes() as u32 != n_real {
                return Err(Error::Config(format!(
                    "classifier predicts {} classes, diffusion model expects {n_real}",
                    clf.n_classes()
                )));
            }
            (Some(clf.predict(&pre)?), ClassSource::Classifier)
        }
        (None, None) => (None, ClassSource::Null),
    };
    let stem = pre_path.file_stem().and_then(|s| s.to_str()).unwrap_or("slice");
    let key = SliceKey::parse_stem(stem).unwrap_or_else(|| SliceKey::new(stem, 0));
    let item = GenerationItem {
        key: key.clone(),
        pre: &pre,
        gtv: &gtv_mask,
        class,
    };
    let image = crate::ldm::generate(&ldm, &mri, &gtv, &[item], &setup.sampler, setup.seed, 1)?
        .pop()
        .expect("one image per item");
    let mut checkpoints = BTreeMap::new();
    for (name, path) in [("vqvae_mri", &setup.vqvae_mri), ("vqvae_gtv", &setup.vqvae_gtv), ("ldm", &setup.ldm)] {
        checkpoints.insert(name, json!({"path": path, "sha256": file_hash(path)?}));
    }
    if let Some(p) = &setup.classifier {
        checkpoints.insert("classifier", json!({"path": p, "sha256": file_hash(p)?}));
    }
    let provenance = json!({
        "inputs": {
            "pre": {"path": pre_path, "sha256": file_hash(pre_path)?},
            "gtv": {"path": gtv_path, "sha256": file_hash(gtv_path)?},
        },
        "slice_key": key,
        "class": class,
        "class_source": source,
        "sampler": setup.sampler,
        "seed": setup.seed,
        "checkpoints": checkpoints,
    });
    Ok(Inference { image, class, provenance })
}

/// Evaluates `<stem>.ltg` files matched by name across three directories.
/// Stems follow `<patient>__<slice>`; any other stem counts as slice 0 of a
/// patient named after it.
pub fn evaluate_dirs(
    truth_dir: impl AsRef<Path>,
    pred_dir: impl AsRef<Path>,
    mask_dir: impl AsRef<Path>,
    external: Option<&dyn PairMetric>,
) -> Result<MetricReport> {
    let list = |dir: &Path| -> Result<BTreeMap<SliceKey, PathBuf>> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "ltg") {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let key = SliceKey::parse_stem(&stem).unwrap_or_else(|| SliceKey::new(stem, 0));
                out.insert(key, path);
            }
        }
        Ok(out)
    };
    let (truth_dir, pred_dir, mask_dir) = (truth_dir.as_ref(), pred_dir.as_ref(), mask_dir.as_ref());
    let truths = list(truth_dir)?;
    let masks = list(mask_dir)?;
    if truths.is_empty() {
        return Err(Error::InvalidInput(format!("no .ltg files in {}", truth_dir.display())));
    }
    let missing: Vec<String> = truths.keys().filter(|k| !masks.contains_key(*k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!("no mask for {}", missing.join(", "))));
    }
    let grids = truths
        .iter()
        .map(|(k, p)| Ok((k.clone(), read_grid(p)?, read_mask(&masks[k])?)))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<EvalItem> = grids
        .iter()
        .map(|(k, truth, gtv)| EvalItem {
            key: k.clone(),
            truth,
            gtv,
        })
        .collect();
    let generated = list(pred_dir)?
        .into_iter()
        .map(|(k, p)| Ok((k, read_grid(p)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let context = json!({"truth": truth_dir, "pred": pred_dir, "masks": mask_dir});
    evaluate(&items, &generated, external, context)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_modes_round_trip_through_names() {
        for m in ConditioningMode::ALL {
            assert_eq!(m.name().parse::<ConditioningMode>().unwrap(), m);
            let toml_value = toml::to_string(&json!({"m": m})).unwrap();
            assert!(toml_value.contains(m.name()));
        }
        assert_eq!(ConditioningMode::None.n_real_classes(), 0);
        assert_eq!(ConditioningMode::True4Class.n_real_classes(), 4);
        assert!("two".parse::<ConditioningMode>().is_err());
    }

    #[test]
    fn profiles_validate_and_survive_toml() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
        let paper = ExperimentConfig::paper();
        assert_eq!(paper.ldm.batch_size, 30);
        assert_eq!(paper.ldm.learning_rate, 2e-6);
        assert_eq!(paper.ldm.epochs, 200);
        assert_eq!(paper.schedule.timesteps, 1000);
        assert_eq!(paper.sampler.n_steps, 200);
        assert_eq!(paper.sampler.guidance_scale, 10.0);
    }

    #[test]
    fn partial_toml_fills_defaults_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\n[ldm]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ldm.epochs, 3);
        assert_eq!(cfg.vqvae_mri, ExperimentConfig::desk().vqvae_mri);
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 7\n"), Err(Error::Config(_))));
    }

    #[test]
    fn mode_and_vocabulary_must_agree() {
        let mut cfg = ExperimentConfig::desk();
        cfg.class_mode = ConditioningMode::True4Class;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("n_real_classes = 4"), "{err}");
        cfg = cfg.with_class_mode(ConditioningMode::True4Class);
        cfg.validate().unwrap();
    }

    #[test]
    fn mismatched_latents_are_a_config_error() {
        let mut cfg = ExperimentConfig::desk();
        cfg.vqvae_gtv.downsample_factor = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cohort_hash_sees_single_values() {
        let cohort = generate_synthetic_cohort(&SynthConfig::default()).unwrap();
        let mut other = cohort.clone();
        let t = &mut other.patients[0].slices[0];
        let mut v = t.post.values().to_vec();
        v[0] = if v[0] > 0.0 { v[0] - 0.5 } else { v[0] + 0.5 };
        t.post = ImageGrid::intensity(32, 32, v).unwrap();
        assert_ne!(cohort_hash(&cohort), cohort_hash(&other));
        assert_eq!(cohort_hash(&cohort), cohort_hash(&cohort.clone()));
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = STAGES.iter().map(|s| stage_seed(3, s)).collect();
        assert_eq!(seeds.len(), STAGES.len());
    }
}
