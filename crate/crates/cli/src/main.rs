use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tumor_ldm::classifier::SurvivalClassifier;
use tumor_ldm::data::{
    generate_synthetic_cohort, read_cohort, read_grid, read_mask, read_split, split_patients, split_stratified, write_cohort, write_grid,
    write_split, ClassMode, SplitRatios, SynthConfig,
};
use tumor_ldm::diffusion::{GuidanceForm, SamplerConfig};
use tumor_ldm::ldm::{generate, GenerationItem, LatentDiffusion};
use tumor_ldm::metrics::ExternalCommandMetric;
use tumor_ldm::pipeline::{
    evaluate_dirs, infer_one, run_full, ConditioningMode, ExperimentConfig, InferenceSetup, Pipeline, RunManifest,
    RUN_MANIFEST_FILE,
};
use tumor_ldm::vqvae::{VqTarget, VqVae};
use tumor_ldm::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "tumor-ldm", version, about = "Pre- to post-treatment MRI slice prediction with a latent diffusion model")]
struct Cli {
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded math so that reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (or file, for commands producing one file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic cohorts and patient splits.
    #[command(subcommand)]
    Data(DataCmd),
    /// Vector-quantized autoencoders.
    #[command(subcommand)]
    Vqvae(VqvaeCmd),
    /// The latent diffusion model.
    #[command(subcommand)]
    Ldm(LdmCmd),
    /// The survival classifier.
    #[command(subcommand)]
    Clf(ClfCmd),
    /// Translate one pre slice with its GTV mask.
    Infer(InferArgs),
    /// Score predicted slices against ground truth.
    Eval(EvalArgs),
    /// Run every stage of an experiment.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write a synthetic cohort directory.
    Synth {
        #[arg(long, default_value_t = 10)]
        patients: usize,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Split a cohort by patient and write the split as JSON.
    Split {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Plain shuffle instead of drawing parts at evenly spaced survival ranks.
        #[arg(long)]
        random: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Mri,
    Gtv,
}

impl From<Target> for VqTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::Mri => VqTarget::Mri,
            Target::Gtv => VqTarget::Gtv,
        }
    }
}

#[derive(Subcommand)]
enum VqvaeCmd {
    Train {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// decode(quantize(encode(x))) of one grid file.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum LdmCmd {
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate post slices for every slice of a cohort (or of one split part).
    Sample(SampleArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vqvae_mri: PathBuf,
    #[arg(long)]
    vqvae_gtv: PathBuf,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// A class index, `auto` (classifier prediction) or `none` (null token).
    #[arg(long, default_value = "auto")]
    class: String,
    #[arg(long, default_value_t = 10.0)]
    scale: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value = "paper")]
    guidance: String,
    /// Clamp the predicted clean latent to this magnitude at every step.
    #[arg(long)]
    clip_x0: Option<f64>,
    #[arg(long)]
    cohort: PathBuf,
    /// Restrict to the test patients of this split file.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ClfCmd {
    Train {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Class probabilities for one pre slice.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    gtv: PathBuf,
    /// Take checkpoints and sampler settings from a finished run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    vqvae_mri: Option<PathBuf>,
    #[arg(long)]
    vqvae_gtv: Option<PathBuf>,
    #[arg(long)]
    ldm: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    class: Option<u32>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// Optional perceptual metric: a program called as `PROG GEN TRUTH` that
    /// prints one number.
    #[arg(long)]
    lpips_cmd: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    class_mode: Option<String>,
}

fn load_config(path: Option<&Path>, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data(cmd: &DataCmd, cli: &Cli) -> Result<()> {
    match cmd {
        DataCmd::Synth { patients, slices, size } => {
            let cfg = SynthConfig {
                seed: cli.seed.unwrap_or(0),
                n_patients: *patients,
                slices_per_patient: *slices,
                size: *size,
            };
            let cohort = generate_synthetic_cohort(&cfg)?;
            let manifest = write_cohort(out_path(cli, "cohort"), &cohort)?;
            print_json(&json!({"manifest": manifest, "patients": cohort.len(), "triples": cohort.n_triples()}))
        }
        DataCmd::Split { cohort, ratios, random } => {
            let ratios: SplitRatios = ratios.parse()?;
            let cohort = read_cohort(cohort)?;
            let seed = cli.seed.unwrap_or(0);
            let split = if *random {
                split_patients(&cohort.ids(), ratios, seed)?
            } else {
                let survival: Vec<(String, u32)> =
                    cohort.patients.iter().map(|p| (p.patient_id.clone(), p.survival_days)).collect();
                split_stratified(&survival, ratios, seed)?
            };
            let path = out_path(cli, "split.json");
            write_split(&path, &split)?;
            print_json(&json!({"split": path, "sizes": split.sizes()}))
        }
    }
}

fn vqvae(cmd: &VqvaeCmd, cli: &Cli) -> Result<()> {
    match cmd {
        VqvaeCmd::Train { target, config } => {
            let mut p = Pipeline::prepare(load_config(config.as_deref(), cli)?)?;
            let ckpt = p.vqvae((*target).into())?;
            let ck = checkpoint::load(&ckpt)?;
            print_json(&json!({"checkpoint": ckpt, "metrics": ck.extra}))
        }
        VqvaeCmd::Reconstruct { ckpt, input } => {
            let model = VqVae::load(ckpt)?;
            let grid = match model.target() {
                VqTarget::Mri => read_grid(input)?,
                VqTarget::Gtv => read_mask(input)?,
            };
            let out = out_path(cli, "reconstruction.ltg");
            write_grid(&out, &model.reconstruct(&grid)?)?;
            print_json(&json!({"output": out}))
        }
    }
}

fn parse_form(s: &str) -> Result<GuidanceForm> {
    s.parse()
}

fn sample(args: &SampleArgs, cli: &Cli) -> Result<()> {
    let mri = VqVae::load(&args.vqvae_mri)?;
    let gtv = VqVae::load(&args.vqvae_gtv)?;
    let ldm = LatentDiffusion::load(&args.ckpt)?;
    ldm.check_codecs(&mri, &gtv)?;
    let sampler = SamplerConfig {
        n_steps: args.steps,
        guidance_scale: args.scale,
        guidance_form: parse_form(&args.guidance)?,
        clip_x0: args.clip_x0,
        ..SamplerConfig::default()
    };
    let cohort = read_cohort(&args.cohort)?;
    let ids = match &args.split {
        Some(s) => read_split(s)?.test,
        None => cohort.ids(),
    };
    let triples = cohort.triples(&ids)?;
    let n_real = ldm.denoiser().config().n_real_classes as u32;
    let classes: Vec<Option<u32>> = match args.class.as_str() {
        "none" => vec![None; triples.len()],
        "auto" => match &args.classifier {
            Some(p) => {
                let clf = SurvivalClassifier::load(p)?;
                let pre: Vec<_> = triples.iter().map(|(_, t, _)| &t.pre).collect();
                clf.predict_batch(&pre)?.into_iter().map(Some).collect()
            }
            None if n_real == 0 => vec![None; triples.len()],
            None => return Err(Error::Config("--class auto needs --classifier".into())),
        },
        n => {
            let c: u32 = n
                .parse()
                .map_err(|_| Error::Config(format!("--class expects an index, auto or none, got `{n}`")))?;
            if c >= n_real {
                return Err(Error::Config(format!("class {c} out of range 0..{n_real}")));
            }
            vec![Some(c); triples.len()]
        }
    };
    let items: Vec<GenerationItem> = triples
        .iter()
        .zip(&classes)
        .map(|((k, t, _), c)| GenerationItem {
            key: k.clone(),
            pre: &t.pre,
            gtv: &t.gtv,
            class: *c,
        })
        .collect();
    let seed = cli.seed.unwrap_or(0);
    let images = generate(&ldm, &mri, &gtv, &items, &sampler, seed, 16)?;
    let out = out_path(cli, "samples");
    let mut slices = Vec::with_capacity(images.len());
    for (item, image) in items.iter().zip(&images) {
        let file = out.join(format!("{}.ltg", item.key.file_stem()));
        write_grid(&file, image)?;
        slices.push(json!({"key": item.key, "class": item.class, "sha256": checkpoint::file_hash(&file)?}));
    }
    let mut checkpoints = serde_json::Map::new();
    for (name, p) in [("ldm", &args.ckpt), ("vqvae_mri", &args.vqvae_mri), ("vqvae_gtv", &args.vqvae_gtv)] {
        checkpoints.insert(name.into(), json!({"path": p, "sha256": checkpoint::file_hash(p)?}));
    }
    if let Some(p) = &args.classifier {
        checkpoints.insert("classifier".into(), json!({"path": p, "sha256": checkpoint::file_hash(p)?}));
    }
    let provenance = json!({
        "seed": seed,
        "sampler": sampler,
        "class": args.class,
        "cohort": args.cohort,
        "checkpoints": checkpoints,
        "slices": slices,
    });
    write_text(&out.join("provenance.json"), &serde_json::to_string_pretty(&provenance)?)?;
    print_json(&json!({"output": out, "generated": images.len()}))
}

fn ldm(cmd: &LdmCmd, cli: &Cli) -> Result<()> {
    match cmd {
        LdmCmd::Train { config } => {
            let mut p = Pipeline::prepare(load_config(config.as_deref(), cli)?)?;
            let ckpt = p.ldm()?;
            let ck = checkpoint::load(&ckpt)?;
            print_json(&json!({"checkpoint": ckpt, "metrics": ck.extra}))
        }
        LdmCmd::Sample(args) => sample(args, cli),
    }
}

fn clf(cmd: &ClfCmd, cli: &Cli) -> Result<()> {
    match cmd {
        ClfCmd::Train { classes, config } => {
            let mode = match classes {
                2 => ClassMode::TwoClass,
                4 => ClassMode::FourClass,
                n => return Err(Error::Config(format!("--classes must be 2 or 4, got {n}"))),
            };
            let mut p = Pipeline::prepare(load_config(config.as_deref(), cli)?)?;
            let ckpt = p.classifier(mode)?;
            let ck = checkpoint::load(&ckpt)?;
            print_json(&json!({"checkpoint": ckpt, "report": ck.extra}))
        }
        ClfCmd::Predict { ckpt, input } => {
            let model = SurvivalClassifier::load(ckpt)?;
            let probs = model.classify(&read_grid(input)?)?;
            let class = tumor_ldm::classifier::argmax(&probs);
            print_json(&json!({"probabilities": probs, "class": class, "scheme": model.scheme()}))
        }
    }
}

fn infer(args: &InferArgs, cli: &Cli) -> Result<()> {
    let mut setup = match &args.run {
        Some(dir) => {
            let path = if dir.is_dir() { dir.join(RUN_MANIFEST_FILE) } else { dir.clone() };
            InferenceSetup::from_manifest(&RunManifest::load(path)?)?
        }
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("{flag} is required without --run")))
            };
            InferenceSetup {
                vqvae_mri: need(&args.vqvae_mri, "--vqvae-mri")?,
                vqvae_gtv: need(&args.vqvae_gtv, "--vqvae-gtv")?,
                ldm: need(&args.ldm, "--ldm")?,
                classifier: None,
                sampler: SamplerConfig::default(),
                seed: 0,
            }
        }
    };
    if args.classifier.is_some() {
        setup.classifier = args.classifier.clone();
    }
    if let Some(seed) = cli.seed {
        setup.seed = seed;
    }
    if let Some(s) = args.scale {
        setup.sampler.guidance_scale = s;
    }
    if let Some(n) = args.steps {
        setup.sampler.n_steps = n;
    }
    let result = infer_one(&args.pre, &args.gtv, &setup, args.class)?;
    let out = out_path(cli, "prediction.ltg");
    write_grid(&out, &result.image)?;
    let prov_path = out.with_extension("provenance.json");
    let mut provenance = result.provenance;
    provenance["output"] = json!({"path": out, "sha256": checkpoint::file_hash(&out)?});
    write_text(&prov_path, &serde_json::to_string_pretty(&provenance)?)?;
    print_json(&json!({"output": out, "provenance": prov_path, "class": result.class}))
}

fn eval(args: &EvalArgs, cli: &Cli) -> Result<()> {
    let external = args.lpips_cmd.as_ref().map(|p| ExternalCommandMetric {
        name: "lpips".into(),
        program: p.clone(),
        args: Vec::new(),
    });
    let report = evaluate_dirs(
        &args.truth,
        &args.pred,
        &args.masks,
        external.as_ref().map(|m| m as &dyn tumor_ldm::metrics::PairMetric),
    )?;
    let out = out_path(cli, "report.csv");
    if out.extension().is_some_and(|e| e == "json") {
        report.write_json(&out)?;
    } else {
        report.write_csv(&out)?;
    }
    print_json(&json!({"output": out, "slices": report.rows.len(), "aggregates": report.aggregates}))
}

fn run(args: &RunArgs, cli: &Cli) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), cli)?;
    if let Some(mode) = &args.class_mode {
        cfg = cfg.with_class_mode(mode.parse::<ConditioningMode>()?);
    }
    let m = run_full(&cfg)?;
    let stages: Vec<_> = m
        .stages
        .iter()
        .map(|s| json!({"stage": s.stage, "cached": s.cached, "seconds": s.seconds}))
        .collect();
    print_json(&json!({
        "manifest": cfg.out_dir.join(RUN_MANIFEST_FILE),
        "eval_csv": m.eval_csv,
        "stages": stages,
        "signal": m.signal,
        "classifier_calls": m.classifier_calls,
    }))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Data(cmd) => data(cmd, cli),
        Command::Vqvae(cmd) => vqvae(cmd, cli),
        Command::Ldm(cmd) => ldm(cmd, cli),
        Command::Clf(cmd) => clf(cmd, cli),
        Command::Infer(args) => infer(args, cli),
        Command::Eval(args) => eval(args, cli),
        Command::Run(args) => run(args, cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.deterministic {
        // must precede the first tensor operation, which sizes the thread pool
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
