use std::path::Path;
use std::process::{Command, Output};

use tumor_ldm::data::{SplitRatios, SynthConfig};
use tumor_ldm::pipeline::{ConditioningMode, ExperimentConfig};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tumor-ldm"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::desk().with_class_mode(ConditioningMode::Pred2Class);
    cfg.out_dir = dir.join("run");
    cfg.data.synth = SynthConfig {
        seed: 2,
        n_patients: 8,
        slices_per_patient: 2,
        size: 16,
    };
    cfg.data.split = SplitRatios::new(0.5, 0.25, 0.25).unwrap();
    for vq in [&mut cfg.vqvae_mri, &mut cfg.vqvae_gtv] {
        vq.image_size = 16;
        vq.base_channels = 8;
        vq.codebook_size = 16;
        vq.epochs = 1;
    }
    cfg.classifier.image_size = 16;
    cfg.classifier.base_channels = 4;
    cfg.classifier.epochs = 1;
    cfg.denoiser.base_channels = 8;
    cfg.denoiser.embed_dim = 8;
    cfg.schedule.timesteps = 50;
    cfg.ldm.epochs = 1;
    cfg.ldm.batch_size = 4;
    cfg.sampler.n_steps = 3;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn data_commands_write_cohort_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let v = ok(&["--seed", "3", "--out", s(&cohort), "data", "synth", "--patients", "5", "--slices", "2", "--size", "16"]);
    assert_eq!(v["triples"], 10);
    let split = dir.path().join("split.json");
    let v = ok(&["--out", s(&split), "data", "split", "--cohort", s(&cohort), "--ratios", "0.6,0.2,0.2"]);
    assert_eq!(v["sizes"], serde_json::json!([3, 1, 1]));
    let again = dir.path().join("again.json");
    ok(&["--out", s(&again), "data", "split", "--cohort", s(&cohort), "--ratios", "0.6,0.2,0.2"]);
    assert_eq!(std::fs::read(&split).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn errors_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nonsense_key = 1\n").unwrap();
    assert_eq!(run(&["run", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(run(&["run", "--class-mode", "six_class", "--out", s(dir.path())]).status.code(), Some(2));
    let cohort = dir.path().join("cohort");
    ok(&["--out", s(&cohort), "data", "synth", "--patients", "4", "--slices", "1", "--size", "16"]);
    let out = run(&["data", "split", "--cohort", s(&cohort), "--ratios", "0.5,0.5,0.5"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_run_then_infer_sample_predict_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let v = ok(&["--deterministic", "run", "--config", s(&config)]);
    assert_eq!(v["classifier_calls"], 4);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("run_manifest.json")).unwrap()).unwrap();
    let ckpt = |name: &str| manifest["checkpoints"][name].as_str().unwrap().to_string();
    let cohort = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .find(|st| st["stage"] == "data")
        .map(|st| Path::new(st["dir"].as_str().unwrap()).join("cohort"))
        .unwrap();

    let pre = cohort.join("p000").join("slice_000_pre.ltg");
    let gtv = cohort.join("p000").join("slice_000_gtv.ltg");
    assert!(pre.exists() && gtv.exists(), "cohort layout changed: {}", cohort.display());
    let pred_a = dir.path().join("a.ltg");
    let pred_b = dir.path().join("b.ltg");
    for out in [&pred_a, &pred_b] {
        let v = ok(&["--out", s(out), "infer", "--pre", s(&pre), "--gtv", s(&gtv), "--run", s(&run_dir)]);
        assert!(v["class"].is_number());
    }
    assert_eq!(std::fs::read(&pred_a).unwrap(), std::fs::read(&pred_b).unwrap());
    let prov: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["class_source"], "classifier");
    assert!(prov["output"]["sha256"].is_string());

    let out = run(&["infer", "--pre", s(&pre), "--gtv", s(&gtv), "--run", s(&run_dir), "--class", "5"]);
    assert_eq!(out.status.code(), Some(2));

    let v = ok(&["clf", "predict", "--ckpt", &ckpt("classifier"), "--in", s(&pre)]);
    let p: f64 = v["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-5);

    let recon = dir.path().join("recon.ltg");
    ok(&["--out", s(&recon), "vqvae", "reconstruct", "--ckpt", &ckpt("vqvae_mri"), "--in", s(&pre)]);
    assert!(recon.exists());

    let samples = dir.path().join("samples");
    let split = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .find(|st| st["stage"] == "data")
        .map(|st| Path::new(st["dir"].as_str().unwrap()).join("split.json"))
        .unwrap();
    let v = ok(&[
        "--out", s(&samples), "ldm", "sample", "--ckpt", &ckpt("ldm"), "--vqvae-mri", &ckpt("vqvae_mri"),
        "--vqvae-gtv", &ckpt("vqvae_gtv"), "--class", "1", "--steps", "3", "--cohort", s(&cohort),
        "--split", s(&split),
    ]);
    assert_eq!(v["generated"], 4);
    assert!(samples.join("provenance.json").exists());

    let generated = Path::new(manifest["generated_dir"].as_str().unwrap());
    let truth = dir.path().join("truth");
    let masks = dir.path().join("masks");
    std::fs::create_dir_all(&truth).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    for entry in std::fs::read_dir(generated).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        let (pid, idx) = name.trim_end_matches(".ltg").split_once("__").unwrap();
        std::fs::copy(cohort.join(pid).join(format!("slice_{idx}_post.ltg")), truth.join(&name)).unwrap();
        std::fs::copy(cohort.join(pid).join(format!("slice_{idx}_gtv.ltg")), masks.join(&name)).unwrap();
    }
    let report = dir.path().join("report.csv");
    let v = ok(&[
        "--out", s(&report), "eval", "--truth", s(&truth), "--pred", s(generated), "--masks", s(&masks),
    ]);
    assert_eq!(v["slices"], 4);
    let mine = std::fs::read_to_string(&report).unwrap();
    let pipeline = std::fs::read_to_string(manifest["eval_csv"].as_str().unwrap()).unwrap();
    assert_eq!(mine, pipeline);
}
