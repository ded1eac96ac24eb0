use std::fs;

use mngac::io::checkpoint::{Checkpoint, VERSION};
use mngac::io::cli::run;
use mngac::io::config::ExperimentConfig;
use mngac::io::run::{build_trainer, evaluate_model, load_data};
use mngac::trainer::Method;

fn tiny(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig { method, ..Default::default() };
    c.dataset.train_size = 48;
    c.dataset.test_size = 24;
    c.dataset.input = [3, 8, 8];
    c.dataset.classes = 4;
    c.model.width = 4;
    c.generator.hidden = 4;
    c.trainer.batch_size = 16;
    c.trainer.epochs = 2;
    c.trainer.lr = 0.05;
    c.attacks.l1.train_steps = Some(3);
    c.attacks.l1.eval_steps = Some(5);
    c.validate().unwrap();
    c
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny(Method::MngAc);
    let (train, _) = load_data(&cfg).unwrap();
    let mut t = build_trainer(&cfg, train).unwrap();
    for _ in 0..2 {
        t.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mngc"), dir.path().join("b.mngc"));
    Checkpoint::capture(&cfg, &t).save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn checkpoint_rejects_bad_files() {
    let cfg = tiny(Method::Sat);
    let (train, _) = load_data(&cfg).unwrap();
    let t = build_trainer(&cfg, train).unwrap();
    let bytes = Checkpoint::capture(&cfg, &t).to_bytes();

    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 40]).is_err());
    assert!(Checkpoint::from_bytes(b"MNGX").is_err());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    for method in [Method::MngAc, Method::Sat, Method::AdvMax] {
        let cfg = tiny(method);
        let (train, _) = load_data(&cfg).unwrap();
        let mut straight = build_trainer(&cfg, train.clone()).unwrap();
        let mut first = build_trainer(&cfg, train.clone()).unwrap();
        let k = 4;
        for _ in 0..k {
            straight.step().unwrap();
            first.step().unwrap();
        }
        let bytes = Checkpoint::capture(&cfg, &first).to_bytes();
        drop(first);
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().restore(train).unwrap();
        for _ in 0..3 {
            straight.step().unwrap();
            resumed.step().unwrap();
            assert_eq!(straight.state.theta.params.hash(), resumed.state.theta.params.hash());
            assert_eq!(straight.state.phi.params.hash(), resumed.state.phi.params.hash());
        }
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = tiny(Method::Sat);
    let reports: Vec<String> = (0..2)
        .map(|_| {
            let (train, test) = load_data(&cfg).unwrap();
            let mut t = build_trainer(&cfg, train).unwrap();
            t.run().unwrap();
            let ev = evaluate_model(&cfg, &t.state.theta, &test, &cfg.attacks.eval).unwrap();
            serde_json::to_string_pretty(&ev.report).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn evaluation_leaves_model_unchanged() {
    let cfg = tiny(Method::Nat);
    let (train, test) = load_data(&cfg).unwrap();
    let t = build_trainer(&cfg, train).unwrap();
    let before = t.state.theta.params.hash();
    evaluate_model(&cfg, &t.state.theta, &test, &["pgd-linf".into(), "salt-pepper".into()]).unwrap();
    assert_eq!(before, t.state.theta.params.hash());
}

#[test]
fn first_blob_batch_is_seed_determined() {
    let cfg = tiny(Method::Nat);
    let a = load_data(&cfg).unwrap().0;
    let b = load_data(&cfg).unwrap().0;
    assert_eq!(a.batch(&[0, 1, 2]), b.batch(&[0, 1, 2]));
}

#[test]
fn cli_train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::MngAc);
    cfg.output_dir = dir.path().join("run");
    cfg.trainer.epochs = 1;
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let c = cfg_path.to_str().unwrap();
    assert_eq!(run(["mngac", "train", "--config", c, "--set", "trainer.beta=12", "--no-eval"]), 0);
    let ck = cfg.output_dir.join("checkpoint.mngc");
    assert!(ck.exists());
    let out = dir.path().join("eval");
    let code = run(["mngac", "evaluate", "--checkpoint", ck.to_str().unwrap(), "--attacks", "pgd-linf,pgd-l1,pgd-l2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_attack"].as_object().unwrap().len(), 3);
    assert!(report.get("wall_time_seconds").is_none());
    assert!(out.join("correctness.csv").exists() && out.join("timings.json").exists());
}

#[test]
fn cli_rejects_bad_input() {
    assert_ne!(run(["mngac", "frobnicate"]), 0);
    assert_ne!(run(["mngac", "train", "--set", "trainer.betta=1"]), 0);
    assert_ne!(run(["mngac", "evaluate", "--checkpoint", "/nonexistent/ck"]), 0);
}

#[test]
fn config_file_round_trip() {
    let cfg = tiny(Method::AdvAvg);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn shipped_desk_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.method, Method::MngAc);
    assert_eq!(cfg.attacks.train, ["pgd-linf", "pgd-l2"]);
}
