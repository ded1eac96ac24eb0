//! Config-driven construction of datasets, trainers and evaluations.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::PerturbationSet;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Evaluation};
use crate::io::config::{DatasetName, ExperimentConfig};
use crate::io::data::{blobs, load_raw, moons, Dataset};
use crate::models::{Classifier, Generator};
use crate::trainer::{LrSchedule, TrainState, Trainer};

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train and test splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let seed = cfg.seeds.data;
    match d.name {
        DatasetName::Blobs => Ok((
            blobs(d.train_size, d.input, d.classes, &d.blobs, &mut split_rng(seed, 0))?,
            blobs(d.test_size, d.input, d.classes, &d.blobs, &mut split_rng(seed, 1))?,
        )),
        DatasetName::Moons => {
            if d.classes != 2 {
                return Err(Error::Config(format!("moons has 2 classes, config says {}", d.classes)));
            }
            Ok((moons(d.train_size, d.input, d.moons_noise, &mut split_rng(seed, 0))?, moons(d.test_size, d.input, d.moons_noise, &mut split_rng(seed, 1))?))
        }
        DatasetName::Raw => {
            let dir = d.path.as_ref().ok_or_else(|| Error::Config("dataset.path is required for raw datasets".into()))?;
            let train = load_raw(dir, "train", d.input, d.classes)?;
            let test = load_raw(dir, "test", d.input, d.classes)?;
            Ok((train.subset(d.train_size.min(train.len()))?, test.subset(d.test_size.min(test.len()))?))
        }
    }
}

/// Fresh trainer at step 0.
pub fn build_trainer(cfg: &ExperimentConfig, train: Dataset) -> Result<Trainer> {
    cfg.validate()?;
    let [c, _, _] = cfg.dataset.input;
    let theta = Classifier::new(cfg.model.arch, cfg.dataset.input, cfg.dataset.classes, cfg.model.width, cfg.seeds.init)?;
    let phi = Generator::new(c, cfg.generator.hidden, cfg.generator.init_scale, cfg.seeds.init.wrapping_add(1))?;
    let t = &cfg.trainer;
    let state = TrainState::new(theta, phi, t.momentum, t.weight_decay, t.gen_momentum, split_rng(cfg.seeds.attack, 0), split_rng(cfg.seeds.noise, 0));
    let specs = cfg.attacks.train_specs(cfg.input_len())?;
    let set = if specs.is_empty() {
        PerturbationSet::new(vec![crate::attacks::default_pgd(crate::attacks::PGD_LINF, cfg.input_len(), false)?], split_rng(cfg.seeds.attack, 1))?
    } else {
        PerturbationSet::new(specs, split_rng(cfg.seeds.attack, 1))?
    };
    let schedule = LrSchedule { max_lr: t.lr, epochs: t.epochs };
    Trainer::new(cfg.method, cfg.step_options(), schedule, t.batch_size, cfg.seeds.data, state, set, train)
}

/// Evaluation of `model` on the configured test subset and suite.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Classifier, test: &Dataset, attacks: &[String]) -> Result<Evaluation> {
    let suite = cfg.attacks.eval_suite(attacks, cfg.input_len())?;
    let data = match cfg.eval.samples {
        Some(n) => test.subset(n.min(test.len()))?,
        None => test.clone(),
    };
    evaluate(model, &data, &suite, cfg.seeds.eval, cfg.eval.batch_size, &cfg.fingerprint())
}

/// Trains to completion, returning the finished trainer and per-phase seconds.
pub fn train(cfg: &ExperimentConfig) -> Result<(Trainer, Dataset, Timings)> {
    let (train, test) = load_data(cfg)?;
    let mut trainer = build_trainer(cfg, train)?;
    let mut timings = Timings::default();
    while !trainer.is_done() {
        let r = trainer.step()?;
        timings.add(&r.times, r.attack_calls);
    }
    Ok((trainer, test, timings))
}

/// Wall-clock totals kept apart from the metrics so reports stay reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub steps: u64,
    pub attack_calls: u64,
    pub attack_seconds: f64,
    pub meta_seconds: f64,
    pub update_seconds: f64,
    pub eval_seconds: f64,
}

impl Timings {
    pub fn add(&mut self, t: &crate::trainer::PhaseTimes, calls: usize) {
        self.steps += 1;
        self.attack_calls += calls as u64;
        self.attack_seconds += t.attack;
        self.meta_seconds += t.meta;
        self.update_seconds += t.update;
    }
}

/// Writes `metrics.json`, `metrics.txt`, `correctness.csv` and `timings.json` into `dir`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, timings: &Timings) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&ev.report)? + "\n")?;
    fs::write(dir.join("metrics.txt"), ev.report.table())?;
    fs::write(dir.join("correctness.csv"), ev.matrix.to_csv())?;
    let mut t = timings.clone();
    t.eval_seconds = ev.wall_time_seconds;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&t)? + "\n")?;
    Ok(())
}
