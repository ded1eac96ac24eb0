//! Command-line entry points.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{beta_sweep, grid_to_csv, landscape_directions, loss_landscape_grid, sweep_table};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::ExperimentConfig;
use crate::io::run::{evaluate_model, load_data, write_evaluation, Timings};
use crate::oracles::{loss_gradient_check, meta_gradient_check, GradCheckReport};

#[derive(Debug, Parser)]
#[command(name = "mngac", version, about = "Multi-perturbation adversarial training with a meta-learned noise generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `trainer.beta=12`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&self.set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, checkpoint and evaluate.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save a checkpoint every N steps (0 saves only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Stop once this many total steps have run.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a checkpoint against an attack suite.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated attack names; defaults to the configured suite.
        #[arg(long, value_delimiter = ',')]
        attacks: Option<Vec<String>>,
        /// Overrides applied to the stored config, for example `eval.samples=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; defaults to the one in the stored config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Export a 2-D loss surface around one test example as CSV.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0.5)]
        extent: f64,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one MNG-AC model per beta.
    BetaSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,4,8,12")]
        betas: Vec<f64>,
    },
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: u64,
    lr: f64,
    loss: f64,
    attacks: &'a [String],
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn train(cfg: ExperimentConfig, resume: Option<&Path>, every: u64, stop_after: Option<u64>, no_eval: bool) -> Result<()> {
    let ck = resume.map(Checkpoint::load).transpose()?;
    let cfg = match &ck {
        Some(c) => {
            if c.config != cfg {
                eprintln!("note: resuming with the stored config");
            }
            c.config.clone()
        }
        None => cfg,
    };
    let (train_set, test) = load_data(&cfg)?;
    let mut trainer = match &ck {
        Some(c) => c.restore(train_set)?,
        None => crate::io::run::build_trainer(&cfg, train_set)?,
    };
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let ck_path = dir.join("checkpoint.mngc");
    let mut log = BufWriter::new(File::options().create(true).append(true).open(dir.join("train_log.jsonl"))?);
    let mut timings = Timings::default();
    let limit = stop_after.unwrap_or(u64::MAX).min(trainer.total_steps());
    while trainer.state.step < limit {
        let r = trainer.step()?;
        timings.add(&r.times, r.attack_calls);
        writeln!(log, "{}", serde_json::to_string(&StepLine { step: r.step, lr: r.lr, loss: r.loss, attacks: &r.attacks })?)?;
        if every > 0 && trainer.state.step % every == 0 {
            Checkpoint::capture(&cfg, &trainer).save(&ck_path)?;
        }
    }
    log.flush()?;
    Checkpoint::capture(&cfg, &trainer).save(&ck_path)?;
    eprintln!("step {}/{}; checkpoint {}", trainer.state.step, trainer.total_steps(), ck_path.display());
    if !no_eval && trainer.is_done() {
        let ev = evaluate_model(&cfg, &trainer.state.theta, &test, &cfg.attacks.eval)?;
        write_evaluation(&dir, &ev, &timings)?;
        print!("{}", ev.report.table());
    } else {
        write_json(&dir.join("timings.json"), &timings)?;
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, attacks: Option<Vec<String>>, set: &[String], out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.clone().with_overrides(set)?;
    let (train_set, test) = load_data(&cfg)?;
    let trainer = ck.restore(train_set)?;
    let names = attacks.unwrap_or_else(|| cfg.attacks.eval.clone());
    let ev = evaluate_model(&cfg, &trainer.state.theta, &test, &names)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    write_evaluation(&dir, &ev, &Timings::default())?;
    print!("{}", ev.report.table());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    meta_gradient: Vec<GradCheckReport>,
    losses: GradCheckReport,
    passed: bool,
}

fn gradcheck(seeds: u64, h: f64, tolerance: f64, alpha: f64) -> Result<bool> {
    let meta = (0..seeds).map(|s| meta_gradient_check(s, alpha, h, tolerance)).collect::<Result<Vec<_>>>()?;
    let losses = loss_gradient_check(0, 1e-5, 1e-4)?;
    let passed = losses.passed && meta.iter().all(|r| r.passed);
    println!("{}", serde_json::to_string_pretty(&GradcheckOutput { meta_gradient: meta, losses, passed })?);
    Ok(passed)
}

fn landscape(checkpoint: &Path, index: usize, extent: f64, resolution: usize, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (train_set, test) = load_data(&ck.config)?;
    let trainer = ck.restore(train_set)?;
    if index + 1 >= test.len() {
        return Err(Error::InvalidArgument(format!("index {index} needs a following test example; the split has {}", test.len())));
    }
    let (x, y) = test.batch(&[index]);
    let (x2, y2) = test.batch(&[index + 1]);
    let model = &trainer.state.theta;
    let (d1, d2) = landscape_directions(model, &x, y[0], &x2, y2[0])?;
    let grid = loss_landscape_grid(model, &x, y[0], &d1, &d2, extent, resolution)?;
    let path = out.unwrap_or_else(|| ck.config.output_dir.join(format!("landscape_{index}.csv")));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, grid_to_csv(&grid, extent))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn sweep(cfg: ExperimentConfig, betas: &[f64]) -> Result<()> {
    let rows = beta_sweep(&cfg, betas)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let json: Vec<_> = rows.iter().map(|(b, r)| serde_json::json!({ "beta": b, "report": r })).collect();
    write_json(&cfg.output_dir.join("beta_sweep.json"), &json)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}

/// Parses `args` and runs the chosen subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { cfg, resume, checkpoint_every, stop_after, no_eval } => {
            cfg.load().and_then(|c| train(c, resume.as_deref(), checkpoint_every, stop_after, no_eval))
        }
        Command::Evaluate { checkpoint, attacks, set, out } => evaluate(&checkpoint, attacks, &set, out),
        Command::Gradcheck { seeds, h, tolerance, alpha } => match gradcheck(seeds, h, tolerance, alpha) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numeric("gradient check failed".into())),
            Err(e) => Err(e),
        },
        Command::Landscape { checkpoint, index, extent, resolution, out } => landscape(&checkpoint, index, extent, resolution, out),
        Command::BetaSweep { cfg, betas } => cfg.load().and_then(|c| sweep(c, &betas)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
