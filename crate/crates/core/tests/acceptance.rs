//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero on any failure.
//!
//! Pass criterion numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 8`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use mngac::attacks::{resolve, Attack};
use mngac::evaluation::{CorrectnessMatrix, MetricsReport};
use mngac::geometry::{ball_norm, project_delta, project_l1, Norm, NormBall};
use mngac::io::checkpoint::Checkpoint;
use mngac::io::config::ExperimentConfig;
use mngac::io::run::{build_trainer, evaluate_model, load_data, train, write_evaluation};
use mngac::losses::{ac_loss, PosteriorTriple};
use mngac::models::{normal_tensor, Arch, Classifier};
use mngac::oracles::{l1_projection_oracle, loss_gradient_check, meta_gradient_check};
use mngac::tensor::Tensor;
use mngac::trainer::{Method, NoiseSource};
use mngac::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn minutes(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- 1: oracles

fn oracle_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut proj_err: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eps = rng.random_range(0.01..3.0);
        let got = project_l1(&v, eps);
        let want = l1_projection_oracle(&v, eps);
        proj_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(proj_err, f64::max);
    }
    let mut meta_err: f64 = 0.0;
    let mut meta_ok = true;
    for seed in 0..20 {
        let r = meta_gradient_check(seed, 0.5, 1e-4, 1e-3)?;
        meta_ok &= r.passed;
        meta_err = meta_err.max(r.max_rel_err);
    }
    let mut loss_err: f64 = 0.0;
    let mut loss_ok = true;
    for seed in 0..5 {
        let r = loss_gradient_check(seed, 1e-5, 1e-4)?;
        loss_ok &= r.passed;
        loss_err = loss_err.max(r.max_rel_err);
    }
    let mins = minutes(start);
    let pass = proj_err <= 1e-6 && meta_ok && meta_err <= 1e-3 && loss_ok && loss_err <= 1e-4 && mins < 2.0;
    Ok(outcome(pass, format!("l1 proj max err {proj_err:.2e}, meta grad max rel err {meta_err:.2e}, loss grad max rel err {loss_err:.2e}, {mins:.2} min")))
}

// ---------------------------------------------------------------- 2: invariants

fn tiny_cfg(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig { method, ..Default::default() };
    c.dataset.train_size = 64;
    c.dataset.test_size = 32;
    c.dataset.input = [3, 8, 8];
    c.dataset.classes = 4;
    c.model.width = 4;
    c.generator.hidden = 4;
    c.trainer.batch_size = 16;
    c.trainer.epochs = 3;
    c.trainer.lr = 0.05;
    c.attacks.l1.train_steps = Some(3);
    c.attacks.l1.eval_steps = Some(5);
    if method == Method::AdvSingle {
        c.attacks.train = vec!["pgd-l2".into()];
    }
    c
}

fn invariant_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();

    for norm in [Norm::Linf, Norm::L2, Norm::L1] {
        for _ in 0..300 {
            let d = rng.random_range(1..=64);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ball = NormBall::new(norm, rng.random_range(0.0..2.0))?;
            let p = project_delta(&v, ball);
            if norm.of(&p) > ball.epsilon * (1.0 + 1e-12) + 1e-12 {
                failures.push(format!("{norm} projection infeasible"));
            }
            let pp = project_delta(&p, ball);
            if pp.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-12) {
                failures.push(format!("{norm} projection not idempotent"));
            }
        }
    }

    let model = Classifier::new(Arch::SmallCnn, [3, 8, 8], 4, 4, 9)?;
    let x = normal_tensor(&[6, 3, 8, 8], &mut rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let labels = vec![0, 1, 2, 3, 0, 1];
    for name in ["pgd-linf", "pgd-l2", "pgd-l1", "salt-pepper"] {
        let attack = resolve(name, 192, true)?;
        let adv = attack.run(&model, &x, &labels, &mut ChaCha8Rng::seed_from_u64(3))?;
        if adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            failures.push(format!("{name} left [0, 1]"));
        }
        if let Attack::Pgd(spec) = &attack {
            let norms = ball_norm(&x, &adv, spec.ball.norm)?;
            if norms.iter().any(|&n| n > spec.ball.epsilon + 1e-6) {
                failures.push(format!("{name} left its ball"));
            }
        }
    }

    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for _ in 0..200 {
        let logits: Vec<Tensor> = (0..3).map(|_| normal_tensor(&[5, 4], &mut rng).map(|v| 4.0 * v)).collect();
        let base = ac_loss(&PosteriorTriple::from_logits(&logits[0], &logits[1], &logits[2])?);
        if !(0.0..=3f64.ln() + 1e-12).contains(&base) {
            failures.push(format!("JSD {base} outside [0, ln 3]"));
        }
        for p in perms {
            let v = ac_loss(&PosteriorTriple::from_logits(&logits[p[0]], &logits[p[1]], &logits[p[2]])?);
            if (v - base).abs() > 1e-12 {
                failures.push("JSD not permutation symmetric".into());
            }
        }
    }

    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let m = CorrectnessMatrix {
            attacks: vec!["pgd-linf".into(), "pgd-l1".into(), "pgd-l2".into()],
            groups: vec!["linf".into(), "l1".into(), "l2".into()],
            clean: (0..n).map(|_| rng.random_bool(0.8)).collect(),
            rows: (0..n).map(|_| (0..3).map(|_| rng.random_bool(0.5)).collect()).collect(),
        };
        if !m.report("").is_ordered() {
            failures.push("metric ordering violated".into());
        }
    }

    for method in [Method::Nat, Method::AdvSingle, Method::AdvAvg, Method::AdvMax, Method::Sat, Method::MngAc] {
        let cfg = tiny_cfg(method);
        let (train_set, _) = load_data(&cfg)?;
        let mut a = build_trainer(&cfg, train_set.clone())?;
        let mut b = build_trainer(&cfg, train_set)?;
        for _ in 0..10 {
            let (ra, rb) = (a.step()?, b.step()?);
            if ra.loss.to_bits() != rb.loss.to_bits()
                || a.state.theta.params.hash() != b.state.theta.params.hash()
                || a.state.phi.params.hash() != b.state.phi.params.hash()
            {
                failures.push(format!("{method:?} trajectory not reproducible"));
                break;
            }
        }
    }

    let mins = minutes(start);
    failures.dedup();
    let pass = failures.is_empty() && mins < 5.0;
    let detail = if failures.is_empty() { format!("all invariants hold, {mins:.2} min") } else { format!("{}; {mins:.2} min", failures.join("; ")) };
    Ok(outcome(pass, detail))
}

// ---------------------------------------------------------------- 3: SAT cost

fn sat_cost() -> Result<Outcome> {
    let start = Instant::now();
    let steps = 30;
    let mut per_step = BTreeMap::new();
    let mut calls_ok = true;
    for (method, calls) in [(Method::Sat, 1), (Method::AdvAvg, 3)] {
        let mut cfg = desk_cfg(0);
        cfg.method = method;
        cfg.model.arch = Arch::SmallCnn;
        cfg.attacks.train = vec!["pgd-linf".into(), "pgd-l1".into(), "pgd-l2".into()];
        let (train_set, _) = load_data(&cfg)?;
        let mut t = build_trainer(&cfg, train_set)?;
        t.step()?;
        let clock = Instant::now();
        for _ in 0..steps {
            calls_ok &= t.step()?.attack_calls == calls;
        }
        per_step.insert(format!("{method:?}"), clock.elapsed().as_secs_f64() / steps as f64);
    }
    let (sat, avg) = (per_step["Sat"], per_step["AdvAvg"]);
    let mins = minutes(start);
    let pass = calls_ok && sat <= 0.5 * avg && mins < 3.0;
    Ok(outcome(pass, format!("calls 1 vs 3: {calls_ok}, per-step {:.1} ms vs {:.1} ms (ratio {:.2}), {mins:.2} min", sat * 1e3, avg * 1e3, sat / avg)))
}

// ---------------------------------------------------------------- 4: Nat fragility

fn nat_fragility() -> Result<Outcome> {
    let start = Instant::now();
    let mut cfg = desk_cfg(0);
    cfg.method = Method::Nat;
    cfg.model.arch = Arch::SmallCnn;
    let (t, test, _) = train(&cfg)?;
    let r = evaluate_model(&cfg, &t.state.theta, &test, &["pgd-linf".into()])?.report;
    let linf = r.per_attack["pgd-linf"];
    let mins = minutes(start);
    let pass = r.acc_clean >= 0.95 && linf <= 0.05 && mins < 10.0;
    Ok(outcome(pass, format!("clean {:.2}%, pgd-linf {:.2}%, {mins:.2} min", 100.0 * r.acc_clean, 100.0 * linf)))
}

// ---------------------------------------------------------------- 5-7: desk-scale runs

/// Two-norm desk task shared by the multi-attack, ablation and beta criteria.
fn desk_cfg(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { method: Method::MngAc, ..Default::default() };
    c.dataset.train_size = 1000;
    c.dataset.test_size = 500;
    c.dataset.input = [3, 8, 8];
    c.model.arch = Arch::Linear;
    c.attacks.train = vec!["pgd-linf".into(), "pgd-l2".into()];
    c.attacks.eval = c.attacks.train.clone();
    c.trainer.beta = 12.0;
    c.trainer.lr = 0.05;
    c.trainer.epochs = 20;
    c.trainer.batch_size = 50;
    c.seeds.data = seed;
    c.seeds.attack = seed + 10;
    c.seeds.noise = seed + 20;
    c.seeds.init = seed + 30;
    c.seeds.eval = seed + 40;
    c
}

fn arm(name: &str, seed: u64) -> ExperimentConfig {
    let mut c = desk_cfg(seed);
    match name {
        "sat" => c.method = Method::Sat,
        "sat+ac" => c.generator.noise = NoiseSource::Gaussian,
        "adv-linf" | "adv-l2" => {
            c.method = Method::AdvSingle;
            c.attacks.train = vec![format!("pgd-{}", &name[4..])];
        }
        "beta0" => c.trainer.beta = 0.0,
        "beta4" => c.trainer.beta = 4.0,
        "mng-ac" => {}
        other => panic!("unknown arm {other}"),
    }
    c
}

/// Trains and evaluates each arm once per seed, reusing finished runs.
#[derive(Default)]
struct Runs {
    done: BTreeMap<(String, u64), MetricsReport>,
}

impl Runs {
    fn get(&mut self, name: &str) -> Result<Vec<MetricsReport>> {
        let mut out = Vec::new();
        for seed in SEEDS {
            let key = (name.to_string(), seed);
            if !self.done.contains_key(&key) {
                let cfg = arm(name, seed);
                let clock = Instant::now();
                let (t, test, _) = train(&cfg)?;
                let r = evaluate_model(&cfg, &t.state.theta, &test, &cfg.attacks.eval)?.report;
                println!(
                    "  run {name:<8} seed {seed}: clean {:6.2}  linf {:6.2}  l2 {:6.2}  union {:6.2}  avg {:6.2}  ({:.0} s)",
                    100.0 * r.acc_clean,
                    100.0 * r.per_attack["pgd-linf"],
                    100.0 * r.per_attack["pgd-l2"],
                    100.0 * r.acc_union,
                    100.0 * r.acc_avg,
                    clock.elapsed().as_secs_f64()
                );
                self.done.insert(key.clone(), r);
            }
            out.push(self.done[&key].clone());
        }
        Ok(out)
    }
}

fn mean_pct(rs: &[MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> f64 {
    100.0 * rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

fn multi_attack_benefit(runs: &mut Runs) -> Result<Outcome> {
    let start = Instant::now();
    let mng = mean_pct(&runs.get("mng-ac")?, |r| r.acc_union);
    let linf = mean_pct(&runs.get("adv-linf")?, |r| r.acc_union);
    let l2 = mean_pct(&runs.get("adv-l2")?, |r| r.acc_union);
    let mins = minutes(start);
    let pass = mng - linf >= 5.0 && mng - l2 >= 5.0 && mins < 30.0;
    Ok(outcome(pass, format!("union mng-ac {mng:.2} vs adv-linf {linf:.2} (+{:.2}), adv-l2 {l2:.2} (+{:.2}), {mins:.1} min", mng - linf, mng - l2)))
}

fn ablation(runs: &mut Runs) -> Result<Outcome> {
    let start = Instant::now();
    let sat = mean_pct(&runs.get("sat")?, |r| r.acc_avg);
    let satac = mean_pct(&runs.get("sat+ac")?, |r| r.acc_avg);
    let mng = mean_pct(&runs.get("mng-ac")?, |r| r.acc_avg);
    let mins = minutes(start);
    let pass = mng >= satac - 0.5 && satac >= sat - 0.5 && mins < 45.0;
    Ok(outcome(pass, format!("avg sat {sat:.2} <= sat+ac {satac:.2} <= mng-ac {mng:.2}, {mins:.1} min")))
}

fn beta_monotonicity(runs: &mut Runs) -> Result<Outcome> {
    let start = Instant::now();
    let mut union = Vec::new();
    let mut clean = Vec::new();
    for b in ["beta0", "beta4", "mng-ac"] {
        let rs = runs.get(b)?;
        union.push(mean_pct(&rs, |r| r.acc_union));
        clean.push(mean_pct(&rs, |r| r.acc_clean));
    }
    let mins = minutes(start);
    let pass = union.windows(2).all(|w| w[1] >= w[0] - 1.0) && clean.windows(2).all(|w| w[1] <= w[0] + 1.0) && mins < 45.0;
    Ok(outcome(
        pass,
        format!("beta 0/4/12 union {:.2}/{:.2}/{:.2}, clean {:.2}/{:.2}/{:.2}, {mins:.1} min", union[0], union[1], union[2], clean[0], clean[1], clean[2]),
    ))
}

// ---------------------------------------------------------------- 8: checkpoints

fn checkpoint_reproducibility() -> Result<Outcome> {
    let mut failures = Vec::new();
    for method in [Method::MngAc, Method::Sat, Method::AdvAvg] {
        let cfg = tiny_cfg(method);
        let (train_set, _) = load_data(&cfg)?;
        let mut straight = build_trainer(&cfg, train_set.clone())?;
        let mut first = build_trainer(&cfg, train_set.clone())?;
        for _ in 0..5 {
            straight.step()?;
            first.step()?;
        }
        let bytes = Checkpoint::capture(&cfg, &first).to_bytes();
        drop(first);
        let mut resumed = Checkpoint::from_bytes(&bytes)?.restore(train_set)?;
        let (a, b) = (straight.step()?, resumed.step()?);
        if a.loss.to_bits() != b.loss.to_bits()
            || straight.state.theta.params.hash() != resumed.state.theta.params.hash()
            || straight.state.phi.params.hash() != resumed.state.phi.params.hash()
        {
            failures.push(format!("{method:?} resume diverged"));
        }
    }
    let dir = tempfile::tempdir()?;
    let cfg = tiny_cfg(Method::MngAc);
    let mut files = Vec::new();
    for i in 0..2 {
        let (t, test, timings) = train(&cfg)?;
        let ev = evaluate_model(&cfg, &t.state.theta, &test, &cfg.attacks.eval)?;
        let out = dir.path().join(i.to_string());
        write_evaluation(&out, &ev, &timings)?;
        files.push(std::fs::read(out.join("metrics.json"))?);
    }
    if files[0] != files[1] {
        failures.push("MetricsReport files differ".into());
    }
    let pass = failures.is_empty();
    let detail = if pass { "resume bit-exact for mng_ac/sat/adv_avg; MetricsReport files identical".into() } else { failures.join("; ") };
    Ok(outcome(pass, detail))
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=8).contains(n)).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs::default();
    let mut all_pass = true;
    let mut report = |n: u32, name: &str, r: Result<Outcome>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        all_pass &= o.pass;
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    if run(1) {
        report(1, "oracle suite", oracle_suite());
    }
    if run(2) {
        report(2, "invariant suite", invariant_suite());
    }
    if run(3) {
        report(3, "SAT cost", sat_cost());
    }
    if run(4) {
        report(4, "Nat fragility", nat_fragility());
    }
    if run(5) {
        report(5, "multi-attack benefit", multi_attack_benefit(&mut runs));
    }
    if run(6) {
        report(6, "AC/MNG ablation", ablation(&mut runs));
    }
    if run(7) {
        report(7, "beta monotonicity", beta_monotonicity(&mut runs));
    }
    if run(8) {
        report(8, "checkpoint reproducibility", checkpoint_reproducibility());
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
