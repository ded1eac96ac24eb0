//! Training steps for every method, the optimizer, and the learning-rate schedule.

use std::time::Instant;

use mngac_tensor::{Dual, Graph, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, sample_attack, AttackSpec, PerturbationSet};
use crate::error::{invalid, Error, Result};
use crate::geometry::NormBall;
use crate::io::data::{epoch_permutation, Dataset};
use crate::losses::{ac_loss_node, cls_loss_node, per_example_ce};
use crate::models::{augment_node, gaussian_augmented, generate_augmented, normal_tensor, Classifier, Generator, Model, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nat,
    AdvSingle,
    AdvAvg,
    AdvMax,
    Sat,
    MngAc,
}

/// Source of the augmented sample in the consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Learned,
    Gaussian,
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Params,
}

impl Sgd {
    pub fn new(params: &Params, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buffers: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        for ((p, g), b) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.buffers.tensors) {
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *bv = self.momentum * *bv + d;
                *pv -= lr * *bv;
            }
        }
    }
}

/// Triangular schedule: 0 at the start, `max_lr` halfway, 0 at the end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub epochs: usize,
}

pub fn lr_at(s: &LrSchedule, fractional_epoch: f64) -> f64 {
    let half = s.epochs as f64 / 2.0;
    let e = fractional_epoch.clamp(0.0, s.epochs as f64);
    if e <= half {
        s.max_lr * e / half
    } else {
        s.max_lr * (s.epochs as f64 - e) / half
    }
}

/// Knobs shared by the consistency-based steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub beta: f64,
    /// Inner lookahead rate as a multiple of the scheduled lr.
    pub meta_lr_scale: f64,
    /// Generator lr as a multiple of the scheduled lr.
    pub gen_lr_scale: f64,
    pub noise: NoiseSource,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { beta: 12.0, meta_lr_scale: 1.0, gen_lr_scale: 1.0, noise: NoiseSource::Learned }
    }
}

/// Seconds spent per phase of a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub attack: f64,
    pub meta: f64,
    pub update: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.attack + self.meta + self.update
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub attack_calls: usize,
    pub attacks: Vec<String>,
    pub times: PhaseTimes,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: Classifier,
    pub phi: Generator,
    pub opt_theta: Sgd,
    pub opt_phi: Sgd,
    pub step: u64,
    pub attack_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(theta: Classifier, phi: Generator, momentum: f64, weight_decay: f64, gen_momentum: f64, attack_rng: ChaCha8Rng, noise_rng: ChaCha8Rng) -> Self {
        let opt_theta = Sgd::new(&theta.params, momentum, weight_decay);
        let opt_phi = Sgd::new(&phi.params, gen_momentum, 0.0);
        TrainState { theta, phi, opt_theta, opt_phi, step: 0, attack_rng, noise_rng }
    }
}

fn check_finite(p: &Params, stage: &str) -> Result<()> {
    if p.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient in {stage}")))
    }
}

fn timed<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let r = f();
    *acc += t.elapsed().as_secs_f64();
    r
}

/// Gradient step on the mean cross-entropy over one or more input batches.
fn ce_update(state: &mut TrainState, inputs: &[&Tensor], labels: &[usize], lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = state.theta.params.leaves(&mut g, true);
    let mut total = None;
    for x in inputs {
        let xi = g.constant((*x).clone());
        let logits = state.theta.forward_node(&mut g, &p, xi)?;
        let l = cls_loss_node(&mut g, logits, labels)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    let total = total.ok_or_else(|| invalid("no inputs"))?;
    let loss = g.scale(total, 1.0 / inputs.len() as f64);
    let grads = g.backward(loss);
    let gp = state.theta.params.collect_grads(&g, &grads, &p);
    check_finite(&gp, "classifier update")?;
    state.opt_theta.step(&mut state.theta.params, &gp, lr);
    Ok(g.value(loss).item())
}

/// Plain cross-entropy step on clean inputs.
pub fn nat_step(state: &mut TrainState, x: &Tensor, y: &[usize], lr: f64) -> Result<StepReport> {
    let mut times = PhaseTimes::default();
    let loss = timed(&mut times.update, || ce_update(state, &[x], y, lr))?;
    Ok(StepReport { step: state.step, lr, loss, attack_calls: 0, attacks: vec![], times })
}

fn attack(state: &mut TrainState, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    pgd_attack(&state.theta, x, y, spec, &mut state.attack_rng)
}

/// One sampled attack, then a cross-entropy step on its output.
pub fn sat_step(state: &mut TrainState, x: &Tensor, y: &[usize], set: &mut PerturbationSet, lr: f64) -> Result<StepReport> {
    let mut times = PhaseTimes::default();
    let spec = sample_attack(set);
    let adv = timed(&mut times.attack, || attack(state, x, y, &spec))?;
    let loss = timed(&mut times.update, || ce_update(state, &[&adv], y, lr))?;
    Ok(StepReport { step: state.step, lr, loss, attack_calls: 1, attacks: vec![spec.name], times })
}

/// Adversarial training against the only attack in `set`.
pub fn adv_single_step(state: &mut TrainState, x: &Tensor, y: &[usize], set: &mut PerturbationSet, lr: f64) -> Result<StepReport> {
    if set.len() != 1 {
        return Err(invalid(format!("adv_single needs exactly one attack, got {}", set.len())));
    }
    sat_step(state, x, y, set, lr)
}

/// Every attack, then a step on the mean of their losses.
pub fn avg_step(state: &mut TrainState, x: &Tensor, y: &[usize], set: &PerturbationSet, lr: f64) -> Result<StepReport> {
    let mut times = PhaseTimes::default();
    let mut advs = Vec::with_capacity(set.len());
    for spec in set.attacks() {
        advs.push(timed(&mut times.attack, || attack(state, x, y, spec))?);
    }
    let refs: Vec<&Tensor> = advs.iter().collect();
    let loss = timed(&mut times.update, || ce_update(state, &refs, y, lr))?;
    let names = set.attacks().iter().map(|a| a.name.clone()).collect();
    Ok(StepReport { step: state.step, lr, loss, attack_calls: set.len(), attacks: names, times })
}

/// Every attack, then a step on each example's highest-loss perturbation.
pub fn max_step(state: &mut TrainState, x: &Tensor, y: &[usize], set: &PerturbationSet, lr: f64) -> Result<StepReport> {
    let mut times = PhaseTimes::default();
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for spec in set.attacks() {
        let adv = timed(&mut times.attack, || attack(state, x, y, spec))?;
        let losses = per_example_ce(&state.theta.logits(&adv)?, y)?;
        best = Some(match best {
            None => (adv, losses),
            Some((mut bx, mut bl)) => {
                for i in 0..y.len() {
                    if losses[i] > bl[i] {
                        bl[i] = losses[i];
                        bx.sample_mut(i).copy_from_slice(adv.sample(i));
                    }
                }
                (bx, bl)
            }
        });
    }
    let (worst, _) = best.ok_or_else(|| invalid("empty perturbation set"))?;
    let loss = timed(&mut times.update, || ce_update(state, &[&worst], y, lr))?;
    let names = set.attacks().iter().map(|a| a.name.clone()).collect();
    Ok(StepReport { step: state.step, lr, loss, attack_calls: set.len(), attacks: names, times })
}

/// Hypergradient of the adversarial loss after one lookahead step, with respect to the generator.
///
/// With `theta_hat = theta - alpha * grad_theta CE(theta | x_aug(phi, z))`, returns
/// `d CE(theta_hat | x_adv) / d phi = -alpha * grad_phi <grad_theta CE(theta | x_aug), v>`
/// where `v = grad CE(theta_hat | x_adv)`. The mixed second derivative is taken
/// by running the tape over dual numbers whose tangent along `theta` is `v`.
#[allow(clippy::too_many_arguments)]
pub fn meta_gradient(theta: &Classifier, phi: &Generator, x: &Tensor, y: &[usize], x_adv: &Tensor, z: &Tensor, ball: NormBall, alpha: f64) -> Result<Params> {
    let mut g = Graph::<f64>::new();
    let tp = theta.params.leaves(&mut g, true);
    let pp = phi.params.leaves(&mut g, false);
    let (zi, xi) = (g.constant(z.clone()), g.constant(x.clone()));
    let noise = phi.forward_node(&mut g, &pp, zi, xi)?;
    let xa = augment_node(&mut g, noise, xi, ball);
    let logits = theta.forward_node(&mut g, &tp, xa)?;
    let loss = cls_loss_node(&mut g, logits, y)?;
    let grads = g.backward(loss);
    let g_aug = theta.params.collect_grads(&g, &grads, &tp);
    check_finite(&g_aug, "lookahead gradient")?;

    let mut theta_hat = theta.clone();
    theta_hat.params.axpy(-alpha, &g_aug);
    let (_, v) = theta_hat.loss_and_grad(x_adv, y)?;
    check_finite(&v, "adversarial gradient at the lookahead point")?;

    let mut gd = Graph::<Dual>::new();
    let tp = theta.params.dual_leaves(&mut gd, Some(&v), false);
    let pp = phi.params.dual_leaves(&mut gd, None, true);
    let (zi, xi) = (gd.constant(z.lift()), gd.constant(x.lift()));
    let noise = phi.forward_node(&mut gd, &pp, zi, xi)?;
    let xa = augment_node(&mut gd, noise, xi, ball);
    let logits = theta.forward_node(&mut gd, &tp, xa)?;
    let loss = cls_loss_node(&mut gd, logits, y)?;
    let grads = gd.backward(loss);
    let tensors = pp.iter().map(|&id| grads.wrt(&gd, id).tangent().scale(-alpha)).collect();
    let out = Params { names: phi.params.names.clone(), tensors };
    check_finite(&out, "meta-gradient")?;
    Ok(out)
}

/// Step on `CE(x_adv) + beta * JSD(clean, adv, aug)`.
fn consistency_update(state: &mut TrainState, x: &Tensor, y: &[usize], adv: &Tensor, aug: &Tensor, beta: f64, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = state.theta.params.leaves(&mut g, true);
    let ai = g.constant(adv.clone());
    let la = state.theta.forward_node(&mut g, &p, ai)?;
    let mut loss = cls_loss_node(&mut g, la, y)?;
    if beta > 0.0 {
        let (xi, gi) = (g.constant(x.clone()), g.constant(aug.clone()));
        let lc = state.theta.forward_node(&mut g, &p, xi)?;
        let lg = state.theta.forward_node(&mut g, &p, gi)?;
        let js = ac_loss_node(&mut g, lc, la, lg)?;
        let js = g.scale(js, beta);
        loss = g.add(loss, js);
    }
    let grads = g.backward(loss);
    let gp = state.theta.params.collect_grads(&g, &grads, &p);
    check_finite(&gp, "classifier update")?;
    state.opt_theta.step(&mut state.theta.params, &gp, lr);
    Ok(g.value(loss).item())
}

/// Sampled attack, generator meta-update through a one-step lookahead, then a
/// classifier step on cross-entropy plus the consistency loss.
pub fn mng_ac_step(state: &mut TrainState, x: &Tensor, y: &[usize], set: &mut PerturbationSet, opts: &StepOptions, lr: f64) -> Result<StepReport> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut times = PhaseTimes::default();
    let spec = sample_attack(set);
    let adv = timed(&mut times.attack, || attack(state, x, y, &spec))?;
    let aug = match opts.noise {
        NoiseSource::Learned => {
            let t = Instant::now();
            let z = normal_tensor(x.shape(), &mut state.noise_rng);
            let grad = meta_gradient(&state.theta, &state.phi, x, y, &adv, &z, spec.ball, opts.meta_lr_scale * lr)?;
            state.opt_phi.step(&mut state.phi.params, &grad, opts.gen_lr_scale * lr);
            let aug = generate_augmented(&state.phi, x, spec.ball, &mut state.noise_rng)?;
            times.meta += t.elapsed().as_secs_f64();
            aug
        }
        NoiseSource::Gaussian => gaussian_augmented(x, spec.ball, &mut state.noise_rng),
    };
    let loss = timed(&mut times.update, || consistency_update(state, x, y, &adv, &aug, opts.beta, lr))?;
    Ok(StepReport { step: state.step, lr, loss, attack_calls: 1, attacks: vec![spec.name], times })
}

/// Epoch loop over a dataset.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub method: Method,
    pub opts: StepOptions,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub data_seed: u64,
    pub state: TrainState,
    pub set: PerturbationSet,
    pub train: Dataset,
    perm: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: Method,
        opts: StepOptions,
        schedule: LrSchedule,
        batch_size: usize,
        data_seed: u64,
        state: TrainState,
        set: PerturbationSet,
        train: Dataset,
    ) -> Result<Self> {
        if batch_size == 0 || train.is_empty() {
            return Err(invalid("need a nonempty dataset and batch size >= 1"));
        }
        if method == Method::AdvSingle && set.len() != 1 {
            return Err(invalid(format!("adv_single needs exactly one attack, got {}", set.len())));
        }
        Ok(Trainer { method, opts, schedule, batch_size, data_seed, state, set, train, perm: None })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.schedule.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Runs the next step of the schedule.
    pub fn step(&mut self) -> Result<StepReport> {
        let spe = self.steps_per_epoch();
        let step = self.state.step;
        let epoch = step / spe;
        if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.perm = Some((epoch, epoch_permutation(self.train.len(), self.data_seed, epoch)));
        }
        let perm = &self.perm.as_ref().expect("set above").1;
        let start = ((step % spe) as usize) * self.batch_size;
        let end = (start + self.batch_size).min(perm.len());
        let (x, y) = self.train.batch(&perm[start..end]);
        let lr = lr_at(&self.schedule, step as f64 / spe as f64);
        let st = &mut self.state;
        let report = match self.method {
            Method::Nat => nat_step(st, &x, &y, lr),
            Method::AdvSingle => adv_single_step(st, &x, &y, &mut self.set, lr),
            Method::Sat => sat_step(st, &x, &y, &mut self.set, lr),
            Method::AdvAvg => avg_step(st, &x, &y, &self.set, lr),
            Method::AdvMax => max_step(st, &x, &y, &self.set, lr),
            Method::MngAc => mng_ac_step(st, &x, &y, &mut self.set, &self.opts, lr),
        }
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        self.state.step += 1;
        Ok(report)
    }

    pub fn run(&mut self) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_triangle() {
        let s = LrSchedule { max_lr: 0.21, epochs: 30 };
        assert_eq!(lr_at(&s, 0.0), 0.0);
        assert!((lr_at(&s, 15.0) - 0.21).abs() < 1e-15);
        assert_eq!(lr_at(&s, 30.0), 0.0);
        assert!((lr_at(&s, 7.5) - 0.105).abs() < 1e-15);
        assert!((lr_at(&s, 22.5) - 0.105).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_steps() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let mut g = p.zeros_like();
        g.tensors[0] = Tensor::from_vec(&[2], vec![0.5, 0.25]);
        let mut opt = Sgd::new(&p, 0.9, 5e-4);
        opt.step(&mut p, &g, 0.1);
        let b1 = [0.5 + 5e-4 * 1.0, 0.25 + 5e-4 * -2.0];
        let w1 = [1.0 - 0.1 * b1[0], -2.0 - 0.1 * b1[1]];
        assert_eq!(p.tensors[0].data(), &w1);
        opt.step(&mut p, &g, 0.1);
        let b2 = [0.9 * b1[0] + 0.5 + 5e-4 * w1[0], 0.9 * b1[1] + 0.25 + 5e-4 * w1[1]];
        assert_eq!(p.tensors[0].data(), &[w1[0] - 0.1 * b2[0], w1[1] - 0.1 * b2[1]]);
    }
}
