//! PGD attacks, uniform attack sampling, and salt-and-pepper noise.

use mngac_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{project_ball, steepest_direction, Norm, NormBall, DEFAULT_SPARSITY};
use crate::models::Model;

pub const PGD_LINF: &str = "pgd-linf";
pub const PGD_L1: &str = "pgd-l1";
pub const PGD_L2: &str = "pgd-l2";
pub const SALT_PEPPER: &str = "salt-pepper";
pub const ATTACK_NAMES: [&str; 4] = [PGD_LINF, PGD_L1, PGD_L2, SALT_PEPPER];

/// Reference input size the budgets below are quoted for (3 x 32 x 32).
pub const REFERENCE_DIM: f64 = 3072.0;

/// One PGD configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    pub ball: NormBall,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    pub sparsity: f64,
}

impl AttackSpec {
    pub fn new(name: &str, ball: NormBall, steps: usize, step_size: f64, random_init: bool, sparsity: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid(format!("{name}: steps must be >= 1")));
        }
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(invalid(format!("{name}: step size must be positive, got {step_size}")));
        }
        if ball.norm == Norm::Linf && ball.epsilon > 0.0 && step_size >= 2.0 * ball.epsilon {
            return Err(invalid(format!("{name}: linf step size {step_size} saturates a ball of radius {}", ball.epsilon)));
        }
        if !(sparsity > 0.0 && sparsity <= 1.0) {
            return Err(invalid(format!("{name}: sparsity must be in (0, 1], got {sparsity}")));
        }
        Ok(AttackSpec { name: name.to_string(), ball, steps, step_size, random_init, sparsity })
    }
}

/// Budget, step size and step counts for one norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdDefaults {
    pub epsilon: f64,
    pub step_size: f64,
    pub train_steps: usize,
    pub eval_steps: usize,
}

/// Budgets of 8/255, 2000/255 and 128/255 at 3x32x32, rescaled to `input_len`
/// (linearly for l1, by the square root for l2).
pub fn desk_defaults(norm: Norm, input_len: usize) -> PgdDefaults {
    let r = input_len as f64 / REFERENCE_DIM;
    match norm {
        Norm::Linf => PgdDefaults { epsilon: 8.0 / 255.0, step_size: 0.004, train_steps: 10, eval_steps: 10 },
        Norm::L2 => PgdDefaults { epsilon: 128.0 / 255.0 * r.sqrt(), step_size: 0.1 * r.sqrt(), train_steps: 10, eval_steps: 10 },
        Norm::L1 => PgdDefaults { epsilon: 2000.0 / 255.0 * r, step_size: r, train_steps: 20, eval_steps: 100 },
    }
}

pub fn norm_of_attack(name: &str) -> Result<Norm> {
    match name {
        PGD_LINF => Ok(Norm::Linf),
        PGD_L1 => Ok(Norm::L1),
        PGD_L2 => Ok(Norm::L2),
        other => Err(invalid(format!("{other:?} is not a PGD attack; known attacks: {}", ATTACK_NAMES.join(", ")))),
    }
}

/// PGD spec with desk-scale defaults for `name`.
pub fn default_pgd(name: &str, input_len: usize, eval: bool) -> Result<AttackSpec> {
    let norm = norm_of_attack(name)?;
    let d = desk_defaults(norm, input_len);
    let steps = if eval { d.eval_steps } else { d.train_steps };
    AttackSpec::new(name, NormBall::new(norm, d.epsilon)?, steps, d.step_size, true, DEFAULT_SPARSITY)
}

/// Attack list with a seeded uniform sampler.
#[derive(Clone, Debug)]
pub struct PerturbationSet {
    attacks: Vec<AttackSpec>,
    rng: ChaCha8Rng,
}

impl PerturbationSet {
    pub fn new(attacks: Vec<AttackSpec>, rng: ChaCha8Rng) -> Result<Self> {
        if attacks.is_empty() {
            return Err(invalid("perturbation set is empty"));
        }
        Ok(PerturbationSet { attacks, rng })
    }

    pub fn attacks(&self) -> &[AttackSpec] {
        &self.attacks
    }

    pub fn len(&self) -> usize {
        self.attacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attacks.is_empty()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Uniform draw; every call advances the stream, even for a single attack.
    pub fn sample_index(&mut self) -> usize {
        self.rng.random_range(0..self.attacks.len())
    }
}

pub fn sample_attack(set: &mut PerturbationSet) -> AttackSpec {
    let i = set.sample_index();
    set.attacks[i].clone()
}

/// A point drawn uniformly from the ball around zero, one per sample.
pub fn random_in_ball<R: Rng + ?Sized>(shape: &[usize], ball: NormBall, rng: &mut R) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let n = out.batch();
    let d = out.sample_len();
    let eps = ball.epsilon;
    for i in 0..n {
        let s = out.sample_mut(i);
        match ball.norm {
            Norm::Linf => s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0) * eps),
            Norm::L2 => {
                s.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
                let norm = Norm::L2.of(s);
                let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
                if norm > 0.0 {
                    s.iter_mut().for_each(|v| *v *= radius / norm);
                }
            }
            Norm::L1 => {
                let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
                let total: f64 = e.iter().sum();
                for (v, &ej) in s.iter_mut().zip(&e) {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v = sign * eps * ej / total;
                }
            }
        }
    }
    out
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Projected gradient ascent on the cross-entropy inside `spec.ball` around `x`,
/// with every iterate clamped to [0, 1].
pub fn pgd_attack<M: Model + ?Sized, R: Rng + ?Sized>(model: &M, x: &Tensor, labels: &[usize], spec: &AttackSpec, rng: &mut R) -> Result<Tensor> {
    let mut adv = if spec.random_init {
        let delta = random_in_ball(x.shape(), spec.ball, rng);
        clamp01(&x.add(&delta))
    } else {
        x.clone()
    };
    for step in 0..spec.steps {
        let (loss, grad) = model.input_gradient(&adv, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{}: non-finite loss at step {step}", spec.name)));
        }
        let dir = steepest_direction(&grad, spec.ball.norm, spec.sparsity)?;
        let mut cand = adv;
        cand.axpy(spec.step_size, &dir);
        adv = clamp01(&project_ball(x, &cand, spec.ball)?);
    }
    Ok(adv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaltPepper {
    pub max_fraction: f64,
    pub trials: usize,
}

impl Default for SaltPepper {
    fn default() -> Self {
        SaltPepper { max_fraction: 0.5, trials: 10 }
    }
}

/// Pixel fraction used at trial `t`, doubling up to `max_fraction` at the last trial.
pub fn salt_pepper_fraction(max_fraction: f64, trials: usize, t: usize) -> f64 {
    max_fraction * 0.5f64.powi((trials - 1 - t) as i32)
}

/// Sets growing random subsets of pixels (all channels) to 0 or 1 and keeps
/// the first corruption that changes a correct prediction.
pub fn salt_pepper_attack<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    max_fraction: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if !(max_fraction > 0.0 && max_fraction <= 1.0) {
        return Err(invalid(format!("salt-pepper max_fraction must be in (0, 1], got {max_fraction}")));
    }
    let s = x.shape();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(invalid(format!("salt-pepper expects [n, c, h, w] with {} labels, got {s:?}", labels.len())));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = x.clone();
    if trials == 0 || n == 0 {
        return Ok(out);
    }
    let preds = model.predict(x)?;
    let mut open: Vec<usize> = (0..n).filter(|&i| preds[i] == labels[i]).collect();
    for t in 0..trials {
        if open.is_empty() {
            break;
        }
        let frac = salt_pepper_fraction(max_fraction, trials, t);
        let count = ((frac * hw as f64).round() as usize).clamp(1, hw);
        let mut cand = x.gather(&open);
        for k in 0..open.len() {
            let sample = cand.sample_mut(k);
            for _ in 0..count {
                let p = rng.random_range(0..hw);
                let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                for ch in 0..c {
                    sample[ch * hw + p] = v;
                }
            }
        }
        let lab: Vec<usize> = open.iter().map(|&i| labels[i]).collect();
        let pred = model.predict(&cand)?;
        let mut still = Vec::new();
        for (k, &i) in open.iter().enumerate() {
            if pred[k] != lab[k] {
                out.sample_mut(i).copy_from_slice(cand.sample(k));
            } else {
                still.push(i);
            }
        }
        open = still;
    }
    Ok(out)
}

/// An attack resolved from the registry.
#[derive(Clone, Debug, PartialEq)]
pub enum Attack {
    Pgd(AttackSpec),
    SaltPepper(SaltPepper),
}

impl Attack {
    pub fn name(&self) -> &str {
        match self {
            Attack::Pgd(s) => &s.name,
            Attack::SaltPepper(_) => SALT_PEPPER,
        }
    }

    /// Norm group used when averaging worst cases per norm.
    pub fn group(&self) -> String {
        match self {
            Attack::Pgd(s) => s.ball.norm.to_string(),
            Attack::SaltPepper(_) => SALT_PEPPER.to_string(),
        }
    }

    pub fn run<M: Model + ?Sized>(&self, model: &M, x: &Tensor, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match self {
            Attack::Pgd(spec) => pgd_attack(model, x, labels, spec, rng),
            Attack::SaltPepper(sp) => salt_pepper_attack(model, x, labels, sp.max_fraction, sp.trials, rng),
        }
    }
}

/// Registry lookup with desk-scale defaults.
pub fn resolve(name: &str, input_len: usize, eval: bool) -> Result<Attack> {
    if name == SALT_PEPPER {
        return Ok(Attack::SaltPepper(SaltPepper::default()));
    }
    Ok(Attack::Pgd(default_pgd(name, input_len, eval)?))
}
