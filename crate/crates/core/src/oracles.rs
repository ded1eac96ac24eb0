//! Finite-difference and bisection references.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Norm, NormBall};
use crate::losses::{ac_loss, ac_loss_node, cls_loss, cls_loss_node, PosteriorTriple};
use crate::models::{augmented_with, normal_tensor, Arch, Classifier, Generator, Model};
use crate::tensor::{Graph, Tensor};
use crate::trainer::meta_gradient;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub h: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Coordinatewise comparison of an analytic gradient with a numeric one.
pub fn compare(analytic: &[f64], numeric: &[f64], h: f64, tolerance: f64) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(invalid(format!("gradient lengths differ: {} vs {}", analytic.len(), numeric.len())));
    }
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        if e.is_nan() || e > worst.0 {
            worst = (if e.is_nan() { f64::INFINITY } else { e }, i);
        }
    }
    Ok(GradCheckReport { max_rel_err: worst.0, worst_index: worst.1, h, tolerance, passed: worst.0 <= tolerance })
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Numeric(format!("non-finite function value around coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences of `phi -> eval_loss(theta - alpha * train_grad(theta, phi))`.
///
/// `train_grad` returns the gradient of the inner training loss with respect to `theta`.
pub fn fd_hypergradient<G, E>(mut train_grad: G, mut eval_loss: E, theta: &[f64], phi: &[f64], alpha: f64, h: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], &[f64]) -> Vec<f64>,
    E: FnMut(&[f64]) -> f64,
{
    let mut outer = |phi: &[f64]| {
        let g = train_grad(theta, phi);
        let hat: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - alpha * gi).collect();
        eval_loss(&hat)
    };
    fd_gradient(&mut outer, phi, h)
}

/// Hypergradient at steps `h` and `h / 3`, or `None` when the two disagree by more
/// than `agreement`, which happens when a perturbation crosses a kink.
#[allow(clippy::too_many_arguments)]
pub fn fd_hypergradient_smooth<G, E>(
    mut train_grad: G,
    mut eval_loss: E,
    theta: &[f64],
    phi: &[f64],
    alpha: f64,
    h: f64,
    agreement: f64,
) -> Result<Option<Vec<f64>>>
where
    G: FnMut(&[f64], &[f64]) -> Vec<f64>,
    E: FnMut(&[f64]) -> f64,
{
    let coarse = fd_hypergradient(&mut train_grad, &mut eval_loss, theta, phi, alpha, h)?;
    let fine = fd_hypergradient(&mut train_grad, &mut eval_loss, theta, phi, alpha, h / 3.0)?;
    let r = compare(&coarse, &fine, h, agreement)?;
    Ok(r.passed.then_some(coarse))
}

/// Euclidean projection onto the l1 ball by bisection on the soft threshold.
pub fn l1_projection_oracle(point: &[f64], epsilon: f64) -> Vec<f64> {
    let l1: f64 = point.iter().map(|v| v.abs()).sum();
    if l1 <= epsilon {
        return point.to_vec();
    }
    let mass = |tau: f64| point.iter().map(|v| (v.abs() - tau).max(0.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, point.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    point.iter().map(|v| v.signum() * (v.abs() - tau).max(0.0)).collect()
}

/// Small problem on which the trainer's meta-gradient is checked: a linear
/// classifier with 30 parameters on 1x3x3 inputs and a narrow generator.
pub struct MetaProblem {
    pub theta: Classifier,
    pub phi: Generator,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub x_adv: Tensor,
    pub ball: NormBall,
}

impl MetaProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Classifier::new(Arch::Linear, [1, 3, 3], 3, 0, seed)?;
        let flat: Vec<f64> = (0..theta.params.count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        theta.params.set_flat(&flat)?;
        let phi = Generator::new(1, 2, 1.0, seed.wrapping_add(100))?;
        let n = 4;
        let x = Tensor::from_vec(&[n, 1, 3, 3], (0..n * 9).map(|_| rng.random_range(0.3..0.7)).collect());
        let y = (0..n).map(|_| rng.random_range(0..3)).collect();
        let x_adv = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect());
        let (norm, eps) = [(Norm::L2, 0.1), (Norm::L1, 0.2), (Norm::Linf, 0.5)][(seed % 3) as usize];
        Ok(MetaProblem { theta, phi, x, y, x_adv, ball: NormBall::new(norm, eps)? })
    }
}

/// Trainer meta-gradient against [`fd_hypergradient_smooth`]. Draws of `z` whose
/// finite differences straddle a kink are skipped; up to eight are tried.
pub fn meta_gradient_check(seed: u64, alpha: f64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let p = MetaProblem::new(seed)?;
    for attempt in 0..8 {
        let mut zr = ChaCha8Rng::seed_from_u64(seed);
        zr.set_stream(attempt + 1);
        let z = normal_tensor(p.x.shape(), &mut zr);
        let train_grad = |th: &[f64], ph: &[f64]| -> Vec<f64> {
            let run = || -> Result<Vec<f64>> {
                let gen = Generator { params: p.phi.params.with_flat(ph)?, ..p.phi.clone() };
                let aug = augmented_with(&gen, &p.x, &z, p.ball)?;
                let m = Classifier { params: p.theta.params.with_flat(th)?, ..p.theta.clone() };
                Ok(m.loss_and_grad(&aug, &p.y)?.1.flat())
            };
            run().unwrap_or_else(|_| vec![f64::NAN; th.len()])
        };
        let eval_loss = |th: &[f64]| -> f64 {
            let run = || -> Result<f64> {
                let m = Classifier { params: p.theta.params.with_flat(th)?, ..p.theta.clone() };
                cls_loss(&m.logits(&p.x_adv)?, &p.y)
            };
            run().unwrap_or(f64::NAN)
        };
        let fd = fd_hypergradient_smooth(train_grad, eval_loss, &p.theta.params.flat(), &p.phi.params.flat(), alpha, h, tolerance)?;
        if let Some(fd) = fd {
            let analytic = meta_gradient(&p.theta, &p.phi, &p.x, &p.y, &p.x_adv, &z, p.ball, alpha)?;
            return compare(&analytic.flat(), &fd, h, tolerance);
        }
    }
    Err(Error::Numeric(format!("seed {seed}: every noise draw sits on a projection kink")))
}

/// Logit gradients of the cross-entropy and the consistency loss against central differences.
pub fn loss_gradient_check(seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (5, 4);
    let mut draw = || Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect());
    let (clean, adv, aug) = (draw(), draw(), draw());
    let y: Vec<usize> = (0..n).map(|i| i % c).collect();

    let mut g = Graph::<f64>::new();
    let (ci, ai, gi) = (g.param(clean.clone()), g.param(adv.clone()), g.param(aug.clone()));
    let ce = cls_loss_node(&mut g, ai, &y)?;
    let js = ac_loss_node(&mut g, ci, ai, gi)?;
    let ce_grad = g.backward(ce).get(ai).cloned().unwrap_or_else(|| adv.zeros_like());
    let js_grads = g.backward(js);
    let mut analytic = ce_grad.data().to_vec();
    for id in [ci, ai, gi] {
        analytic.extend_from_slice(js_grads.get(id).map(|t| t.data()).unwrap_or(&[]));
    }

    let mut numeric = fd_gradient(|v| cls_loss(&Tensor::from_vec(&[n, c], v.to_vec()), &y).unwrap_or(f64::NAN), adv.data(), h)?;
    let all: Vec<f64> = [clean.data(), adv.data(), aug.data()].concat();
    let k = n * c;
    let js_loss = |v: &[f64]| {
        let t = |i: usize| Tensor::from_vec(&[n, c], v[i * k..(i + 1) * k].to_vec());
        PosteriorTriple::from_logits(&t(0), &t(1), &t(2)).map(|p| ac_loss(&p)).unwrap_or(f64::NAN)
    };
    numeric.extend(fd_gradient(js_loss, &all, h)?);
    compare(&analytic, &numeric, h, tolerance)
}
