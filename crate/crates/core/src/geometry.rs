//! Norm balls: projections, steepest-ascent directions and distances.
//!
//! All arithmetic on `f64` tensors is per sample, treating every non-batch
//! dimension as one flat vector.

use std::fmt;
use std::str::FromStr;

use mngac_tensor::{CustomOp, Graph, NodeId, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SPARSITY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Conjugate exponent.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Linf,
            Norm::L2 => Norm::L2,
            Norm::Linf => Norm::L1,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(Norm::L1),
            "l2" | "2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(invalid(format!("unknown norm {other:?}"))),
        }
    }
}

/// The ball of radius `epsilon` in the given norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBall {
    pub norm: Norm,
    pub epsilon: f64,
}

impl NormBall {
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(invalid(format!("ball radius must be finite and >= 0, got {epsilon}")));
        }
        Ok(NormBall { norm, epsilon })
    }
}

fn check_pair(center: &Tensor, point: &Tensor) -> Result<()> {
    if center.shape() != point.shape() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", center.shape(), point.shape())));
    }
    if center.shape().is_empty() {
        return Err(invalid("expected a batched tensor"));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Euclidean projection of `v` onto the l1 ball of radius `eps`, by sorting magnitudes.
pub fn project_l1(v: &[f64], eps: f64) -> Vec<f64> {
    if Norm::L1.of(v) <= eps {
        return v.to_vec();
    }
    if eps == 0.0 {
        return vec![0.0; v.len()];
    }
    let tau = l1_threshold(v.iter().map(|x| x.abs()).collect(), eps);
    v.iter().map(|&x| x.signum() * (x.abs() - tau).max(0.0)).collect()
}

/// Soft threshold `tau` with `sum(max(|v| - tau, 0)) = eps`, assuming `||v||_1 > eps`.
fn l1_threshold(mut mags: Vec<f64>, eps: f64) -> f64 {
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cum += u;
        let t = (cum - eps) / (j + 1) as f64;
        if u > t {
            tau = t;
        } else {
            break;
        }
    }
    tau.max(0.0)
}

/// Projects a perturbation onto the ball centered at zero.
pub fn project_delta(delta: &[f64], ball: NormBall) -> Vec<f64> {
    let eps = ball.epsilon;
    match ball.norm {
        Norm::Linf => delta.iter().map(|&d| d.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(delta);
            if n <= eps {
                delta.to_vec()
            } else {
                let s = eps / n;
                delta.iter().map(|&d| d * s).collect()
            }
        }
        Norm::L1 => project_l1(delta, eps),
    }
}

/// Nearest point to `point` inside the ball around `center`, per sample.
///
/// Samples already inside the ball are returned bit-identically.
pub fn project_ball(center: &Tensor, point: &Tensor, ball: NormBall) -> Result<Tensor> {
    check_pair(center, point)?;
    check_finite(center, "center")?;
    check_finite(point, "point")?;
    let mut out = point.clone();
    for i in 0..center.batch() {
        let c = center.sample(i);
        let p = point.sample(i);
        let delta: Vec<f64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
        if ball.norm.of(&delta) <= ball.epsilon {
            continue;
        }
        let proj = project_delta(&delta, ball);
        let dst = out.sample_mut(i);
        match ball.norm {
            Norm::Linf => {
                for j in 0..dst.len() {
                    if delta[j].abs() > ball.epsilon {
                        dst[j] = c[j] + proj[j];
                    }
                }
            }
            _ => {
                for j in 0..dst.len() {
                    dst[j] = c[j] + proj[j];
                }
            }
        }
    }
    Ok(out)
}

/// `||point - center||_p` per sample.
pub fn ball_norm(center: &Tensor, point: &Tensor, norm: Norm) -> Result<Vec<f64>> {
    check_pair(center, point)?;
    Ok((0..center.batch())
        .map(|i| {
            let d: Vec<f64> = point.sample(i).iter().zip(center.sample(i)).map(|(a, b)| a - b).collect();
            norm.of(&d)
        })
        .collect())
}

/// Number of coordinates an l1 step touches.
pub fn sparse_count(len: usize, sparsity: f64) -> usize {
    ((sparsity * len as f64).floor() as usize).clamp(1, len.max(1))
}

/// Unit-norm direction maximizing the inner product with the gradient, per sample.
///
/// For l1 only the top `sparsity` fraction of coordinates by magnitude take
/// a sign step, with ties going to the lowest index.
pub fn steepest_direction(gradient: &Tensor, norm: Norm, sparsity: f64) -> Result<Tensor> {
    if gradient.shape().is_empty() {
        return Err(invalid("expected a batched tensor"));
    }
    check_finite(gradient, "gradient")?;
    if norm == Norm::L1 && !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(invalid(format!("sparsity fraction must be in (0, 1], got {sparsity}")));
    }
    let mut out = gradient.zeros_like();
    for i in 0..gradient.batch() {
        let g = gradient.sample(i);
        let dst = out.sample_mut(i);
        match norm {
            Norm::Linf => {
                for (d, &x) in dst.iter_mut().zip(g) {
                    *d = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Norm::L2 => {
                let n = Norm::L2.of(g);
                if n > 0.0 {
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d = x / n;
                    }
                }
            }
            Norm::L1 => {
                let k = sparse_count(g.len(), sparsity);
                let mut order: Vec<usize> = (0..g.len()).collect();
                order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
                let chosen: Vec<usize> = order.into_iter().take(k).filter(|&j| g[j] != 0.0).collect();
                let w = 1.0 / chosen.len().max(1) as f64;
                for j in chosen {
                    dst[j] = g[j].signum() * w;
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable projection of a batched perturbation node onto the ball at zero.
pub fn project_delta_node<T: Real>(g: &mut Graph<T>, delta: NodeId, ball: NormBall) -> NodeId {
    let value = g.value(delta);
    let n = value.batch();
    let mut out = Vec::with_capacity(value.len());
    let mut cache = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = project_sample(value.sample(i), ball);
        out.extend(r);
        cache.push(c);
    }
    let out = Tensor::from_vec(value.shape(), out);
    g.custom(&[delta], out, Box::new(ProjectOp { cache }))
}

enum SampleCache<T> {
    Identity,
    Mask(Vec<bool>),
    Radial { scale: T, unit: Vec<T> },
    Active { active: Vec<usize>, signs: Vec<f64> },
}

fn project_sample<T: Real>(d: &[T], ball: NormBall) -> (Vec<T>, SampleCache<T>) {
    let eps = ball.epsilon;
    let primal: Vec<f64> = d.iter().map(|x| x.primal()).collect();
    if ball.norm.of(&primal) <= eps {
        return (d.to_vec(), SampleCache::Identity);
    }
    match ball.norm {
        Norm::Linf => {
            let mask: Vec<bool> = primal.iter().map(|x| x.abs() <= eps).collect();
            let r = d.iter().zip(&mask).map(|(&x, &inside)| if inside { x } else { T::from_f64(eps * x.primal().signum()) }).collect();
            (r, SampleCache::Mask(mask))
        }
        Norm::L2 => {
            let mut ss = T::zero();
            for &x in d {
                ss += x * x;
            }
            let norm = ss.sqrt();
            let scale = T::from_f64(eps) / norm;
            let unit: Vec<T> = d.iter().map(|&x| x / norm).collect();
            (d.iter().map(|&x| x * scale).collect(), SampleCache::Radial { scale, unit })
        }
        Norm::L1 => {
            if eps == 0.0 {
                return (vec![T::zero(); d.len()], SampleCache::Mask(vec![false; d.len()]));
            }
            let tau = l1_threshold(primal.iter().map(|x| x.abs()).collect(), eps);
            let active: Vec<usize> = (0..d.len()).filter(|&j| primal[j].abs() > tau).collect();
            let signs: Vec<f64> = active.iter().map(|&j| primal[j].signum()).collect();
            let mut sum = T::zero();
            for (&j, &s) in active.iter().zip(&signs) {
                sum += d[j].scale(s);
            }
            let tau_t = (sum - T::from_f64(eps)).scale(1.0 / active.len() as f64);
            let mut r = vec![T::zero(); d.len()];
            for (&j, &s) in active.iter().zip(&signs) {
                r[j] = (d[j].scale(s) - tau_t).scale(s);
            }
            (r, SampleCache::Active { active, signs })
        }
    }
}

struct ProjectOp<T> {
    cache: Vec<SampleCache<T>>,
}

impl<T: Real> CustomOp<T> for ProjectOp<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gx = Vec::with_capacity(grad.len());
        for (i, cache) in self.cache.iter().enumerate() {
            let g = grad.sample(i);
            match cache {
                SampleCache::Identity => gx.extend_from_slice(g),
                SampleCache::Mask(mask) => gx.extend(g.iter().zip(mask).map(|(&v, &m)| if m { v } else { T::zero() })),
                SampleCache::Radial { scale, unit } => {
                    let mut ug = T::zero();
                    for (&u, &v) in unit.iter().zip(g) {
                        ug += u * v;
                    }
                    gx.extend(g.iter().zip(unit).map(|(&v, &u)| *scale * (v - u * ug)));
                }
                SampleCache::Active { active, signs } => {
                    let mut sg = T::zero();
                    for (&j, &s) in active.iter().zip(signs) {
                        sg += g[j].scale(s);
                    }
                    let mean = sg.scale(1.0 / active.len() as f64);
                    let mut out = vec![T::zero(); g.len()];
                    for (&j, &s) in active.iter().zip(signs) {
                        out[j] = g[j] - mean.scale(s);
                    }
                    gx.extend(out);
                }
            }
        }
        vec![Some(Tensor::from_vec(output.shape(), gx))]
    }
}
