//! Classifiers, the noise generator, and flat parameter containers.

use std::fmt;
use std::str::FromStr;

use mngac_tensor::{Dual, Graph, NodeId, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::geometry::{project_delta_node, NormBall};
use crate::losses::cls_loss_node;

/// Inputs in [0, 1] are mapped to `(x - 0.5) * 4` before the first layer.
pub const INPUT_SHIFT: f64 = -0.5;
pub const INPUT_SCALE: f64 = 4.0;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.zeros_like()).collect() }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.count(), v.len())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, v: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(v)?;
        Ok(p)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(s, b);
        }
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// SHA-256 over the little-endian bytes of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn leaves<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| if trainable { g.param(t.lift()) } else { g.constant(t.lift()) }).collect()
    }

    /// Dual leaves carrying `tangent` (zero when `None`).
    pub fn dual_leaves(&self, g: &mut Graph<Dual>, tangent: Option<&Params>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = match tangent {
                    Some(tp) => t.with_tangent(&tp.tensors[i]),
                    None => t.lift(),
                };
                if trainable {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect()
    }

    /// Gradients for `leaves`, zero where a leaf did not reach the output.
    pub fn collect_grads(&self, g: &Graph<f64>, grads: &mngac_tensor::Grads<f64>, leaves: &[NodeId]) -> Params {
        Params { names: self.names.clone(), tensors: leaves.iter().map(|&id| grads.wrt(g, id)).collect() }
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal tensor of the given shape.
pub fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect())
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-b..b)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    SmallCnn,
}

impl FromStr for Arch {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Arch::Linear),
            "small_cnn" => Ok(Arch::SmallCnn),
            other => Err(invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Linear => "linear",
            Arch::SmallCnn => "small_cnn",
        })
    }
}

/// Anything that can be attacked: logits plus the input gradient of the mean cross-entropy.
pub trait Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: Arch,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    pub width: usize,
    pub params: Params,
}

impl Classifier {
    /// Linear weights start at zero; the CNN uses He-normal convolutions drawn
    /// from `seed` and a zero head, so every run starts at the uniform prediction.
    pub fn new(arch: Arch, input: [usize; 3], classes: usize, width: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 || classes < 2 {
            return Err(invalid(format!("bad classifier dims {input:?} with {classes} classes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        match arch {
            Arch::Linear => {
                params.push("fc.weight", Tensor::zeros(&[classes, c * h * w]));
                params.push("fc.bias", Tensor::zeros(&[classes]));
            }
            Arch::SmallCnn => {
                if width == 0 || h < 4 || w < 4 {
                    return Err(invalid("small_cnn needs width >= 1 and spatial size >= 4"));
                }
                let chans = [(c, width), (width, width), (width, 2 * width), (2 * width, 2 * width)];
                for (i, (ci, co)) in chans.into_iter().enumerate() {
                    params.push(&format!("conv{}.weight", i + 1), he_normal(&[co, ci, 3, 3], ci * 9, 2.0, &mut rng));
                    params.push(&format!("conv{}.bias", i + 1), Tensor::zeros(&[co]));
                }
                let feat = 2 * width * (h / 4) * (w / 4);
                params.push("fc.weight", Tensor::zeros(&[classes, feat]));
                params.push("fc.bias", Tensor::zeros(&[classes]));
            }
        }
        Ok(Classifier { arch, input, classes, width, params })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(invalid(format!("classifier expects [n, {:?}], got {:?}", self.input, s)));
        }
        Ok(())
    }

    /// Logits node for input node `x` given parameter nodes `p` in `params` order.
    pub fn forward_node<T: Real>(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.check_input(g.value(x))?;
        let xn = g.affine(x, INPUT_SCALE, INPUT_SHIFT);
        Ok(match self.arch {
            Arch::Linear => {
                let f = g.flatten(xn);
                g.linear(f, p[0], Some(p[1]))
            }
            Arch::SmallCnn => {
                let mut h = xn;
                for blk in 0..2 {
                    for l in 0..2 {
                        let i = 2 * (2 * blk + l);
                        let c = g.conv2d(h, p[i], Some(p[i + 1]), 1);
                        h = g.relu(c);
                    }
                    h = g.max_pool2(h);
                }
                let f = g.flatten(h);
                g.linear(f, p[8], Some(p[9]))
            }
        })
    }

    /// Mean cross-entropy and its parameter gradient.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Params)> {
        let mut g = Graph::new();
        let p = self.params.leaves(&mut g, true);
        let xi = g.constant(x.clone());
        let logits = self.forward_node(&mut g, &p, xi)?;
        let loss = cls_loss_node(&mut g, logits, labels)?;
        let grads = g.backward(loss);
        Ok((g.value(loss).item(), self.params.collect_grads(&g, &grads, &p)))
    }
}

impl Model for Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.leaves(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward_node(&mut g, &p, xi)?;
        Ok(g.value(out).clone())
    }

    fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.leaves(&mut g, false);
        let xi = g.param(x.clone());
        let logits = self.forward_node(&mut g, &p, xi)?;
        let loss = cls_loss_node(&mut g, logits, labels)?;
        let grads = g.backward(loss);
        Ok((g.value(loss).item(), grads.wrt(&g, xi)))
    }
}

/// Noise generator: four 3x3 convolutions over `[z, x]` with LeakyReLU
/// activations, plus a 1x1 convolution of `x` added to the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub channels: usize,
    pub hidden: usize,
    pub params: Params,
}

impl Generator {
    /// `init_scale` multiplies the output and skip weights so initial noise is small.
    pub fn new(channels: usize, hidden: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(invalid("generator needs channels >= 1 and hidden >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let layers = [(2 * channels, hidden), (hidden, hidden), (hidden, hidden), (hidden, channels)];
        for (i, (ci, co)) in layers.into_iter().enumerate() {
            let fan = ci * 9;
            let mut w = uniform_fan_in(&[co, ci, 3, 3], fan, &mut rng);
            let mut b = uniform_fan_in(&[co], fan, &mut rng);
            if i == 3 {
                w = w.scale(init_scale);
                b = b.zeros_like();
            }
            params.push(&format!("conv{}.weight", i + 1), w);
            params.push(&format!("conv{}.bias", i + 1), b);
        }
        let skip = uniform_fan_in(&[channels, channels, 1, 1], channels, &mut rng).scale(init_scale);
        params.push("skip.weight", skip);
        params.push("skip.bias", Tensor::zeros(&[channels]));
        Ok(Generator { channels, hidden, params })
    }

    /// Noise field node with the shape of `x`.
    pub fn forward_node<T: Real>(&self, g: &mut Graph<T>, p: &[NodeId], z: NodeId, x: NodeId) -> Result<NodeId> {
        let (zs, xs) = (g.value(z).shape(), g.value(x).shape());
        if zs != xs || xs.len() != 4 || xs[1] != self.channels {
            return Err(invalid(format!("generator expects z and x of shape [n, {}, h, w], got {zs:?} and {xs:?}", self.channels)));
        }
        let mut h = g.concat_channels(z, x);
        for l in 0..3 {
            let c = g.conv2d(h, p[2 * l], Some(p[2 * l + 1]), 1);
            h = g.leaky_relu(c, LEAKY_SLOPE);
        }
        let out = g.conv2d(h, p[6], Some(p[7]), 1);
        let skip = g.conv2d(x, p[8], Some(p[9]), 0);
        Ok(g.add(out, skip))
    }

    pub fn noise(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.leaves(&mut g, false);
        let (zi, xi) = (g.constant(z.clone()), g.constant(x.clone()));
        let out = self.forward_node(&mut g, &p, zi, xi)?;
        Ok(g.value(out).clone())
    }
}

/// `clamp01(x + proj(noise))` as a tape node.
pub fn augment_node<T: Real>(g: &mut Graph<T>, noise: NodeId, x: NodeId, ball: NormBall) -> NodeId {
    let pd = project_delta_node(g, noise, ball);
    let s = g.add(x, pd);
    g.clamp(s, 0.0, 1.0)
}

/// Generator output projected onto `ball` around `x`, using noise `z`.
pub fn augmented_with(gen: &Generator, x: &Tensor, z: &Tensor, ball: NormBall) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = gen.params.leaves(&mut g, false);
    let (zi, xi) = (g.constant(z.clone()), g.constant(x.clone()));
    let noise = gen.forward_node(&mut g, &p, zi, xi)?;
    let out = augment_node(&mut g, noise, xi, ball);
    Ok(g.value(out).clone())
}

/// Draws `z ~ N(0, I)` from `rng` and returns the augmented batch.
pub fn generate_augmented<R: Rng + ?Sized>(gen: &Generator, x: &Tensor, ball: NormBall, rng: &mut R) -> Result<Tensor> {
    let z = normal_tensor(x.shape(), rng);
    augmented_with(gen, x, &z, ball)
}

/// Augmentation with plain Gaussian noise in place of the generator.
pub fn gaussian_augmented<R: Rng + ?Sized>(x: &Tensor, ball: NormBall, rng: &mut R) -> Tensor {
    let z = normal_tensor(x.shape(), rng);
    let mut g = Graph::<f64>::new();
    let (zi, xi) = (g.constant(z), g.constant(x.clone()));
    let out = augment_node(&mut g, zi, xi, ball);
    g.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ball_norm, Norm};

    #[test]
    fn linear_parameter_count() {
        let m = Classifier::new(Arch::Linear, [3, 8, 8], 10, 0, 0).unwrap();
        assert_eq!(m.params.count(), 192 * 10 + 10);
    }

    #[test]
    fn cnn_shapes_and_determinism() {
        let a = Classifier::new(Arch::SmallCnn, [3, 32, 32], 10, 4, 7).unwrap();
        let b = Classifier::new(Arch::SmallCnn, [3, 32, 32], 10, 4, 7).unwrap();
        let c = Classifier::new(Arch::SmallCnn, [3, 32, 32], 10, 4, 8).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        assert_ne!(a.params.hash(), c.params.hash());
        let x = Tensor::full(&[8, 3, 32, 32], 0.5);
        let l = a.logits(&x).unwrap();
        assert_eq!(l.shape(), &[8, 10]);
        assert_eq!(l, a.logits(&x).unwrap());
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Classifier::new(Arch::SmallCnn, [2, 4, 4], 3, 2, 5).unwrap();
        let x = Tensor::from_vec(&[3, 2, 4, 4], (0..96).map(|_| rng.random_range(0.0..1.0)).collect());
        let y = [0, 2, 1];
        let (_, grad) = m.loss_and_grad(&x, &y).unwrap();
        let loss_at = |w: &[f64]| {
            let mm = Classifier { params: m.params.with_flat(w).unwrap(), ..m.clone() };
            crate::losses::cls_loss(&mm.logits(&x).unwrap(), &y).unwrap()
        };
        let fd = crate::oracles::fd_gradient(loss_at, &m.params.flat(), 1e-6).unwrap();
        for (a, b) in grad.flat().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let (_, gx) = m.input_gradient(&x, &y).unwrap();
        let fdx =
            crate::oracles::fd_gradient(|v| crate::losses::cls_loss(&m.logits(&Tensor::from_vec(x.shape(), v.to_vec())).unwrap(), &y).unwrap(), x.data(), 1e-6)
                .unwrap();
        for (a, b) in gx.data().iter().zip(&fdx) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_generator_leaves_input() {
        let mut gen = Generator::new(3, 4, 1.0, 0).unwrap();
        for (name, t) in gen.params.names.iter().zip(gen.params.tensors.iter_mut()) {
            if name.starts_with("conv4") || name.starts_with("skip") {
                *t = t.zeros_like();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|i| i as f64 / 96.0).collect());
        let out = generate_augmented(&gen, &x, NormBall::new(Norm::L2, 0.5).unwrap(), &mut rng).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_radius_gives_input() {
        let gen = Generator::new(3, 4, 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::full(&[2, 3, 4, 4], 0.25);
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let out = generate_augmented(&gen, &x, NormBall::new(norm, 0.0).unwrap(), &mut rng).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn augmentation_stays_in_ball() {
        let gen = Generator::new(3, 4, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ball = NormBall::new(Norm::Linf, 8.0 / 255.0).unwrap();
        for _ in 0..100 {
            let x = Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|_| rng.random::<f64>()).collect());
            let out = generate_augmented(&gen, &x, ball, &mut rng).unwrap();
            for n in ball_norm(&x, &out, Norm::Linf).unwrap() {
                assert!(n <= 8.0 / 255.0 + 1e-6);
            }
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
