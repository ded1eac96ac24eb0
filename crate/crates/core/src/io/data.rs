//! Datasets: synthetic blobs and moons, or raw tensor directories.

use std::f64::consts::PI;
use std::path::Path;

use mngac_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rawtensor::{read_f32, read_i64};
use crate::error::{invalid, Error, Result};

/// Images in [0, 1] with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(invalid(format!("images must be [n, c, h, w], got {:?}", x.shape())));
        }
        if x.batch() != y.len() {
            return Err(invalid(format!("{} images but {} labels", x.batch(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.gather(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// First `n` examples.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(invalid(format!("requested {n} examples, only {} available", self.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, y) = self.batch(&idx);
        Ok(Dataset { x, y, classes: self.classes })
    }
}

/// Order of the examples in `epoch`, derived only from `seed` and `epoch`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Blob image generator settings.
///
/// Each class combines three cues: a uniform tint of the whole image, a
/// Gaussian blob at a class position, and a single bright key pixel on the
/// last channel. Blob and key show the true class only with the given
/// fidelity. The tint is tiny in every pixel but spread over all of them, so
/// it survives l2-bounded perturbations and not linf ones; the key pixel is the
/// reverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsParams {
    pub tint: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub blob_fidelity: f64,
    pub key_amplitude: f64,
    pub key_fidelity: f64,
    pub noise_sigma: f64,
    pub template_seed: u64,
}

impl Default for BlobsParams {
    fn default() -> Self {
        BlobsParams {
            tint: 0.02,
            blob_sigma: 1.2,
            blob_amplitude: 0.1,
            blob_fidelity: 0.6,
            key_amplitude: 0.14,
            key_fidelity: 0.97,
            noise_sigma: 0.01,
            template_seed: 1234,
        }
    }
}

struct BlobTemplates {
    tints: Vec<Vec<f64>>,
    blobs: Vec<Vec<f64>>,
    keys: Vec<usize>,
}

fn templates(shape: [usize; 3], classes: usize, p: &BlobsParams) -> Result<BlobTemplates> {
    let [c, h, w] = shape;
    let hw = h * w;
    if classes > hw {
        return Err(invalid(format!("blobs needs at least {classes} pixels per channel")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.template_seed);
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|k| [if k & 4 == 0 { -1.0 } else { 1.0 }, if k & 2 == 0 { -1.0 } else { 1.0 }, if k & 1 == 0 { -1.0 } else { 1.0 }])
        .chain([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        .collect();
    let tints = (0..classes)
        .map(|k| if c == 3 && k < corners.len() { corners[k].to_vec() } else { (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect() })
        .collect();
    let mut cells: Vec<usize> = (0..hw).collect();
    cells.shuffle(&mut rng);
    let mut key_cells: Vec<usize> = (0..hw).collect();
    key_cells.shuffle(&mut rng);
    let mut blobs = Vec::with_capacity(classes);
    for &pos in cells.iter().take(classes) {
        let (cy, cx) = ((pos / w) as f64, (pos % w) as f64);
        let mut color: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        if c > 1 {
            color[c - 1] = 0.0;
        }
        let mut img = vec![0.0; c * hw];
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-r2 / (2.0 * p.blob_sigma * p.blob_sigma)).exp();
                for ch in 0..c {
                    img[ch * hw + y * w + x] = color[ch] * v;
                }
            }
        }
        blobs.push(img);
    }
    let keys = key_cells.iter().take(classes).map(|&k| (c - 1) * hw + k).collect();
    Ok(BlobTemplates { tints, blobs, keys })
}

/// `n` blob images drawn from `rng`.
pub fn blobs(n: usize, shape: [usize; 3], classes: usize, p: &BlobsParams, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("blobs needs at least 2 classes"));
    }
    let t = templates(shape, classes, p)?;
    let [c, h, w] = shape;
    let (hw, d) = (h * w, c * h * w);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let noisy = |rng: &mut ChaCha8Rng, y: usize, fidelity: f64| {
        if rng.random::<f64>() < fidelity {
            y
        } else {
            rng.random_range(0..classes)
        }
    };
    for _ in 0..n {
        let y = rng.random_range(0..classes);
        let yb = noisy(rng, y, p.blob_fidelity);
        let yk = noisy(rng, y, p.key_fidelity);
        let mut img = vec![0.5; d];
        for (j, v) in img.iter_mut().enumerate() {
            *v += p.blob_amplitude * t.blobs[yb][j] + p.tint * t.tints[y][j / hw];
        }
        img[t.keys[yk]] += p.key_amplitude;
        for v in img.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v = (*v + p.noise_sigma * e).clamp(0.0, 1.0);
        }
        data.extend(img);
        labels.push(y);
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data), labels, classes)
}

/// Two interleaved half circles rendered as a Gaussian dot on every channel.
pub fn moons(n: usize, shape: [usize; 3], noise: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..2usize);
        let t = rng.random_range(0.0..PI);
        let (mut px, mut py) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        px += noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        py += noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let col = (px + 1.5) / 4.0 * (w as f64 - 1.0);
        let row = (1.5 - py) / 2.5 * (h as f64 - 1.0);
        let sigma = (h.min(w) as f64 / 16.0).max(0.75);
        for _ in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let r2 = (yy as f64 - row).powi(2) + (xx as f64 - col).powi(2);
                    data.push((-r2 / (2.0 * sigma * sigma)).exp());
                }
            }
        }
        labels.push(y);
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data), labels, 2)
}

/// Loads `{split}_x.mngt` (f32 images) and `{split}_y.mngt` (i64 labels).
pub fn load_raw(dir: &Path, split: &str, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let x = read_f32(&dir.join(format!("{split}_x.mngt")))?;
    let (dims, y) = read_i64(&dir.join(format!("{split}_y.mngt")))?;
    let s = x.shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(Error::Format(format!("{split} images have shape {s:?}, expected [n, {shape:?}]")));
    }
    if dims != [s[0]] {
        return Err(Error::Format(format!("{split} labels have dims {dims:?}, expected [{}]", s[0])));
    }
    let y = y.into_iter().map(|v| usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))).collect::<Result<Vec<_>>>()?;
    Dataset::new(x, y, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded_and_bounded() {
        let p = BlobsParams::default();
        let a = blobs(20, [3, 8, 8], 10, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = blobs(20, [3, 8, 8], 10, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = epoch_permutation(100, 3, 2);
        assert_ne!(p, epoch_permutation(100, 3, 3));
        p.sort();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn moons_have_two_classes() {
        let d = moons(50, [1, 16, 16], 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.classes, 2);
        assert!(d.y.contains(&0) && d.y.contains(&1));
    }
}
