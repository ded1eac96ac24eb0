//! Binary training checkpoints.
//!
//! Layout: `MNGC`, version `u32`, header length `u64`, JSON header, payload
//! length `u64`, little-endian `f64` payload, sha256 of everything before it.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::config::ExperimentConfig;
use crate::io::data::Dataset;
use crate::io::run::build_trainer;
use crate::models::Params;
use crate::tensor::Tensor;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 4] = b"MNGC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_fingerprint: String,
    step: u64,
    theta: Vec<TensorEntry>,
    phi: Vec<TensorEntry>,
    attack_rng: RngState,
    noise_rng: RngState,
    set_rng: RngState,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub theta: Params,
    pub phi: Params,
    pub theta_momentum: Params,
    pub phi_momentum: Params,
    pub attack_rng: RngState,
    pub noise_rng: RngState,
    pub set_rng: RngState,
}

fn entries(p: &Params) -> Vec<TensorEntry> {
    p.names.iter().zip(&p.tensors).map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect()
}

fn read_params(entries: &[TensorEntry], payload: &mut impl Iterator<Item = f64>) -> Result<Params> {
    let mut p = Params::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = payload.by_ref().take(n).collect();
        if data.len() != n {
            return Err(Error::Checkpoint(format!("payload ends inside {}", e.name)));
        }
        p.push(&e.name, Tensor::new(&e.shape, data).map_err(|err| Error::Checkpoint(err.to_string()))?);
    }
    Ok(p)
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Checkpoint("file truncated".into()))?;
    let s = &buf[*at..end];
    *at = end;
    Ok(s)
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, trainer: &Trainer) -> Self {
        let s = &trainer.state;
        Checkpoint {
            config: config.clone(),
            step: s.step,
            theta: s.theta.params.clone(),
            phi: s.phi.params.clone(),
            theta_momentum: s.opt_theta.buffers.clone(),
            phi_momentum: s.opt_phi.buffers.clone(),
            attack_rng: RngState::of(&s.attack_rng),
            noise_rng: RngState::of(&s.noise_rng),
            set_rng: RngState::of(trainer.set.rng()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint(),
            step: self.step,
            theta: entries(&self.theta),
            phi: entries(&self.phi),
            attack_rng: self.attack_rng.clone(),
            noise_rng: self.noise_rng.clone(),
            set_rng: self.set_rng.clone(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        let groups = [&self.theta, &self.phi, &self.theta_momentum, &self.phi_momentum];
        let count: usize = groups.iter().map(|p| p.count()).sum();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for p in groups {
            for t in &p.tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(buf, &mut at, 4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(buf, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        if buf.len() < 32 {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(take(body, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(body, &mut at, hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = u64::from_le_bytes(take(body, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(body, &mut at, count.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?)?;
        if at != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let mut vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let theta = read_params(&header.theta, &mut vals)?;
        let phi = read_params(&header.phi, &mut vals)?;
        let theta_momentum = read_params(&header.theta, &mut vals)?;
        let phi_momentum = read_params(&header.phi, &mut vals)?;
        if vals.next().is_some() {
            return Err(Error::Checkpoint("payload longer than declared tensors".into()));
        }
        if header.config.fingerprint() != header.config_fingerprint {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            theta,
            phi,
            theta_momentum,
            phi_momentum,
            attack_rng: header.attack_rng,
            noise_rng: header.noise_rng,
            set_rng: header.set_rng,
        })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Trainer positioned at `self.step` over `train`.
    pub fn restore(&self, train: Dataset) -> Result<Trainer> {
        let mut t = build_trainer(&self.config, train)?;
        let shapes_match = |a: &Params, b: &Params| a.names == b.names && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.shape() == y.shape());
        if !shapes_match(&t.state.theta.params, &self.theta) || !shapes_match(&t.state.phi.params, &self.phi) {
            return Err(Error::Checkpoint("parameter shapes do not match the stored config".into()));
        }
        let s = &mut t.state;
        s.theta.params = self.theta.clone();
        s.phi.params = self.phi.clone();
        s.opt_theta.buffers = self.theta_momentum.clone();
        s.opt_phi.buffers = self.phi_momentum.clone();
        s.step = self.step;
        s.attack_rng = self.attack_rng.restore()?;
        s.noise_rng = self.noise_rng.restore()?;
        t.set.set_rng(self.set_rng.restore()?);
        Ok(t)
    }
}
