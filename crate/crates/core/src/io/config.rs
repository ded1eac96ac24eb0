//! JSON experiment configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attacks::{desk_defaults, norm_of_attack, Attack, AttackSpec, SaltPepper, SALT_PEPPER};
use crate::error::{Error, Result};
use crate::geometry::{Norm, NormBall, DEFAULT_SPARSITY};
use crate::io::data::BlobsParams;
use crate::models::Arch;
use crate::trainer::{Method, NoiseSource, StepOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Blobs,
    Moons,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub train_size: usize,
    pub test_size: usize,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    /// Directory holding `{train,test}_{x,y}.mngt` for `raw`.
    pub path: Option<PathBuf>,
    /// Jitter of the two-moons points.
    pub moons_noise: f64,
    pub blobs: BlobsParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: DatasetName::Blobs,
            train_size: 2048,
            test_size: 512,
            input: [3, 16, 16],
            classes: 10,
            path: None,
            moons_noise: 0.1,
            blobs: BlobsParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: Arch::SmallCnn, width: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub init_scale: f64,
    pub noise: NoiseSource,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { hidden: 32, init_scale: 0.01, noise: NoiseSource::Learned }
    }
}

/// Per-norm PGD settings; `null` keeps the desk-scale default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdOverrides {
    pub epsilon: Option<f64>,
    pub step_size: Option<f64>,
    pub train_steps: Option<usize>,
    pub eval_steps: Option<usize>,
    pub sparsity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub linf: PgdOverrides,
    pub l2: PgdOverrides,
    pub l1: PgdOverrides,
    pub salt_pepper: SaltPepper,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let all: Vec<String> = ["pgd-linf", "pgd-l1", "pgd-l2"].iter().map(|s| s.to_string()).collect();
        AttackConfig {
            train: all.clone(),
            eval: all,
            linf: PgdOverrides::default(),
            l2: PgdOverrides::default(),
            l1: PgdOverrides::default(),
            salt_pepper: SaltPepper::default(),
        }
    }
}

impl AttackConfig {
    fn overrides(&self, norm: Norm) -> &PgdOverrides {
        match norm {
            Norm::Linf => &self.linf,
            Norm::L2 => &self.l2,
            Norm::L1 => &self.l1,
        }
    }

    pub fn pgd_spec(&self, name: &str, input_len: usize, eval: bool) -> Result<AttackSpec> {
        let norm = norm_of_attack(name)?;
        let d = desk_defaults(norm, input_len);
        let o = self.overrides(norm);
        let steps = if eval { o.eval_steps.unwrap_or(d.eval_steps) } else { o.train_steps.unwrap_or(d.train_steps) };
        let ball = NormBall::new(norm, o.epsilon.unwrap_or(d.epsilon))?;
        AttackSpec::new(name, ball, steps, o.step_size.unwrap_or(d.step_size), true, o.sparsity.unwrap_or(DEFAULT_SPARSITY))
    }

    pub fn resolve(&self, name: &str, input_len: usize, eval: bool) -> Result<Attack> {
        if name == SALT_PEPPER {
            let sp = self.salt_pepper;
            if !(sp.max_fraction > 0.0 && sp.max_fraction <= 1.0) || sp.trials == 0 {
                return Err(Error::Config(format!("salt-pepper needs max_fraction in (0, 1] and trials >= 1, got {sp:?}")));
            }
            return Ok(Attack::SaltPepper(sp));
        }
        Ok(Attack::Pgd(self.pgd_spec(name, input_len, eval)?))
    }

    /// Training attacks; salt-pepper is evaluation only.
    pub fn train_specs(&self, input_len: usize) -> Result<Vec<AttackSpec>> {
        self.train.iter().map(|n| self.pgd_spec(n, input_len, false)).collect()
    }

    pub fn eval_suite(&self, names: &[String], input_len: usize) -> Result<Vec<Attack>> {
        names.iter().map(|n| self.resolve(n, input_len, true)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub beta: f64,
    /// Peak of the triangular schedule.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub meta_lr_scale: f64,
    pub gen_lr_scale: f64,
    pub gen_momentum: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            beta: 12.0,
            lr: 0.21,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 128,
            meta_lr_scale: 1.0,
            gen_lr_scale: 1.0,
            gen_momentum: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// First `samples` test examples; `null` uses them all.
    pub samples: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: None, batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub attack: u64,
    pub noise: u64,
    pub init: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 0, attack: 1, noise: 2, init: 3, eval: 4 }
    }
}

impl Seeds {
    /// Same offset added to every stream.
    pub fn shifted(&self, by: u64) -> Seeds {
        Seeds { data: self.data + by, attack: self.attack + by, noise: self.noise + by, init: self.init + by, eval: self.eval + by }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub attacks: AttackConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::MngAc,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            generator: GeneratorConfig::default(),
            attacks: AttackConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex sha256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn input_len(&self) -> usize {
        self.dataset.input.iter().product()
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions { beta: self.trainer.beta, meta_lr_scale: self.trainer.meta_lr_scale, gen_lr_scale: self.trainer.gen_lr_scale, noise: self.generator.noise }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        non_negative("trainer.beta", t.beta)?;
        positive("trainer.lr", t.lr)?;
        non_negative("trainer.momentum", t.momentum)?;
        non_negative("trainer.weight_decay", t.weight_decay)?;
        non_negative("trainer.meta_lr_scale", t.meta_lr_scale)?;
        non_negative("trainer.gen_lr_scale", t.gen_lr_scale)?;
        non_negative("trainer.gen_momentum", t.gen_momentum)?;
        if t.epochs == 0 || t.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be >= 1".into()));
        }
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 || d.classes < 2 || d.input.contains(&0) {
            return Err(Error::Config(format!("bad dataset dims {:?}", d)));
        }
        if d.name == DatasetName::Raw && d.path.is_none() {
            return Err(Error::Config("dataset.path is required for raw datasets".into()));
        }
        if self.model.arch == Arch::SmallCnn && self.model.width == 0 {
            return Err(Error::Config("model.width must be >= 1 for small_cnn".into()));
        }
        if self.generator.hidden == 0 {
            return Err(Error::Config("generator.hidden must be >= 1".into()));
        }
        positive("generator.init_scale", self.generator.init_scale)?;
        for (name, o) in [("linf", &self.attacks.linf), ("l2", &self.attacks.l2), ("l1", &self.attacks.l1)] {
            if let Some(e) = o.epsilon {
                non_negative(&format!("attacks.{name}.epsilon"), e)?;
            }
            if let Some(s) = o.step_size {
                positive(&format!("attacks.{name}.step_size"), s)?;
            }
            if o.train_steps == Some(0) || o.eval_steps == Some(0) {
                return Err(Error::Config(format!("attacks.{name} steps must be >= 1")));
            }
        }
        let n = self.input_len();
        if self.attacks.train.is_empty() && self.method != Method::Nat {
            return Err(Error::Config("attacks.train is empty".into()));
        }
        if self.method == Method::AdvSingle && self.attacks.train.len() != 1 {
            return Err(Error::Config(format!("adv_single needs exactly one training attack, got {}", self.attacks.train.len())));
        }
        self.attacks.train_specs(n).map_err(|e| Error::Config(format!("attacks.train: {e}")))?;
        self.attacks.eval_suite(&self.attacks.eval, n).map_err(|e| Error::Config(format!("attacks.eval: {e}")))?;
        Ok(())
    }

    /// Applies `a.b.c=value` without validating. The value is parsed as JSON, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot.as_object_mut().and_then(|o| o.get_mut(key)).ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Applies every override, then validates the result once.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            self.apply_override(o.as_ref())?;
        }
        self.validate()?;
        Ok(self)
    }
}
