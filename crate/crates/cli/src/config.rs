//! Strict `key = value` run configuration.
//!
//! Keys are unique across sections, so a key may appear under its own
//! `[section]` header or before any header. Unknown keys, unknown sections,
//! repeated keys and malformed lines are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rsrlab_core::attack::AttackConfig;
use rsrlab_core::dataio::CorruptionSpec;
use rsrlab_core::losses::LossWeights;
use rsrlab_core::model::{
    DiscriminatorConfig, FeatureConfig, GeneratorArch, GeneratorConfig, ModelConfig,
};
use rsrlab_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Parse { line: usize, message: String },
    UnknownKey { line: Option<usize>, key: String },
    Invalid { key: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, message } => write!(f, "line {line}: {message}"),
            ConfigError::UnknownKey { line: Some(line), key } => write!(f, "line {line}: unknown key '{key}'"),
            ConfigError::UnknownKey { line: None, key } => write!(f, "unknown key '{key}'"),
            ConfigError::Invalid { key, message } => write!(f, "invalid value for '{key}': {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Which terms of the reconstruction objective the attack maximises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    L1,
    Percep,
    Both,
}

impl LossSelect {
    pub fn from_flags(use_l1: bool, use_percep: bool) -> Option<Self> {
        match (use_l1, use_percep) {
            (true, true) => Some(LossSelect::Both),
            (true, false) => Some(LossSelect::L1),
            (false, true) => Some(LossSelect::Percep),
            (false, false) => None,
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            LossSelect::L1 => (true, false),
            LossSelect::Percep => (false, true),
            LossSelect::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossSelect::L1 => "l1",
            LossSelect::Percep => "percep",
            LossSelect::Both => "both",
        }
    }
}

impl FromStr for LossSelect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(LossSelect::L1),
            "percep" | "perceptual" => Ok(LossSelect::Percep),
            "both" => Ok(LossSelect::Both),
            other => Err(format!("expected l1, percep or both, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Rrdb,
    Nearest,
    Mean,
}

impl FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "rrdb" => Ok(GeneratorKind::Rrdb),
            "nearest" => Ok(GeneratorKind::Nearest),
            "mean" => Ok(GeneratorKind::Mean),
            other => Err(format!("expected rrdb, nearest or mean, got '{other}'")),
        }
    }
}

impl GeneratorKind {
    fn name(self) -> &'static str {
        match self {
            GeneratorKind::Rrdb => "rrdb",
            GeneratorKind::Nearest => "nearest",
            GeneratorKind::Mean => "mean",
        }
    }
}

/// Every effective setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub hr_patch: usize,
    pub patch_stride: usize,
    pub synthetic_train_images: usize,
    pub synthetic_train_size: usize,
    pub synthetic_eval_images: usize,
    pub synthetic_eval_size: usize,
    pub data_seed: u64,
    // [model]
    pub generator: GeneratorKind,
    pub scale: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub disc_channels: usize,
    pub feature_channels: usize,
    pub checkpoint: Option<PathBuf>,
    // [train]
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub l1_warmup_iters: usize,
    pub robust_iters: usize,
    pub adv_fraction: f64,
    pub w_l1: f64,
    pub w_percep: f64,
    pub w_gan: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    // [attack]
    pub epsilon: f64,
    pub iters: usize,
    /// `None` means ε/2.
    pub alpha: Option<f64>,
    pub structure_scale: f64,
    pub use_l1: bool,
    pub use_percep: bool,
    pub recenter: bool,
    // [eval]
    pub corruptions: Vec<CorruptionSpec>,
    // [ablate]
    pub sweep_epsilon: Vec<f64>,
    pub sweep_iters: Vec<usize>,
    pub sweep_structure: Vec<f64>,
    pub sweep_loss: Vec<LossSelect>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let train = TrainConfig::default();
        let attack = AttackConfig::default();
        RunConfig {
            train_dir: None,
            eval_dir: None,
            input_dir: None,
            output_dir: PathBuf::from("runs"),
            hr_patch: 64,
            patch_stride: 64,
            synthetic_train_images: 50,
            synthetic_train_size: 128,
            synthetic_eval_images: 8,
            synthetic_eval_size: 64,
            data_seed: 1,
            generator: GeneratorKind::Rrdb,
            scale: gen.scale,
            channels: gen.channels,
            num_blocks: gen.num_blocks,
            base_channels: gen.base_channels,
            growth_channels: gen.growth_channels,
            disc_channels: 16,
            feature_channels: FeatureConfig::default().base_channels,
            checkpoint: None,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_eps: train.adam_eps,
            batch_size: train.batch_size,
            pretrain_iters: 1000,
            l1_warmup_iters: 0,
            robust_iters: 2000,
            adv_fraction: train.adv_fraction,
            w_l1: train.weights.w_l1,
            w_percep: train.weights.w_percep,
            w_gan: train.weights.w_gan,
            checkpoint_every: train.checkpoint_every,
            seed: 0,
            epsilon: attack.epsilon,
            iters: attack.iters,
            alpha: None,
            structure_scale: attack.structure_scale,
            use_l1: attack.use_l1,
            use_percep: attack.use_percep,
            recenter: attack.recenter,
            corruptions: ["gaussian:0.04", "salt_pepper:0.02", "quantize:16"]
                .iter()
                .map(|s| s.parse().expect("default corruption"))
                .collect(),
            sweep_epsilon: [10.0, 12.0, 14.0, 16.0, 18.0].iter().map(|v| v / 255.0).collect(),
            sweep_iters: vec![2, 4, 6, 8],
            sweep_structure: vec![1.0, 2.0],
            sweep_loss: vec![LossSelect::L1, LossSelect::Percep],
        }
    }
}

/// `(section, key)` in output order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "train_dir"),
    ("data", "eval_dir"),
    ("data", "input_dir"),
    ("data", "output_dir"),
    ("data", "hr_patch"),
    ("data", "patch_stride"),
    ("data", "synthetic_train_images"),
    ("data", "synthetic_train_size"),
    ("data", "synthetic_eval_images"),
    ("data", "synthetic_eval_size"),
    ("data", "data_seed"),
    ("model", "generator"),
    ("model", "scale"),
    ("model", "channels"),
    ("model", "num_blocks"),
    ("model", "base_channels"),
    ("model", "growth_channels"),
    ("model", "disc_channels"),
    ("model", "feature_channels"),
    ("model", "checkpoint"),
    ("train", "learning_rate"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "adam_eps"),
    ("train", "batch_size"),
    ("train", "pretrain_iters"),
    ("train", "l1_warmup_iters"),
    ("train", "robust_iters"),
    ("train", "adv_fraction"),
    ("train", "w_l1"),
    ("train", "w_percep"),
    ("train", "w_gan"),
    ("train", "checkpoint_every"),
    ("train", "seed"),
    ("attack", "epsilon"),
    ("attack", "iters"),
    ("attack", "alpha"),
    ("attack", "structure_scale"),
    ("attack", "use_l1"),
    ("attack", "use_percep"),
    ("attack", "recenter"),
    ("eval", "corruptions"),
    ("ablate", "sweep_epsilon"),
    ("ablate", "sweep_iters"),
    ("ablate", "sweep_structure"),
    ("ablate", "sweep_loss"),
];

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

/// A real number, optionally written as a fraction `a/b`.
pub fn parse_real(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("'{s}' is not a number or fraction"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("'{s}' is not a number or fraction"))?;
            if b == 0.0 {
                return Err(format!("'{s}' divides by zero"));
            }
            a / b
        }
        None => s.parse().map_err(|_| format!("'{s}' is not a number"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

fn parse_int<T: FromStr>(s: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("'{}' is not a non-negative integer", s.trim()))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn parse_path(s: &str) -> Option<PathBuf> {
    let s = s.trim();
    (!s.is_empty()).then(|| PathBuf::from(s))
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(item)
        .collect()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Assign one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            key: key.to_string(),
            message,
        };
        let v = value.trim();
        match key {
            "train_dir" => self.train_dir = parse_path(v),
            "eval_dir" => self.eval_dir = parse_path(v),
            "input_dir" => self.input_dir = parse_path(v),
            "output_dir" => {
                self.output_dir = parse_path(v).ok_or_else(|| invalid("output_dir must not be empty".into()))?
            }
            "hr_patch" => self.hr_patch = parse_int(v).map_err(invalid)?,
            "patch_stride" => self.patch_stride = parse_int(v).map_err(invalid)?,
            "synthetic_train_images" => self.synthetic_train_images = parse_int(v).map_err(invalid)?,
            "synthetic_train_size" => self.synthetic_train_size = parse_int(v).map_err(invalid)?,
            "synthetic_eval_images" => self.synthetic_eval_images = parse_int(v).map_err(invalid)?,
            "synthetic_eval_size" => self.synthetic_eval_size = parse_int(v).map_err(invalid)?,
            "data_seed" => self.data_seed = parse_int(v).map_err(invalid)?,
            "generator" => self.generator = v.parse().map_err(invalid)?,
            "scale" => self.scale = parse_int(v).map_err(invalid)?,
            "channels" => self.channels = parse_int(v).map_err(invalid)?,
            "num_blocks" => self.num_blocks = parse_int(v).map_err(invalid)?,
            "base_channels" => self.base_channels = parse_int(v).map_err(invalid)?,
            "growth_channels" => self.growth_channels = parse_int(v).map_err(invalid)?,
            "disc_channels" => self.disc_channels = parse_int(v).map_err(invalid)?,
            "feature_channels" => self.feature_channels = parse_int(v).map_err(invalid)?,
            "checkpoint" => self.checkpoint = parse_path(v),
            "learning_rate" => self.learning_rate = parse_real(v).map_err(invalid)?,
            "beta1" => self.beta1 = parse_real(v).map_err(invalid)?,
            "beta2" => self.beta2 = parse_real(v).map_err(invalid)?,
            "adam_eps" => self.adam_eps = parse_real(v).map_err(invalid)?,
            "batch_size" => self.batch_size = parse_int(v).map_err(invalid)?,
            "pretrain_iters" => self.pretrain_iters = parse_int(v).map_err(invalid)?,
            "l1_warmup_iters" => self.l1_warmup_iters = parse_int(v).map_err(invalid)?,
            "robust_iters" => self.robust_iters = parse_int(v).map_err(invalid)?,
            "adv_fraction" => self.adv_fraction = parse_real(v).map_err(invalid)?,
            "w_l1" => self.w_l1 = parse_real(v).map_err(invalid)?,
            "w_percep" => self.w_percep = parse_real(v).map_err(invalid)?,
            "w_gan" => self.w_gan = parse_real(v).map_err(invalid)?,
            "checkpoint_every" => self.checkpoint_every = parse_int(v).map_err(invalid)?,
            "seed" => self.seed = parse_int(v).map_err(invalid)?,
            "epsilon" => self.epsilon = parse_real(v).map_err(invalid)?,
            "iters" => self.iters = parse_int(v).map_err(invalid)?,
            "alpha" => {
                self.alpha = if v == "auto" {
                    None
                } else {
                    Some(parse_real(v).map_err(invalid)?)
                }
            }
            "structure_scale" => self.structure_scale = parse_real(v).map_err(invalid)?,
            "use_l1" => self.use_l1 = parse_bool(v).map_err(invalid)?,
            "use_percep" => self.use_percep = parse_bool(v).map_err(invalid)?,
            "recenter" => self.recenter = parse_bool(v).map_err(invalid)?,
            "corruptions" => {
                self.corruptions = parse_list(v, |s| s.parse::<CorruptionSpec>().map_err(|e| e.to_string()))
                    .map_err(invalid)?
            }
            "sweep_epsilon" => self.sweep_epsilon = parse_list(v, parse_real).map_err(invalid)?,
            "sweep_iters" => self.sweep_iters = parse_list(v, parse_int).map_err(invalid)?,
            "sweep_structure" => self.sweep_structure = parse_list(v, parse_real).map_err(invalid)?,
            "sweep_loss" => self.sweep_loss = parse_list(v, |s| s.parse()).map_err(invalid)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: None,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Textual form of one key, parseable by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "train_dir" => path_str(&self.train_dir),
            "eval_dir" => path_str(&self.eval_dir),
            "input_dir" => path_str(&self.input_dir),
            "output_dir" => self.output_dir.display().to_string(),
            "hr_patch" => self.hr_patch.to_string(),
            "patch_stride" => self.patch_stride.to_string(),
            "synthetic_train_images" => self.synthetic_train_images.to_string(),
            "synthetic_train_size" => self.synthetic_train_size.to_string(),
            "synthetic_eval_images" => self.synthetic_eval_images.to_string(),
            "synthetic_eval_size" => self.synthetic_eval_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "generator" => self.generator.name().to_string(),
            "scale" => self.scale.to_string(),
            "channels" => self.channels.to_string(),
            "num_blocks" => self.num_blocks.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "growth_channels" => self.growth_channels.to_string(),
            "disc_channels" => self.disc_channels.to_string(),
            "feature_channels" => self.feature_channels.to_string(),
            "checkpoint" => path_str(&self.checkpoint),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_iters" => self.pretrain_iters.to_string(),
            "l1_warmup_iters" => self.l1_warmup_iters.to_string(),
            "robust_iters" => self.robust_iters.to_string(),
            "adv_fraction" => self.adv_fraction.to_string(),
            "w_l1" => self.w_l1.to_string(),
            "w_percep" => self.w_percep.to_string(),
            "w_gan" => self.w_gan.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "seed" => self.seed.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "iters" => self.iters.to_string(),
            "alpha" => self.effective_alpha().to_string(),
            "structure_scale" => self.structure_scale.to_string(),
            "use_l1" => self.use_l1.to_string(),
            "use_percep" => self.use_percep.to_string(),
            "recenter" => self.recenter.to_string(),
            "corruptions" => join(&self.corruptions, |c| c.label()),
            "sweep_epsilon" => join(&self.sweep_epsilon, f64::to_string),
            "sweep_iters" => join(&self.sweep_iters, usize::to_string),
            "sweep_structure" => join(&self.sweep_structure, f64::to_string),
            "sweep_loss" => join(&self.sweep_loss, |l| l.name().to_string()),
            _ => return None,
        };
        Some(s)
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 2.0)
    }

    /// Apply `--key value` / `--section.key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let name = flag.strip_prefix("--").ok_or_else(|| ConfigError::Invalid {
                key: flag.clone(),
                message: "overrides must look like --key value".into(),
            })?;
            let (name, inline) = match name.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (name, None),
            };
            let key = match name.split_once('.') {
                Some((section, key)) if section_of(key) == Some(section) => key,
                Some(_) => {
                    return Err(ConfigError::UnknownKey {
                        line: None,
                        key: name.to_string(),
                    })
                }
                None => name,
            };
            if section_of(key).is_none() {
                return Err(ConfigError::UnknownKey {
                    line: None,
                    key: key.to_string(),
                });
            }
            let value = match inline {
                Some(v) => v,
                None => it.next().cloned().ok_or_else(|| ConfigError::Invalid {
                    key: key.to_string(),
                    message: "override is missing its value".into(),
                })?,
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn generator_arch(&self) -> GeneratorArch {
        match self.generator {
            GeneratorKind::Rrdb => GeneratorArch::Rrdb(GeneratorConfig {
                num_blocks: self.num_blocks,
                base_channels: self.base_channels,
                growth_channels: self.growth_channels,
                scale: self.scale,
                channels: self.channels,
            }),
            GeneratorKind::Nearest => GeneratorArch::NearestStub {
                scale: self.scale,
                channels: self.channels,
            },
            GeneratorKind::Mean => GeneratorArch::MeanStub {
                scale: self.scale,
                channels: self.channels,
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator_arch(),
            discriminator: DiscriminatorConfig {
                base_channels: self.disc_channels,
                patch_size: self.hr_patch,
                channels: self.channels,
            },
            features: FeatureConfig {
                base_channels: self.feature_channels,
                channels: self.channels,
            },
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            iters: self.iters,
            alpha: self.effective_alpha(),
            structure_scale: self.structure_scale,
            use_l1: self.use_l1,
            use_percep: self.use_percep,
            recenter: self.recenter,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, total_iters: usize, l1_warmup_iters: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            total_iters,
            l1_warmup_iters,
            adv_fraction: self.adv_fraction,
            weights: LossWeights {
                w_l1: self.w_l1,
                w_percep: self.w_percep,
                w_gan: self.w_gan,
            },
            attack: self.attack_config(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Value checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, e: String| ConfigError::Invalid {
            key: key.to_string(),
            message: e,
        };
        if self.hr_patch == 0 || self.hr_patch % self.scale.max(1) != 0 {
            return Err(bad("hr_patch", format!("{} is not a positive multiple of scale {}", self.hr_patch, self.scale)));
        }
        if self.patch_stride == 0 {
            return Err(bad("patch_stride", "must be ≥ 1".into()));
        }
        self.model_config().validate().map_err(|e| bad("model", e.to_string()))?;
        let attack = self.attack_config();
        if !(0.0..=1.0).contains(&attack.epsilon) {
            return Err(bad("epsilon", format!("{} is outside [0,1]", attack.epsilon)));
        }
        if !(attack.alpha >= 0.0 && attack.alpha <= attack.epsilon) {
            return Err(bad("alpha", format!("{} is outside [0, epsilon]", attack.alpha)));
        }
        attack.validate().map_err(|e| bad("attack", e.to_string()))?;
        let train = self.train_config(self.pretrain_iters, self.l1_warmup_iters);
        train.validate().map_err(|e| bad("train", e.to_string()))?;
        for (i, e) in self.sweep_epsilon.iter().enumerate() {
            if !(0.0..=1.0).contains(e) {
                return Err(bad("sweep_epsilon", format!("entry {i} ({e}) is outside [0,1]")));
            }
        }
        for s in &self.sweep_structure {
            if *s < 1.0 {
                return Err(bad("sweep_structure", format!("{s} is below 1")));
            }
        }
        Ok(())
    }

    /// Every configured input path must exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for (key, p) in [
            ("train_dir", &self.train_dir),
            ("eval_dir", &self.eval_dir),
            ("input_dir", &self.input_dir),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::Invalid {
                        key: key.to_string(),
                        message: format!("{} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    /// All effective values in config syntax, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }
}

/// Parse a config document on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: format!("malformed section header '{line}'"),
            })?;
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown section [{name}]"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line: line_no,
                message: "missing key before '='".into(),
            });
        }
        let Some(home) = section_of(key) else {
            return Err(ConfigError::UnknownKey {
                line: Some(line_no),
                key: key.to_string(),
            });
        };
        if let Some(s) = &section {
            if s != home {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("key '{key}' belongs in [{home}], not [{s}]"),
                });
            }
        }
        let key = KEYS.iter().find(|(_, k)| *k == key).map(|(_, k)| *k).expect("known key");
        if seen.contains(&key) {
            return Err(ConfigError::Parse {
                line: line_no,
                message: format!("key '{key}' given twice"),
            });
        }
        seen.push(key);
        cfg.set(key, value).map_err(|e| match e {
            ConfigError::Invalid { key, message } => ConfigError::Invalid {
                key,
                message: format!("{message} (line {line_no})"),
            },
            other => other,
        })?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
