//! Experiment configuration as flat `key = value` lines.
//!
//! Keys use dotted namespaces (`loss.lambda1 = 0.01`). Blank lines and
//! lines starting with `#` are ignored. Lists are comma-separated;
//! frequency bands are written `low-high`. Every key has a default, so an
//! empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticShiftSpec;
use crate::error::{Error, Result};
use crate::train::{TrainConfig, TrainMode};

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lambda1" => Ok(Self::Lambda1),
            "lambda2" => Ok(Self::Lambda2),
            _ => Err(format!("expected lambda1 or lambda2, got {s:?}")),
        }
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adast" => Ok(Self::Adast),
            "source-only" => Ok(Self::SourceOnly),
            _ => Err(format!("expected adast or source-only, got {s:?}")),
        }
    }
}

/// Where the two domains come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Epoch files; when both are unset the synthetic generator is used.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub synthetic: SyntheticShiftSpec,
    /// Train/val/test subject fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            synthetic: SyntheticShiftSpec::default(),
            split: [0.6, 0.2, 0.2],
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `train.seed` is unused; runs take their seed from `seeds`.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub parallel_seeds: usize,
    pub sweep_param: SweepParam,
    pub sweep_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            out: PathBuf::from("runs"),
            parallel_seeds: 1,
            sweep_param: SweepParam::Lambda1,
            sweep_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "arch.channels",
    "arch.kernels",
    "arch.strides",
    "arch.paddings",
    "arch.pool_kernel",
    "arch.pool_stride",
    "arch.attention_dim",
    "arch.discriminator_hidden",
    "arch.classifier_hidden",
    "loss.lambda1",
    "loss.lambda2",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.coupled_weight_decay",
    "optim.decay_epoch",
    "optim.decay_factor",
    "train.mode",
    "train.pretrain_epochs",
    "train.epochs_per_round",
    "train.self_train_rounds",
    "train.batch_size",
    "ablation.attention",
    "ablation.dual_classifiers",
    "ablation.self_training",
    "data.source",
    "data.target",
    "data.split",
    "data.split_seed",
    "data.seed",
    "data.subjects",
    "data.epochs_per_subject",
    "data.t",
    "data.priors",
    "data.bands",
    "data.base_noise",
    "data.shift_scale",
    "data.shift_freq",
    "data.shift_noise",
    "data.resample",
    "run.seeds",
    "run.out",
    "run.parallel_seeds",
    "sweep.param",
    "sweep.grid",
];

fn scalar<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|p| scalar(p.trim())).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses a configuration file's text, reporting every bad line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errors.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errors.push(format!("line {}: expected key = value", n + 1)),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, reporting every bad one.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let errors: Vec<String> = overrides
            .iter()
            .filter_map(|o| {
                let o = o.as_ref();
                match o.split_once('=') {
                    Some((k, v)) => self.set(k.trim(), v.trim()).err(),
                    None => Some(format!("override {o:?} is not key=value")),
                }
            })
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let arch = &mut self.train.arch;
        let syn = &mut self.data.synthetic;
        let at = |e: String| format!("{key}: {e}");
        match key {
            "arch.channels" => arch.channels = list(v).map_err(at)?,
            "arch.kernels" => arch.kernels = list(v).map_err(at)?,
            "arch.strides" => arch.strides = list(v).map_err(at)?,
            "arch.paddings" => arch.paddings = list(v).map_err(at)?,
            "arch.pool_kernel" => arch.pool_kernel = scalar(v).map_err(at)?,
            "arch.pool_stride" => arch.pool_stride = scalar(v).map_err(at)?,
            "arch.attention_dim" => {
                arch.attention_dim = if v == "auto" {
                    None
                } else {
                    Some(scalar(v).map_err(at)?)
                }
            }
            "arch.discriminator_hidden" => arch.discriminator_hidden = scalar(v).map_err(at)?,
            "arch.classifier_hidden" => arch.classifier_hidden = scalar(v).map_err(at)?,
            "loss.lambda1" => self.train.weights.lambda1 = scalar(v).map_err(at)?,
            "loss.lambda2" => self.train.weights.lambda2 = scalar(v).map_err(at)?,
            "optim.lr" => {
                let lr = scalar(v).map_err(at)?;
                self.train.adam.lr = lr;
                self.train.lr_schedule.base_lr = lr;
            }
            "optim.beta1" => self.train.adam.beta1 = scalar(v).map_err(at)?,
            "optim.beta2" => self.train.adam.beta2 = scalar(v).map_err(at)?,
            "optim.eps" => self.train.adam.eps = scalar(v).map_err(at)?,
            "optim.weight_decay" => self.train.adam.weight_decay = scalar(v).map_err(at)?,
            "optim.coupled_weight_decay" => {
                self.train.adam.coupled_weight_decay = scalar(v).map_err(at)?
            }
            "optim.decay_epoch" => self.train.lr_schedule.decay_epoch = scalar(v).map_err(at)?,
            "optim.decay_factor" => self.train.lr_schedule.factor = scalar(v).map_err(at)?,
            "train.mode" => self.train.mode = v.parse().map_err(at)?,
            "train.pretrain_epochs" => {
                self.train.schedule.pretrain_epochs = scalar(v).map_err(at)?
            }
            "train.epochs_per_round" => {
                self.train.schedule.epochs_per_round = scalar(v).map_err(at)?
            }
            "train.self_train_rounds" => {
                self.train.schedule.self_train_rounds = scalar(v).map_err(at)?
            }
            "train.batch_size" => self.train.schedule.batch_size = scalar(v).map_err(at)?,
            "ablation.attention" => self.train.toggles.use_attention = scalar(v).map_err(at)?,
            "ablation.dual_classifiers" => {
                self.train.toggles.use_dual_classifiers = scalar(v).map_err(at)?
            }
            "ablation.self_training" => {
                self.train.toggles.use_self_training = scalar(v).map_err(at)?
            }
            "data.source" => self.data.source = path(v),
            "data.target" => self.data.target = path(v),
            "data.split" => {
                let parts: Vec<f64> = list(v).map_err(at)?;
                self.data.split = parts
                    .try_into()
                    .map_err(|_| at("expected three fractions".into()))?;
            }
            "data.split_seed" => self.data.split_seed = scalar(v).map_err(at)?,
            "data.seed" => syn.seed = scalar(v).map_err(at)?,
            "data.subjects" => syn.n_subjects = scalar(v).map_err(at)?,
            "data.epochs_per_subject" => syn.epochs_per_subject = scalar(v).map_err(at)?,
            "data.t" => {
                syn.epoch_len = scalar(v).map_err(at)?;
                arch.epoch_len = syn.epoch_len;
            }
            "data.priors" => syn.class_priors = list(v).map_err(at)?,
            "data.bands" => {
                syn.class_bands = v
                    .split(',')
                    .map(|b| {
                        let (lo, hi) = b
                            .trim()
                            .split_once('-')
                            .ok_or_else(|| format!("band {b:?} is not low-high"))?;
                        Ok((scalar(lo.trim())?, scalar(hi.trim())?))
                    })
                    .collect::<Result<_, String>>()
                    .map_err(at)?
            }
            "data.base_noise" => syn.base_noise = scalar(v).map_err(at)?,
            "data.shift_scale" => syn.amplitude_scale = scalar(v).map_err(at)?,
            "data.shift_freq" => syn.frequency_offset_hz = scalar(v).map_err(at)?,
            "data.shift_noise" => syn.noise_sigma = scalar(v).map_err(at)?,
            "data.resample" => syn.resample_factor = scalar(v).map_err(at)?,
            "run.seeds" => self.seeds = list(v).map_err(at)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.parallel_seeds" => self.parallel_seeds = scalar(v).map_err(at)?,
            "sweep.param" => self.sweep_param = v.parse().map_err(at)?,
            "sweep.grid" => self.sweep_grid = list(v).map_err(at)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let arch = &self.train.arch;
        let syn = &self.data.synthetic;
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(String::new, |p| p.display().to_string())
        };
        Some(match key {
            "arch.channels" => join(&arch.channels),
            "arch.kernels" => join(&arch.kernels),
            "arch.strides" => join(&arch.strides),
            "arch.paddings" => join(&arch.paddings),
            "arch.pool_kernel" => arch.pool_kernel.to_string(),
            "arch.pool_stride" => arch.pool_stride.to_string(),
            "arch.attention_dim" => arch
                .attention_dim
                .map_or_else(|| "auto".into(), |d| d.to_string()),
            "arch.discriminator_hidden" => arch.discriminator_hidden.to_string(),
            "arch.classifier_hidden" => arch.classifier_hidden.to_string(),
            "loss.lambda1" => self.train.weights.lambda1.to_string(),
            "loss.lambda2" => self.train.weights.lambda2.to_string(),
            "optim.lr" => self.train.lr_schedule.base_lr.to_string(),
            "optim.beta1" => self.train.adam.beta1.to_string(),
            "optim.beta2" => self.train.adam.beta2.to_string(),
            "optim.eps" => self.train.adam.eps.to_string(),
            "optim.weight_decay" => self.train.adam.weight_decay.to_string(),
            "optim.coupled_weight_decay" => self.train.adam.coupled_weight_decay.to_string(),
            "optim.decay_epoch" => self.train.lr_schedule.decay_epoch.to_string(),
            "optim.decay_factor" => self.train.lr_schedule.factor.to_string(),
            "train.mode" => self.train.mode.name().into(),
            "train.pretrain_epochs" => self.train.schedule.pretrain_epochs.to_string(),
            "train.epochs_per_round" => self.train.schedule.epochs_per_round.to_string(),
            "train.self_train_rounds" => self.train.schedule.self_train_rounds.to_string(),
            "train.batch_size" => self.train.schedule.batch_size.to_string(),
            "ablation.attention" => self.train.toggles.use_attention.to_string(),
            "ablation.dual_classifiers" => self.train.toggles.use_dual_classifiers.to_string(),
            "ablation.self_training" => self.train.toggles.use_self_training.to_string(),
            "data.source" => opt_path(&self.data.source),
            "data.target" => opt_path(&self.data.target),
            "data.split" => join(&self.data.split),
            "data.split_seed" => self.data.split_seed.to_string(),
            "data.seed" => syn.seed.to_string(),
            "data.subjects" => syn.n_subjects.to_string(),
            "data.epochs_per_subject" => syn.epochs_per_subject.to_string(),
            "data.t" => syn.epoch_len.to_string(),
            "data.priors" => join(&syn.class_priors),
            "data.bands" => syn
                .class_bands
                .iter()
                .map(|(lo, hi)| format!("{lo}-{hi}"))
                .collect::<Vec<_>>()
                .join(","),
            "data.base_noise" => syn.base_noise.to_string(),
            "data.shift_scale" => syn.amplitude_scale.to_string(),
            "data.shift_freq" => syn.frequency_offset_hz.to_string(),
            "data.shift_noise" => syn.noise_sigma.to_string(),
            "data.resample" => syn.resample_factor.to_string(),
            "run.seeds" => join(&self.seeds),
            "run.out" => self.out.display().to_string(),
            "run.parallel_seeds" => self.parallel_seeds.to_string(),
            "sweep.param" => self.sweep_param.name().into(),
            "sweep.grid" => join(&self.sweep_grid),
            _ => return None,
        })
    }

    /// Every key with its current value; [`ExperimentConfig::parse`] of the
    /// result reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        s
    }

    /// Cross-field checks, all reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems();
        if self.data.source.is_some() != self.data.target.is_some() {
            p.push("data.source and data.target must be given together".into());
        }
        if self.data.source.is_none() {
            if let Err(e) = self.data.synthetic.validate() {
                p.push(format!("data: {e}"));
            } else if self.data.synthetic.n_classes() != self.train.arch.n_classes {
                p.push(format!(
                    "data.priors gives {} classes, the model has {}",
                    self.data.synthetic.n_classes(),
                    self.train.arch.n_classes
                ));
            }
        }
        let split_sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|f| !(*f >= 0.0)) || (split_sum - 1.0).abs() > 1e-9 {
            p.push(format!(
                "data.split must be non-negative and sum to 1, got {:?}",
                self.data.split
            ));
        }
        if self.seeds.is_empty() {
            p.push("run.seeds must not be empty".into());
        }
        if self.parallel_seeds == 0 {
            p.push("run.parallel_seeds must be at least 1".into());
        }
        if self.sweep_grid.is_empty()
            || self
                .sweep_grid
                .iter()
                .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            p.push("sweep.grid must be a non-empty list of finite non-negative values".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
