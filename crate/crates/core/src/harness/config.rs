//! Run configuration: flat `key = value` files, presets and overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::encoder::EncoderArch;
use crate::episodic::{EpisodeConfig, LossConfig};
use crate::error::{Error, Result};
use crate::localization::LocalizeConfig;
use crate::roi::RoiConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Laptop-scale run.
    Desk,
    /// Full-scale schedule: 200 + 100 epochs, 10,000 evaluation tasks.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub per_class_count: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_base: usize,
    pub epochs_ours: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    /// Defaults to `eval.k_shot`.
    pub k_shot: Option<usize>,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    #[serde(rename = "T")]
    pub temperature: f64,
    /// Defaults to 1.0 for one-shot training and 0.5 otherwise.
    pub lambda_roi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocSettings {
    pub tau_eval: f64,
    /// Defaults to 0.5 for one-shot training and 0.7 otherwise.
    pub tau_train: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub arch: EncoderArch,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub loss: LossSettings,
    pub loc: LocSettings,
    pub roi: RoiConfig,
    pub eval: EvalSettings,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = preset == Preset::Desk;
        Self {
            dataset: PathBuf::from("data"),
            arch: EncoderArch::default(),
            data: DataConfig {
                per_class_count: 200,
                distractors_min: 1,
                distractors_max: 3,
            },
            pretrain: PretrainConfig {
                lr: 0.1,
                epochs: if desk { 40 } else { 100 },
                batch: 25,
            },
            train: TrainConfig {
                lr: 1e-4,
                epochs_base: if desk { 40 } else { 200 },
                epochs_ours: if desk { 20 } else { 100 },
                episodes_per_epoch: if desk { 50 } else { 100 },
                n_way: 5,
                k_shot: None,
                queries: if desk { 5 } else { 15 },
            },
            loss: LossSettings {
                temperature: 64.0,
                lambda_roi: None,
            },
            loc: LocSettings {
                tau_eval: 0.5,
                tau_train: None,
            },
            roi: RoiConfig::default(),
            eval: EvalSettings {
                n_way: 5,
                k_shot: 1,
                queries: 15,
                tasks: if desk { 500 } else { 10_000 },
            },
            seed: 0,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(value),
            "arch.blocks" => self.arch.blocks = parse(key, value)?,
            "arch.channels" => {
                self.arch.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "arch.kernel" => self.arch.kernel = parse(key, value)?,
            "arch.input_size" => self.arch.input_size = parse(key, value)?,
            "arch.input_channels" => self.arch.input_channels = parse(key, value)?,
            "data.per_class_count" => self.data.per_class_count = parse(key, value)?,
            "data.distractors_min" => self.data.distractors_min = parse(key, value)?,
            "data.distractors_max" => self.data.distractors_max = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.epochs_base" => self.train.epochs_base = parse(key, value)?,
            "train.epochs_ours" => self.train.epochs_ours = parse(key, value)?,
            "train.episodes_per_epoch" => self.train.episodes_per_epoch = parse(key, value)?,
            "train.n_way" => self.train.n_way = parse(key, value)?,
            "train.k_shot" => self.train.k_shot = parse_optional(key, value)?,
            "train.queries" => self.train.queries = parse(key, value)?,
            "loss.T" => self.loss.temperature = parse(key, value)?,
            "loss.lambda_roi" => self.loss.lambda_roi = parse_optional(key, value)?,
            "loc.tau_eval" => self.loc.tau_eval = parse(key, value)?,
            "loc.tau_train" => self.loc.tau_train = parse_optional(key, value)?,
            "roi.grid" => self.roi.grid = parse(key, value)?,
            "roi.samples" => self.roi.samples = parse(key, value)?,
            "eval.n_way" => self.eval.n_way = parse(key, value)?,
            "eval.k_shot" => self.eval.k_shot = parse(key, value)?,
            "eval.queries" => self.eval.queries = parse(key, value)?,
            "eval.tasks" => self.eval.tasks = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies the settings of a flat config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::preset(preset);
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Default dataset with this config's image size, count and distractor range.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            image_size: self.arch.input_size,
            per_class_count: self.data.per_class_count,
            distractors_per_image: (self.data.distractors_min, self.data.distractors_max),
            ..DatasetSpec::default()
        }
    }

    pub fn train_k_shot(&self) -> usize {
        self.train.k_shot.unwrap_or(self.eval.k_shot)
    }

    pub fn lambda_roi(&self) -> f64 {
        self.loss
            .lambda_roi
            .unwrap_or_else(|| LossConfig::for_shots(self.train_k_shot()).lambda_roi)
    }

    pub fn tau_train(&self) -> f64 {
        self.loc
            .tau_train
            .unwrap_or(if self.train_k_shot() == 1 { 0.5 } else { 0.7 })
    }

    pub fn train_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            loss: LossConfig {
                temperature: self.loss.temperature,
                lambda_roi: self.lambda_roi(),
            },
            localize: LocalizeConfig::with_tau(self.tau_train()),
            roi: self.roi,
        }
    }

    pub fn eval_localize_config(&self) -> LocalizeConfig {
        LocalizeConfig::with_tau(self.loc.tau_eval)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.roi.validate()?;
        let positive = [
            ("pretrain.batch", self.pretrain.batch),
            ("train.episodes_per_epoch", self.train.episodes_per_epoch),
            ("train.n_way", self.train.n_way),
            ("train.k_shot", self.train_k_shot()),
            ("train.queries", self.train.queries),
            ("eval.n_way", self.eval.n_way),
            ("eval.k_shot", self.eval.k_shot),
            ("eval.queries", self.eval.queries),
            ("eval.tasks", self.eval.tasks),
            ("data.per_class_count", self.data.per_class_count),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("train.lr", self.train.lr),
            ("loss.T", self.loss.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.lambda_roi() >= 0.0) {
            return Err(Error::NegativeLambda(self.lambda_roi()));
        }
        for (k, tau) in [("loc.tau_eval", self.loc.tau_eval), ("loc.tau_train", self.tau_train())] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("{k} must lie in (0, 1], got {tau}")));
            }
        }
        if self.data.distractors_min > self.data.distractors_max {
            return Err(Error::Config("data.distractors_min exceeds data.distractors_max".into()));
        }
        Ok(())
    }
}
