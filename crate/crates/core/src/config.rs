//! Flat `key = value` configuration. `#` starts a comment, blank lines are
//! ignored, and every key has a default. Rendering is sorted by key, so a
//! rendered config is a stable fingerprint of a run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::data::{FeatureConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{Arm, EvalConfig, ExperimentConfig};
use crate::losses::LossKind;
use crate::mixup::{AugConfig, MixupConfig};
use crate::model::{EncoderConfig, TrainConfig};

/// Every recognised key with its default. An empty default on a `*.seed`
/// key means "use `seed`".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.sample_rate", "16000"),
    ("data.segment_seconds", "2"),
    ("data.mel_filters", "40"),
    ("data.n_speakers", "40"),
    ("data.eval_speakers", "30"),
    ("data.utterances_per_speaker", "8"),
    ("data.utterance_seconds", "5"),
    ("data.difficulty", "0.5"),
    ("data.train_manifest", ""),
    ("data.eval_manifest", ""),
    ("train.epochs", "30"),
    ("train.batches_per_epoch", "50"),
    ("train.n", "8"),
    ("train.m", "2"),
    ("train.lr", "0.001"),
    ("train.lr_decay", "0.95"),
    ("train.lr_decay_every", "10"),
    ("train.loss", "ap"),
    ("model.hidden_dims", "64,64"),
    ("model.embedding_dim", "32"),
    ("model.activation", "relu"),
    ("model.pooling", "sap"),
    ("mixup.enabled", "false"),
    ("mixup.alpha", "0.4"),
    ("mixup.level", "waveform"),
    ("mixup.seed", ""),
    ("aug.enabled", "false"),
    ("aug.snr_min_db", "5"),
    ("aug.snr_max_db", "20"),
    ("aug.reverb_taps", "64"),
    ("eval.crop_seconds", "4"),
    ("eval.n_crops", "10"),
    ("eval.n_target", "500"),
    ("eval.n_nontarget", "500"),
    ("eval.seed", ""),
    ("experiment.arms", "baseline,mixup,aug,mixup_aug"),
    ("experiment.utterances_per_speaker", "2,3,5,10"),
    ("experiment.seeds", "3"),
    ("experiment.mixup_loss", "contrastive_mixup"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::config(format!("{key} = {raw:?} is invalid: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::config(format!("{key}: {s:?} is invalid: {e}"))))
            .collect()
    }

    fn derived_seed(&self, key: &str) -> Result<u64> {
        if self.raw(key).is_empty() {
            self.get("seed")
        } else {
            self.get(key)
        }
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn features(&self) -> Result<FeatureConfig> {
        Ok(FeatureConfig {
            sample_rate: self.get("data.sample_rate")?,
            mel_filters: self.get("data.mel_filters")?,
            ..FeatureConfig::default()
        })
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            n_speakers: self.get("data.n_speakers")?,
            eval_speakers: self.get("data.eval_speakers")?,
            utterances_per_speaker: self.get("data.utterances_per_speaker")?,
            utterance_seconds: self.get("data.utterance_seconds")?,
            segment_seconds: self.get("data.segment_seconds")?,
            sample_rate: self.get("data.sample_rate")?,
            difficulty: self.get("data.difficulty")?,
        })
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            input_dim: self.get("data.mel_filters")?,
            hidden_dims: self.list("model.hidden_dims")?,
            embedding_dim: self.get("model.embedding_dim")?,
            activation: self.get("model.activation")?,
            pooling: self.get("model.pooling")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            batches_per_epoch: self.get("train.batches_per_epoch")?,
            speakers_per_batch: self.get("train.n")?,
            utterances_per_speaker: self.get("train.m")?,
            segment_seconds: self.get("data.segment_seconds")?,
            learning_rate: self.get("train.lr")?,
            lr_decay: self.get("train.lr_decay")?,
            lr_decay_every: self.get("train.lr_decay_every")?,
            loss: self.get("train.loss")?,
            mixup: MixupConfig {
                alpha: self.get("mixup.alpha")?,
                level: self.get("mixup.level")?,
                enabled: self.get("mixup.enabled")?,
                rng_seed: self.derived_seed("mixup.seed")?,
            },
            aug: AugConfig {
                enabled: self.get("aug.enabled")?,
                snr_min_db: self.get("aug.snr_min_db")?,
                snr_max_db: self.get("aug.snr_max_db")?,
                reverb_taps: self.get("aug.reverb_taps")?,
            },
            features: self.features()?,
            rng_seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            crop_seconds: self.get("eval.crop_seconds")?,
            n_crops: self.get("eval.n_crops")?,
            n_target: self.get("eval.n_target")?,
            n_nontarget: self.get("eval.n_nontarget")?,
            trial_seed: self.derived_seed("eval.seed")?,
            features: self.features()?,
        })
    }

    /// Seeds run `seed, seed + 1, ...`. The base train config is taken with
    /// mixup and augmentation switched per arm, so its own switches are
    /// irrelevant here.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let count: u64 = self.get("experiment.seeds")?;
        let base = self.seed()?;
        let mut train = self.train_unchecked()?;
        train.mixup.enabled = false;
        train.aug.enabled = false;
        train.loss = LossKind::Ap;
        train.validate()?;
        let cfg = ExperimentConfig {
            arms: self.list::<Arm>("experiment.arms")?,
            utterances_per_speaker: self.list("experiment.utterances_per_speaker")?,
            seeds: (0..count).map(|k| base + k).collect(),
            mixup_loss: self.get("experiment.mixup_loss")?,
            train,
            encoder: self.encoder()?,
            eval: self.eval()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_unchecked(&self) -> Result<TrainConfig> {
        let mut probe = self.clone();
        probe.set("mixup.enabled", "false")?;
        probe.train()
    }
}
