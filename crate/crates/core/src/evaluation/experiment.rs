//! Arm x utterances-per-speaker x seed grid: downsample, train, evaluate,
//! then aggregate into mean, sample standard deviation and relative
//! improvement over the baseline arm.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::{build_trials, evaluate_trials, EvalConfig};
use crate::data::{downsample_corpus, Corpus};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{train, EncoderConfig, TrainConfig};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Mixup,
    Aug,
    MixupAug,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Mixup, Arm::Aug, Arm::MixupAug];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Mixup => "mixup",
            Arm::Aug => "aug",
            Arm::MixupAug => "mixup_aug",
        }
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Arm::Mixup | Arm::MixupAug)
    }

    pub fn uses_aug(self) -> bool {
        matches!(self, Arm::Aug | Arm::MixupAug)
    }

    /// The base config with this arm's loss, mixup and augmentation switches.
    pub fn apply(self, base: &TrainConfig, mixup_loss: LossKind) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.mixup.enabled = self.uses_mixup();
        cfg.aug.enabled = self.uses_aug();
        cfg.loss = if self.uses_mixup() { mixup_loss } else { LossKind::Ap };
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown arm `{s}` (expected baseline, mixup, aug or mixup_aug)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arms: Vec<Arm>,
    pub utterances_per_speaker: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Loss used by the mixup arms.
    pub mixup_loss: LossKind,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.utterances_per_speaker.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("experiment needs at least one arm, sweep point and seed"));
        }
        if self.mixup_loss == LossKind::Ap {
            return Err(Error::config("experiment.mixup_loss must be ce_mixup or contrastive_mixup"));
        }
        if let Some(k) = self.utterances_per_speaker.iter().find(|&&k| k < 2) {
            return Err(Error::config(format!("utterances per speaker must be at least 2, got {k}")));
        }
        self.encoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub arm: Arm,
    pub utterances_per_speaker: usize,
    pub seed: u64,
    /// EER in percent, or the failure message.
    pub eer_percent: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub arm: Arm,
    pub utterances_per_speaker: usize,
    pub mean_eer_percent: Option<f64>,
    pub std_eer_percent: Option<f64>,
    /// Percent; `None` without a baseline at this sweep point.
    pub relative_improvement_percent: Option<f64>,
    pub completed_seeds: usize,
    pub failed_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<Summary>,
}

impl Report {
    pub fn summary(&self, arm: Arm, utterances_per_speaker: usize) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.arm == arm && s.utterances_per_speaker == utterances_per_speaker)
    }
}

/// `(baseline - arm) / baseline`, as a fraction.
pub fn relative_improvement(baseline: f64, arm: f64) -> f64 {
    (baseline - arm) / baseline
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates cells by (arm, sweep point) in first-appearance order.
pub fn summarize(cells: &[CellResult]) -> Vec<Summary> {
    let mut keys: Vec<(Arm, usize)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.arm, c.utterances_per_speaker)) {
            keys.push((c.arm, c.utterances_per_speaker));
        }
    }
    let mut summaries: Vec<Summary> = keys
        .iter()
        .map(|&(arm, k)| {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.arm == arm && c.utterances_per_speaker == k).collect();
            let ok: Vec<f64> = group.iter().filter_map(|c| c.eer_percent.as_ref().ok().copied()).collect();
            let (mean, std) = if ok.is_empty() { (None, None) } else {
                let (m, s) = mean_std(&ok);
                (Some(m), Some(s))
            };
            Summary {
                arm,
                utterances_per_speaker: k,
                mean_eer_percent: mean,
                std_eer_percent: std,
                relative_improvement_percent: None,
                completed_seeds: ok.len(),
                failed_seeds: group.len() - ok.len(),
            }
        })
        .collect();
    let baselines: Vec<(usize, Option<f64>)> = summaries
        .iter()
        .filter(|s| s.arm == Arm::Baseline)
        .map(|s| (s.utterances_per_speaker, s.mean_eer_percent))
        .collect();
    for s in &mut summaries {
        let base = baselines.iter().find(|(k, _)| *k == s.utterances_per_speaker).and_then(|(_, m)| *m);
        s.relative_improvement_percent = match (base, s.mean_eer_percent) {
            (Some(b), Some(m)) if b != 0.0 => Some(100.0 * relative_improvement(b, m)),
            _ => None,
        };
    }
    summaries
}

/// Runs every cell. Each cell downsamples the training corpus with its
/// seed, trains from that seed, and scores one shared trial list. Cell
/// failures are recorded and do not stop the grid.
pub fn run_experiment(train_corpus: &Corpus, eval_corpus: &Corpus, config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    crate::data::check_disjoint(train_corpus, eval_corpus)?;
    let trials = build_trials(
        eval_corpus,
        config.eval.n_target,
        config.eval.n_nontarget,
        &mut stream(config.eval.trial_seed, Stream::Trials),
    )?;
    let mut grid = Vec::new();
    for &arm in &config.arms {
        for &k in &config.utterances_per_speaker {
            for &seed in &config.seeds {
                grid.push((arm, k, seed));
            }
        }
    }
    let cells: Vec<CellResult> = grid
        .par_iter()
        .map(|&(arm, k, seed)| {
            let run = || -> Result<f64> {
                let data = downsample_corpus(train_corpus, k, &mut stream(seed, Stream::Downsample))?;
                let mut cfg = arm.apply(&config.train, config.mixup_loss);
                cfg.rng_seed = seed;
                cfg.mixup.rng_seed = seed;
                let outcome = train(&data.corpus, &config.encoder, &cfg)?;
                let eval = evaluate_trials(&outcome.params, eval_corpus, &trials, &config.eval)?;
                Ok(100.0 * eval.rates.eer)
            };
            CellResult {
                arm,
                utterances_per_speaker: k,
                seed,
                eer_percent: run().map_err(|e| e.to_string()),
            }
        })
        .collect();
    let summaries = summarize(&cells);
    Ok(Report { cells, summaries })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// One row per cell with its group's aggregates. The trailing `note`
/// column flags failures and single-seed groups.
pub fn write_report_csv<W: Write>(report: &Report, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "arm",
        "utterances_per_speaker",
        "seed",
        "eer_percent",
        "mean_eer_percent",
        "std_eer_percent",
        "relative_improvement_percent",
        "note",
    ])?;
    for c in &report.cells {
        let s = report.summary(c.arm, c.utterances_per_speaker).expect("every cell is summarized");
        let mut notes = Vec::new();
        if let Err(e) = &c.eer_percent {
            notes.push(format!("failed: {e}"));
        }
        if s.completed_seeds == 1 {
            notes.push("single seed, std set to 0".to_string());
        }
        w.write_record([
            c.arm.as_str().to_string(),
            c.utterances_per_speaker.to_string(),
            c.seed.to_string(),
            fmt_opt(c.eer_percent.as_ref().ok().copied()),
            fmt_opt(s.mean_eer_percent),
            fmt_opt(s.std_eer_percent),
            fmt_opt(s.relative_improvement_percent),
            notes.join("; "),
        ])?;
    }
    w.flush()?;
    Ok(())
}
