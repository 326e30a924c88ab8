//! Verification scoring: fixed-interval crops, mean cross-crop cosine,
//! equal error rate, and held-out trial lists.

mod experiment;

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{segment_len, Corpus, FeatureConfig, FeatureExtractor, Frames};
use crate::error::{Error, Result};
use crate::model::{embed, EncoderParams};
use crate::rng::{stream, Stream};

pub use experiment::{
    relative_improvement, run_experiment, summarize, write_report_csv, Arm, CellResult, ExperimentConfig, Report,
    Summary,
};

/// Start offsets of `n` crops spread evenly over `[0, len - crop]`.
pub fn crop_offsets(len: usize, crop: usize, n: usize) -> Vec<usize> {
    let span = len.saturating_sub(crop);
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|k| (k as f64 * span as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// `n_crops` evenly spaced crops. A waveform shorter than one crop is tiled
/// up to crop length and returned as a single crop.
pub fn crop_segments(samples: &[f64], sample_rate: u32, crop_seconds: f64, n_crops: usize) -> Result<Vec<Vec<f64>>> {
    if n_crops == 0 {
        return Err(Error::contract("need at least one crop"));
    }
    if samples.is_empty() {
        return Err(Error::contract("cannot crop an empty waveform"));
    }
    let crop = segment_len(crop_seconds, sample_rate);
    if crop == 0 {
        return Err(Error::contract("crop length rounds to zero samples"));
    }
    if samples.len() < crop {
        return Ok(vec![samples.iter().copied().cycle().take(crop).collect()]);
    }
    Ok(crop_offsets(samples.len(), crop, n_crops)
        .into_iter()
        .map(|o| samples[o..o + crop].to_vec())
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cannot score a zero-norm embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean raw cosine over every enroll-crop / test-crop pair.
pub fn score_trial(enroll: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::contract("both sides of a trial need at least one embedding"));
    }
    let mut total = 0.0;
    for a in enroll {
        for b in test {
            total += cosine(a, b)?;
        }
    }
    Ok(total / (enroll.len() * test.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::numeric("score set contains NaN"));
        }
        Ok(Self { scores, labels })
    }

    /// Builds from separate target and nontarget score lists.
    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat_n(true, targets.len())
            .chain(std::iter::repeat_n(false, nontargets.len()))
            .collect();
        Self::new(scores, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRates {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
    /// Candidate thresholds in ascending order, `-inf` and `+inf` included.
    pub thresholds: Vec<f64>,
    pub far_curve: Vec<f64>,
    pub frr_curve: Vec<f64>,
}

/// Sweeps every distinct score plus `±inf`. A trial is accepted when its
/// score is `>= θ`. Picks the θ with the smallest `|FAR - FRR|` (lowest θ
/// on ties) and reports their midpoint.
pub fn compute_eer(set: &ScoreSet) -> Result<ErrorRates> {
    let mut targets: Vec<f64> = Vec::new();
    let mut nontargets: Vec<f64> = Vec::new();
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if l {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::contract("EER needs at least one target and one nontarget score"));
    }
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let mut far_curve = Vec::with_capacity(thresholds.len());
    let mut frr_curve = Vec::with_capacity(thresholds.len());
    let mut best = 0;
    for (i, &theta) in thresholds.iter().enumerate() {
        let rejected_targets = targets.partition_point(|&s| s < theta);
        let rejected_nontargets = nontargets.partition_point(|&s| s < theta);
        let far = (nontargets.len() - rejected_nontargets) as f64 / nn;
        let frr = rejected_targets as f64 / nt;
        far_curve.push(far);
        frr_curve.push(frr);
        if (far - frr).abs() < (far_curve[best] - frr_curve[best]).abs() {
            best = i;
        }
    }
    Ok(ErrorRates {
        eer: (far_curve[best] + frr_curve[best]) / 2.0,
        threshold: thresholds[best],
        thresholds,
        far_curve,
        frr_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

/// Samples `n_target` same-speaker and `n_nontarget` cross-speaker
/// unordered utterance pairs without replacement. Targets come first.
pub fn build_trials<R: Rng + ?Sized>(corpus: &Corpus, n_target: usize, n_nontarget: usize, rng: &mut R) -> Result<Vec<Trial>> {
    let speakers = corpus.speakers();
    if speakers.values().filter(|u| u.len() >= 2).count() < 2 {
        return Err(Error::contract("trials need at least two speakers with two utterances each"));
    }
    let n = corpus.len();
    let speaker_of: Vec<&str> = corpus.utterances.iter().map(|u| u.speaker_id.as_str()).collect();
    let pair = |i: usize, j: usize| Trial {
        enroll: corpus.utterances[i].id.clone(),
        test: corpus.utterances[j].id.clone(),
        is_target: speaker_of[i] == speaker_of[j],
    };

    let target_pairs: Vec<(usize, usize)> = speakers
        .values()
        .flat_map(|u| (0..u.len()).flat_map(move |a| (a + 1..u.len()).map(move |b| (u[a], u[b]))))
        .collect();
    let total_pairs = n * (n - 1) / 2;
    let nontarget_total = total_pairs - target_pairs.len();
    if n_target > target_pairs.len() || n_nontarget > nontarget_total {
        return Err(Error::contract(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials but only {} / {nontarget_total} pairs exist",
            target_pairs.len()
        )));
    }

    let mut trials: Vec<Trial> = index::sample(rng, target_pairs.len(), n_target)
        .into_iter()
        .map(|k| pair(target_pairs[k].0, target_pairs[k].1))
        .collect();

    if n_nontarget * 4 >= nontarget_total {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| speaker_of[i] != speaker_of[j])
            .collect();
        trials.extend(index::sample(rng, all.len(), n_nontarget).into_iter().map(|k| pair(all[k].0, all[k].1)));
    } else {
        // rejection sampling keeps memory flat on large corpora
        let mut seen = HashSet::new();
        while seen.len() < n_nontarget {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let (i, j) = (a.min(b), a.max(b));
            if i != j && speaker_of[i] != speaker_of[j] && seen.insert((i, j)) {
                trials.push(pair(i, j));
            }
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub crop_seconds: f64,
    pub n_crops: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub trial_seed: u64,
    pub features: FeatureConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crop_seconds: 4.0,
            n_crops: 10,
            n_target: 500,
            n_nontarget: 500,
            trial_seed: 0,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rates: ErrorRates,
    pub scores: ScoreSet,
    pub trials: Vec<Trial>,
}

/// Crop embeddings of one utterance.
pub fn embed_utterance(
    params: &EncoderParams,
    samples: &[f64],
    extractor: &FeatureExtractor,
    crop_seconds: f64,
    n_crops: usize,
) -> Result<Vec<Vec<f64>>> {
    let crops = crop_segments(samples, extractor.config().sample_rate, crop_seconds, n_crops)?;
    let frames = crops.iter().map(|c| extractor.extract(c)).collect::<Result<Vec<Frames>>>()?;
    embed(params, &frames.iter().collect::<Vec<_>>())
}

/// Scores a fixed trial list. Each utterance is embedded once.
pub fn evaluate_trials(params: &EncoderParams, corpus: &Corpus, trials: &[Trial], config: &EvalConfig) -> Result<Evaluation> {
    let extractor = FeatureExtractor::new(config.features)?;
    let mut needed: Vec<&str> = trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
    needed.sort_unstable();
    needed.dedup();
    let by_id: BTreeMap<&str, usize> = corpus.utterances.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    let cache: BTreeMap<&str, Vec<Vec<f64>>> = needed
        .par_iter()
        .map(|&id| {
            let i = *by_id
                .get(id)
                .ok_or_else(|| Error::contract(format!("trial names unknown utterance {id}")))?;
            let u = &corpus.utterances[i];
            if u.sample_rate != config.features.sample_rate {
                return Err(Error::config(format!(
                    "{id} is sampled at {} Hz but features expect {} Hz",
                    u.sample_rate, config.features.sample_rate
                )));
            }
            Ok((id, embed_utterance(params, &u.samples, &extractor, config.crop_seconds, config.n_crops)?))
        })
        .collect::<Result<_>>()?;
    let scores = trials
        .iter()
        .map(|t| score_trial(&cache[t.enroll.as_str()], &cache[t.test.as_str()]))
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreSet::new(scores, trials.iter().map(|t| t.is_target).collect())?;
    Ok(Evaluation {
        rates: compute_eer(&scores)?,
        scores,
        trials: trials.to_vec(),
    })
}

/// Builds the configured trial list from `trial_seed` and scores it.
pub fn evaluate(params: &EncoderParams, corpus: &Corpus, config: &EvalConfig) -> Result<Evaluation> {
    let trials = build_trials(
        corpus,
        config.n_target,
        config.n_nontarget,
        &mut stream(config.trial_seed, Stream::Trials),
    )?;
    evaluate_trials(params, corpus, &trials, config)
}
