//! Corpora of labelled utterances, their sources (synthetic generator or a
//! WAV manifest), log-mel features and `N x M` batch sampling.

mod batch;
mod features;
mod synth;
mod wav;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub use batch::{sample_batch, segment_len, Batch, BatchSpec};
pub use features::{hz_to_mel, mel_to_hz, extract_features, FeatureConfig, FeatureExtractor, Frames, LOG_FLOOR};
pub use synth::{generate_synthetic_corpus, SpeakerProfileParams, SynthConfig, SyntheticCorpus, HARMONICS};
pub use wav::{load_manifest, read_wav, write_corpus, write_wav, ManifestLoad, ValidationSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Utterance {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub split: Split,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>, split: Split) -> Self {
        Self { utterances, split }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterance indices grouped by speaker, in speaker-id order.
    pub fn speakers(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            map.entry(u.speaker_id.as_str()).or_default().push(i);
        }
        map
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers().len()
    }

    /// Speakers with at least `m` utterances.
    pub fn eligible_speakers(&self, m: usize) -> Vec<(&str, Vec<usize>)> {
        self.speakers().into_iter().filter(|(_, u)| u.len() >= m).collect()
    }

    /// The common sample rate; an empty corpus or mixed rates are errors.
    pub fn sample_rate(&self) -> Result<u32> {
        let first = self
            .utterances
            .first()
            .ok_or_else(|| Error::contract("empty corpus has no sample rate"))?
            .sample_rate;
        if let Some(u) = self.utterances.iter().find(|u| u.sample_rate != first) {
            return Err(Error::config(format!(
                "utterance {} has sample rate {} but the corpus uses {first}",
                u.id, u.sample_rate
            )));
        }
        Ok(first)
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Fails if any speaker appears in both corpora.
pub fn check_disjoint(train: &Corpus, eval: &Corpus) -> Result<()> {
    let train_speakers = train.speakers();
    if let Some(shared) = eval.speakers().keys().find(|s| train_speakers.contains_key(*s)) {
        return Err(Error::contract(format!(
            "speaker {shared} appears in both the train and eval splits"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downsampled {
    pub corpus: Corpus,
    /// Speakers dropped for having fewer than the requested utterances.
    pub dropped_speakers: usize,
}

/// Keeps exactly `per_speaker` utterances of every speaker, chosen uniformly
/// without replacement; speakers with fewer are dropped. Kept utterances
/// stay in their original order.
pub fn downsample_corpus<R: Rng + ?Sized>(corpus: &Corpus, per_speaker: usize, rng: &mut R) -> Result<Downsampled> {
    if per_speaker < 2 {
        return Err(Error::contract(format!(
            "need at least 2 utterances per speaker, got {per_speaker}"
        )));
    }
    let mut keep = Vec::new();
    let mut dropped_speakers = 0;
    for (_, indices) in corpus.speakers() {
        if indices.len() < per_speaker {
            dropped_speakers += 1;
            continue;
        }
        let mut chosen: Vec<usize> = index::sample(rng, indices.len(), per_speaker)
            .into_iter()
            .map(|i| indices[i])
            .collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    Ok(Downsampled {
        corpus: Corpus::new(keep.into_iter().map(|i| corpus.utterances[i].clone()).collect(), corpus.split),
        dropped_speakers,
    })
}
