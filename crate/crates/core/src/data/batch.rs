//! `N x M` batches of random fixed-length segments. Within each speaker the
//! first `M - 1` segments are supports and the last is the query.

use rand::seq::index;
use rand::Rng;

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub segment_seconds: f64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_batch < 2 || self.utterances_per_speaker < 2 {
            return Err(Error::config(format!(
                "batches need N >= 2 and M >= 2, got N = {} and M = {}",
                self.speakers_per_batch, self.utterances_per_speaker
            )));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::config("segment length must be positive"));
        }
        Ok(())
    }
}

/// Samples in one segment: `round(seconds * rate)`.
pub fn segment_len(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub speakers: Vec<String>,
    pub utterance_ids: Vec<Vec<String>>,
    /// `segments[j][i]` is utterance `i` of speaker `j`.
    pub segments: Vec<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.segments.len()
    }

    pub fn m(&self) -> usize {
        self.segments.first().map_or(0, Vec::len)
    }

    pub fn support(&self, j: usize) -> &[Vec<f64>] {
        &self.segments[j][..self.m() - 1]
    }

    pub fn query(&self, j: usize) -> &[f64] {
        &self.segments[j][self.m() - 1]
    }

    pub fn queries(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|j| self.query(j).to_vec()).collect()
    }
}

/// Draws `N` distinct speakers among those with at least `M` utterances,
/// `M` distinct utterances per speaker, and one uniformly placed segment
/// per utterance.
pub fn sample_batch<R: Rng + ?Sized>(corpus: &Corpus, spec: &BatchSpec, rng: &mut R) -> Result<Batch> {
    spec.validate()?;
    let (n, m) = (spec.speakers_per_batch, spec.utterances_per_speaker);
    let eligible = corpus.eligible_speakers(m);
    if eligible.len() < n {
        return Err(Error::contract(format!(
            "{} speakers have at least {m} utterances, batch needs {n}",
            eligible.len()
        )));
    }
    let rate = corpus.sample_rate()?;
    let len = segment_len(spec.segment_seconds, rate);
    let mut batch = Batch {
        speakers: Vec::with_capacity(n),
        utterance_ids: Vec::with_capacity(n),
        segments: Vec::with_capacity(n),
    };
    for s in index::sample(rng, eligible.len(), n) {
        let (speaker, utts) = &eligible[s];
        let mut ids = Vec::with_capacity(m);
        let mut segs = Vec::with_capacity(m);
        for u in index::sample(rng, utts.len(), m) {
            let utt = &corpus.utterances[utts[u]];
            if utt.samples.len() < len {
                return Err(Error::contract(format!(
                    "utterance {} has {} samples, shorter than the {len}-sample segment",
                    utt.id,
                    utt.samples.len()
                )));
            }
            let start = rng.random_range(0..=utt.samples.len() - len);
            ids.push(utt.id.clone());
            segs.push(utt.samples[start..start + len].to_vec());
        }
        batch.speakers.push(speaker.to_string());
        batch.utterance_ids.push(ids);
        batch.segments.push(segs);
    }
    Ok(batch)
}
