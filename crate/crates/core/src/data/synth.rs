//! Synthetic speakers: a jittered harmonic source shaped by a per-speaker
//! FIR, with per-utterance channel tilt, gain and noise. `difficulty`
//! scales pitch jitter, channel variation and noise together.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::mixup::rms;

pub const HARMONICS: usize = 10;

const NOISE_AT_FULL_DIFFICULTY: f64 = 1.0;
const BASE_JITTER: f64 = 0.005;
const JITTER_AT_FULL_DIFFICULTY: f64 = 0.04;
const TILT_AT_FULL_DIFFICULTY: f64 = 0.4;
const OUTPUT_RMS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfileParams {
    pub fundamental_hz: f64,
    pub harmonic_amps: [f64; HARMONICS],
    pub filter_coeffs: Vec<f64>,
    /// Standard deviation of the relative per-utterance pitch offset.
    pub jitter_std: f64,
}

impl SpeakerProfileParams {
    pub fn draw<R: Rng + ?Sized>(difficulty: f64, rng: &mut R) -> Self {
        let fundamental_hz = rng.random_range(80.0..=300.0);
        let mut harmonic_amps = [0.0f64; HARMONICS];
        for a in &mut harmonic_amps {
            *a = rng.random_range(0.0..=1.0);
        }
        harmonic_amps[0] = harmonic_amps[0].max(0.1);
        let filter_coeffs = vec![
            1.0,
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
        ];
        let jitter_std = (BASE_JITTER + JITTER_AT_FULL_DIFFICULTY * difficulty) * rng.random_range(0.5..1.5);
        Self {
            fundamental_hz,
            harmonic_amps,
            filter_coeffs,
            jitter_std,
        }
    }

    /// Renders one utterance of `len` samples.
    pub fn render<R: Rng + ?Sized>(&self, len: usize, sample_rate: u32, difficulty: f64, rng: &mut R) -> Vec<f64> {
        let sr = sample_rate as f64;
        let offset: f64 = Normal::new(0.0, self.jitter_std).expect("finite std").sample(rng);
        let f0 = (self.fundamental_hz * (1.0 + offset)).clamp(40.0, 600.0);
        let vibrato_depth = self.jitter_std;
        let vibrato_rate = rng.random_range(2.0..6.0);
        let vibrato_phase = rng.random_range(0.0..2.0 * PI);
        let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let top = f0 * (1.0 + 3.0 * vibrato_depth);
        let active = (1..=HARMONICS).take_while(|&h| h as f64 * top < 0.95 * sr / 2.0).count();

        let mut source = Vec::with_capacity(len);
        let mut phase = 0.0;
        for n in 0..len {
            let t = n as f64 / sr;
            let f = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t + vibrato_phase).sin());
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
            let x: f64 = (0..active)
                .map(|h| self.harmonic_amps[h] * ((h + 1) as f64 * phase + phases[h]).sin())
                .sum();
            source.push(x);
        }

        let tilt = TILT_AT_FULL_DIFFICULTY * difficulty * rng.random_range(-1.0..=1.0);
        let shaped: Vec<f64> = (0..len)
            .map(|n| {
                let mut y = 0.0;
                for (k, c) in self.filter_coeffs.iter().enumerate() {
                    if k <= n {
                        y += c * source[n - k];
                    }
                }
                y
            })
            .collect();
        let mut out: Vec<f64> = (0..len)
            .map(|n| shaped[n] + if n > 0 { tilt * shaped[n - 1] } else { 0.0 })
            .collect();

        let level = rms(&out).max(f64::MIN_POSITIVE);
        let noise = NOISE_AT_FULL_DIFFICULTY * difficulty;
        for x in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *x = *x / level + noise * z;
        }
        let gain = rng.random_range(0.5..=2.0) * OUTPUT_RMS / rms(&out);
        out.iter_mut().for_each(|x| *x *= gain);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub segment_seconds: f64,
    pub sample_rate: u32,
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            eval_speakers: 20,
            utterances_per_speaker: 10,
            utterance_seconds: 4.0,
            segment_seconds: 2.0,
            sample_rate: 16_000,
            difficulty: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::config(format!("need at least 2 speakers, got {}", self.n_speakers)));
        }
        if self.eval_speakers == 1 {
            return Err(Error::config("an eval split needs at least 2 speakers"));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::config("utterances_per_speaker must be positive"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if self.sample_rate == 0 || !(self.segment_seconds > 0.0) {
            return Err(Error::config("sample rate and segment length must be positive"));
        }
        if !(self.utterance_seconds >= 2.0 * self.segment_seconds) {
            return Err(Error::config(format!(
                "utterances of {} s are shorter than twice the {} s segment",
                self.utterance_seconds, self.segment_seconds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Corpus,
    pub eval: Corpus,
    pub train_profiles: Vec<SpeakerProfileParams>,
    pub eval_profiles: Vec<SpeakerProfileParams>,
}

fn render_split<R: Rng + ?Sized>(
    config: &SynthConfig,
    speakers: usize,
    prefix: &str,
    split: Split,
    rng: &mut R,
) -> (Corpus, Vec<SpeakerProfileParams>) {
    let len = (config.utterance_seconds * config.sample_rate as f64).round() as usize;
    let mut profiles = Vec::with_capacity(speakers);
    let mut utterances = Vec::with_capacity(speakers * config.utterances_per_speaker);
    for s in 0..speakers {
        let profile = SpeakerProfileParams::draw(config.difficulty, rng);
        let speaker_id = format!("{prefix}{s:04}");
        for u in 0..config.utterances_per_speaker {
            let mut local = ChaCha8Rng::seed_from_u64(rng.random());
            utterances.push(Utterance {
                id: format!("{speaker_id}-{u:03}"),
                speaker_id: speaker_id.clone(),
                samples: profile.render(len, config.sample_rate, config.difficulty, &mut local),
                sample_rate: config.sample_rate,
            });
        }
        profiles.push(profile);
    }
    (Corpus::new(utterances, split), profiles)
}

/// Draws disjoint train and eval speaker sets and renders their utterances.
pub fn generate_synthetic_corpus<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<SyntheticCorpus> {
    config.validate()?;
    let (train, train_profiles) = render_split(config, config.n_speakers, "spk", Split::Train, rng);
    let (eval, eval_profiles) = render_split(config, config.eval_speakers, "evl", Split::Eval, rng);
    Ok(SyntheticCorpus {
        train,
        eval,
        train_profiles,
        eval_profiles,
    })
}
