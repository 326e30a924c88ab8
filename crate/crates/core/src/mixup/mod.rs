//! Input mixing: `x̄_i = λ x_i + (1 - λ) x_{R_i}` with one `λ ~ Beta(α, α)`
//! and one shuffle `R` per batch. Only query inputs are mixed.

mod augment;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::losses::Permutation;

pub use augment::{add_noise_at_snr, apply_fir, augment, reverb_kernel, AugConfig};

/// Where in the pipeline queries are interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixLevel {
    /// Volume-normalized raw samples.
    Waveform,
    /// Log-mel frames, interpolated as-is.
    Feature,
}

impl fmt::Display for MixLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixLevel::Waveform => "waveform",
            MixLevel::Feature => "feature",
        })
    }
}

impl FromStr for MixLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waveform" => Ok(MixLevel::Waveform),
            "feature" => Ok(MixLevel::Feature),
            other => Err(Error::config(format!(
                "unknown mixup level `{other}` (expected waveform or feature)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub level: MixLevel,
    pub enabled: bool,
    pub rng_seed: u64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            level: MixLevel::Waveform,
            enabled: false,
            rng_seed: 0,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("mixup.alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub mixed_inputs: Vec<Vec<f64>>,
    pub lambda: f64,
    pub shuffle: Permutation,
}

/// One draw from the symmetric `Beta(α, α)`.
pub fn sample_lambda<R: Rng + ?Sized>(config: &MixupConfig, rng: &mut R) -> Result<f64> {
    config.validate()?;
    let beta = Beta::new(config.alpha, config.alpha)
        .map_err(|e| Error::config(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Uniform permutation of `0..n`; fixed points are allowed.
pub fn sample_shuffle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Permutation> {
    if n < 2 {
        return Err(Error::contract(format!("shuffle needs at least 2 speakers, got {n}")));
    }
    let mut map: Vec<usize> = (0..n).collect();
    map.shuffle(rng);
    Permutation::new(map)
}

/// Root-mean-square amplitude.
pub fn rms(samples: &[f64]) -> f64 {
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Scales a waveform to unit RMS.
pub fn normalize_volume(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::contract("cannot normalize an empty waveform"));
    }
    let level = rms(samples);
    if level == 0.0 || !level.is_finite() {
        return Err(Error::numeric("cannot normalize the volume of a silent waveform"));
    }
    Ok(samples.iter().map(|x| x / level).collect())
}

/// `λ a + (1 - λ) b`, clamped elementwise to the segment between `a` and `b`
/// so that rounding never leaves the convex hull.
pub fn mix_pair(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (lambda * x + (1.0 - lambda) * y).clamp(x.min(y), x.max(y)))
        .collect()
}

/// Mixes every row with its shuffle partner using a fixed `λ` and `R`.
pub fn mix_with(queries: &[Vec<f64>], lambda: f64, shuffle: &Permutation) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    if shuffle.len() != queries.len() {
        return Err(Error::contract(format!(
            "shuffle of length {} for {} queries",
            shuffle.len(),
            queries.len()
        )));
    }
    if let Some(first) = queries.first() {
        if queries.iter().any(|q| q.len() != first.len()) {
            return Err(Error::contract("query rows differ in length"));
        }
    }
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, q)| mix_pair(q, &queries[shuffle[i]], lambda))
        .collect())
}

/// Samples `λ` and `R` and mixes the query rows.
///
/// At waveform level every row is volume-normalized first. With mixup
/// disabled the queries pass through unchanged with `λ = 1` and `R = id`,
/// and no randomness is consumed.
pub fn mix_inputs<R: Rng + ?Sized>(
    queries: &[Vec<f64>],
    config: &MixupConfig,
    rng: &mut R,
) -> Result<MixResult> {
    if !config.enabled {
        return Ok(MixResult {
            mixed_inputs: queries.to_vec(),
            lambda: 1.0,
            shuffle: Permutation::identity(queries.len()),
        });
    }
    let lambda = sample_lambda(config, rng)?;
    let shuffle = sample_shuffle(queries.len(), rng)?;
    let mixed_inputs = match config.level {
        MixLevel::Waveform => {
            let normalized = queries
                .iter()
                .map(|q| normalize_volume(q))
                .collect::<Result<Vec<_>>>()?;
            mix_with(&normalized, lambda, &shuffle)?
        }
        MixLevel::Feature => mix_with(queries, lambda, &shuffle)?,
    };
    Ok(MixResult {
        mixed_inputs,
        lambda,
        shuffle,
    })
}
