//! Stand-in online augmentation: white noise at a random SNR followed by a
//! synthetic exponentially decaying reverb tail.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::normalize_volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    pub enabled: bool,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// FIR length in samples; 0 disables reverb.
    pub reverb_taps: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            snr_min_db: 5.0,
            snr_max_db: 20.0,
            reverb_taps: 64,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_min_db.is_nan() || self.snr_max_db.is_nan() || self.snr_min_db > self.snr_max_db {
            return Err(Error::config(format!(
                "aug.snr_min_db ({}) must not exceed aug.snr_max_db ({})",
                self.snr_min_db, self.snr_max_db
            )));
        }
        Ok(())
    }
}

/// Adds white Gaussian noise whose RMS is `rms(signal) / 10^(snr/20)`.
/// An SNR of `+inf` adds nothing.
pub fn add_noise_at_snr<R: Rng + ?Sized>(signal: &[f64], snr_db: f64, rng: &mut R) -> Vec<f64> {
    if snr_db == f64::INFINITY {
        return signal.to_vec();
    }
    let level = super::rms(signal) / 10f64.powf(snr_db / 20.0);
    signal
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + level * z
        })
        .collect()
}

/// Random room-like kernel: unit direct path, then Gaussian taps under an
/// exponential envelope that decays by ~60 dB over the kernel.
pub fn reverb_kernel<R: Rng + ?Sized>(taps: usize, rng: &mut R) -> Vec<f64> {
    if taps == 0 {
        return Vec::new();
    }
    let decay = 6.9 / taps as f64;
    let mut kernel = Vec::with_capacity(taps);
    kernel.push(1.0);
    for k in 1..taps {
        let z: f64 = StandardNormal.sample(rng);
        kernel.push(0.3 * z * (-decay * k as f64).exp());
    }
    kernel
}

/// Causal convolution truncated to the input length.
pub fn apply_fir(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..signal.len())
        .map(|n| {
            kernel
                .iter()
                .take(n + 1)
                .enumerate()
                .map(|(k, h)| h * signal[n - k])
                .sum()
        })
        .collect()
}

/// Normalize, add noise at an SNR drawn uniformly from the configured range,
/// optionally reverberate, and renormalize to unit RMS.
pub fn augment<R: Rng + ?Sized>(signal: &[f64], config: &AugConfig, rng: &mut R) -> Result<Vec<f64>> {
    config.validate()?;
    let clean = normalize_volume(signal)?;
    if !config.enabled {
        return Ok(clean);
    }
    let snr = if config.snr_min_db == config.snr_max_db {
        config.snr_min_db
    } else {
        rng.random_range(config.snr_min_db..=config.snr_max_db)
    };
    let noisy = add_noise_at_snr(&clean, snr, rng);
    let out = if config.reverb_taps > 0 {
        apply_fir(&noisy, &reverb_kernel(config.reverb_taps, rng))
    } else {
        noisy
    };
    normalize_volume(&out)
}
