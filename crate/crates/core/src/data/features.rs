//! Log-mel spectrogram: 25 ms Hann frames every 10 ms, zero-padded FFT
//! magnitude, triangular mel filters from 0 Hz to Nyquist, floored log.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Filterbank energies below this are clamped before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub mel_filters: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_seconds: 0.025,
            hop_seconds: 0.010,
            mel_filters: 40,
        }
    }
}

impl FeatureConfig {
    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    /// Frames produced for `samples` input samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window_len() {
            0
        } else {
            (samples - self.window_len()) / self.hop_len() + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window_len() == 0 || self.hop_len() == 0 || self.mel_filters == 0 {
            return Err(Error::config(format!("degenerate feature configuration {self:?}")));
        }
        Ok(())
    }
}

/// `T x F` row-major log-mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub frames: usize,
    pub filters: usize,
    pub values: Vec<f64>,
}

impl Frames {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.filters..(t + 1) * self.filters]
    }

    /// Average over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.filters];
        for t in 0..self.frames {
            for (a, v) in acc.iter_mut().zip(self.row(t)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.frames as f64).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

struct Filter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    config: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Filter>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("config", &self.config).finish()
    }
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.fft_len();
        let len = config.window_len();
        let window = (0..len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
            .collect();
        let nyquist = config.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..config.mel_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (config.mel_filters + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate as f64 / n_fft as f64;
        let filters = (0..config.mel_filters)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let first_bin = (lo / bin_hz).ceil() as usize;
                let last_bin = ((hi / bin_hz).floor() as usize).min(n_fft / 2);
                let weights = (first_bin..=last_bin)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= center {
                            (f - lo) / (center - lo)
                        } else {
                            (hi - f) / (hi - center)
                        }
                        .max(0.0)
                    })
                    .collect();
                Filter { first_bin, weights }
            })
            .collect();
        Ok(Self {
            config,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Center frequency in Hz of mel filter `m`.
    pub fn filter_center_hz(&self, m: usize) -> f64 {
        let top = hz_to_mel(self.config.sample_rate as f64 / 2.0);
        mel_to_hz(top * (m + 1) as f64 / (self.config.mel_filters + 1) as f64)
    }

    /// Triangle weight of filter `m` at FFT bin `k`.
    pub fn filter_weight(&self, m: usize, k: usize) -> f64 {
        let f = &self.filters[m];
        k.checked_sub(f.first_bin)
            .and_then(|i| f.weights.get(i))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn extract(&self, segment: &[f64]) -> Result<Frames> {
        let (len, hop) = (self.config.window_len(), self.config.hop_len());
        if segment.len() < len {
            return Err(Error::contract(format!(
                "segment of {} samples is shorter than one {len}-sample window",
                segment.len()
            )));
        }
        let frames = self.config.frame_count(segment.len());
        let n_fft = self.config.fft_len();
        let filters = self.filters.len();
        let mut values = Vec::with_capacity(frames * filters);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut magnitude = vec![0.0; n_fft / 2 + 1];
        for t in 0..frames {
            let chunk = &segment[t * hop..t * hop + len];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(if i < len { chunk[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in magnitude.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for f in &self.filters {
                let energy: f64 = f
                    .weights
                    .iter()
                    .zip(&magnitude[f.first_bin..])
                    .map(|(w, m)| w * m)
                    .sum();
                values.push(energy.max(LOG_FLOOR).ln());
            }
        }
        Ok(Frames {
            frames,
            filters,
            values,
        })
    }
}

/// One-shot convenience around [`FeatureExtractor`].
pub fn extract_features(segment: &[f64], config: &FeatureConfig) -> Result<Frames> {
    FeatureExtractor::new(*config)?.extract(segment)
}
