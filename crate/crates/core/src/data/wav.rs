//! 16-bit PCM mono WAV I/O and tab-separated manifests.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Corpus, Split, Utterance};
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Reads a mono 16-bit PCM file as reals in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

/// Writes reals as mono 16-bit PCM, rounding and saturating out-of-range values.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &x in samples {
        writer.write_sample((x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Problems found while loading that do not abort the load.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationSummary {
    pub warnings: Vec<String>,
    /// Speakers below the requested utterance count, with their count.
    /// They stay in the corpus but are never sampled into a batch.
    pub short_speakers: Vec<(String, usize)>,
}

impl ValidationSummary {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty() && self.short_speakers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLoad {
    pub corpus: Corpus,
    pub summary: ValidationSummary,
}

/// Loads `speaker_id<TAB>relative/path.wav` lines. Blank lines are skipped.
/// Paths resolve against the manifest's directory and double as utterance
/// ids. `expected_rate` turns a rate mismatch into an error.
pub fn load_manifest(
    manifest: &Path,
    split: Split,
    min_utterances: usize,
    expected_rate: Option<u32>,
) -> Result<ManifestLoad> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (speaker, rel) = match fields.as_slice() {
            [s, p] if !s.trim().is_empty() && !p.trim().is_empty() => (s.trim(), p.trim()),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `speaker_id<TAB>path`, got {line:?}"),
                })
            }
        };
        let (samples, sample_rate) = read_wav(&base.join(rel))?;
        if let Some(rate) = expected_rate {
            if sample_rate != rate {
                return Err(Error::config(format!(
                    "{rel} is sampled at {sample_rate} Hz but {rate} Hz is configured"
                )));
            }
        }
        if samples.is_empty() {
            return Err(Error::Format(format!("{rel} contains no samples")));
        }
        utterances.push(Utterance {
            id: rel.to_string(),
            speaker_id: speaker.to_string(),
            samples,
            sample_rate,
        });
    }
    let corpus = Corpus::new(utterances, split);
    let mut summary = ValidationSummary::default();
    if corpus.is_empty() {
        summary.warnings.push(format!("{} lists no utterances", manifest.display()));
    } else {
        corpus.sample_rate()?;
    }
    for (speaker, idx) in corpus.speakers() {
        if idx.len() < min_utterances {
            summary.short_speakers.push((speaker.to_string(), idx.len()));
        }
    }
    Ok(ManifestLoad { corpus, summary })
}

/// Writes every utterance under `dir/<split>/` and a manifest `dir/<split>.tsv`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let split = corpus.split.to_string();
    fs::create_dir_all(dir.join(&split))?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let rel = format!("{split}/{}.wav", u.id.replace(['/', '\\'], "_"));
        write_wav(&dir.join(&rel), &u.samples, u.sample_rate)?;
        manifest.push_str(&format!("{}\t{rel}\n", u.speaker_id));
    }
    let path = dir.join(format!("{split}.tsv"));
    fs::write(&path, manifest)?;
    Ok(path)
}
