//! Training loop: sample, condition, mix, featurize, encode, score, step.

use rand::Rng;

use super::{encode_batch, init_params, EncoderConfig, EncoderParams};
use crate::data::{sample_batch, Batch, BatchSpec, Corpus, FeatureConfig, FeatureExtractor, Frames};
use crate::error::{Error, Result};
use crate::losses::{self, build_label_weights, LabelWeights, LossKind};
use crate::mixup::{augment, mix_inputs, AugConfig, MixLevel, MixupConfig};
use crate::numerics::{finite_difference_gradient, gradient_mismatch, AdamState, Graph};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub segment_seconds: f64,
    pub learning_rate: f64,
    /// Factor applied once every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub loss: LossKind,
    pub mixup: MixupConfig,
    pub aug: AugConfig,
    pub features: FeatureConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batches_per_epoch: 50,
            speakers_per_batch: 8,
            utterances_per_speaker: 2,
            segment_seconds: 2.0,
            learning_rate: 0.001,
            lr_decay: 0.95,
            lr_decay_every: 10,
            loss: LossKind::Ap,
            mixup: MixupConfig::default(),
            aug: AugConfig::default(),
            features: FeatureConfig::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            speakers_per_batch: self.speakers_per_batch,
            utterances_per_speaker: self.utterances_per_speaker,
            segment_seconds: self.segment_seconds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch_spec().validate()?;
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("train.epochs and train.batches_per_epoch must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("train.lr must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::config("learning-rate decay must lie in (0, 1] with a positive period"));
        }
        if self.mixup.enabled {
            self.mixup.validate()?;
            if self.loss == LossKind::Ap {
                return Err(Error::config(
                    "mixup needs a mixup-aware loss (ce_mixup or contrastive_mixup); ap ignores the mixed labels",
                ));
            }
        }
        self.aug.validate()
    }
}

/// `lr * decay^floor(epoch / every)` for a 0-based epoch.
pub fn learning_rate_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Largest `|Δp| / (lr * bound(t))` over all steps; at most 1.
    pub max_step_ratio: f64,
}

/// Encoder inputs for one batch after conditioning and mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    /// `N * (M-1)` support inputs, speaker-major.
    pub support: Vec<Frames>,
    /// `N` query inputs, mixed when mixup is enabled.
    pub query: Vec<Frames>,
    pub label_weights: LabelWeights,
}

/// Augments (when enabled) and volume-normalizes every segment.
pub fn condition_segments<R: Rng + ?Sized>(batch: &Batch, aug: &AugConfig, rng: &mut R) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .segments
        .iter()
        .map(|segs| segs.iter().map(|s| augment(s, aug, rng)).collect())
        .collect()
}

pub fn prepare_batch<A: Rng + ?Sized, M: Rng + ?Sized>(
    batch: &Batch,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    aug_rng: &mut A,
    mix_rng: &mut M,
) -> Result<PreparedBatch> {
    let conditioned = condition_segments(batch, &config.aug, aug_rng)?;
    let (n, m) = (batch.n(), batch.m());
    let mut support = Vec::with_capacity(n * (m - 1));
    for segs in &conditioned {
        for s in &segs[..m - 1] {
            support.push(extractor.extract(s)?);
        }
    }
    let queries: Vec<Vec<f64>> = conditioned.iter().map(|segs| segs[m - 1].clone()).collect();
    let (query, lambda, shuffle) = match config.mixup.level {
        MixLevel::Waveform => {
            let mixed = mix_inputs(&queries, &config.mixup, mix_rng)?;
            let frames = mixed
                .mixed_inputs
                .iter()
                .map(|q| extractor.extract(q))
                .collect::<Result<Vec<_>>>()?;
            (frames, mixed.lambda, mixed.shuffle)
        }
        MixLevel::Feature => {
            let frames = queries.iter().map(|q| extractor.extract(q)).collect::<Result<Vec<_>>>()?;
            let flat: Vec<Vec<f64>> = frames.iter().map(|f| f.values.clone()).collect();
            let mixed = mix_inputs(&flat, &config.mixup, mix_rng)?;
            let frames = frames
                .into_iter()
                .zip(mixed.mixed_inputs)
                .map(|(f, values)| Frames { values, ..f })
                .collect();
            (frames, mixed.lambda, mixed.shuffle)
        }
    };
    Ok(PreparedBatch {
        support,
        query,
        label_weights: build_label_weights(n, &shuffle, lambda)?,
    })
}

/// Loss and flat gradient (layout order) for one prepared batch.
pub(crate) fn loss_and_gradient(params: &EncoderParams, batch: &PreparedBatch, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let n = batch.query.len();
    let per = batch.support.len() / n;
    let mut g = Graph::new();
    let vars = params.register(&mut g, true)?;
    let config = params.config();
    let support: Vec<&Frames> = batch.support.iter().collect();
    let query: Vec<&Frames> = batch.query.iter().collect();
    let s = encode_batch(&mut g, &vars, config, &support)?.embeddings;
    let s = g.reshape(s, vec![n, per, config.embedding_dim])?;
    let q = encode_batch(&mut g, &vars, config, &query)?.embeddings;
    let c = losses::compute_centroids(&mut g, s)?;
    let sim = losses::compute_similarity_matrix(&mut g, q, c, vars.get("sim.w"), vars.get("sim.b"))?;
    let loss = losses::loss_for(&mut g, kind, sim, &batch.label_weights)?;
    g.backward(loss)?;
    let mut grad = Vec::with_capacity(params.values().len());
    for &v in vars.all() {
        grad.extend_from_slice(g.grad(v).expect("trainable leaf"));
    }
    Ok((g.scalar(loss), grad))
}

/// Worst ratio of analytic-vs-central-difference gradient error to the
/// allowed tolerance (`rel` relative, `abs_floor` absolute). At most 1 passes.
pub fn gradient_check(
    params: &EncoderParams,
    batch: &PreparedBatch,
    kind: LossKind,
    rel: f64,
    abs_floor: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_gradient(params, batch, kind)?;
    let numeric = finite_difference_gradient(
        |p| {
            let probe = EncoderParams::from_values(params.config().clone(), p.to_vec())?;
            Ok(loss_and_gradient(&probe, batch, kind)?.0)
        },
        params.values(),
        1e-6,
    )?;
    Ok(gradient_mismatch(&analytic, &numeric, rel, abs_floor))
}

fn with_position(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { node, op } => Error::Numeric(format!(
            "epoch {epoch}, batch {batch}: non-finite value at node {node} ({op})"
        )),
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Initializes from `rng_seed` and trains.
pub fn train(corpus: &Corpus, encoder: &EncoderConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params(encoder, &mut stream(config.rng_seed, Stream::Init))?;
    train_from(corpus, params, config)
}

/// Trains the given parameters for `config.epochs` epochs.
pub fn train_from(corpus: &Corpus, mut params: EncoderParams, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let rate = corpus.sample_rate()?;
    if rate != config.features.sample_rate {
        return Err(Error::config(format!(
            "corpus is sampled at {rate} Hz but features expect {} Hz",
            config.features.sample_rate
        )));
    }
    if params.config().input_dim != config.features.mel_filters {
        return Err(Error::config(format!(
            "encoder takes {} features but {} mel filters are configured",
            params.config().input_dim,
            config.features.mel_filters
        )));
    }
    let extractor = FeatureExtractor::new(config.features)?;
    let spec = config.batch_spec();
    let mut batch_rng = stream(config.rng_seed, Stream::Batches);
    let mut aug_rng = stream(config.rng_seed, Stream::Augment);
    let mut mix_rng = stream(config.mixup.rng_seed, Stream::Mixup);
    let mut adam = AdamState::new(params.values().len(), config.learning_rate)?;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut learning_rates = Vec::with_capacity(config.epochs);
    let mut max_step_ratio: f64 = 0.0;

    for epoch in 0..config.epochs {
        adam.learning_rate = learning_rate_at(config, epoch);
        learning_rates.push(adam.learning_rate);
        let mut total = 0.0;
        for b in 0..config.batches_per_epoch {
            let batch = sample_batch(corpus, &spec, &mut batch_rng)?;
            let prepared = prepare_batch(&batch, config, &extractor, &mut aug_rng, &mut mix_rng)
                .map_err(|e| with_position(e, epoch, b))?;
            let (loss, grad) =
                loss_and_gradient(&params, &prepared, config.loss).map_err(|e| with_position(e, epoch, b))?;
            let before = params.values().to_vec();
            adam.step(params.values_mut(), &grad).map_err(|e| with_position(e, epoch, b))?;
            if adam.learning_rate > 0.0 {
                let limit = adam.learning_rate * adam.step_bound(adam.step_count());
                for (p, q) in params.values().iter().zip(&before) {
                    max_step_ratio = max_step_ratio.max((p - q).abs() / limit);
                }
            }
            params.clamp_similarity();
            total += loss;
        }
        loss_trace.push(total / config.batches_per_epoch as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_trace,
        learning_rates,
        max_step_ratio,
    })
}
