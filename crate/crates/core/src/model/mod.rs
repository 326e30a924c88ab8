//! Frame-level MLP encoder with mean or self-attentive pooling and a linear
//! projection to the embedding space, plus its training loop.

mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Frames;
use crate::error::{Error, Result};
use crate::losses::SimilarityParams;
use crate::numerics::{Graph, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    condition_segments, gradient_check, learning_rate_at, prepare_batch, train, train_from, PreparedBatch, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}` (expected relu or tanh)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    Mean,
    Sap,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sap => "sap",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sap" => Ok(Pooling::Sap),
            other => Err(Error::config(format!("unknown pooling `{other}` (expected mean or sap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            hidden_dims: vec![64, 64],
            embedding_dim: 32,
            activation: Activation::Relu,
            pooling: Pooling::Sap,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input dimension must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!(
                "model.hidden_dims needs at least one positive width, got {:?}",
                self.hidden_dims
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config(format!(
                "model.embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    fn hidden_width(&self) -> usize {
        *self.hidden_dims.last().expect("validated")
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("layer{i}.weight"), vec![fan_in, h]));
            out.push((format!("layer{i}.bias"), vec![h]));
            fan_in = h;
        }
        if self.pooling == Pooling::Sap {
            out.push(("sap.weight".into(), vec![fan_in, fan_in]));
            out.push(("sap.bias".into(), vec![fan_in]));
            out.push(("sap.context".into(), vec![fan_in]));
        }
        out.push(("proj.weight".into(), vec![fan_in, self.embedding_dim]));
        out.push(("proj.bias".into(), vec![self.embedding_dim]));
        out.push(("sim.w".into(), vec![]));
        out.push(("sim.b".into(), vec![]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All trainable values in one flat array, addressed through a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    slots: Vec<ParamSlot>,
    values: Vec<f64>,
}

impl EncoderParams {
    /// Wraps a flat parameter array laid out in declaration order.
    pub fn from_values(config: EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        for (name, shape) in config.layout() {
            let len = shape.iter().product::<usize>();
            slots.push(ParamSlot { name, shape, offset, len });
            offset += len;
        }
        if values.len() != offset {
            return Err(Error::Format(format!(
                "encoder needs {offset} parameters, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { config, slots, values })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Values of the named parameter.
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn similarity(&self) -> SimilarityParams {
        SimilarityParams {
            w: self.get("sim.w").expect("layout")[0],
            b: self.get("sim.b").expect("layout")[0],
        }
    }

    pub(crate) fn clamp_similarity(&mut self) {
        let mut sim = self.similarity();
        sim.clamp();
        let offset = self.slot("sim.w").expect("layout").offset;
        self.values[offset] = sim.w;
    }

    /// Registers every parameter on `g`, trainable or frozen.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .slots
            .iter()
            .map(|s| {
                let v = self.values[s.offset..s.offset + s.len].to_vec();
                if trainable {
                    g.param(s.shape.clone(), v)
                } else {
                    g.constant(s.shape.clone(), v)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars {
            names: self.slots.iter().map(|s| s.name.clone()).collect(),
            vars,
        })
    }
}

/// Graph handles of the encoder parameters, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).expect("parameter name from the layout");
        self.vars[i]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform weights, zero biases, `w = 10`, `b = -5`.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<EncoderParams> {
    config.validate()?;
    let sim = SimilarityParams::default();
    let mut values = Vec::new();
    for (name, shape) in config.layout() {
        match (name.as_str(), shape.as_slice()) {
            ("sim.w", _) => values.push(sim.w),
            ("sim.b", _) => values.push(sim.b),
            ("sap.context", &[h]) => {
                let s = (6.0 / (h + 1) as f64).sqrt();
                values.extend((0..h).map(|_| rng.random_range(-s..=s)));
            }
            (_, &[fan_in, fan_out]) => {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)));
            }
            (_, shape) => values.extend(std::iter::repeat_n(0.0, shape.iter().product())),
        }
    }
    EncoderParams::from_values(config.clone(), values)
}

/// Embeddings for a stack of inputs plus, under SAP pooling, the `[K, T]`
/// attention weights.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub embeddings: Var,
    pub attention: Option<Var>,
}

/// Encodes `K` inputs of identical length `T` into a `[K, D]` node.
pub fn encode_batch(g: &mut Graph, params: &ParamVars, config: &EncoderConfig, inputs: &[&Frames]) -> Result<Encoded> {
    let first = inputs.first().ok_or_else(|| Error::contract("nothing to encode"))?;
    let (t, f) = (first.frames, first.filters);
    if t == 0 {
        return Err(Error::contract("cannot encode an input with zero frames"));
    }
    if f != config.input_dim {
        return Err(Error::contract(format!(
            "inputs have {f} features but the encoder expects {}",
            config.input_dim
        )));
    }
    if inputs.iter().any(|x| x.frames != t || x.filters != f) {
        return Err(Error::contract("inputs in one encoder call must share their frame count"));
    }
    let k = inputs.len();
    let mut stacked = Vec::with_capacity(k * t * f);
    for x in inputs {
        stacked.extend_from_slice(&x.values);
    }
    let mut h = g.constant(vec![k * t, f], stacked)?;
    for i in 0..config.hidden_dims.len() {
        let z = g.matmul(h, params.get(&format!("layer{i}.weight")))?;
        let z = g.add_row(z, params.get(&format!("layer{i}.bias")))?;
        h = match config.activation {
            Activation::Relu => g.relu(z)?,
            Activation::Tanh => g.tanh(z)?,
        };
    }
    let width = config.hidden_width();
    let (pooled, attention) = match config.pooling {
        Pooling::Mean => {
            let cube = g.reshape(h, vec![k, t, width])?;
            (g.mean_axis(cube, 1)?, None)
        }
        Pooling::Sap => {
            let a = g.matmul(h, params.get("sap.weight"))?;
            let a = g.add_row(a, params.get("sap.bias"))?;
            let a = g.tanh(a)?;
            let context = g.reshape(params.get("sap.context"), vec![width, 1])?;
            let scores = g.matmul(a, context)?;
            let scores = g.reshape(scores, vec![k, t])?;
            let alpha = g.softmax_rows(scores)?;
            // broadcast each weight across the hidden width
            let column = g.reshape(alpha, vec![k * t, 1])?;
            let ones = g.constant(vec![1, width], vec![1.0; width])?;
            let spread = g.matmul(column, ones)?;
            let weighted = g.mul(spread, h)?;
            let cube = g.reshape(weighted, vec![k, t, width])?;
            let mean = g.mean_axis(cube, 1)?;
            (g.scale(mean, t as f64)?, Some(alpha))
        }
    };
    let e = g.matmul(pooled, params.get("proj.weight"))?;
    let embeddings = g.add_row(e, params.get("proj.bias"))?;
    Ok(Encoded { embeddings, attention })
}

/// Embeds inputs of identical length without tracking gradients; one
/// `D`-vector per input.
pub fn embed(params: &EncoderParams, inputs: &[&Frames]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false)?;
    let out = encode_batch(&mut g, &vars, params.config(), inputs)?;
    Ok(g.values(out.embeddings)
        .chunks(params.config().embedding_dim)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Embedding of a single `T x F` input.
pub fn encode(frames: &Frames, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(embed(params, &[frames])?.remove(0))
}
