//! A small seeded decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head softmax
//! attention, and a SiLU MLP; learned positional embeddings; output head tied
//! to the token embedding. It exists to produce calibration bundles and to
//! measure perplexity before and after quantization without any external
//! checkpoint.
//!
//! Weights are drawn from [`ToyRng`] (PCG-XSH-RR 64/32) seeded with
//! `ToyConfig::seed`, uniformly with standard deviation `0.02 / sqrt(d)`.
//! Norm gains start at one.

mod corpus;
mod forward;
mod rng;

pub use corpus::{calibration_prompts, synthetic_corpus};
pub use forward::{attention_maps, capture_bundle, forward_capture, perplexity, Capture};
pub use rng::ToyRng;

use std::collections::BTreeMap;

use crate::quantizer::{dequantize, load_quantized, QuantError};
use crate::store::{StoreError, TensorData, TensorStore};

pub const TOY_MODEL_ID: &str = "toy";

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("corpus needs at least 2 tokens, got {0}")]
    CorpusTooShort(usize),
    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 64,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 7] = [
    "vocab", "d_model", "n_layers", "n_heads", "ffn_mult", "max_seq", "seed",
];

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let dims = [
            self.vocab,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.ffn_mult,
            self.max_seq,
        ];
        if dims.contains(&0) {
            return Err(ToyError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ToyError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab > u32::MAX as usize {
            return Err(ToyError::InvalidConfig("vocabulary too large".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Attention, MLP and both norm gains of one block.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * self.ffn_mult * d * d + 2 * d
    }

    /// Token and positional embeddings plus the final norm gain.
    pub fn fixed_param_count(&self) -> usize {
        self.vocab * self.d_model + self.max_seq * self.d_model + self.d_model
    }

    pub fn param_count(&self) -> usize {
        self.fixed_param_count() + self.n_layers * self.layer_param_count()
    }

    /// Rows of the 2-D matrices in one block (one scale each when quantized).
    pub fn quantized_rows_per_layer(&self) -> usize {
        4 * self.d_model + self.ffn_dim() + self.d_model
    }

    fn to_metadata(self) -> BTreeMap<String, String> {
        let values = [
            self.vocab as u64,
            self.d_model as u64,
            self.n_layers as u64,
            self.n_heads as u64,
            self.ffn_mult as u64,
            self.max_seq as u64,
            self.seed,
        ];
        let mut meta: BTreeMap<String, String> = CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (format!("toy.{k}"), v.to_string()))
            .collect();
        meta.insert("model_id".into(), TOY_MODEL_ID.into());
        meta
    }

    fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self, ToyError> {
        let get = |k: &str| -> Result<u64, ToyError> {
            meta.get(&format!("toy.{k}"))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    ToyError::InvalidConfig(format!("metadata `toy.{k}` missing or invalid"))
                })
        };
        let config = Self {
            vocab: get("vocab")? as usize,
            d_model: get("d_model")? as usize,
            n_layers: get("n_layers")? as usize,
            n_heads: get("n_heads")? as usize,
            ffn_mult: get("ffn_mult")? as usize,
            max_seq: get("max_seq")? as usize,
            seed: get("seed")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Weights of one block. Matrices are row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    /// `[ffn_dim, d]`
    pub w1: Vec<f32>,
    /// `[d, ffn_dim]`
    pub w2: Vec<f32>,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub config: ToyConfig,
    /// `[V, d]`, also the output head.
    pub embed: Vec<f32>,
    /// `[max_seq, d]`
    pub pos: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

/// Deterministically initializes weights from `config.seed`.
pub fn init_toy(config: ToyConfig) -> Result<ToyWeights, ToyError> {
    config.validate()?;
    let d = config.d_model;
    let f = config.ffn_dim();
    let std = 0.02 / (d as f32).sqrt();
    let mut rng = ToyRng::new(config.seed, rng::WEIGHT_STREAM);
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.symmetric(std)).collect() };

    let embed = draw(config.vocab * d);
    let pos = draw(config.max_seq * d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: draw(d * d),
            wk: draw(d * d),
            wv: draw(d * d),
            wo: draw(d * d),
            w1: draw(f * d),
            w2: draw(d * f),
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        })
        .collect();
    Ok(ToyWeights {
        config,
        embed,
        pos,
        layers,
        final_norm: vec![1.0; d],
    })
}

fn layer_tensor_shapes(config: &ToyConfig) -> [(&'static str, Vec<usize>); 8] {
    let d = config.d_model;
    let f = config.ffn_dim();
    [
        ("wq", vec![d, d]),
        ("wk", vec![d, d]),
        ("wv", vec![d, d]),
        ("wo", vec![d, d]),
        ("w1", vec![f, d]),
        ("w2", vec![d, f]),
        ("norm1", vec![d]),
        ("norm2", vec![d]),
    ]
}

impl LayerWeights {
    fn field(&self, name: &str) -> &Vec<f32> {
        match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w1" => &self.w1,
            "w2" => &self.w2,
            "norm1" => &self.norm1,
            "norm2" => &self.norm2,
            _ => unreachable!("unknown layer field {name}"),
        }
    }

    fn field_mut(&mut self, name: &str) -> &mut Vec<f32> {
        match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w1" => &mut self.w1,
            "w2" => &mut self.w2,
            "norm1" => &mut self.norm1,
            "norm2" => &mut self.norm2,
            _ => unreachable!("unknown layer field {name}"),
        }
    }

    fn zeros(config: &ToyConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim();
        Self {
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            w1: vec![0.0; f * d],
            w2: vec![0.0; d * f],
            norm1: vec![0.0; d],
            norm2: vec![0.0; d],
        }
    }
}

impl ToyWeights {
    /// Zeroes every block's matrices and gains, leaving embeddings intact.
    pub fn zero_layers(&mut self) {
        for layer in &mut self.layers {
            *layer = LayerWeights::zeros(&self.config);
        }
    }

    pub fn to_store(&self) -> Result<TensorStore, StoreError> {
        let c = &self.config;
        let d = c.d_model;
        let mut tensors = vec![
            (
                "embed.W_E".to_string(),
                TensorData::from_f32(vec![c.vocab, d], &self.embed),
            ),
            (
                "embed.pos".to_string(),
                TensorData::from_f32(vec![c.max_seq, d], &self.pos),
            ),
            (
                "final_norm".to_string(),
                TensorData::from_f32(vec![d], &self.final_norm),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, shape) in layer_tensor_shapes(c) {
                tensors.push((
                    format!("layers.{i}.{field}"),
                    TensorData::from_f32(shape, layer.field(field)),
                ));
            }
        }
        TensorStore::from_tensors(tensors, c.to_metadata())
    }

    /// Reads weights written by [`ToyWeights::to_store`].
    pub fn from_store(store: &TensorStore) -> Result<Self, ToyError> {
        load_dequantized(store)
    }
}

/// Reads a toy store, dequantizing any `.qweight`/`.scales` pairs written by
/// [`apply_plan`](crate::quantizer::apply_plan) and copying plain tensors.
pub fn load_dequantized(store: &TensorStore) -> Result<ToyWeights, ToyError> {
    let config = ToyConfig::from_metadata(store.metadata())?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>, ToyError> {
        let mismatch = |got: Vec<usize>| ToyError::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            got,
        };
        if let Some(view) = store.tensor(name) {
            if view.shape != shape {
                return Err(mismatch(view.shape.to_vec()));
            }
            return Ok(view.to_f32_vec()?);
        }
        match load_quantized(store, name)? {
            Some(qt) if [qt.rows, qt.cols] == shape => Ok(dequantize(&qt)),
            Some(qt) => Err(mismatch(vec![qt.rows, qt.cols])),
            None => Err(ToyError::MissingTensor(name.to_string())),
        }
    };

    let d = config.d_model;
    let embed = read("embed.W_E", &[config.vocab, d])?;
    let pos = read("embed.pos", &[config.max_seq, d])?;
    let final_norm = read("final_norm", &[d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut layer = LayerWeights::zeros(&config);
        for (field, shape) in layer_tensor_shapes(&config) {
            *layer.field_mut(field) = read(&format!("layers.{i}.{field}"), &shape)?;
        }
        layers.push(layer);
    }
    Ok(ToyWeights {
        config,
        embed,
        pos,
        layers,
        final_norm,
    })
}
