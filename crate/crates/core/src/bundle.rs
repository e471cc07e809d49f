//! Calibration bundles: last-token hidden states entering and leaving each
//! layer, plus the embedding matrix used for vocabulary projection.
//!
//! Naming inside a [`TensorStore`]:
//!
//! * `layer.{i}.in.sample.{s}` / `layer.{i}.out.sample.{s}`: f32, shape `[d]`
//! * `embed.W_E`: f32, shape `[V, d]`
//!
//! Metadata: `bundle_version` = `"1"`, `model_id`, optional `k_hint`.

use std::collections::{BTreeMap, BTreeSet};

use crate::store::{Dtype, StoreError, TensorData, TensorStore};

pub const EMBED_NAME: &str = "embed.W_E";
pub const BUNDLE_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("bundle contains no layer captures")]
    Empty,
    #[error("tensor `{name}`: dimension {got} does not match embedding width {expected}")]
    DimensionMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("tensor `{name}`: expected {expected} shape, got {shape:?}")]
    BadShape {
        name: String,
        expected: &'static str,
        shape: Vec<usize>,
    },
}

pub fn input_name(layer: usize, sample: usize) -> String {
    format!("layer.{layer}.in.sample.{sample}")
}

pub fn output_name(layer: usize, sample: usize) -> String {
    format!("layer.{layer}.out.sample.{sample}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    In,
    Out,
}

/// Parses `layer.{i}.{in|out}.sample.{s}`.
fn parse_capture_name(name: &str) -> Option<(usize, Side, usize)> {
    let rest = name.strip_prefix("layer.")?;
    let mut parts = rest.split('.');
    let layer = parts.next()?.parse().ok()?;
    let side = match parts.next()? {
        "in" => Side::In,
        "out" => Side::Out,
        _ => return None,
    };
    if parts.next()? != "sample" {
        return None;
    }
    let sample = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((layer, side, sample))
}

/// Per-layer, per-sample hidden states and the `V x d` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBundle {
    num_layers: usize,
    samples: usize,
    dim: usize,
    vocab: usize,
    /// Indexed `[layer][sample]`.
    x_in: Vec<Vec<Vec<f32>>>,
    x_out: Vec<Vec<Vec<f32>>>,
    /// Row-major `vocab x dim`.
    embed: Vec<f32>,
}

impl CalibrationBundle {
    /// Builds a bundle from in-memory captures, checking every invariant.
    pub fn new(
        x_in: Vec<Vec<Vec<f32>>>,
        x_out: Vec<Vec<Vec<f32>>>,
        embed: Vec<f32>,
        vocab: usize,
    ) -> Result<Self, BundleError> {
        let num_layers = x_in.len();
        if num_layers == 0 || x_in[0].is_empty() {
            return Err(BundleError::Empty);
        }
        let samples = x_in[0].len();
        if vocab == 0 || !embed.len().is_multiple_of(vocab) {
            return Err(BundleError::BadShape {
                name: EMBED_NAME.to_string(),
                expected: "[V, d]",
                shape: vec![embed.len()],
            });
        }
        let dim = embed.len() / vocab;
        if x_out.len() != num_layers {
            return Err(BundleError::MissingTensor(output_name(
                x_out.len().min(num_layers),
                0,
            )));
        }
        for layer in 0..num_layers {
            for (side, caps) in [(Side::In, &x_in[layer]), (Side::Out, &x_out[layer])] {
                let name_of = |s| match side {
                    Side::In => input_name(layer, s),
                    Side::Out => output_name(layer, s),
                };
                if caps.len() != samples {
                    return Err(BundleError::MissingTensor(name_of(caps.len().min(samples))));
                }
                for (s, v) in caps.iter().enumerate() {
                    if v.len() != dim {
                        return Err(BundleError::DimensionMismatch {
                            name: name_of(s),
                            expected: dim,
                            got: v.len(),
                        });
                    }
                }
            }
        }
        Ok(Self {
            num_layers,
            samples,
            dim,
            vocab,
            x_in,
            x_out,
            embed,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn x_in(&self, layer: usize, sample: usize) -> &[f32] {
        &self.x_in[layer][sample]
    }

    pub fn x_out(&self, layer: usize, sample: usize) -> &[f32] {
        &self.x_out[layer][sample]
    }

    pub fn embed(&self) -> &[f32] {
        &self.embed
    }

    /// Row `v` of the embedding matrix.
    pub fn embed_row(&self, v: usize) -> &[f32] {
        &self.embed[v * self.dim..(v + 1) * self.dim]
    }

    /// Serializes under the activation naming convention.
    pub fn to_store(
        &self,
        model_id: &str,
        k_hint: Option<usize>,
    ) -> Result<TensorStore, StoreError> {
        let mut tensors = Vec::with_capacity(2 * self.num_layers * self.samples + 1);
        for layer in 0..self.num_layers {
            for s in 0..self.samples {
                tensors.push((
                    input_name(layer, s),
                    TensorData::from_f32(vec![self.dim], &self.x_in[layer][s]),
                ));
                tensors.push((
                    output_name(layer, s),
                    TensorData::from_f32(vec![self.dim], &self.x_out[layer][s]),
                ));
            }
        }
        tensors.push((
            EMBED_NAME.to_string(),
            TensorData::from_f32(vec![self.vocab, self.dim], &self.embed),
        ));
        let mut meta = BTreeMap::new();
        meta.insert("bundle_version".to_string(), BUNDLE_VERSION.to_string());
        meta.insert("model_id".to_string(), model_id.to_string());
        if let Some(k) = k_hint {
            meta.insert("k_hint".to_string(), k.to_string());
        }
        TensorStore::from_tensors(tensors, meta)
    }
}

/// Reads and validates a bundle. `L` is one past the largest layer index
/// present and `S` one past the largest sample index; every `(layer, sample)`
/// pair in that grid must be present on both sides.
pub fn load_bundle(store: &TensorStore) -> Result<CalibrationBundle, BundleError> {
    let embed_view = store
        .tensor(EMBED_NAME)
        .ok_or_else(|| BundleError::MissingTensor(EMBED_NAME.to_string()))?;
    embed_view.expect_dtype(Dtype::F32)?;
    let (vocab, dim) = match embed_view.shape {
        [v, d] if *v > 0 && *d > 0 => (*v, *d),
        other => {
            return Err(BundleError::BadShape {
                name: EMBED_NAME.to_string(),
                expected: "[V, d]",
                shape: other.to_vec(),
            })
        }
    };
    let embed = embed_view.to_f32_vec()?;

    let mut present = BTreeSet::new();
    let (mut max_layer, mut max_sample) = (None::<usize>, None::<usize>);
    for name in store.names() {
        if let Some((layer, side, sample)) = parse_capture_name(name) {
            present.insert((layer, side == Side::Out, sample));
            max_layer = max_layer.max(Some(layer));
            max_sample = max_sample.max(Some(sample));
        }
    }
    let (Some(max_layer), Some(max_sample)) = (max_layer, max_sample) else {
        return Err(BundleError::Empty);
    };
    let (num_layers, samples) = (max_layer + 1, max_sample + 1);

    let read = |name: String| -> Result<Vec<f32>, BundleError> {
        let view = store
            .tensor(&name)
            .ok_or_else(|| BundleError::MissingTensor(name.clone()))?;
        view.expect_dtype(Dtype::F32)?;
        if view.shape.len() != 1 {
            return Err(BundleError::BadShape {
                name,
                expected: "[d]",
                shape: view.shape.to_vec(),
            });
        }
        if view.shape[0] != dim {
            return Err(BundleError::DimensionMismatch {
                name,
                expected: dim,
                got: view.shape[0],
            });
        }
        Ok(view.to_f32_vec()?)
    };

    let mut x_in = Vec::with_capacity(num_layers);
    let mut x_out = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut ins = Vec::with_capacity(samples);
        let mut outs = Vec::with_capacity(samples);
        for s in 0..samples {
            ins.push(read(input_name(layer, s))?);
            outs.push(read(output_name(layer, s))?);
        }
        x_in.push(ins);
        x_out.push(outs);
    }
    CalibrationBundle::new(x_in, x_out, embed, vocab)
}
