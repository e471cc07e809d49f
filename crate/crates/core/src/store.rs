//! Single-file tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64 header_len][header_len bytes of UTF-8 JSON][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! and may carry a `"__metadata__"` object of string pairs. Offsets are
//! relative to the start of the payload. This is the same layout used by
//! safetensors checkpoints, so ecosystem weight files can be read directly.
//!
//! Writing is deterministic: tensors are laid out in lexicographic name
//! order and the header is padded with spaces to an 8-byte boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;
/// Refuse headers above this size before allocating.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Metadata key marking INT4 payloads stored as packed `U8`.
pub const PACKING_KEY: &str = "packing";
/// Nibble order used for packed INT4 payloads.
pub const PACKING_INT4: &str = "int4-lo-first";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error(
        "tensor `{name}`: offsets [{begin}, {end}] out of bounds for payload of {payload} bytes"
    )]
    OffsetsOutOfBounds {
        name: String,
        begin: usize,
        end: usize,
        payload: usize,
    },
    #[error("tensors `{first}` and `{second}` overlap or leave a gap in the payload")]
    Overlap { first: String, second: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, got {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("tensor `{name}` has dtype {actual}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: Dtype,
        actual: Dtype,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    I8,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::I8 | Dtype::U8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::I8 => "I8",
            Dtype::U8 => "U8",
        }
    }

    pub fn parse(s: &str) -> Result<Self, StoreError> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "I8" => Ok(Dtype::I8),
            "U8" => Ok(Dtype::U8),
            other => Err(StoreError::UnsupportedDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A tensor to be written: dtype, shape and raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: Dtype::F32,
            shape,
            bytes,
        }
    }

    pub fn from_f16(shape: Vec<usize>, values: &[half::f16]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: Dtype::F16,
            shape,
            bytes,
        }
    }

    pub fn from_i8(shape: Vec<usize>, values: &[i8]) -> Self {
        let bytes = values.iter().map(|&v| v as u8).collect();
        Self {
            dtype: Dtype::I8,
            shape,
            bytes,
        }
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Self {
        Self {
            dtype: Dtype::U8,
            shape,
            bytes: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// Borrowed view of one tensor inside a [`TensorStore`].
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub name: &'a str,
    pub dtype: Dtype,
    pub shape: &'a [usize],
    pub bytes: &'a [u8],
}

impl TensorView<'_> {
    /// Decodes the payload to f32. `F16` is widened; integer dtypes are rejected.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>, StoreError> {
        match self.dtype {
            Dtype::F32 => Ok(self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()),
            Dtype::F16 => Ok(self
                .bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect()),
            other => Err(StoreError::DtypeMismatch {
                name: self.name.to_string(),
                expected: Dtype::F32,
                actual: other,
            }),
        }
    }

    pub fn to_i8_vec(&self) -> Result<Vec<i8>, StoreError> {
        self.expect_dtype(Dtype::I8)?;
        Ok(self.bytes.iter().map(|&b| b as i8).collect())
    }

    pub fn expect_dtype(&self, dtype: Dtype) -> Result<(), StoreError> {
        if self.dtype == dtype {
            Ok(())
        } else {
            Err(StoreError::DtypeMismatch {
                name: self.name.to_string(),
                expected: dtype,
                actual: self.dtype,
            })
        }
    }

    pub fn to_data(&self) -> TensorData {
        TensorData {
            dtype: self.dtype,
            shape: self.shape.to_vec(),
            bytes: self.bytes.to_vec(),
        }
    }
}

/// An in-memory tensor container. Immutable once built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorStore {
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
    payload: Vec<u8>,
}

impl TensorStore {
    /// Builds a store from named tensors. Payload order is lexicographic by name.
    pub fn from_tensors<I>(
        tensors: I,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (String, TensorData)>,
    {
        let mut sorted: BTreeMap<String, TensorData> = BTreeMap::new();
        for (name, data) in tensors {
            if name == METADATA_KEY {
                return Err(StoreError::MalformedHeader(format!(
                    "`{METADATA_KEY}` is reserved"
                )));
            }
            let expected = element_count(&data.shape) * data.dtype.size();
            if expected != data.bytes.len() {
                return Err(StoreError::ShapeMismatch {
                    name,
                    shape: data.shape,
                    expected,
                    actual: data.bytes.len(),
                });
            }
            if sorted.contains_key(&name) {
                return Err(StoreError::DuplicateName(name));
            }
            sorted.insert(name, data);
        }

        let total: usize = sorted.values().map(|d| d.bytes.len()).sum();
        let mut payload = Vec::with_capacity(total);
        let mut entries = BTreeMap::new();
        for (name, data) in sorted {
            let begin = payload.len();
            payload.extend_from_slice(&data.bytes);
            entries.insert(
                name.clone(),
                TensorEntry {
                    name,
                    dtype: data.dtype,
                    shape: data.shape,
                    data_offsets: (begin, payload.len()),
                },
            );
        }
        Ok(Self {
            entries,
            metadata,
            payload,
        })
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<TensorView<'_>> {
        self.entries.get(name).map(|e| self.view(e))
    }

    pub fn require(&self, name: &str) -> Result<TensorView<'_>, StoreError> {
        self.tensor(name)
            .ok_or_else(|| StoreError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = TensorView<'_>> {
        self.entries.values().map(|e| self.view(e))
    }

    fn view<'a>(&'a self, e: &'a TensorEntry) -> TensorView<'a> {
        TensorView {
            name: &e.name,
            dtype: e.dtype,
            shape: &e.shape,
            bytes: &self.payload[e.data_offsets.0..e.data_offsets.1],
        }
    }

    /// Returns a copy with extra metadata merged in (existing keys overwritten).
    pub fn with_metadata<I, K, V>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        for (k, v) in extra {
            self.metadata.insert(k.into(), v.into());
        }
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_store(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        read_store(&bytes)
    }
}

/// Serializes a store to the container layout.
pub fn write_store(store: &TensorStore) -> Vec<u8> {
    let mut header = Map::new();
    if !store.metadata.is_empty() {
        let meta: Map<String, Value> = store
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    for e in store.entries.values() {
        let mut obj = Map::new();
        obj.insert("dtype".into(), Value::from(e.dtype.as_str()));
        obj.insert("shape".into(), Value::from(e.shape.clone()));
        obj.insert(
            "data_offsets".into(),
            Value::from(vec![e.data_offsets.0, e.data_offsets.1]),
        );
        header.insert(e.name.clone(), Value::Object(obj));
    }
    let mut text = Value::Object(header).to_string().into_bytes();
    let pad = (HEADER_ALIGN - text.len() % HEADER_ALIGN) % HEADER_ALIGN;
    text.extend(std::iter::repeat_n(b' ', pad));

    let mut out = Vec::with_capacity(8 + text.len() + store.payload.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&store.payload);
    out
}

/// Parses and validates a container.
pub fn read_store(bytes: &[u8]) -> Result<TensorStore, StoreError> {
    if bytes.len() < 8 {
        return Err(StoreError::Truncated(format!(
            "{} bytes is too short for the header length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
        return Err(StoreError::Truncated(format!(
            "header length {header_len} exceeds the {} bytes after the prefix",
            bytes.len() - 8
        )));
    }
    let header_end = 8 + header_len as usize;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| StoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: Map<String, Value> = match serde_json::from_str(text) {
        Ok(Value::Object(map)) => map,
        Ok(_) => {
            return Err(StoreError::MalformedHeader(
                "header is not an object".into(),
            ))
        }
        Err(e) => return Err(StoreError::MalformedHeader(e.to_string())),
    };
    let payload = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut entries = BTreeMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            let obj = value.as_object().ok_or_else(|| {
                StoreError::MalformedHeader(format!("`{METADATA_KEY}` is not an object"))
            })?;
            for (k, v) in obj {
                let v = v.as_str().ok_or_else(|| {
                    StoreError::MalformedHeader(format!("metadata value for `{k}` is not a string"))
                })?;
                metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        let entry = parse_entry(&name, &value)?;
        let (begin, end) = entry.data_offsets;
        if begin > end || end > payload.len() {
            return Err(StoreError::OffsetsOutOfBounds {
                name,
                begin,
                end,
                payload: payload.len(),
            });
        }
        let expected = element_count(&entry.shape) * entry.dtype.size();
        if expected != end - begin {
            return Err(StoreError::ShapeMismatch {
                name,
                shape: entry.shape,
                expected,
                actual: end - begin,
            });
        }
        entries.insert(name, entry);
    }

    // Entries must tile the payload contiguously from offset 0.
    let mut by_offset: Vec<&TensorEntry> = entries.values().collect();
    by_offset.sort_by_key(|e| (e.data_offsets.0, e.data_offsets.1));
    let mut cursor = 0usize;
    let mut prev: Option<&TensorEntry> = None;
    for e in &by_offset {
        if e.data_offsets.0 != cursor {
            let first = prev.map_or_else(|| "<start>".to_string(), |p| p.name.clone());
            return Err(StoreError::Overlap {
                first,
                second: e.name.clone(),
            });
        }
        cursor = e.data_offsets.1;
        prev = Some(e);
    }
    if cursor != payload.len() {
        return Err(StoreError::Truncated(format!(
            "payload has {} bytes but entries cover {cursor}",
            payload.len()
        )));
    }

    Ok(TensorStore {
        entries,
        metadata,
        payload: payload.to_vec(),
    })
}

fn parse_entry(name: &str, value: &Value) -> Result<TensorEntry, StoreError> {
    let bad = |what: &str| StoreError::MalformedHeader(format!("tensor `{name}`: {what}"));
    let obj = value
        .as_object()
        .ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = Dtype::parse(dtype)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|v| v.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let (begin, end) = match offsets.as_slice() {
        [b, e] => (
            b.as_u64().ok_or_else(|| bad("bad begin offset"))? as usize,
            e.as_u64().ok_or_else(|| bad("bad end offset"))? as usize,
        ),
        _ => return Err(bad("data_offsets must have two elements")),
    };
    Ok(TensorEntry {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}
