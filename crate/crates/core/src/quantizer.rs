//! Per-row symmetric weight quantization.
//!
//! Each row `i` of a weight matrix gets its own scale
//! `s_i = max|W_i| / (2^(bits-1) - 1)` and integers
//! `q_ij = round_half_even(W_ij / s_i)`, so INT8 values lie in `[-127, 127]`
//! and INT4 values in `[-7, 7]`. All-zero rows use `s_i = 1`.
//!
//! INT4 rows are packed two values per byte, low nibble first, each nibble
//! holding `q + 8`. Every row is packed independently, so a packed row of
//! `cols` values takes `ceil(cols / 2)` bytes.

use std::collections::{BTreeMap, BTreeSet};

use crate::planner::{Precision, QuantPlan};
use crate::store::{Dtype, StoreError, TensorData, TensorStore, PACKING_INT4, PACKING_KEY};

pub const QWEIGHT_SUFFIX: &str = ".qweight";
pub const SCALES_SUFFIX: &str = ".scales";
/// Metadata key prefix recording the unpacked column count of INT4 tensors.
pub const COLS_KEY_PREFIX: &str = "cols.";

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot quantize an empty row")]
    EmptyRow,
    #[error("cannot quantize an empty matrix")]
    EmptyMatrix,
    #[error("unsupported bit width {0} (expected 8 or 4)")]
    UnsupportedBits(u32),
    #[error("value {0} is outside the INT4 range [-7, 7]")]
    OutOfRange(i32),
    #[error("data length {got} does not match {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("plan assigns layer {0}, but no 2-D tensor in the store belongs to it")]
    UnmatchedLayer(usize),
    #[error("store has layer {layer} but the plan only covers {plan_layers} layers")]
    LayerCountMismatch { layer: usize, plan_layers: usize },
    #[error("tensor `{name}` matches a layer but has shape {shape:?}; only 1-D (copied) or 2-D (quantized) tensors are supported")]
    NotTwoDimensional { name: String, shape: Vec<usize> },
    #[error("missing scales `{0}`")]
    MissingScales(String),
    #[error("invalid layer name rule `{0}`: expected exactly one `{{i}}` placeholder")]
    BadRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bits {
    Eight,
    Four,
}

impl Bits {
    pub fn qmax(self) -> i8 {
        match self {
            Bits::Eight => 127,
            Bits::Four => 7,
        }
    }

    pub fn get(self) -> u32 {
        match self {
            Bits::Eight => 8,
            Bits::Four => 4,
        }
    }
}

impl TryFrom<u32> for Bits {
    type Error = QuantError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        match bits {
            8 => Ok(Bits::Eight),
            4 => Ok(Bits::Four),
            other => Err(QuantError::UnsupportedBits(other)),
        }
    }
}

impl Precision {
    /// Bit width used for quantization, `None` for FP16 (left as is).
    pub fn quant_bits(self) -> Option<Bits> {
        match self {
            Precision::Fp16 => None,
            Precision::Int8 => Some(Bits::Eight),
            Precision::Int4 => Some(Bits::Four),
        }
    }
}

/// Quantizes one row. Returns the integers and the row scale.
pub fn quantize_row(row: &[f32], bits: Bits) -> Result<(Vec<i8>, f32), QuantError> {
    if row.is_empty() {
        return Err(QuantError::EmptyRow);
    }
    let max_abs = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok((vec![0; row.len()], 1.0));
    }
    let qmax = bits.qmax();
    let scale = max_abs / qmax as f32;
    let q = row
        .iter()
        .map(|&w| {
            (w / scale)
                .round_ties_even()
                .clamp(-(qmax as f32), qmax as f32) as i8
        })
        .collect();
    Ok((q, scale))
}

/// A row-major integer matrix with one f32 scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub bits: Bits,
    pub rows: usize,
    pub cols: usize,
    /// Unpacked values, `rows * cols`.
    pub q: Vec<i8>,
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn row(&self, i: usize) -> &[i8] {
        &self.q[i * self.cols..(i + 1) * self.cols]
    }

    /// Packed payload: raw `i8` bytes for INT8, per-row nibble packing for INT4.
    pub fn payload(&self) -> Vec<u8> {
        match self.bits {
            Bits::Eight => self.q.iter().map(|&v| v as u8).collect(),
            Bits::Four => self
                .q
                .chunks_exact(self.cols)
                .flat_map(|row| pack_int4(row).expect("quantized values are in range"))
                .collect(),
        }
    }
}

/// Quantizes each row of a `rows x cols` matrix independently.
pub fn quantize_tensor(
    data: &[f32],
    rows: usize,
    cols: usize,
    bits: Bits,
) -> Result<QuantizedTensor, QuantError> {
    if rows == 0 || cols == 0 {
        return Err(QuantError::EmptyMatrix);
    }
    if data.len() != rows * cols {
        return Err(QuantError::ShapeMismatch {
            rows,
            cols,
            got: data.len(),
        });
    }
    let mut q = Vec::with_capacity(data.len());
    let mut scales = Vec::with_capacity(rows);
    for row in data.chunks_exact(cols) {
        let (qr, s) = quantize_row(row, bits)?;
        q.extend(qr);
        scales.push(s);
    }
    Ok(QuantizedTensor {
        bits,
        rows,
        cols,
        q,
        scales,
    })
}

/// `W'[i][j] = q[i][j] * scales[i]`.
pub fn dequantize(t: &QuantizedTensor) -> Vec<f32> {
    t.q.chunks_exact(t.cols)
        .zip(&t.scales)
        .flat_map(|(row, &s)| row.iter().map(move |&v| v as f32 * s))
        .collect()
}

/// Packs INT4 values, element `2m` in the low nibble of byte `m`. An odd
/// count pads the final high nibble with an encoded zero.
pub fn pack_int4(values: &[i8]) -> Result<Vec<u8>, QuantError> {
    let nibble = |v: i8| -> Result<u8, QuantError> {
        if (-7..=7).contains(&v) {
            Ok((v + 8) as u8)
        } else {
            Err(QuantError::OutOfRange(v as i32))
        }
    };
    values
        .chunks(2)
        .map(|pair| {
            let lo = nibble(pair[0])?;
            let hi = nibble(pair.get(1).copied().unwrap_or(0))?;
            Ok(lo | (hi << 4))
        })
        .collect()
}

/// Inverse of [`pack_int4`]; reads the first `count` nibbles.
pub fn unpack_int4(bytes: &[u8], count: usize) -> Vec<i8> {
    (0..count)
        .map(|i| {
            let b = bytes[i / 2];
            let nib = if i % 2 == 0 { b & 0x0f } else { b >> 4 };
            nib as i8 - 8
        })
        .collect()
}

/// Maps tensor names to layer indices through templates such as
/// `layers.{i}.`; a name belongs to layer `i` if it starts with the template
/// instantiated at `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNameRule {
    templates: Vec<(String, String)>,
}

impl Default for LayerNameRule {
    fn default() -> Self {
        Self::new(["layers.{i}.", "model.layers.{i}."]).expect("valid default templates")
    }
}

impl LayerNameRule {
    pub fn new<I, S>(templates: I) -> Result<Self, QuantError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let templates = templates
            .into_iter()
            .map(|t| {
                let t = t.as_ref();
                match t.split_once("{i}") {
                    Some((pre, post)) if !post.contains("{i}") => {
                        Ok((pre.to_string(), post.to_string()))
                    }
                    _ => Err(QuantError::BadRule(t.to_string())),
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { templates })
    }

    pub fn layer_of(&self, name: &str) -> Option<usize> {
        self.templates.iter().find_map(|(pre, post)| {
            let rest = name.strip_prefix(pre.as_str())?;
            let digits = rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            if digits == 0 {
                return None;
            }
            rest[digits..]
                .starts_with(post.as_str())
                .then(|| rest[..digits].parse().ok())?
        })
    }
}

/// Quantizes every 2-D layer tensor of `weights` at its layer's planned
/// precision. FP16 layers, 1-D tensors and non-layer tensors are copied
/// unchanged. Quantized tensors are replaced by `{name}.qweight` (I8, or U8
/// when INT4-packed) and `{name}.scales` (F32, `[rows]`).
pub fn apply_plan(
    weights: &TensorStore,
    plan: &QuantPlan,
    rule: &LayerNameRule,
) -> Result<TensorStore, QuantError> {
    let plan_layers = plan.num_layers();
    let mut seen_layers = BTreeSet::new();
    let mut out = Vec::with_capacity(weights.len());
    let mut metadata: BTreeMap<String, String> = weights.metadata().clone();
    let mut packed_any = false;

    for t in weights.tensors() {
        let Some(layer) = rule.layer_of(t.name) else {
            out.push((t.name.to_string(), t.to_data()));
            continue;
        };
        let precision = *plan
            .assignment
            .0
            .get(layer)
            .ok_or(QuantError::LayerCountMismatch { layer, plan_layers })?;
        match t.shape.len() {
            1 => {
                out.push((t.name.to_string(), t.to_data()));
                continue;
            }
            2 => {}
            _ => {
                return Err(QuantError::NotTwoDimensional {
                    name: t.name.to_string(),
                    shape: t.shape.to_vec(),
                })
            }
        }
        seen_layers.insert(layer);
        let Some(bits) = precision.quant_bits() else {
            out.push((t.name.to_string(), t.to_data()));
            continue;
        };
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let qt = quantize_tensor(&t.to_f32_vec()?, rows, cols, bits)?;
        let qweight = match bits {
            Bits::Eight => TensorData::from_i8(vec![rows, cols], &qt.q),
            Bits::Four => {
                packed_any = true;
                metadata.insert(format!("{COLS_KEY_PREFIX}{}", t.name), cols.to_string());
                TensorData::from_u8(vec![rows, cols.div_ceil(2)], qt.payload())
            }
        };
        out.push((format!("{}{QWEIGHT_SUFFIX}", t.name), qweight));
        out.push((
            format!("{}{SCALES_SUFFIX}", t.name),
            TensorData::from_f32(vec![rows], &qt.scales),
        ));
    }

    if let Some(missing) = (0..plan_layers).find(|l| !seen_layers.contains(l)) {
        return Err(QuantError::UnmatchedLayer(missing));
    }
    if packed_any {
        metadata.insert(PACKING_KEY.to_string(), PACKING_INT4.to_string());
    }
    metadata.insert("plan_id".to_string(), plan.plan_id());
    Ok(TensorStore::from_tensors(out, metadata)?)
}

/// Reads back a quantized tensor written by [`apply_plan`]. Returns `None`
/// if `name` was not quantized in `store`.
pub fn load_quantized(
    store: &TensorStore,
    name: &str,
) -> Result<Option<QuantizedTensor>, QuantError> {
    let Some(qw) = store.tensor(&format!("{name}{QWEIGHT_SUFFIX}")) else {
        return Ok(None);
    };
    let scales_name = format!("{name}{SCALES_SUFFIX}");
    let scales = store
        .tensor(&scales_name)
        .ok_or(QuantError::MissingScales(scales_name))?
        .to_f32_vec()?;
    let rows = qw.shape.first().copied().unwrap_or(0);
    if qw.shape.len() != 2 || scales.len() != rows {
        return Err(QuantError::ShapeMismatch {
            rows,
            cols: qw.shape.get(1).copied().unwrap_or(0),
            got: scales.len(),
        });
    }
    let (bits, cols, q) = match qw.dtype {
        Dtype::I8 => (Bits::Eight, qw.shape[1], qw.to_i8_vec()?),
        Dtype::U8 => {
            let cols: usize = store
                .metadata()
                .get(&format!("{COLS_KEY_PREFIX}{name}"))
                .and_then(|c| c.parse().ok())
                .unwrap_or(qw.shape[1] * 2);
            let packed_cols = qw.shape[1];
            if cols.div_ceil(2) != packed_cols {
                return Err(QuantError::ShapeMismatch {
                    rows,
                    cols,
                    got: packed_cols,
                });
            }
            let q = qw
                .bytes
                .chunks_exact(packed_cols)
                .flat_map(|row| unpack_int4(row, cols))
                .collect();
            (Bits::Four, cols, q)
        }
        other => {
            return Err(StoreError::DtypeMismatch {
                name: qw.name.to_string(),
                expected: Dtype::I8,
                actual: other,
            }
            .into())
        }
    };
    Ok(Some(QuantizedTensor {
        bits,
        rows,
        cols,
        q,
        scales,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{PrecisionAssignment, QuantPlan};

    /// Independent scalar reference: q = round_half_even(w * qmax / max|row|) in f64.
    fn reference_q(row: &[f64], qmax: f64) -> Vec<i64> {
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        row.iter()
            .map(|w| (w * qmax / m).round_ties_even() as i64)
            .collect()
    }

    #[test]
    fn zero_row() {
        let (q, s) = quantize_row(&[0.0; 5], Bits::Eight).unwrap();
        assert_eq!(q, vec![0; 5]);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn int8_example() {
        assert_eq!(
            reference_q(&[1.0, -2.0, 4.0, -8.0], 127.0),
            vec![16, -32, 64, -127]
        );
        let (q, s) = quantize_row(&[1.0, -2.0, 4.0, -8.0], Bits::Eight).unwrap();
        assert_eq!(q, vec![16, -32, 64, -127]);
        assert_eq!(s, 8.0f32 / 127.0);
    }

    #[test]
    fn int4_example_rounds_half_to_even() {
        // -0.35 / 0.1 = -3.5 exactly in decimal; half-to-even gives -4.
        let (q, s) = quantize_row(&[0.7, -0.35, 0.07], Bits::Four).unwrap();
        assert_eq!(q, vec![7, -4, 1]);
        assert!((s - 0.1).abs() < 1e-7);
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(
            quantize_row(&[], Bits::Eight),
            Err(QuantError::EmptyRow)
        ));
        assert!(matches!(
            quantize_tensor(&[], 0, 3, Bits::Four),
            Err(QuantError::EmptyMatrix)
        ));
        assert!(matches!(
            quantize_tensor(&[1.0; 5], 2, 3, Bits::Four),
            Err(QuantError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_row_matrix_matches_row() {
        let row = [0.3, -1.2, 0.05, 2.5];
        let t = quantize_tensor(&row, 1, 4, Bits::Eight).unwrap();
        let (q, s) = quantize_row(&row, Bits::Eight).unwrap();
        assert_eq!(t.q, q);
        assert_eq!(t.scales, vec![s]);
    }

    #[test]
    fn row_permutation_commutes() {
        let w = [1.0, 2.0, -3.0, 0.5, 0.0, 0.0, -0.25, 4.0, 9.0];
        let perm = [2, 0, 1];
        let permuted: Vec<f32> = perm
            .iter()
            .flat_map(|&r| w[r * 3..r * 3 + 3].to_vec())
            .collect();
        let a = quantize_tensor(&w, 3, 3, Bits::Four).unwrap();
        let b = quantize_tensor(&permuted, 3, 3, Bits::Four).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.row(new), a.row(old));
            assert_eq!(b.scales[new], a.scales[old]);
        }
    }

    #[test]
    fn dequantize_examples() {
        let t = QuantizedTensor {
            bits: Bits::Eight,
            rows: 1,
            cols: 4,
            q: vec![16, -32, 64, -127],
            scales: vec![8.0 / 127.0],
        };
        let w = dequantize(&t);
        let expected = [1.007874, -2.015748, 4.031496, -8.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let zero = QuantizedTensor { q: vec![0; 4], ..t };
        assert_eq!(dequantize(&zero), vec![0.0; 4]);
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_int4(&[-7, 7]).unwrap(), vec![0xF1]);
        assert_eq!(pack_int4(&[0]).unwrap(), vec![0x88]);
        assert_eq!(unpack_int4(&[0x88], 1), vec![0]);
        assert_eq!(unpack_int4(&[0xF1], 2), vec![-7, 7]);
        assert!(matches!(pack_int4(&[-8]), Err(QuantError::OutOfRange(-8))));
        assert!(matches!(pack_int4(&[3, 9]), Err(QuantError::OutOfRange(9))));
    }

    #[test]
    fn layer_rule() {
        let rule = LayerNameRule::default();
        assert_eq!(rule.layer_of("layers.3.wq"), Some(3));
        assert_eq!(
            rule.layer_of("model.layers.12.mlp.up_proj.weight"),
            Some(12)
        );
        assert_eq!(rule.layer_of("layers.x.wq"), None);
        assert_eq!(rule.layer_of("layers.3"), None);
        assert_eq!(rule.layer_of("embed.W_E"), None);
        assert_eq!(rule.layer_of("final_norm"), None);
        let custom = LayerNameRule::new(["blk.{i}.weight"]).unwrap();
        assert_eq!(custom.layer_of("blk.7.weight"), Some(7));
        assert_eq!(custom.layer_of("blk.7.bias"), None);
        assert!(LayerNameRule::new(["no placeholder"]).is_err());
    }

    fn two_layer_store() -> TensorStore {
        let m =
            |seed: f32| -> Vec<f32> { (0..15).map(|i| ((i as f32 + seed) * 0.37).sin()).collect() };
        TensorStore::from_tensors(
            vec![
                (
                    "layers.0.w".to_string(),
                    TensorData::from_f32(vec![3, 5], &m(0.0)),
                ),
                (
                    "layers.0.norm".to_string(),
                    TensorData::from_f32(vec![5], &[1.0; 5]),
                ),
                (
                    "layers.1.w".to_string(),
                    TensorData::from_f32(vec![3, 5], &m(1.0)),
                ),
                (
                    "head".to_string(),
                    TensorData::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]),
                ),
            ],
            BTreeMap::from([("model_id".to_string(), "two".to_string())]),
        )
        .unwrap()
    }

    fn plan(assignment: Vec<Precision>) -> QuantPlan {
        let n = assignment.len();
        QuantPlan {
            model_id: "two".into(),
            budget_bytes: 0,
            assignment: PrecisionAssignment(assignment),
            ordering_used: (0..n).collect(),
            predicted_bytes: 0,
            average_bits: 0.0,
        }
    }

    #[test]
    fn fp16_plan_passes_through() {
        let store = two_layer_store();
        let out = apply_plan(
            &store,
            &plan(vec![Precision::Fp16; 2]),
            &LayerNameRule::default(),
        )
        .unwrap();
        assert_eq!(out.payload(), store.payload());
        assert!(out.metadata().contains_key("plan_id"));
        assert_eq!(out.metadata()["model_id"], "two");
    }

    #[test]
    fn mixed_plan_writes_qweight_and_scales() {
        let store = two_layer_store();
        let out = apply_plan(
            &store,
            &plan(vec![Precision::Int8, Precision::Int4]),
            &LayerNameRule::default(),
        )
        .unwrap();
        assert!(!out.contains("layers.0.w"));
        assert_eq!(out.require("layers.0.w.qweight").unwrap().dtype, Dtype::I8);
        let q4 = out.require("layers.1.w.qweight").unwrap();
        assert_eq!((q4.dtype, q4.shape), (Dtype::U8, &[3usize, 3][..]));
        assert_eq!(out.metadata()[PACKING_KEY], PACKING_INT4);
        assert_eq!(out.metadata()["cols.layers.1.w"], "5");
        assert!(out.contains("layers.0.norm"));
        assert!(out.contains("head"));

        for (name, bits) in [("layers.0.w", Bits::Eight), ("layers.1.w", Bits::Four)] {
            let original = store.require(name).unwrap().to_f32_vec().unwrap();
            let qt = load_quantized(&out, name).unwrap().unwrap();
            assert_eq!(qt, quantize_tensor(&original, 3, 5, bits).unwrap());
        }
        assert!(load_quantized(&out, "head").unwrap().is_none());
    }

    #[test]
    fn plan_store_mismatches() {
        let store = two_layer_store();
        let rule = LayerNameRule::default();
        assert!(matches!(
            apply_plan(&store, &plan(vec![Precision::Int8; 4]), &rule),
            Err(QuantError::UnmatchedLayer(2))
        ));
        assert!(matches!(
            apply_plan(&store, &plan(vec![Precision::Int8]), &rule),
            Err(QuantError::LayerCountMismatch {
                layer: 1,
                plan_layers: 1
            })
        ));
        let cube = TensorStore::from_tensors(
            vec![(
                "layers.0.k".to_string(),
                TensorData::from_f32(vec![1, 1, 2], &[1.0, 2.0]),
            )],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(
            apply_plan(&cube, &plan(vec![Precision::Int8]), &rule),
            Err(QuantError::NotTwoDimensional { .. })
        ));
    }

    #[test]
    fn missing_scales_detected() {
        let store = TensorStore::from_tensors(
            vec![(
                "w.qweight".to_string(),
                TensorData::from_i8(vec![1, 2], &[1, 2]),
            )],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(
            load_quantized(&store, "w"),
            Err(QuantError::MissingScales(n)) if n == "w.scales"
        ));
    }
}
