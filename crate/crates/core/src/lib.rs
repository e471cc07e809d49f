//! Layer-specific adaptive quantization.
//!
//! The pipeline scores each transformer layer by how much it changes the
//! vocabulary projection of the last-token hidden state ([`importance`]),
//! picks FP16/INT8/INT4 per layer under a memory budget ([`planner`]), and
//! applies per-row symmetric quantization to the weights ([`quantizer`]).
//! Tensors move between stages in a single-file container ([`store`]);
//! [`toy`] provides a small seeded transformer to drive the whole loop.

pub mod bundle;
pub mod importance;
pub mod planner;
pub mod quantizer;
pub mod store;
pub mod toy;

pub use bundle::{load_bundle, BundleError, CalibrationBundle};
pub use importance::{
    cosine_importance, jaccard_importance, project_to_vocab, rank_ascending, score_layers,
    topk_indices, ImportanceError, ImportanceReport, LayerScore, Metric, TokenSet, DEFAULT_K,
};
pub use planner::{
    allocate_precision, average_bits, estimate_total, layer_bytes, select_device, DeviceReport,
    ModelProfile, PlanError, Precision, PrecisionAssignment, QuantPlan,
};
pub use quantizer::{
    apply_plan, dequantize, pack_int4, quantize_row, quantize_tensor, unpack_int4, Bits,
    LayerNameRule, QuantError, QuantizedTensor,
};
pub use store::{read_store, write_store, Dtype, StoreError, TensorData, TensorStore};
pub use toy::{init_toy, load_dequantized, ToyConfig, ToyError, ToyWeights};
