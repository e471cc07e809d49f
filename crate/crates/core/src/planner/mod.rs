//! Memory-budgeted precision planning.
//!
//! Given layers ordered from least to most important and a byte budget, the
//! allocator picks one of four outcomes:
//!
//! 1. everything fits at FP16: keep all layers FP16;
//! 2. everything fits at INT8: quantize all layers to INT8;
//! 3. everything fits at INT4: demote the least important layers to INT4,
//!    keeping as many INT8 layers as the budget allows;
//! 4. otherwise report [`PlanError::InsufficientMemory`] so the caller can
//!    wait for memory to be released.
//!
//! FP16 is never mixed with quantized layers, and tensors outside the
//! repeated layers are always costed at FP16.

mod budget;
mod device;
mod profile;

pub use budget::{
    parse_memory, resolve_budget, BudgetError, BudgetProvider, ConfigFileBudget, EnvBudget,
    FixedBudget, ProbeBudget, BUDGET_ENV_VAR,
};
pub use device::{
    select_device, DeviceError, DeviceReport, DeviceSource, FileDeviceSource, NvidiaSmiSource,
};
pub use profile::{ModelProfile, ProfileError, BUILTIN_PROFILES};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Int8,
    Int4,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Fp16 => 16,
            Precision::Int8 => 8,
            Precision::Int4 => 4,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

/// Precision per layer, indexed by layer number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionAssignment(pub Vec<Precision>);

impl PrecisionAssignment {
    pub fn uniform(num_layers: usize, precision: Precision) -> Self {
        Self(vec![precision; num_layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, precision: Precision) -> usize {
        self.0.iter().filter(|&&p| p == precision).count()
    }

    /// `(FP16, INT8, INT4)` layer counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.count(Precision::Fp16),
            self.count(Precision::Int8),
            self.count(Precision::Int4),
        )
    }

    pub fn layers_at(&self, precision: Precision) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == precision)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error(
        "insufficient memory: budget {budget_bytes} B is below the {required_bytes} B needed at INT4"
    )]
    InsufficientMemory {
        budget_bytes: u64,
        required_bytes: u64,
    },
    #[error("ranking is not a permutation of 0..{0}")]
    InvalidRanking(usize),
    #[error("assignment covers {got} layers but the profile has {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Bytes needed for one layer's weights at `precision`.
pub fn layer_bytes(profile: &ModelProfile, precision: Precision) -> u64 {
    let params = profile.layer_param_count;
    let scales = profile.scale_rows_per_layer * profile.bytes_per_scale;
    match precision {
        Precision::Fp16 => 2 * params,
        Precision::Int8 => params + scales,
        Precision::Int4 => params.div_ceil(2) + scales,
    }
}

/// Layer weights plus FP16 non-layer tensors, without inference headroom.
pub fn weight_bytes(
    profile: &ModelProfile,
    assignment: &PrecisionAssignment,
) -> Result<u64, PlanError> {
    if assignment.len() != profile.num_layers {
        return Err(PlanError::LengthMismatch {
            expected: profile.num_layers,
            got: assignment.len(),
        });
    }
    let layers: u64 = assignment.0.iter().map(|&p| layer_bytes(profile, p)).sum();
    Ok(layers + 2 * profile.fixed_param_count)
}

/// Total memory for `assignment` including headroom.
pub fn estimate_total(
    profile: &ModelProfile,
    assignment: &PrecisionAssignment,
) -> Result<u64, PlanError> {
    Ok(weight_bytes(profile, assignment)? + profile.headroom_bytes)
}

/// Layer-count-weighted mean bit width. Zero for an empty assignment.
pub fn average_bits(assignment: &PrecisionAssignment) -> f64 {
    if assignment.is_empty() {
        return 0.0;
    }
    let total: u32 = assignment.0.iter().map(|p| p.bits()).sum();
    total as f64 / assignment.len() as f64
}

/// A per-layer precision plan and its predicted footprint.
///
/// Serialized as `{"model_id", "budget_bytes", "assignment", "ordering_used",
/// "predicted_bytes", "average_bits"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub model_id: String,
    pub budget_bytes: u64,
    pub assignment: PrecisionAssignment,
    pub ordering_used: Vec<usize>,
    pub predicted_bytes: u64,
    pub average_bits: f64,
}

impl QuantPlan {
    pub fn num_layers(&self) -> usize {
        self.assignment.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Short content hash identifying this plan in quantized-store metadata.
    pub fn plan_id(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("plan serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_permutation(ranked: &[usize], num_layers: usize) -> Result<(), PlanError> {
    if ranked.len() != num_layers {
        return Err(PlanError::InvalidRanking(num_layers));
    }
    let mut seen = vec![false; num_layers];
    for &layer in ranked {
        match seen.get_mut(layer) {
            Some(slot) if !*slot => *slot = true,
            _ => return Err(PlanError::InvalidRanking(num_layers)),
        }
    }
    Ok(())
}

/// Number of least-important layers that must drop from INT8 to INT4 so the
/// mixed plan fits. `None` when even all-INT4 does not fit.
fn int4_layers_needed(profile: &ModelProfile, budget_bytes: u64) -> Option<usize> {
    let l = profile.num_layers;
    let all_int4 =
        estimate_total(profile, &PrecisionAssignment::uniform(l, Precision::Int4)).ok()?;
    let spare = budget_bytes.checked_sub(all_int4)?;
    let saved_per_layer =
        layer_bytes(profile, Precision::Int8) - layer_bytes(profile, Precision::Int4);
    if saved_per_layer == 0 {
        return Some(0);
    }
    let upgradable = spare / saved_per_layer;
    Some(l.saturating_sub(usize::try_from(upgradable).unwrap_or(usize::MAX)))
}

/// Allocates a precision to every layer under `budget_bytes`.
///
/// `ranked` lists layer indices from least to most important. In the mixed
/// case the first `n` entries become INT4 where `n` is the smallest count
/// that fits, i.e. `L - floor((budget - all_int4) / (int8 - int4))`.
pub fn allocate_precision(
    ranked: &[usize],
    profile: &ModelProfile,
    budget_bytes: u64,
) -> Result<QuantPlan, PlanError> {
    let l = profile.num_layers;
    check_permutation(ranked, l)?;

    let all = |p| PrecisionAssignment::uniform(l, p);
    let assignment = if budget_bytes >= estimate_total(profile, &all(Precision::Fp16))? {
        all(Precision::Fp16)
    } else if budget_bytes >= estimate_total(profile, &all(Precision::Int8))? {
        all(Precision::Int8)
    } else {
        let n_int4 = int4_layers_needed(profile, budget_bytes).ok_or_else(|| {
            PlanError::InsufficientMemory {
                budget_bytes,
                required_bytes: estimate_total(profile, &all(Precision::Int4))
                    .expect("uniform assignment has profile length"),
            }
        })?;
        let mut a = all(Precision::Int8);
        for &layer in &ranked[..n_int4] {
            a.0[layer] = Precision::Int4;
        }
        a
    };

    let predicted_bytes = estimate_total(profile, &assignment)?;
    debug_assert!(predicted_bytes <= budget_bytes);
    Ok(QuantPlan {
        model_id: profile.model_id.clone(),
        budget_bytes,
        average_bits: average_bits(&assignment),
        assignment,
        ordering_used: ranked.to_vec(),
        predicted_bytes,
    })
}
