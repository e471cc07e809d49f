use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Byte-cost model of a decoder-only transformer.
///
/// Every repeated layer is assumed to hold the same number of parameters.
/// Quantized layers additionally carry one f32 scale per weight row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub num_layers: usize,
    pub layer_param_count: u64,
    /// Embeddings, head and final norm; always stored at FP16.
    pub fixed_param_count: u64,
    pub scale_rows_per_layer: u64,
    #[serde(default = "default_bytes_per_scale")]
    pub bytes_per_scale: u64,
    /// Reserved for activations and other inference intermediates.
    pub headroom_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn default_bytes_per_scale() -> u64 {
    4
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("reading profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("profile must have at least one layer")]
    NoLayers,
    #[error("unknown profile `{0}`")]
    Unknown(String),
}

/// Profiles shipped with the crate, by name.
pub const BUILTIN_PROFILES: &[(&str, &str)] = &[
    ("toy", include_str!("../../profiles/toy.json")),
    ("llama-2-7b", include_str!("../../profiles/llama-2-7b.json")),
    (
        "llama-2-13b",
        include_str!("../../profiles/llama-2-13b.json"),
    ),
    ("llama-3-8b", include_str!("../../profiles/llama-3-8b.json")),
];

impl ModelProfile {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let profile: ModelProfile = serde_json::from_str(text)?;
        if profile.num_layers == 0 {
            return Err(ProfileError::NoLayers);
        }
        Ok(profile)
    }

    pub fn builtin(name: &str) -> Result<Self, ProfileError> {
        let (_, text) = BUILTIN_PROFILES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ProfileError::Unknown(name.to_string()))?;
        Self::from_json(text)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// A built-in name, or else a path to a profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match Self::builtin(name_or_path) {
            Err(ProfileError::Unknown(_)) => Self::from_file(name_or_path),
            other => other,
        }
    }
}
