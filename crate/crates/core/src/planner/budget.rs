//! Memory budget resolution.
//!
//! Providers are consulted in the order given; the first that yields a value
//! wins. The usual order is CLI flag, environment variable, config file,
//! then a device probe.

use std::fs;
use std::path::PathBuf;

use super::device::{select_device, DeviceSource};

pub const BUDGET_ENV_VAR: &str = "LSAQ_MEMORY_BUDGET";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BudgetError {
    #[error("no memory budget: set --memory, {BUDGET_ENV_VAR}, a config file, or provide a device probe")]
    NoBudget,
    #[error("cannot parse memory size `{0}` (examples: 6GB, 8GiB, 512MiB, 1000000B)")]
    BadUnit(String),
    #[error("{source_name}: {message}")]
    Source {
        source_name: String,
        message: String,
    },
}

/// Parses a byte size with an optional unit suffix.
///
/// Decimal units (`KB`, `MB`, `GB`, `TB`) are powers of 10 and binary units
/// (`KiB`, `MiB`, `GiB`, `TiB`) powers of 2. A bare number is bytes. Unit
/// matching is case-insensitive, but a lone `G`/`M`/`K` is rejected as
/// ambiguous.
pub fn parse_memory(text: &str) -> Result<u64, BudgetError> {
    let bad = || BudgetError::BadUnit(text.to_string());
    let s = text.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (number, unit) = s.split_at(split);
    let unit = unit.trim().to_ascii_lowercase();
    let multiplier: u64 = match unit.as_str() {
        "" | "b" => 1,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        "tb" => 1_000_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        "tib" => 1 << 40,
        _ => return Err(bad()),
    };
    if number.is_empty() {
        return Err(bad());
    }
    if let Ok(whole) = number.parse::<u64>() {
        return whole.checked_mul(multiplier).ok_or_else(bad);
    }
    let value: f64 = number.parse().map_err(|_| bad())?;
    let bytes = (value * multiplier as f64).round();
    if !bytes.is_finite() || bytes < 0.0 || bytes > u64::MAX as f64 {
        return Err(bad());
    }
    Ok(bytes as u64)
}

/// One source of a memory budget. `Ok(None)` means "not set here".
pub trait BudgetProvider {
    fn name(&self) -> &str;
    fn budget(&self) -> Result<Option<u64>, BudgetError>;
}

/// A value supplied directly, e.g. from `--memory`.
#[derive(Debug, Clone)]
pub struct FixedBudget {
    pub label: String,
    pub value: Option<String>,
}

impl FixedBudget {
    pub fn flag(value: Option<String>) -> Self {
        Self {
            label: "--memory".into(),
            value,
        }
    }
}

impl BudgetProvider for FixedBudget {
    fn name(&self) -> &str {
        &self.label
    }

    fn budget(&self) -> Result<Option<u64>, BudgetError> {
        self.value.as_deref().map(parse_memory).transpose()
    }
}

/// Reads an environment variable on each call.
#[derive(Debug, Clone)]
pub struct EnvBudget {
    pub var: String,
}

impl Default for EnvBudget {
    fn default() -> Self {
        Self {
            var: BUDGET_ENV_VAR.to_string(),
        }
    }
}

impl BudgetProvider for EnvBudget {
    fn name(&self) -> &str {
        &self.var
    }

    fn budget(&self) -> Result<Option<u64>, BudgetError> {
        match std::env::var(&self.var) {
            Ok(v) if !v.trim().is_empty() => parse_memory(&v).map(Some),
            _ => Ok(None),
        }
    }
}

/// Reads the `"memory"` key of a JSON config file, if the file is given.
#[derive(Debug, Clone)]
pub struct ConfigFileBudget {
    pub path: Option<PathBuf>,
}

impl BudgetProvider for ConfigFileBudget {
    fn name(&self) -> &str {
        "config file"
    }

    fn budget(&self) -> Result<Option<u64>, BudgetError> {
        let Some(path) = &self.path else {
            return Ok(None);
        };
        let err = |message: String| BudgetError::Source {
            source_name: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        match value.get("memory") {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(serde_json::Value::String(s)) => parse_memory(s).map(Some),
            Some(serde_json::Value::Number(n)) => n
                .as_u64()
                .map(Some)
                .ok_or_else(|| err(format!("memory must be a non-negative integer, got {n}"))),
            Some(other) => Err(err(format!(
                "memory must be a string or integer, got {other}"
            ))),
        }
    }
}

/// Free memory of the best device reported by a [`DeviceSource`]. An
/// unavailable probe yields no value rather than an error.
pub struct ProbeBudget<S> {
    pub source: S,
}

impl<S: DeviceSource> BudgetProvider for ProbeBudget<S> {
    fn name(&self) -> &str {
        "device probe"
    }

    fn budget(&self) -> Result<Option<u64>, BudgetError> {
        let Ok(devices) = self.source.devices() else {
            return Ok(None);
        };
        Ok(select_device(&devices).ok().map(|d| d.free_bytes))
    }
}

/// First provider that yields a value wins.
pub fn resolve_budget(providers: &[&dyn BudgetProvider]) -> Result<u64, BudgetError> {
    for p in providers {
        if let Some(bytes) = p.budget()? {
            return Ok(bytes);
        }
    }
    Err(BudgetError::NoBudget)
}
