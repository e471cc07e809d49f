use std::fs;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: String,
    pub free_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("no devices reported")]
    NoDevices,
    #[error("device probe unavailable: {0}")]
    Unavailable(String),
    #[error("bad device listing: {0}")]
    Parse(String),
}

/// Picks the device with the most free memory; ties go to the smallest id.
pub fn select_device(reports: &[DeviceReport]) -> Result<&DeviceReport, DeviceError> {
    reports
        .iter()
        .max_by(|a, b| {
            a.free_bytes
                .cmp(&b.free_bytes)
                .then_with(|| b.device_id.cmp(&a.device_id))
        })
        .ok_or(DeviceError::NoDevices)
}

/// Anything that can list devices and their free memory.
pub trait DeviceSource {
    fn devices(&self) -> Result<Vec<DeviceReport>, DeviceError>;
}

/// Reads a JSON array of `{"device_id", "free_bytes"}` on every call, so a
/// test can rewrite the file between polls.
#[derive(Debug, Clone)]
pub struct FileDeviceSource {
    pub path: PathBuf,
}

impl FileDeviceSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl DeviceSource for FileDeviceSource {
    fn devices(&self) -> Result<Vec<DeviceReport>, DeviceError> {
        let text = fs::read_to_string(&self.path)
            .map_err(|e| DeviceError::Unavailable(format!("{}: {e}", self.path.display())))?;
        serde_json::from_str(&text).map_err(|e| DeviceError::Parse(e.to_string()))
    }
}

/// Queries `nvidia-smi` for per-GPU free memory.
#[derive(Debug, Clone, Default)]
pub struct NvidiaSmiSource;

impl NvidiaSmiSource {
    fn parse(stdout: &str) -> Result<Vec<DeviceReport>, DeviceError> {
        stdout
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let (index, free_mib) = line
                    .split_once(',')
                    .ok_or_else(|| DeviceError::Parse(line.to_string()))?;
                let free_mib: u64 = free_mib
                    .trim()
                    .parse()
                    .map_err(|_| DeviceError::Parse(line.to_string()))?;
                Ok(DeviceReport {
                    device_id: format!("cuda:{}", index.trim()),
                    free_bytes: free_mib * 1024 * 1024,
                })
            })
            .collect()
    }
}

impl DeviceSource for NvidiaSmiSource {
    fn devices(&self) -> Result<Vec<DeviceReport>, DeviceError> {
        let out = Command::new("nvidia-smi")
            .args([
                "--query-gpu=index,memory.free",
                "--format=csv,noheader,nounits",
            ])
            .output()
            .map_err(|e| DeviceError::Unavailable(e.to_string()))?;
        if !out.status.success() {
            return Err(DeviceError::Unavailable(format!(
                "nvidia-smi exited with {}",
                out.status
            )));
        }
        Self::parse(&String::from_utf8_lossy(&out.stdout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(id: &str, free: u64) -> DeviceReport {
        DeviceReport {
            device_id: id.into(),
            free_bytes: free,
        }
    }

    #[test]
    fn picks_most_free() {
        let r = [dev("a", 5), dev("b", 9)];
        assert_eq!(select_device(&r).unwrap().device_id, "b");
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let r = [dev("b", 5), dev("a", 5), dev("c", 1)];
        assert_eq!(select_device(&r).unwrap().device_id, "a");
    }

    #[test]
    fn singleton_and_empty() {
        assert_eq!(select_device(&[dev("x", 0)]).unwrap().device_id, "x");
        assert!(matches!(select_device(&[]), Err(DeviceError::NoDevices)));
    }

    #[test]
    fn parses_nvidia_smi_csv() {
        let got = NvidiaSmiSource::parse("0, 1024\n1, 2048\n\n").unwrap();
        assert_eq!(got, vec![dev("cuda:0", 1 << 30), dev("cuda:1", 2 << 30)]);
        assert!(NvidiaSmiSource::parse("0 1024").is_err());
    }
}
