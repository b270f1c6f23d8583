//! Run reports: config hash, seed, per-step losses, final metrics, wall
//! time. Written atomically (temp file + rename) at run end.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub final_metrics: serde_json::Map<String, serde_json::Value>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(command: impl Into<String>, config_hash: String, seed: u64) -> Self {
        RunReport {
            command: command.into(),
            config_hash,
            seed,
            losses: Vec::new(),
            final_metrics: serde_json::Map::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn set_metric(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.final_metrics.insert(key.to_string(), value.into());
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.final_metrics.get(key).and_then(|v| v.as_f64())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArg(format!("report serialization: {}", e)))
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        write_atomic(path, json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArg(format!("report parse: {}", e)))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_roundtrips_losses_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let mut r = RunReport::new("train codec", "abc123".into(), 7);
        r.losses = vec![1.5, 0.333333333333333314829616256247, 0.25];
        r.set_metric("final_loss", 0.25);
        r.write(&path).unwrap();
        let back = RunReport::read(&path).unwrap();
        assert_eq!(back.losses.len(), 3);
        for (a, b) in r.losses.iter().zip(&back.losses) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.metric("final_loss"), Some(0.25));
        // no temp file left behind
        assert!(!dir.path().join(".report.json.tmp").exists());
    }
}
