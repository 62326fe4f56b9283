//! JSON metrics documents.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::metrics::RecallReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the configuration dump, output directory excluded.
    pub config_digest: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub em_curve: Vec<CurvePoint>,
    /// Seconds since the Unix epoch. The only field allowed to differ between reruns.
    pub timestamp: u64,
}

/// Digest of everything that can change results; the output directory is left out.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = Default::default();
    Sha256::digest(c.dump().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl MetricsDocument {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.seed,
            config_digest: config_digest(cfg),
            metrics: BTreeMap::new(),
            loss_curve: Vec::new(),
            em_curve: Vec::new(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn set_opt(&mut self, key: impl Into<String>, value: Option<f64>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// Records `<prefix>.ar`, the size buckets, and `<prefix>.recall@<iou>`.
    pub fn set_recall(&mut self, prefix: &str, r: &RecallReport) {
        self.set_opt(format!("{prefix}.ar"), r.ar);
        self.set_opt(format!("{prefix}.ar_small"), r.ar_small);
        self.set_opt(format!("{prefix}.ar_medium"), r.ar_medium);
        self.set_opt(format!("{prefix}.ar_large"), r.ar_large);
        self.set(format!("{prefix}.num_gts"), r.num_gts as f64);
        for t in &r.recalls {
            self.set_opt(format!("{prefix}.recall@{:.2}", t.iou), t.recall);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    /// JSON with the timestamp zeroed, for rerun comparisons.
    pub fn to_json_without_timestamp(&self) -> String {
        Self {
            timestamp: 0,
            ..self.clone()
        }
        .to_json()
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
