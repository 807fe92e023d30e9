//! Output artifacts: hashed JSON reports and CSV tables.
//!
//! Every file a run produces embeds the hash of the configuration that
//! produced it plus the seed, so downstream joins stay reproducible and a
//! rerun with identical inputs is byte-identical.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("artifact {path} was produced for config {found}, expected {expected}")]
    HashMismatch {
        path: String,
        found: String,
        expected: String,
    },
}

pub fn config_hash(config_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A JSON artifact tagged with the producing config hash and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub config_hash: String,
    pub seed: u64,
    pub payload: T,
}

pub fn write_report<T: Serialize>(
    path: &Path,
    config_hash: &str,
    seed: u64,
    payload: &T,
) -> Result<(), ReportError> {
    let report = Report {
        config_hash: config_hash.to_string(),
        seed,
        payload,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(path, text + "\n").map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a report and checks it belongs to the given config.
pub fn read_report<T: DeserializeOwned>(
    path: &Path,
    expected_hash: &str,
) -> Result<Report<T>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let report: Report<T> = serde_json::from_str(&text)?;
    if report.config_hash != expected_hash {
        return Err(ReportError::HashMismatch {
            path: path.display().to_string(),
            found: report.config_hash,
            expected: expected_hash.to_string(),
        });
    }
    Ok(report)
}

/// CSV with a `# config_hash=... seed=...` meta line above the header.
pub struct CsvTable {
    lines: Vec<String>,
}

impl CsvTable {
    pub fn new(config_hash: &str, seed: u64, header: &str) -> Self {
        CsvTable {
            lines: vec![
                format!("# config_hash={config_hash} seed={seed}"),
                header.to_string(),
            ],
        }
    }

    pub fn push_row(&mut self, row: String) {
        self.lines.push(row);
    }

    pub fn to_string(&self) -> String {
        self.lines.join("\n") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, self.to_string()).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
