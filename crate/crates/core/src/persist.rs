//! Versioned JSON model files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SchemaHints;
use crate::error::{Error, Result};
use crate::model::{CheckReport, FitOptions, FittedQuantileModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub options: FitOptions,
    /// SHA-256 of the training CSV bytes.
    pub data_fingerprint: String,
    pub n_rows: usize,
    /// Factor columns and matrix groups of the training CSV.
    pub schema: SchemaHints,
}

/// A quantile level whose fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub tau: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub formula: String,
    /// One fit per quantile level, in increasing order.
    pub models: Vec<FittedQuantileModel>,
    pub failures: Vec<FitFailure>,
    /// Diagnostics on the training data, aligned with `models`.
    pub checks: Vec<CheckReport>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn new(
        formula: String,
        models: Vec<FittedQuantileModel>,
        failures: Vec<FitFailure>,
        checks: Vec<CheckReport>,
        provenance: Provenance,
    ) -> Self {
        Self { schema_version: SCHEMA_VERSION, formula, models, failures, checks, provenance }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        match probe.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(probe)?),
            Some(v) => Err(Error::Data(format!("model file schema {v} is not supported (expected {SCHEMA_VERSION})"))),
            None => Err(Error::Data("model file has no schema_version".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
