//! Per-stage manifests: what a stage read, under which config, and what it wrote.

use crate::error::CliError;
use intent_core::io::{file_sha256, write_atomic};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_fingerprint: String,
    /// Paths relative to the output directory, mapped to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; the only field that differs between identical runs.
    pub created: u64,
}

pub fn manifest_path(out: &Path, stage: &str) -> std::path::PathBuf {
    out.join("manifests").join(format!("{stage}.json"))
}

pub fn checksums(out: &Path, files: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    files
        .iter()
        .map(|f| {
            let sum = file_sha256(&out.join(f)).map_err(|e| CliError::Upstream(format!("{f}: {e}")))?;
            Ok((f.clone(), sum))
        })
        .collect()
}

impl Manifest {
    pub fn new(stage: &str, fingerprint: String, inputs: BTreeMap<String, String>, outputs: BTreeMap<String, String>) -> Self {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { stage: stage.to_string(), config_fingerprint: fingerprint, inputs, outputs, created }
    }

    pub fn load(out: &Path, stage: &str) -> Result<Option<Self>, CliError> {
        let path = manifest_path(out, stage);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| CliError::Upstream(format!("manifest {} is unreadable: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::Upstream(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, out: &Path) -> Result<(), CliError> {
        let path = manifest_path(out, &self.stage);
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Whether the recorded outputs are still on disk unchanged.
    pub fn outputs_intact(&self, out: &Path) -> bool {
        self.outputs.iter().all(|(f, sum)| file_sha256(&out.join(f)).is_ok_and(|s| &s == sum))
    }

    /// Checks one output file against its recorded checksum.
    pub fn verify_output(&self, out: &Path, file: &str) -> Result<String, CliError> {
        let recorded = self
            .outputs
            .get(file)
            .ok_or_else(|| CliError::Upstream(format!("{file} is not recorded by the {} stage", self.stage)))?;
        let path = out.join(file);
        let actual = file_sha256(&path).map_err(|_| CliError::Upstream(format!("missing upstream artifact {}", path.display())))?;
        if &actual != recorded {
            return Err(CliError::Upstream(format!(
                "checksum mismatch for {}: the {} stage recorded {recorded}, found {actual}",
                path.display(),
                self.stage
            )));
        }
        Ok(actual)
    }
}
