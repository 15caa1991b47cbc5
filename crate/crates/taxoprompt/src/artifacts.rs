//! Artifact persistence: versioned JSON documents, the failure-log JSONL
//! file, atomic writes, and content fingerprints for staleness checks.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{BackendKind, Endpoint};
use crate::guidance::GuidanceBundle;
use crate::model::{fingerprint_bytes, FailureLog, LedgerEntry, TokenLedger, OPTIMIZATION_PHASES};
use crate::selection::SelectionRow;

pub const FORMAT_VERSION: u32 = 1;

/// Artifact file names under the output directory.
pub mod filenames {
    pub const BASE_PROMPT: &str = "base_prompt.txt";
    pub const FAILURE_LOG: &str = "failure_log.jsonl";
    pub const FAILURE_LOG_AFTER: &str = "failure_log_after.jsonl";
    pub const TAXONOMY: &str = "taxonomy.json";
    pub const SELECTION: &str = "selection.json";
    pub const GUIDANCE: &str = "guidance.json";
    pub const PROMPT: &str = "prompt.json";
    pub const OPTIMIZED_PROMPT: &str = "optimized_prompt.txt";
    pub const LEDGER: &str = "ledger.json";
    pub const EVAL_BASE: &str = "eval_base.json";
    pub const EVAL_OPTIMIZED: &str = "eval_optimized.json";
    pub const ERROR_REDUCTION: &str = "error_reduction.json";
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact `{path}` not found; run the upstream stage first")]
    Missing { path: PathBuf },
    #[error("failed to access `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("artifact `{path}` is invalid: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// A JSON document with a leading `format_version` field.
#[derive(Debug, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    #[serde(flatten)]
    pub inner: T,
}

/// Selection artifact: the ranked table, chained to its taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionDoc {
    pub source_taxonomy_fingerprint: String,
    pub rows: Vec<SelectionRow>,
}

/// Guidance artifact: the bundle, chained to the artifact it was derived
/// from (the selection file, or the failure log in raw-sampling mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDoc {
    pub upstream_fingerprint: String,
    #[serde(flatten)]
    pub bundle: GuidanceBundle,
}

/// Persisted token ledger with per-phase totals.
#[derive(Debug, Serialize, Deserialize)]
pub struct LedgerDoc {
    pub entries: Vec<LedgerEntry>,
    pub collection_total: u64,
    pub taxonomy_total: u64,
    pub guidance_total: u64,
    pub evaluation_total: u64,
    pub optimization_total: u64,
    pub grand_total: u64,
}

impl LedgerDoc {
    pub fn snapshot(ledger: &TokenLedger) -> Self {
        use crate::model::Phase;
        Self {
            entries: ledger.entries(),
            collection_total: ledger.phase_total(Phase::Collection),
            taxonomy_total: ledger.phase_total(Phase::Taxonomy),
            guidance_total: ledger.phase_total(Phase::Guidance),
            evaluation_total: ledger.phase_total(Phase::Evaluation),
            optimization_total: ledger.total_for_phases(&OPTIMIZATION_PHASES),
            grand_total: ledger.grand_total(),
        }
    }
}

/// Write bytes atomically: a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    let io_err = |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Read an artifact's raw bytes plus their fingerprint.
pub fn read_with_fingerprint(path: &Path) -> Result<(Vec<u8>, String), ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = fingerprint_bytes(&bytes);
    Ok((bytes, digest))
}

/// Serialize a versioned JSON document, write it atomically, and return the
/// fingerprint of the bytes written.
pub fn write_json<T: Serialize>(path: &Path, inner: &T) -> Result<String, ArtifactError> {
    let doc = Versioned {
        format_version: FORMAT_VERSION,
        inner,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| ArtifactError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(fingerprint_bytes(&bytes))
}

/// Read a versioned JSON document, returning the payload and the file
/// fingerprint.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, String), ArtifactError> {
    let (bytes, digest) = read_with_fingerprint(path)?;
    let doc: Versioned<T> = serde_json::from_slice(&bytes).map_err(|e| ArtifactError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ArtifactError::Invalid {
            path: path.to_path_buf(),
            message: format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            ),
        });
    }
    Ok((doc.inner, digest))
}

/// Write a failure log in its canonical JSONL form; returns the fingerprint
/// of the bytes written (equal to [`FailureLog::fingerprint`]).
pub fn write_failure_log(path: &Path, log: &FailureLog) -> Result<String, ArtifactError> {
    let text = log.to_jsonl();
    write_atomic(path, text.as_bytes())?;
    Ok(fingerprint_bytes(text.as_bytes()))
}

/// Read a failure log, returning it plus the file fingerprint.
pub fn read_failure_log(path: &Path) -> Result<(FailureLog, String), ArtifactError> {
    let (bytes, digest) = read_with_fingerprint(path)?;
    let text = String::from_utf8(bytes).map_err(|e| ArtifactError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let log = FailureLog::from_jsonl(&text).map_err(|e| ArtifactError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((log, digest))
}

/// How far a mock endpoint's script has been consumed — surfaced in stage
/// summaries to help debug scripted runs. `None` for http backends.
pub fn remaining_script_steps(endpoint: &Endpoint) -> Option<usize> {
    match &endpoint.backend.kind {
        BackendKind::Mock { script } => Some(script.remaining()),
        BackendKind::Http { .. } => None,
    }
}
