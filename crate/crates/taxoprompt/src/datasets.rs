//! Dataset loading, validation, seeded sampling, and the bundled synthetic
//! fixtures used by the test suites.
//!
//! The on-disk format is JSON Lines, one problem per line:
//!
//! ```text
//! {"id": "p1", "statement": "...", "gold_answer": "...", "metadata": {...}}
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Dataset, DatasetRole, Problem};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate problem id `{id}` at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("sample of {requested} exceeds dataset size {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

/// Parse a JSONL dataset from text. `name` is typically the file stem.
pub fn parse_dataset(name: &str, text: &str, role: DatasetRole) -> Result<Dataset, DatasetError> {
    let mut problems: Vec<Problem> = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let lineno = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if problem.statement.trim().is_empty() {
            return Err(DatasetError::Parse {
                line: lineno,
                message: format!("problem `{}` has an empty statement", problem.id),
            });
        }
        if problem.gold_answer.trim().is_empty() {
            return Err(DatasetError::Parse {
                line: lineno,
                message: format!("problem `{}` has an empty gold_answer", problem.id),
            });
        }
        if problems.iter().any(|p| p.id == problem.id) {
            return Err(DatasetError::DuplicateId {
                line: lineno,
                id: problem.id,
            });
        }
        problems.push(problem);
    }
    // Invariants were checked line by line; construction cannot fail now.
    Ok(Dataset::new(name, role, problems).expect("validated above"))
}

/// Load a JSONL dataset from disk. The dataset name is the file stem.
pub fn load_dataset(path: &Path, role: DatasetRole) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".to_string());
    parse_dataset(&name, &text, role)
}

/// Serialize a dataset to its JSONL form.
pub fn dataset_to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for problem in &dataset.problems {
        out.push_str(&serde_json::to_string(problem).expect("problem serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, dataset_to_jsonl(dataset)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Uniform sample of `n` problems without replacement, deterministic under
/// `seed`, preserving the original relative order.
pub fn sample_split(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if n > dataset.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    indices.sort_unstable();
    let problems = indices
        .into_iter()
        .map(|i| dataset.problems[i].clone())
        .collect();
    Ok(Dataset {
        name: dataset.name.clone(),
        role: dataset.role,
        problems,
    })
}

/// Tiny synthetic datasets bundled for tests and demos.
pub mod fixtures {
    use super::*;

    /// Six arithmetic word problems with short numeric answers.
    pub fn arithmetic(role: DatasetRole) -> Dataset {
        parse_dataset(
            "arithmetic",
            include_str!("../fixtures/arithmetic.jsonl"),
            role,
        )
        .expect("bundled fixture is valid")
    }

    /// Nine three-way entailment toy problems (True / False / Uncertain).
    pub fn entailment(role: DatasetRole) -> Dataset {
        parse_dataset(
            "entailment",
            include_str!("../fixtures/entailment.jsonl"),
            role,
        )
        .expect("bundled fixture is valid")
    }
}
