//! Core domain types shared across the pipeline: problems and datasets,
//! failed traces, the error taxonomy with its prevalence statistics, prompt
//! artifacts, and the token ledger.
//!
//! Everything here is a plain value object; once constructed it is never
//! mutated in place (the [`TokenLedger`] is the one exception — it accepts
//! concurrent appends behind a mutex so LLM calls from parallel workers can
//! share it).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// SHA-256 hex digest of the exact text, used to fingerprint prompts and
/// persisted artifacts so downstream stages can detect staleness.
pub fn fingerprint(text: &str) -> String {
    fingerprint_bytes(text.as_bytes())
}

/// SHA-256 hex digest of raw bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Canonical form of a category name: trimmed, case-folded, internal
/// whitespace runs collapsed to a single space. LLMs re-emit names with
/// cosmetic drift; matching across batches goes through this form.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_space = false;
    for ch in name.trim().chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate problem id `{0}`")]
    DuplicateProblemId(String),
    #[error("problem `{0}` has an empty {1}")]
    EmptyField(String, &'static str),
    #[error("invalid run configuration: {0}")]
    InvalidRunConfig(String),
    #[error("invalid failure log: {0}")]
    InvalidFailureLog(String),
}

/// A single task instance: statement plus ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Validation,
    Test,
}

/// An ordered collection of problems with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub role: DatasetRole,
    pub problems: Vec<Problem>,
}

impl Dataset {
    /// Build a dataset, enforcing unique problem ids and non-empty
    /// statements and gold answers.
    pub fn new(
        name: impl Into<String>,
        role: DatasetRole,
        problems: Vec<Problem>,
    ) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for problem in &problems {
            if problem.statement.trim().is_empty() {
                return Err(ModelError::EmptyField(problem.id.clone(), "statement"));
            }
            if problem.gold_answer.trim().is_empty() {
                return Err(ModelError::EmptyField(problem.id.clone(), "gold_answer"));
            }
            if !seen.insert(problem.id.clone()) {
                return Err(ModelError::DuplicateProblemId(problem.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            role,
            problems,
        })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// Zero-based position of a problem id, if present.
    pub fn position_of(&self, problem_id: &str) -> Option<usize> {
        self.problems.iter().position(|p| p.id == problem_id)
    }

    pub fn problem(&self, problem_id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == problem_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceStyle {
    Short,
    Detailed,
}

/// Pipeline hyperparameters.
///
/// `k_collection_runs` is the number of passes over the validation set,
/// `batch_size` the number of traces per categorization call, and
/// `max_categories` the cap on categories selected for guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k_collection_runs: u32,
    pub batch_size: usize,
    pub max_categories: usize,
    pub guidance_style: GuidanceStyle,
    pub min_problem_count: usize,
    pub domain_description: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_collection_runs: 5,
            batch_size: 6,
            max_categories: 10,
            guidance_style: GuidanceStyle::Detailed,
            min_problem_count: 2,
            domain_description: "reasoning problems".to_string(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k_collection_runs < 1 {
            return Err(ModelError::InvalidRunConfig(
                "k_collection_runs must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(ModelError::InvalidRunConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.max_categories < 1 {
            return Err(ModelError::InvalidRunConfig(
                "max_categories must be >= 1".into(),
            ));
        }
        if self.min_problem_count < 1 {
            return Err(ModelError::InvalidRunConfig(
                "min_problem_count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One guidance text tied to a selected category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceItem {
    pub category_name: String,
    pub guidance_text: String,
}

/// The base prompt and its optimized form.
///
/// `assembled_prompt` always begins with `base_prompt` verbatim; when there
/// are no guidance items the two are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub base_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preamble: Option<String>,
    #[serde(default)]
    pub guidance_items: Vec<GuidanceItem>,
    pub assembled_prompt: String,
}

/// One incorrect reasoning trace with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTrace {
    pub problem_id: String,
    /// 1-based collection run this trace came from.
    pub run_id: u32,
    pub reasoning: String,
    pub predicted_answer: String,
}

/// All failed traces collected for one prompt, plus the attempt budget they
/// were drawn from (`|V| * K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureLog {
    pub prompt_fingerprint: String,
    pub total_attempts: u64,
    pub traces: Vec<FailedTrace>,
}

/// Header record on the first line of a persisted failure log.
#[derive(Debug, Serialize, Deserialize)]
struct FailureLogHeader {
    format_version: u32,
    prompt_fingerprint: String,
    total_attempts: u64,
}

pub const FAILURE_LOG_FORMAT_VERSION: u32 = 1;

impl FailureLog {
    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    /// Canonical JSONL form: a one-line header record followed by one
    /// trace per line.
    pub fn to_jsonl(&self) -> String {
        let header = FailureLogHeader {
            format_version: FAILURE_LOG_FORMAT_VERSION,
            prompt_fingerprint: self.prompt_fingerprint.clone(),
            total_attempts: self.total_attempts,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for trace in &self.traces {
            out.push_str(&serde_json::to_string(trace).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| ModelError::InvalidFailureLog("missing header line".into()))?;
        let header: FailureLogHeader = serde_json::from_str(header_line)
            .map_err(|e| ModelError::InvalidFailureLog(format!("bad header: {e}")))?;
        let mut traces = Vec::new();
        let mut seen = BTreeSet::new();
        for (index, line) in lines.enumerate() {
            let trace: FailedTrace = serde_json::from_str(line).map_err(|e| {
                ModelError::InvalidFailureLog(format!("bad trace at record {}: {e}", index + 1))
            })?;
            if !seen.insert((trace.problem_id.clone(), trace.run_id)) {
                return Err(ModelError::InvalidFailureLog(format!(
                    "duplicate (problem_id, run_id) = ({}, {})",
                    trace.problem_id, trace.run_id
                )));
            }
            traces.push(trace);
        }
        if traces.len() as u64 > header.total_attempts {
            return Err(ModelError::InvalidFailureLog(format!(
                "{} traces exceed total_attempts {}",
                traces.len(),
                header.total_attempts
            )));
        }
        Ok(Self {
            prompt_fingerprint: header.prompt_fingerprint,
            total_attempts: header.total_attempts,
            traces,
        })
    }

    /// Fingerprint of the canonical JSONL form; downstream artifacts record
    /// this to detect stale inputs.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_jsonl())
    }
}

/// Where and how one failed trace exhibits a category's error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureAssignment {
    pub problem_id: String,
    pub run_id: u32,
    pub location: String,
    pub details: String,
}

/// A named, self-contained error pattern with the traces assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCategory {
    pub name: String,
    pub summary: String,
    pub description: String,
    pub example: String,
    pub error_type: String,
    pub why_leads_to_wrong_answer: String,
    #[serde(default)]
    pub assignments: Vec<FailureAssignment>,
}

impl ErrorCategory {
    /// Number of failed traces assigned to this category.
    pub fn failure_count(&self) -> usize {
        self.assignments.len()
    }

    /// Number of distinct problems exhibiting this category's error.
    pub fn problem_count(&self) -> usize {
        self.assignments
            .iter()
            .map(|a| a.problem_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// The error taxonomy: categories in first-appearance order, each carrying
/// its assignments. Every categorized trace appears in exactly one
/// category's assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub source_log_fingerprint: String,
    pub categories: Vec<ErrorCategory>,
}

impl Taxonomy {
    /// Total number of categorized traces across all categories.
    pub fn total_assignments(&self) -> usize {
        self.categories.iter().map(|c| c.assignments.len()).sum()
    }

    /// Look up a category by normalized name.
    pub fn find_by_name(&self, name: &str) -> Option<&ErrorCategory> {
        let wanted = normalize_name(name);
        self.categories
            .iter()
            .find(|c| normalize_name(&c.name) == wanted)
    }

    pub fn find_by_name_mut(&mut self, name: &str) -> Option<&mut ErrorCategory> {
        let wanted = normalize_name(name);
        self.categories
            .iter_mut()
            .find(|c| normalize_name(&c.name) == wanted)
    }
}

/// Per-category prevalence statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub name: String,
    pub failure_count: usize,
    pub problem_count: usize,
}

/// One row per category, counts computed from assignments.
pub fn category_stats(taxonomy: &Taxonomy) -> Vec<CategoryStats> {
    taxonomy
        .categories
        .iter()
        .map(|c| CategoryStats {
            name: c.name.clone(),
            failure_count: c.failure_count(),
            problem_count: c.problem_count(),
        })
        .collect()
}

/// Which model a ledger entry is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    Optimizer,
    Judge,
}

/// Which pipeline stage a ledger entry belongs to. Totals over
/// `Collection + Taxonomy + Guidance` form the optimization-phase budget;
/// `Evaluation` is accounted separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Collection,
    Taxonomy,
    Guidance,
    Evaluation,
}

pub const OPTIMIZATION_PHASES: [Phase; 3] = [Phase::Collection, Phase::Taxonomy, Phase::Guidance];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub role: Role,
    pub phase: Phase,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Per-call token accounting. Appends are atomic; a ledger can be shared
/// freely across worker threads.
#[derive(Debug, Default)]
pub struct TokenLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: Role, phase: Phase, input_tokens: u64, output_tokens: u64) {
        self.entries.lock().unwrap().push(LedgerEntry {
            role,
            phase,
            input_tokens,
            output_tokens,
        });
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries appended at or after the given index; used to attribute a
    /// span of calls to one report.
    pub fn entries_since(&self, index: usize) -> Vec<LedgerEntry> {
        let entries = self.entries.lock().unwrap();
        entries.get(index..).unwrap_or(&[]).to_vec()
    }

    /// Input + output tokens over entries matching any of the given phases.
    pub fn total_for_phases(&self, phases: &[Phase]) -> u64 {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| phases.contains(&e.phase))
            .map(|e| e.input_tokens + e.output_tokens)
            .sum()
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.total_for_phases(&[phase])
    }

    /// Optimization-phase total: collection + taxonomy + guidance, with
    /// evaluation excluded.
    pub fn optimization_total(&self) -> u64 {
        self.total_for_phases(&OPTIMIZATION_PHASES)
    }

    pub fn grand_total(&self) -> u64 {
        self.total_for_phases(&[
            Phase::Collection,
            Phase::Taxonomy,
            Phase::Guidance,
            Phase::Evaluation,
        ])
    }

    /// (input, output) totals per role over entries matching the phases.
    pub fn role_totals(&self, phases: &[Phase]) -> BTreeMap<String, (u64, u64)> {
        let mut totals: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for entry in self.entries.lock().unwrap().iter() {
            if !phases.contains(&entry.phase) {
                continue;
            }
            let key = match entry.role {
                Role::Backbone => "backbone",
                Role::Optimizer => "optimizer",
                Role::Judge => "judge",
            };
            let slot = totals.entry(key.to_string()).or_insert((0, 0));
            slot.0 += entry.input_tokens;
            slot.1 += entry.output_tokens;
        }
        totals
    }

    /// Number of entries matching a (role, phase) pair. Test helper for
    /// call-count contracts.
    pub fn count(&self, role: Role, phase: Phase) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.role == role && e.phase == phase)
            .count()
    }
}
