//! Multi-run accuracy measurement with confidence intervals, and the
//! before/after error-reduction analysis over a frozen taxonomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::collection::{execute_attempts, CollectionError, ExecutionOptions};
use crate::gateway::Endpoint;
use crate::model::{fingerprint, Dataset, FailureLog, Phase, RunConfig, Taxonomy, TokenLedger};
use crate::taxonomy::{extend_taxonomy, TaxonomyError};
use crate::templates::TemplateSet;

/// Label recorded in reports for the interval construction, which is a
/// normal approximation over per-run accuracies rather than anything the
/// source statistics pin down.
pub const CI_METHOD: &str = "normal-approx 95%";

const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Accuracy of one prompt over several full passes of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt_fingerprint: String,
    pub runs_per_problem: u32,
    pub per_run_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub ci_method: String,
    /// Evaluation-phase tokens by role for this report's calls.
    pub token_totals: BTreeMap<String, TokenTotals>,
}

/// Mean and 95% normal-approximation half-width over per-run accuracies.
/// The half-width is defined as 0 for a single run.
pub fn accuracy_summary(per_run: &[f64]) -> (f64, f64) {
    let n = per_run.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = per_run.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let variance = per_run.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let ci = Z_95 * variance.sqrt() / (n as f64).sqrt();
    (mean, ci)
}

/// Run `runs` full passes of `dataset` under `prompt` and report accuracy.
///
/// An attempt that errors out (within the tolerated fraction) counts as
/// incorrect for its run.
pub fn evaluate_prompt(
    dataset: &Dataset,
    prompt: &str,
    runs: u32,
    backbone: &Endpoint,
    judge: Option<&Endpoint>,
    ledger: &TokenLedger,
    options: &ExecutionOptions,
) -> Result<EvalReport, CollectionError> {
    let baseline = ledger.len();
    let records = execute_attempts(
        dataset,
        prompt,
        runs,
        backbone,
        judge,
        ledger,
        Phase::Evaluation,
        options,
    )?;

    // Slots are problem-major: problem p occupies p*runs..(p+1)*runs.
    let mut correct_per_run = vec![0usize; runs as usize];
    for (slot, record) in records.iter().enumerate() {
        let run_index = slot % runs as usize;
        if record.as_ref().and_then(|r| r.correct) == Some(true) {
            correct_per_run[run_index] += 1;
        }
    }
    let per_run_accuracy: Vec<f64> = correct_per_run
        .iter()
        .map(|&c| {
            if dataset.is_empty() {
                0.0
            } else {
                c as f64 / dataset.len() as f64
            }
        })
        .collect();
    let (mean_accuracy, ci_half_width) = accuracy_summary(&per_run_accuracy);

    let mut token_totals: BTreeMap<String, TokenTotals> = BTreeMap::new();
    for entry in ledger.entries_since(baseline) {
        if entry.phase != Phase::Evaluation {
            continue;
        }
        let key = match entry.role {
            crate::model::Role::Backbone => "backbone",
            crate::model::Role::Optimizer => "optimizer",
            crate::model::Role::Judge => "judge",
        };
        let slot = token_totals.entry(key.to_string()).or_insert(TokenTotals {
            input_tokens: 0,
            output_tokens: 0,
        });
        slot.input_tokens += entry.input_tokens;
        slot.output_tokens += entry.output_tokens;
    }

    Ok(EvalReport {
        prompt_fingerprint: fingerprint(prompt),
        runs_per_problem: runs,
        per_run_accuracy,
        mean_accuracy,
        ci_half_width,
        ci_method: CI_METHOD.to_string(),
        token_totals,
    })
}

/// One before/after row of the error-reduction comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReductionRow {
    pub name: String,
    pub before_count: usize,
    pub after_count: usize,
}

/// Before/after failed-trace counts per category.
///
/// `rows` covers the top `top_n` original categories by failure count;
/// `new_categories` lists categories created while categorizing the after
/// log; `uncompared_after_count` is what landed in original categories
/// outside the top `top_n`. All after counts sum to `after_total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReductionReport {
    pub rows: Vec<ErrorReductionRow>,
    pub new_categories: Vec<ErrorReductionRow>,
    pub uncompared_after_count: usize,
    pub after_total: usize,
}

/// Categorize the after-optimization failures against the frozen taxonomy
/// (new categories permitted) and compare per-category counts.
#[allow(clippy::too_many_arguments)]
pub fn error_reduction(
    taxonomy: &Taxonomy,
    before: &FailureLog,
    after: &FailureLog,
    top_n: usize,
    config: &RunConfig,
    dataset: &Dataset,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    templates: &TemplateSet,
) -> Result<ErrorReductionReport, TaxonomyError> {
    if taxonomy.source_log_fingerprint != before.fingerprint() {
        return Err(TaxonomyError::Build {
            batch_index: 0,
            attempts: 0,
            last_error: "taxonomy was not built from the given before-log".to_string(),
        });
    }

    let mut extended = taxonomy.clone();
    if !after.is_empty() {
        extend_taxonomy(
            &mut extended,
            &after.traces,
            dataset,
            config,
            optimizer,
            ledger,
            templates,
            Phase::Evaluation,
        )?;
    }

    let original_names: Vec<String> = taxonomy.categories.iter().map(|c| c.name.clone()).collect();
    let before_counts: BTreeMap<&str, usize> = taxonomy
        .categories
        .iter()
        .map(|c| (c.name.as_str(), c.failure_count()))
        .collect();

    // Rank original categories the same way selection does.
    let mut ranked: Vec<&crate::model::ErrorCategory> = taxonomy.categories.iter().collect();
    ranked.sort_by(|a, b| {
        (b.failure_count(), b.problem_count()).cmp(&(a.failure_count(), a.problem_count()))
    });
    let top_names: Vec<String> = ranked.iter().take(top_n).map(|c| c.name.clone()).collect();

    let after_count_of = |name: &str| -> usize {
        let total = extended
            .find_by_name(name)
            .map(|c| c.failure_count())
            .unwrap_or(0);
        total - before_counts.get(name).copied().unwrap_or(0)
    };

    let rows: Vec<ErrorReductionRow> = top_names
        .iter()
        .map(|name| ErrorReductionRow {
            name: name.clone(),
            before_count: before_counts[name.as_str()],
            after_count: after_count_of(name),
        })
        .collect();

    let new_categories: Vec<ErrorReductionRow> = extended
        .categories
        .iter()
        .skip(original_names.len())
        .map(|c| ErrorReductionRow {
            name: c.name.clone(),
            before_count: 0,
            after_count: c.failure_count(),
        })
        .collect();

    let uncompared_after_count: usize = original_names
        .iter()
        .filter(|name| !top_names.contains(name))
        .map(|name| after_count_of(name))
        .sum();

    Ok(ErrorReductionReport {
        rows,
        new_categories,
        uncompared_after_count,
        after_total: after.len(),
    })
}
