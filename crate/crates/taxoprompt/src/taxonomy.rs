//! Error taxonomy creation: batched categorization of failed traces through
//! optimizer calls, with strict local schema validation and category reuse
//! across batches.
//!
//! Batches are strictly sequential — every batch's prompt embeds the
//! taxonomy accumulated from all prior batches. A malformed response is
//! retried up to [`MAX_FORMAT_RETRIES`] times with the validation error
//! appended to the request; after that the build aborts rather than dropping
//! traces, since the prevalence statistics downstream depend on full
//! coverage.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::gateway::{complete, Endpoint, GatewayError, ResponseFormat};
use crate::jsonx::extract_json_object;
use crate::model::{
    normalize_name, Dataset, ErrorCategory, FailedTrace, FailureAssignment, FailureLog, Phase,
    Role, RunConfig, Taxonomy, TokenLedger,
};
use crate::templates::{TemplateError, TemplateSet};

/// Format-error retries per batch (in addition to the initial attempt).
pub const MAX_FORMAT_RETRIES: usize = 2;

pub(crate) const OPTIMIZER_SYSTEM_PROMPT: &str =
    "You are an expert error analyst. Follow the instructions and return a single JSON object.";

#[derive(Debug, Error)]
pub enum BatchParseError {
    #[error("invalid JSON: {0}")]
    JsonSyntax(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("assignment references unknown category `{name}`")]
    UnknownCategory { name: String },
    #[error("no assignment for failure {ordinal}")]
    MissingAssignment { ordinal: usize },
    #[error("duplicate assignment for failure {ordinal}")]
    DuplicateAssignment { ordinal: usize },
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("failure log is empty; nothing to categorize")]
    EmptyLog,
    #[error("failure log references problem `{0}` not present in the dataset")]
    UnknownProblem(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(
        "taxonomy build failed at batch {batch_index} after {attempts} attempts: {last_error}"
    )]
    Build {
        batch_index: usize,
        attempts: usize,
        last_error: String,
    },
}

/// One new category declared by a batch response, plus the batch's ordinal
/// assignments. `problem_idx` / `run_id` are whatever the response echoed
/// back; the ordinal is the authoritative key.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAssignment {
    pub failure_ordinal: usize,
    pub problem_idx: Option<u64>,
    pub run_id: Option<u64>,
    pub category_name: String,
    pub location: String,
    pub details: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Categories declared in this response, without assignments.
    pub new_categories: Vec<ErrorCategory>,
    pub assignments: Vec<ParsedAssignment>,
    pub is_first_batch: bool,
}

fn failure_blocks(
    traces: &[FailedTrace],
    dataset: &Dataset,
    templates: &TemplateSet,
) -> Result<String, TaxonomyError> {
    let mut blocks = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        let position = dataset
            .position_of(&trace.problem_id)
            .ok_or_else(|| TaxonomyError::UnknownProblem(trace.problem_id.clone()))?;
        let problem = &dataset.problems[position];
        let block = templates.render(
            "failure_block",
            &[
                ("failure_id", &(i + 1).to_string()),
                ("problem_idx", &(position + 1).to_string()),
                ("run_id", &trace.run_id.to_string()),
                ("problem", &problem.statement),
                ("correct_answer", &problem.gold_answer),
                ("reasoning", &trace.reasoning),
                ("predicted_answer", &trace.predicted_answer),
            ],
        )?;
        blocks.push(block);
    }
    Ok(blocks.join("\n\n"))
}

fn category_blocks(taxonomy: &Taxonomy, templates: &TemplateSet) -> Result<String, TemplateError> {
    let mut blocks = Vec::with_capacity(taxonomy.categories.len());
    for category in &taxonomy.categories {
        let block = templates.render(
            "category_block",
            &[
                ("category_name", &category.name),
                ("summary", &category.summary),
                ("description", &category.description),
                ("example", &category.example),
                ("error_type", &category.error_type),
                (
                    "why_leads_to_wrong_answer",
                    &category.why_leads_to_wrong_answer,
                ),
                ("trace_count", &category.failure_count().to_string()),
            ],
        )?;
        blocks.push(block);
    }
    Ok(blocks.join("\n\n"))
}

/// Categorization prompt for the first batch, when no categories exist yet.
pub fn render_first_batch_prompt(
    traces: &[FailedTrace],
    dataset: &Dataset,
    domain_description: &str,
    templates: &TemplateSet,
) -> Result<String, TaxonomyError> {
    if traces.is_empty() {
        return Err(TemplateError::EmptyBatch.into());
    }
    let blocks = failure_blocks(traces, dataset, templates)?;
    Ok(templates.render(
        "taxonomy_first",
        &[
            ("domain_description", domain_description),
            ("failure_blocks", &blocks),
        ],
    )?)
}

/// Categorization prompt for later batches, carrying the accumulated
/// taxonomy so existing categories are reused.
pub fn render_subsequent_batch_prompt(
    traces: &[FailedTrace],
    dataset: &Dataset,
    existing: &Taxonomy,
    domain_description: &str,
    templates: &TemplateSet,
) -> Result<String, TaxonomyError> {
    if traces.is_empty() {
        return Err(TemplateError::EmptyBatch.into());
    }
    if existing.categories.is_empty() {
        return Err(TemplateError::EmptyTaxonomy.into());
    }
    let cat_blocks = category_blocks(existing, templates)?;
    let fail_blocks = failure_blocks(traces, dataset, templates)?;
    Ok(templates.render(
        "taxonomy_subsequent",
        &[
            ("domain_description", domain_description),
            ("category_blocks", &cat_blocks),
            ("failure_blocks", &fail_blocks),
        ],
    )?)
}

fn required_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    field: &str,
    context: &str,
) -> Result<String, BatchParseError> {
    match obj.get(field) {
        Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(serde_json::Value::String(_)) => Err(BatchParseError::Schema(format!(
            "{context}: field `{field}` is empty"
        ))),
        Some(_) => Err(BatchParseError::Schema(format!(
            "{context}: field `{field}` is not a string"
        ))),
        None => Err(BatchParseError::Schema(format!(
            "{context}: missing field `{field}`"
        ))),
    }
}

fn optional_str(obj: &serde_json::Map<String, serde_json::Value>, field: &str) -> String {
    obj.get(field)
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string()
}

const CATEGORY_FIELDS: [&str; 6] = [
    "category_name",
    "summary",
    "description",
    "example",
    "error_type",
    "why_leads_to_wrong_answer",
];

/// Validate a batch response against the expected schema.
///
/// The first batch must define its categories under `categories`; later
/// batches add under `new_categories` (absent means none). Every expected
/// ordinal must be assigned exactly once, and every assignment must resolve
/// (after name normalization) to an existing or newly declared category.
pub fn parse_batch_response(
    content: &str,
    expected_ordinals: &BTreeSet<usize>,
    existing_names: &BTreeSet<String>,
    is_first: bool,
) -> Result<BatchResult, BatchParseError> {
    let value = extract_json_object(content).map_err(BatchParseError::JsonSyntax)?;
    let obj = value
        .as_object()
        .expect("extract_json_object returns objects");

    let primary_key = if is_first {
        "categories"
    } else {
        "new_categories"
    };
    let fallback_key = if is_first {
        "new_categories"
    } else {
        "categories"
    };
    let raw_categories = match obj.get(primary_key).or_else(|| obj.get(fallback_key)) {
        Some(serde_json::Value::Array(items)) => items.as_slice(),
        Some(_) => {
            return Err(BatchParseError::Schema(format!(
                "`{primary_key}` is not an array"
            )))
        }
        None if is_first => {
            return Err(BatchParseError::Schema(
                "missing `categories` array".to_string(),
            ))
        }
        None => &[],
    };

    let mut new_categories: Vec<ErrorCategory> = Vec::new();
    let mut new_names: BTreeSet<String> = BTreeSet::new();
    for (i, raw) in raw_categories.iter().enumerate() {
        let context = format!("category {}", i + 1);
        let cat_obj = raw
            .as_object()
            .ok_or_else(|| BatchParseError::Schema(format!("{context}: not an object")))?;
        for field in CATEGORY_FIELDS {
            required_str(cat_obj, field, &context)?;
        }
        let category = ErrorCategory {
            name: required_str(cat_obj, "category_name", &context)?,
            summary: required_str(cat_obj, "summary", &context)?,
            description: required_str(cat_obj, "description", &context)?,
            example: required_str(cat_obj, "example", &context)?,
            error_type: required_str(cat_obj, "error_type", &context)?,
            why_leads_to_wrong_answer: required_str(
                cat_obj,
                "why_leads_to_wrong_answer",
                &context,
            )?,
            assignments: Vec::new(),
        };
        let normalized = normalize_name(&category.name);
        // A "new" category that collides with an existing or already-declared
        // name is dropped as a definition; assignments to it resolve to the
        // first definition.
        if existing_names.contains(&normalized) || !new_names.insert(normalized) {
            continue;
        }
        new_categories.push(category);
    }

    let raw_assignments = match obj.get("failure_assignments") {
        Some(serde_json::Value::Array(items)) => items,
        Some(_) => {
            return Err(BatchParseError::Schema(
                "`failure_assignments` is not an array".to_string(),
            ))
        }
        None => {
            return Err(BatchParseError::Schema(
                "missing `failure_assignments` array".to_string(),
            ))
        }
    };

    let mut assignments: Vec<ParsedAssignment> = Vec::new();
    let mut seen_ordinals: BTreeSet<usize> = BTreeSet::new();
    for (i, raw) in raw_assignments.iter().enumerate() {
        let context = format!("assignment {}", i + 1);
        let a_obj = raw
            .as_object()
            .ok_or_else(|| BatchParseError::Schema(format!("{context}: not an object")))?;
        let ordinal = a_obj
            .get("failure_id")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                BatchParseError::Schema(format!("{context}: missing integer `failure_id`"))
            })? as usize;
        if !expected_ordinals.contains(&ordinal) {
            return Err(BatchParseError::Schema(format!(
                "{context}: failure_id {ordinal} is outside this batch"
            )));
        }
        if !seen_ordinals.insert(ordinal) {
            return Err(BatchParseError::DuplicateAssignment { ordinal });
        }
        let category_name = required_str(a_obj, "category_name", &context)?;
        let normalized = normalize_name(&category_name);
        if !existing_names.contains(&normalized) && !new_names.contains(&normalized) {
            return Err(BatchParseError::UnknownCategory {
                name: category_name,
            });
        }
        let details_obj = a_obj.get("trace_details").and_then(|v| v.as_object());
        let (location, details) = match details_obj {
            Some(d) => (
                optional_str(d, "trace_specific_location"),
                optional_str(d, "trace_specific_details"),
            ),
            None => (String::new(), String::new()),
        };
        assignments.push(ParsedAssignment {
            failure_ordinal: ordinal,
            problem_idx: a_obj.get("problem_idx").and_then(|v| v.as_u64()),
            run_id: a_obj.get("run_id").and_then(|v| v.as_u64()),
            category_name,
            location,
            details,
        });
    }

    if let Some(&missing) = expected_ordinals.difference(&seen_ordinals).next() {
        return Err(BatchParseError::MissingAssignment { ordinal: missing });
    }

    assignments.sort_by_key(|a| a.failure_ordinal);
    Ok(BatchResult {
        new_categories,
        assignments,
        is_first_batch: is_first,
    })
}

fn feedback_prompt(prompt: &str, error: &BatchParseError) -> String {
    format!(
        "{prompt}\n\n## Previous Attempt Error\n\nYour previous response was invalid: {error}\n\nReturn a corrected JSON object that follows the required format exactly."
    )
}

/// Categorize `traces` into `taxonomy`, batch by batch, mutating it in
/// place. When the taxonomy is empty the first batch uses the first-batch
/// prompt; every other batch carries the accumulated categories.
#[allow(clippy::too_many_arguments)]
pub(crate) fn extend_taxonomy(
    taxonomy: &mut Taxonomy,
    traces: &[FailedTrace],
    dataset: &Dataset,
    config: &RunConfig,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    templates: &TemplateSet,
    phase: Phase,
) -> Result<(), TaxonomyError> {
    for (batch_index, batch) in traces.chunks(config.batch_size).enumerate() {
        let is_first = taxonomy.categories.is_empty();
        let prompt = if is_first {
            render_first_batch_prompt(batch, dataset, &config.domain_description, templates)?
        } else {
            render_subsequent_batch_prompt(
                batch,
                dataset,
                taxonomy,
                &config.domain_description,
                templates,
            )?
        };
        let expected_ordinals: BTreeSet<usize> = (1..=batch.len()).collect();
        let existing_names: BTreeSet<String> = taxonomy
            .categories
            .iter()
            .map(|c| normalize_name(&c.name))
            .collect();

        let mut last_error: Option<BatchParseError> = None;
        let mut applied = false;
        for attempt in 0..=MAX_FORMAT_RETRIES {
            let user_message = match &last_error {
                None => prompt.clone(),
                Some(error) => feedback_prompt(&prompt, error),
            };
            let request = optimizer.request(
                OPTIMIZER_SYSTEM_PROMPT,
                user_message,
                ResponseFormat::JsonObject,
            );
            let response = complete(&request, &optimizer.backend, ledger, Role::Optimizer, phase)?;
            match parse_batch_response(
                &response.content,
                &expected_ordinals,
                &existing_names,
                is_first,
            ) {
                Ok(result) => {
                    apply_batch(taxonomy, batch, result);
                    applied = true;
                    break;
                }
                Err(error) => {
                    last_error = Some(error);
                    if attempt == MAX_FORMAT_RETRIES {
                        return Err(TaxonomyError::Build {
                            batch_index,
                            attempts: attempt + 1,
                            last_error: last_error.unwrap().to_string(),
                        });
                    }
                }
            }
        }
        debug_assert!(applied);
    }
    Ok(())
}

fn apply_batch(taxonomy: &mut Taxonomy, batch: &[FailedTrace], result: BatchResult) {
    for category in result.new_categories {
        if taxonomy.find_by_name(&category.name).is_none() {
            taxonomy.categories.push(category);
        }
    }
    for assignment in result.assignments {
        // Ordinals were validated against 1..=batch.len().
        let trace = &batch[assignment.failure_ordinal - 1];
        let category = taxonomy
            .find_by_name_mut(&assignment.category_name)
            .expect("assignment names were resolved during parsing");
        category.assignments.push(FailureAssignment {
            problem_id: trace.problem_id.clone(),
            run_id: trace.run_id,
            location: assignment.location,
            details: assignment.details,
        });
    }
}

/// Step 2: build the error taxonomy for a failure log.
///
/// Traces are processed in log order in batches of `config.batch_size`; a
/// successful build issues exactly `ceil(|F| / B)` optimizer calls plus any
/// format retries.
pub fn build_taxonomy(
    log: &FailureLog,
    dataset: &Dataset,
    config: &RunConfig,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    templates: &TemplateSet,
) -> Result<Taxonomy, TaxonomyError> {
    if log.is_empty() {
        return Err(TaxonomyError::EmptyLog);
    }
    let mut taxonomy = Taxonomy {
        source_log_fingerprint: log.fingerprint(),
        categories: Vec::new(),
    };
    extend_taxonomy(
        &mut taxonomy,
        &log.traces,
        dataset,
        config,
        optimizer,
        ledger,
        templates,
        Phase::Taxonomy,
    )?;
    Ok(taxonomy)
}
