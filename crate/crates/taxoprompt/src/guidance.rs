//! Guidance generation and prompt assembly.
//!
//! One optimizer call produces a preamble plus one guidance text per
//! selected category; assembly of the optimized prompt is done locally and
//! deterministically. The response's `full_prompt` field is stored for
//! reference but never used — trusting the LLM's own concatenation could
//! mutate the base prompt.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{complete, Endpoint, GatewayError, ResponseFormat};
use crate::jsonx::extract_json_object;
use crate::model::{
    normalize_name, Dataset, ErrorCategory, FailedTrace, FailureLog, GuidanceItem, GuidanceStyle,
    Phase, PromptArtifact, Role, RunConfig, TokenLedger,
};
use crate::templates::{TemplateError, TemplateSet};

/// Format-error retries for the guidance call, matching the taxonomy stage.
pub const MAX_FORMAT_RETRIES: usize = 2;

const GUIDANCE_SYSTEM_PROMPT: &str =
    "You are an expert prompt engineer. Follow the instructions and return a single JSON object.";

/// Preamble used when category descriptions are inserted directly instead of
/// generated guidance.
pub const DIRECT_CATEGORIES_PREAMBLE: &str =
    "Watch out for the following common error patterns that have caused mistakes on this task, and actively avoid them.";

/// Cap on sampled traces when guidance is generated from raw failures.
pub const RAW_SAMPLING_MAX_TRACES: usize = 10;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid JSON: {0}")]
    JsonSyntax(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("guidance items do not match the selected categories (missing: {missing:?}, extra: {extra:?})")]
    NameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("failure log references problem `{0}` not present in the dataset")]
    UnknownProblem(String),
    #[error("guidance generation failed after {attempts} attempts: {last_error}")]
    Build { attempts: usize, last_error: String },
}

/// The parsed guidance response: preamble plus per-category texts in
/// selection order. `raw_full_prompt_field` is advisory only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBundle {
    pub preamble: String,
    pub items: Vec<GuidanceItem>,
    pub style: GuidanceStyle,
    #[serde(default)]
    pub raw_full_prompt_field: String,
}

fn style_section(style: GuidanceStyle, templates: &TemplateSet) -> Result<String, TemplateError> {
    let name = match style {
        GuidanceStyle::Detailed => "guidance_style_detailed",
        GuidanceStyle::Short => "guidance_style_short",
    };
    templates.render(name, &[])
}

/// Coverage of one category among all categorized traces, in percent,
/// rendered to one decimal.
pub fn coverage_pct(failure_count: usize, total_categorized: usize) -> String {
    if total_categorized == 0 {
        return "0.0".to_string();
    }
    format!(
        "{:.1}",
        failure_count as f64 * 100.0 / total_categorized as f64
    )
}

/// Guidance-generation prompt over the selected categories.
///
/// `total_categorized` is the number of traces the source taxonomy
/// categorized; it is the denominator for each category's coverage line.
pub fn render_guidance_prompt(
    selected: &[ErrorCategory],
    total_categorized: usize,
    style: GuidanceStyle,
    domain_description: &str,
    base_prompt: &str,
    templates: &TemplateSet,
) -> Result<String, GuidanceError> {
    if selected.is_empty() {
        return Err(TemplateError::EmptySelection.into());
    }
    let mut blocks = Vec::with_capacity(selected.len());
    for (i, category) in selected.iter().enumerate() {
        let block = templates.render(
            "guidance_category_block",
            &[
                ("category_idx", &(i + 1).to_string()),
                ("category_name", &category.name),
                ("failure_count", &category.failure_count().to_string()),
                (
                    "coverage_pct",
                    &coverage_pct(category.failure_count(), total_categorized),
                ),
                ("summary", &category.summary),
                ("description", &category.description),
                ("example", &category.example),
                ("error_type", &category.error_type),
                (
                    "why_leads_to_wrong_answer",
                    &category.why_leads_to_wrong_answer,
                ),
            ],
        )?;
        blocks.push(block);
    }
    Ok(templates.render(
        "guidance",
        &[
            ("domain_description", domain_description),
            ("category_blocks", &blocks.join("\n\n")),
            ("style_section", &style_section(style, templates)?),
            ("base_prompt", base_prompt),
        ],
    )?)
}

fn parse_items(
    value: &serde_json::Value,
) -> Result<(Vec<GuidanceItem>, String, String), GuidanceError> {
    let obj = value
        .as_object()
        .ok_or_else(|| GuidanceError::Schema("top-level JSON is not an object".into()))?;
    let preamble = match obj.get("preamble") {
        Some(serde_json::Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(serde_json::Value::String(_)) => {
            return Err(GuidanceError::Schema("`preamble` is empty".into()))
        }
        _ => return Err(GuidanceError::Schema("missing string `preamble`".into())),
    };
    let raw_items = match obj.get("guidance_items") {
        Some(serde_json::Value::Array(items)) if !items.is_empty() => items,
        Some(serde_json::Value::Array(_)) => {
            return Err(GuidanceError::Schema("`guidance_items` is empty".into()))
        }
        _ => {
            return Err(GuidanceError::Schema(
                "missing `guidance_items` array".into(),
            ))
        }
    };
    let mut items = Vec::with_capacity(raw_items.len());
    for (i, raw) in raw_items.iter().enumerate() {
        let context = format!("guidance item {}", i + 1);
        let item_obj = raw
            .as_object()
            .ok_or_else(|| GuidanceError::Schema(format!("{context}: not an object")))?;
        let name = item_obj
            .get("category_name")
            .and_then(|v| v.as_str())
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| GuidanceError::Schema(format!("{context}: missing `category_name`")))?;
        let text = item_obj
            .get("guidance_text")
            .and_then(|v| v.as_str())
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| GuidanceError::Schema(format!("{context}: missing `guidance_text`")))?;
        items.push(GuidanceItem {
            category_name: name.to_string(),
            guidance_text: text.to_string(),
        });
    }
    let full_prompt = obj
        .get("full_prompt")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    Ok((items, preamble, full_prompt))
}

/// Validate a guidance response against the selected categories: exactly one
/// item per expected name (normalized match), reordered to selection order.
pub fn parse_guidance_response(
    content: &str,
    expected: &[ErrorCategory],
    style: GuidanceStyle,
) -> Result<GuidanceBundle, GuidanceError> {
    let value = extract_json_object(content).map_err(GuidanceError::JsonSyntax)?;
    let (items, preamble, full_prompt) = parse_items(&value)?;

    let mut by_name: BTreeMap<String, GuidanceItem> = BTreeMap::new();
    for item in items {
        let key = normalize_name(&item.category_name);
        if by_name.insert(key, item).is_some() {
            return Err(GuidanceError::Schema(
                "duplicate guidance item for one category".into(),
            ));
        }
    }

    let mut ordered = Vec::with_capacity(expected.len());
    let mut missing = Vec::new();
    for category in expected {
        match by_name.remove(&normalize_name(&category.name)) {
            Some(item) => ordered.push(GuidanceItem {
                // Canonical selection-time name, not the LLM's echo.
                category_name: category.name.clone(),
                guidance_text: item.guidance_text,
            }),
            None => missing.push(category.name.clone()),
        }
    }
    let extra: Vec<String> = by_name.into_values().map(|i| i.category_name).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(GuidanceError::NameMismatch { missing, extra });
    }

    Ok(GuidanceBundle {
        preamble,
        items: ordered,
        style,
        raw_full_prompt_field: full_prompt,
    })
}

/// Parse a guidance response with no expected category list (raw-sampling
/// mode, where the optimizer names the patterns itself).
pub fn parse_free_guidance_response(
    content: &str,
    style: GuidanceStyle,
) -> Result<GuidanceBundle, GuidanceError> {
    let value = extract_json_object(content).map_err(GuidanceError::JsonSyntax)?;
    let (items, preamble, full_prompt) = parse_items(&value)?;
    Ok(GuidanceBundle {
        preamble,
        items,
        style,
        raw_full_prompt_field: full_prompt,
    })
}

/// Deterministically assemble the optimized prompt: base, blank line,
/// preamble, blank line, then numbered guidance blocks in order. With no
/// bundle (or no items) the assembled prompt is the base prompt, byte for
/// byte.
pub fn assemble_prompt(base: &str, bundle: Option<&GuidanceBundle>) -> PromptArtifact {
    let bundle = match bundle {
        Some(b) if !b.items.is_empty() => b,
        _ => {
            return PromptArtifact {
                base_prompt: base.to_string(),
                preamble: None,
                guidance_items: Vec::new(),
                assembled_prompt: base.to_string(),
            }
        }
    };
    let blocks: Vec<String> = bundle
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| format!("{}. {}\n{}", i + 1, item.category_name, item.guidance_text))
        .collect();
    let assembled = format!("{base}\n\n{}\n\n{}", bundle.preamble, blocks.join("\n\n"));
    PromptArtifact {
        base_prompt: base.to_string(),
        preamble: Some(bundle.preamble.clone()),
        guidance_items: bundle.items.clone(),
        assembled_prompt: assembled,
    }
}

fn feedback_prompt(prompt: &str, error: &GuidanceError) -> String {
    format!(
        "{prompt}\n\n## Previous Attempt Error\n\nYour previous response was invalid: {error}\n\nReturn a corrected JSON object that follows the required format exactly."
    )
}

fn run_with_retries<P>(
    prompt: &str,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    mut parse: P,
) -> Result<GuidanceBundle, GuidanceError>
where
    P: FnMut(&str) -> Result<GuidanceBundle, GuidanceError>,
{
    let mut last_error: Option<GuidanceError> = None;
    for attempt in 0..=MAX_FORMAT_RETRIES {
        let user_message = match &last_error {
            None => prompt.to_string(),
            Some(error) => feedback_prompt(prompt, error),
        };
        let request = optimizer.request(
            GUIDANCE_SYSTEM_PROMPT,
            user_message,
            ResponseFormat::JsonObject,
        );
        let response = complete(
            &request,
            &optimizer.backend,
            ledger,
            Role::Optimizer,
            Phase::Guidance,
        )?;
        match parse(&response.content) {
            Ok(bundle) => return Ok(bundle),
            Err(error) => {
                if attempt == MAX_FORMAT_RETRIES {
                    return Err(GuidanceError::Build {
                        attempts: attempt + 1,
                        last_error: error.to_string(),
                    });
                }
                last_error = Some(error);
            }
        }
    }
    unreachable!("loop either returns a bundle or a build error")
}

/// Step 4: generate the preamble and all per-category guidance texts in a
/// single optimizer call (plus format retries).
pub fn run_guidance(
    selected: &[ErrorCategory],
    total_categorized: usize,
    config: &RunConfig,
    base_prompt: &str,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    templates: &TemplateSet,
) -> Result<GuidanceBundle, GuidanceError> {
    let prompt = render_guidance_prompt(
        selected,
        total_categorized,
        config.guidance_style,
        &config.domain_description,
        base_prompt,
        templates,
    )?;
    run_with_retries(&prompt, optimizer, ledger, |content| {
        parse_guidance_response(content, selected, config.guidance_style)
    })
}

/// Synthesize a bundle from the category descriptions themselves, with no
/// LLM call: each item is the description as a bullet point under a fixed
/// generic preamble.
pub fn direct_categories_bundle(
    selected: &[ErrorCategory],
    style: GuidanceStyle,
) -> GuidanceBundle {
    GuidanceBundle {
        preamble: DIRECT_CATEGORIES_PREAMBLE.to_string(),
        items: selected
            .iter()
            .map(|c| GuidanceItem {
                category_name: c.name.clone(),
                guidance_text: format!("- {}", c.description),
            })
            .collect(),
        style,
        raw_full_prompt_field: String::new(),
    }
}

/// Pick the traces fed to raw-sampling guidance: one uniformly sampled trace
/// per problem, over at most [`RAW_SAMPLING_MAX_TRACES`] problems, keeping
/// log order. Deterministic under `seed`.
pub fn sample_traces_per_problem(log: &FailureLog, seed: u64) -> Vec<FailedTrace> {
    let mut problems: Vec<&str> = Vec::new();
    for trace in &log.traces {
        if !problems.contains(&trace.problem_id.as_str()) {
            problems.push(&trace.problem_id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen_problems: Vec<&str> = if problems.len() > RAW_SAMPLING_MAX_TRACES {
        let mut indices: Vec<usize> =
            index_sample(&mut rng, problems.len(), RAW_SAMPLING_MAX_TRACES).into_vec();
        indices.sort_unstable();
        indices.into_iter().map(|i| problems[i]).collect()
    } else {
        problems
    };
    chosen_problems
        .into_iter()
        .map(|problem_id| {
            let candidates: Vec<&FailedTrace> = log
                .traces
                .iter()
                .filter(|t| t.problem_id == problem_id)
                .collect();
            candidates[rng.random_range(0..candidates.len())].clone()
        })
        .collect()
}

/// Raw-sampling mode: skip taxonomy and selection entirely and generate
/// guidance straight from a sample of failed traces.
pub fn run_raw_sampling_guidance(
    log: &FailureLog,
    dataset: &Dataset,
    config: &RunConfig,
    base_prompt: &str,
    optimizer: &Endpoint,
    ledger: &TokenLedger,
    templates: &TemplateSet,
) -> Result<GuidanceBundle, GuidanceError> {
    let traces = sample_traces_per_problem(log, config.seed);
    if traces.is_empty() {
        return Err(TemplateError::EmptyBatch.into());
    }
    let mut blocks = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        let position = dataset
            .position_of(&trace.problem_id)
            .ok_or_else(|| GuidanceError::UnknownProblem(trace.problem_id.clone()))?;
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
    let prompt = templates.render(
        "guidance_raw_sampling",
        &[
            ("domain_description", &config.domain_description),
            ("failure_blocks", &blocks.join("\n\n")),
            (
                "style_section",
                &style_section(config.guidance_style, templates)?,
            ),
            ("base_prompt", base_prompt),
        ],
    )?;
    run_with_retries(&prompt, optimizer, ledger, |content| {
        parse_free_guidance_response(content, config.guidance_style)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptStep;
    use crate::model::FailureAssignment;

    fn category(name: &str, failure_count: usize) -> ErrorCategory {
        ErrorCategory {
            name: name.to_string(),
            summary: format!("{name} summary"),
            description: format!("{name} description"),
            example: format!("{name} example"),
            error_type: "Calculation Error".to_string(),
            why_leads_to_wrong_answer: format!("{name} because"),
            assignments: (0..failure_count)
                .map(|i| FailureAssignment {
                    problem_id: format!("p{i}"),
                    run_id: 1,
                    location: String::new(),
                    details: String::new(),
                })
                .collect(),
        }
    }

    fn guidance_json(names: &[&str]) -> String {
        serde_json::json!({
            "guidance_items": names
                .iter()
                .map(|n| serde_json::json!({
                    "category_name": n,
                    "guidance_text": format!("avoid {n}")
                }))
                .collect::<Vec<_>>(),
            "preamble": "Follow these instructions.",
            "full_prompt": "ignored"
        })
        .to_string()
    }

    #[test]
    fn prompt_contains_stats_line_with_coverage() {
        let templates = TemplateSet::embedded();
        // 7 failures of 20 categorized traces -> 35.0%.
        let prompt = render_guidance_prompt(
            &[category("Sign Slip", 7)],
            20,
            GuidanceStyle::Detailed,
            "math",
            "Base prompt.",
            &templates,
        )
        .unwrap();
        assert!(prompt.contains("7 failures"));
        assert!(prompt.contains("35.0%"));
        assert!(prompt.contains("## Category 1: Sign Slip"));
        assert!(prompt.contains("The goal is ACCURACY, not caution."));
        assert!(prompt.contains("\"Base prompt.\""));
    }

    #[test]
    fn detailed_style_has_wrong_correct_lines_and_short_does_not() {
        let templates = TemplateSet::embedded();
        let detailed = render_guidance_prompt(
            &[category("A", 2)],
            4,
            GuidanceStyle::Detailed,
            "math",
            "Base.",
            &templates,
        )
        .unwrap();
        assert!(detailed.contains("WRONG example showing the error"));
        assert!(detailed.contains("CORRECT example showing proper approach"));

        let short = render_guidance_prompt(
            &[category("A", 2)],
            4,
            GuidanceStyle::Short,
            "math",
            "Base.",
            &templates,
        )
        .unwrap();
        assert!(!short.contains("WRONG example showing the error"));
        assert!(!short.contains("CORRECT example showing proper approach"));
        assert!(short.contains("one to two sentences"));
    }

    #[test]
    fn empty_selection_is_rejected() {
        let templates = TemplateSet::embedded();
        let err =
            render_guidance_prompt(&[], 0, GuidanceStyle::Detailed, "math", "Base.", &templates)
                .unwrap_err();
        assert!(matches!(
            err,
            GuidanceError::Template(TemplateError::EmptySelection)
        ));
    }

    #[test]
    fn shuffled_items_are_reordered_to_selection_order() {
        let selected = vec![category("First", 3), category("Second", 2)];
        let content = guidance_json(&["second", "FIRST"]);
        let bundle = parse_guidance_response(&content, &selected, GuidanceStyle::Detailed).unwrap();
        assert_eq!(bundle.items[0].category_name, "First");
        assert_eq!(bundle.items[0].guidance_text, "avoid FIRST");
        assert_eq!(bundle.items[1].category_name, "Second");
    }

    #[test]
    fn missing_item_is_name_mismatch() {
        let selected = vec![category("A", 3), category("B", 2)];
        let err = parse_guidance_response(&guidance_json(&["A"]), &selected, GuidanceStyle::Short)
            .unwrap_err();
        match err {
            GuidanceError::NameMismatch { missing, extra } => {
                assert_eq!(missing, vec!["B".to_string()]);
                assert!(extra.is_empty());
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn extra_item_is_name_mismatch() {
        let selected = vec![category("A", 3)];
        let err = parse_guidance_response(
            &guidance_json(&["A", "Ghost"]),
            &selected,
            GuidanceStyle::Short,
        )
        .unwrap_err();
        assert!(
            matches!(err, GuidanceError::NameMismatch { extra, .. } if extra == vec!["Ghost".to_string()])
        );
    }

    #[test]
    fn valid_two_item_response_parses() {
        let selected = vec![category("A", 3), category("B", 2)];
        let bundle = parse_guidance_response(
            &guidance_json(&["A", "B"]),
            &selected,
            GuidanceStyle::Detailed,
        )
        .unwrap();
        assert_eq!(bundle.items.len(), 2);
        assert_eq!(bundle.preamble, "Follow these instructions.");
        assert_eq!(bundle.raw_full_prompt_field, "ignored");
    }

    #[test]
    fn assemble_without_bundle_is_identity() {
        let artifact = assemble_prompt("Base prompt.", None);
        assert_eq!(artifact.assembled_prompt, "Base prompt.");
        assert!(artifact.guidance_items.is_empty());
    }

    #[test]
    fn assemble_orders_numbered_blocks() {
        let bundle = GuidanceBundle {
            preamble: "Intro.".to_string(),
            items: vec![
                GuidanceItem {
                    category_name: "One".to_string(),
                    guidance_text: "first text".to_string(),
                },
                GuidanceItem {
                    category_name: "Two".to_string(),
                    guidance_text: "second text".to_string(),
                },
            ],
            style: GuidanceStyle::Detailed,
            raw_full_prompt_field: String::new(),
        };
        let base = "Please think step by step and then solve the task.";
        let artifact = assemble_prompt(base, Some(&bundle));
        assert!(artifact.assembled_prompt.starts_with(base));
        let one = artifact
            .assembled_prompt
            .find("1. One\nfirst text")
            .unwrap();
        let two = artifact
            .assembled_prompt
            .find("2. Two\nsecond text")
            .unwrap();
        assert!(one < two);
        assert!(artifact.assembled_prompt.contains("\n\nIntro.\n\n"));
    }

    #[test]
    fn assembly_ignores_full_prompt_field() {
        let mut bundle = GuidanceBundle {
            preamble: "P.".to_string(),
            items: vec![GuidanceItem {
                category_name: "A".to_string(),
                guidance_text: "t".to_string(),
            }],
            style: GuidanceStyle::Short,
            raw_full_prompt_field: "one thing".to_string(),
        };
        let first = assemble_prompt("Base.", Some(&bundle));
        bundle.raw_full_prompt_field = "something completely different".to_string();
        let second = assemble_prompt("Base.", Some(&bundle));
        assert_eq!(first.assembled_prompt, second.assembled_prompt);
    }

    #[test]
    fn assembly_is_idempotent() {
        let bundle = GuidanceBundle {
            preamble: "P.".to_string(),
            items: vec![GuidanceItem {
                category_name: "A".to_string(),
                guidance_text: "t".to_string(),
            }],
            style: GuidanceStyle::Short,
            raw_full_prompt_field: String::new(),
        };
        let a = assemble_prompt("Base.", Some(&bundle));
        let b = assemble_prompt("Base.", Some(&bundle));
        assert_eq!(a.assembled_prompt.as_bytes(), b.assembled_prompt.as_bytes());
    }

    #[test]
    fn run_guidance_single_call_happy_path() {
        let selected = vec![category("A", 2)];
        let optimizer = Endpoint::mock(vec![ScriptStep::new(guidance_json(&["A"]), 50, 30)]);
        let ledger = TokenLedger::new();
        let bundle = run_guidance(
            &selected,
            4,
            &RunConfig::default(),
            "Base.",
            &optimizer,
            &ledger,
            &TemplateSet::embedded(),
        )
        .unwrap();
        assert_eq!(bundle.items.len(), 1);
        assert_eq!(ledger.count(Role::Optimizer, Phase::Guidance), 1);
    }

    #[test]
    fn run_guidance_retries_then_succeeds() {
        let selected = vec![category("A", 2)];
        let optimizer = Endpoint::mock(vec![
            ScriptStep::new("not json", 5, 5),
            ScriptStep::matching("Previous Attempt Error", guidance_json(&["A"]), 5, 5),
        ]);
        let ledger = TokenLedger::new();
        let bundle = run_guidance(
            &selected,
            4,
            &RunConfig::default(),
            "Base.",
            &optimizer,
            &ledger,
            &TemplateSet::embedded(),
        )
        .unwrap();
        assert_eq!(bundle.items.len(), 1);
        assert_eq!(ledger.count(Role::Optimizer, Phase::Guidance), 2);
    }

    #[test]
    fn run_guidance_exhaustion_is_build_error() {
        let selected = vec![category("A", 2)];
        let optimizer = Endpoint::mock(vec![
            ScriptStep::new("junk", 1, 1),
            ScriptStep::new("junk", 1, 1),
            ScriptStep::new("junk", 1, 1),
        ]);
        let ledger = TokenLedger::new();
        let err = run_guidance(
            &selected,
            4,
            &RunConfig::default(),
            "Base.",
            &optimizer,
            &ledger,
            &TemplateSet::embedded(),
        )
        .unwrap_err();
        assert!(matches!(err, GuidanceError::Build { attempts: 3, .. }));
    }

    #[test]
    fn direct_categories_keep_descriptions_verbatim() {
        let selected = vec![category("A", 2), category("B", 1)];
        let bundle = direct_categories_bundle(&selected, GuidanceStyle::Detailed);
        assert_eq!(bundle.preamble, DIRECT_CATEGORIES_PREAMBLE);
        assert_eq!(bundle.items[0].guidance_text, "- A description");
        assert_eq!(bundle.items[1].guidance_text, "- B description");
    }

    #[test]
    fn raw_sampling_picks_one_trace_per_problem_deterministically() {
        let traces: Vec<FailedTrace> = (1..=12)
            .flat_map(|p| {
                (1..=2).map(move |r| FailedTrace {
                    problem_id: format!("p{p:02}"),
                    run_id: r,
                    reasoning: "r".to_string(),
                    predicted_answer: "a".to_string(),
                })
            })
            .collect();
        let log = FailureLog {
            prompt_fingerprint: "f".to_string(),
            total_attempts: 24,
            traces,
        };
        let sampled = sample_traces_per_problem(&log, 7);
        assert_eq!(sampled.len(), RAW_SAMPLING_MAX_TRACES);
        let mut ids: Vec<&str> = sampled.iter().map(|t| t.problem_id.as_str()).collect();
        let original = ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), RAW_SAMPLING_MAX_TRACES, "one trace per problem");
        assert_eq!(ids, original, "log order preserved");
        assert_eq!(sampled, sample_traces_per_problem(&log, 7));
    }
}
