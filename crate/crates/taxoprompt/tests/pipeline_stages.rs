//! Integration tests for the stage commands that the acceptance suite does
//! not already pin down: the error-reduction command end to end, and
//! staleness of the optimized-prompt artifact.

use std::path::Path;

use taxoprompt::artifacts::filenames;
use taxoprompt::collection::ExecutionOptions;
use taxoprompt::datasets::{fixtures, write_dataset};
use taxoprompt::gateway::{Endpoint, ScriptStep};
use taxoprompt::model::{DatasetRole, GuidanceStyle, Phase, Role, RunConfig};
use taxoprompt::pipeline::{Ablation, Pipeline, PipelineError, PromptKind};
use taxoprompt::templates::TemplateSet;
use taxoprompt::PipelineConfig;

const BASE_PROMPT: &str = "Please think step by step and then solve the task.";
const CAT_A: &str = "Carried Subtraction Error";
const CAT_B: &str = "Unit Conversion Slip";
const CAT_C: &str = "Rushed Final Step";

fn category_json(name: &str) -> serde_json::Value {
    serde_json::json!({
        "category_name": name,
        "summary": format!("{name} summary."),
        "description": format!("{name} description text."),
        "example": format!("{name} example text."),
        "error_type": "Calculation Error",
        "why_leads_to_wrong_answer": format!("{name} produces a wrong total."),
    })
}

fn batch_json(key: &str, categories: &[&str], assignments: &[(usize, &str)]) -> String {
    serde_json::json!({
        key: categories.iter().map(|n| category_json(n)).collect::<Vec<_>>(),
        "failure_assignments": assignments
            .iter()
            .map(|(o, n)| serde_json::json!({"failure_id": o, "category_name": n}))
            .collect::<Vec<_>>(),
    })
    .to_string()
}

fn guidance_json(names: &[&str]) -> String {
    serde_json::json!({
        "guidance_items": names
            .iter()
            .map(|n| serde_json::json!({"category_name": n, "guidance_text": format!("Avoid {n}.")}))
            .collect::<Vec<_>>(),
        "preamble": "Apply the following checks.",
    })
    .to_string()
}

/// Scripts for the standard all-wrong fixture run: K=2, B=3, G=2; categories
/// A (fc 6), B (fc 4), C (fc 2).
fn taxonomy_steps() -> Vec<ScriptStep> {
    vec![
        ScriptStep::new(
            batch_json(
                "categories",
                &[CAT_A, CAT_B],
                &[(1, CAT_A), (2, CAT_A), (3, CAT_B)],
            ),
            1,
            1,
        ),
        ScriptStep::new(
            batch_json(
                "new_categories",
                &[CAT_C],
                &[(1, CAT_B), (2, CAT_C), (3, CAT_A)],
            ),
            1,
            1,
        ),
        ScriptStep::new(
            batch_json("new_categories", &[], &[(1, CAT_A), (2, CAT_B), (3, CAT_A)]),
            1,
            1,
        ),
        ScriptStep::new(
            batch_json("new_categories", &[], &[(1, CAT_A), (2, CAT_C), (3, CAT_B)]),
            1,
            1,
        ),
    ]
}

fn make_pipeline(
    dir: &Path,
    backbone_steps: Vec<ScriptStep>,
    optimizer_steps: Vec<ScriptStep>,
) -> Pipeline {
    let dataset = fixtures::arithmetic(DatasetRole::Validation);
    let validation_path = dir.join("validation.jsonl");
    if !validation_path.exists() {
        write_dataset(&dataset, &validation_path).unwrap();
    }
    let config = PipelineConfig {
        run: RunConfig {
            k_collection_runs: 2,
            batch_size: 3,
            max_categories: 2,
            guidance_style: GuidanceStyle::Detailed,
            min_problem_count: 2,
            domain_description: "arithmetic word problems".to_string(),
            seed: 0,
        },
        base_prompt: BASE_PROMPT.to_string(),
        validation_path,
        test_path: None,
        out_dir: dir.join("out"),
        execution: ExecutionOptions {
            max_parallel: 1,
            max_error_fraction: 0.2,
        },
        backbone: Endpoint::mock(backbone_steps),
        optimizer: Endpoint::mock(optimizer_steps),
        judge: None,
    };
    Pipeline::new(config, TemplateSet::embedded())
}

#[test]
fn error_reduction_command_end_to_end() {
    let dir = tempfile::tempdir().unwrap();

    // Optimize: 12 wrong attempts, 4 taxonomy batches, 1 guidance call.
    let collect_steps: Vec<ScriptStep> = (0..12)
        .map(|_| ScriptStep::new("Oops.\nFinal Answer: 0", 10, 5))
        .collect();
    let mut optimizer_steps = taxonomy_steps();
    optimizer_steps.push(ScriptStep::new(guidance_json(&[CAT_A, CAT_B]), 1, 1));
    let pipeline = make_pipeline(dir.path(), collect_steps, optimizer_steps);
    pipeline.cmd_optimize(Ablation::None).unwrap();
    let optimization_total = pipeline.ledger.optimization_total();

    // Error reduction: the after-run fails on p1r1, p1r2, p2r1 only; those
    // three traces go to A, B, and a new category.
    let gold = ["72", "28", "210", "72", "16", "196"];
    let mut after_steps = vec![
        ScriptStep::new("Hmm.\nFinal Answer: 0", 10, 5),
        ScriptStep::new("Hmm.\nFinal Answer: 0", 10, 5),
        ScriptStep::new("Hmm.\nFinal Answer: 0", 10, 5),
    ];
    after_steps.push(ScriptStep::new(format!("Final Answer: {}", gold[1]), 10, 5));
    for g in &gold[2..] {
        after_steps.push(ScriptStep::new(format!("Final Answer: {g}"), 10, 5));
        after_steps.push(ScriptStep::new(format!("Final Answer: {g}"), 10, 5));
    }
    assert_eq!(after_steps.len(), 12);
    let categorize_after = ScriptStep::new(
        batch_json(
            "new_categories",
            &["Novel Pattern"],
            &[(1, CAT_A), (2, CAT_B), (3, "Novel Pattern")],
        ),
        7,
        3,
    );
    let pipeline = make_pipeline(dir.path(), after_steps, vec![categorize_after]);
    let report = pipeline.cmd_error_reduction(3).unwrap();

    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].name, CAT_A);
    assert_eq!(
        (report.rows[0].before_count, report.rows[0].after_count),
        (6, 1)
    );
    assert_eq!(
        (report.rows[1].before_count, report.rows[1].after_count),
        (4, 1)
    );
    assert_eq!(
        (report.rows[2].before_count, report.rows[2].after_count),
        (2, 0)
    );
    assert_eq!(report.new_categories.len(), 1);
    assert_eq!(report.new_categories[0].after_count, 1);
    assert_eq!(report.after_total, 3);
    assert!(dir
        .path()
        .join("out")
        .join(filenames::ERROR_REDUCTION)
        .exists());
    assert!(dir
        .path()
        .join("out")
        .join(filenames::FAILURE_LOG_AFTER)
        .exists());

    // Analysis tokens are all evaluation-phase: collection/taxonomy/guidance
    // totals are untouched relative to the optimize run.
    assert_eq!(pipeline.ledger.phase_total(Phase::Collection), 0);
    assert_eq!(pipeline.ledger.phase_total(Phase::Taxonomy), 0);
    assert_eq!(pipeline.ledger.optimization_total(), 0);
    assert_eq!(pipeline.ledger.phase_total(Phase::Evaluation), 12 * 15 + 10);
    assert_eq!(pipeline.ledger.count(Role::Backbone, Phase::Evaluation), 12);
    assert_eq!(pipeline.ledger.count(Role::Optimizer, Phase::Evaluation), 1);
    // The optimize-phase budget came from the first pipeline only.
    assert!(optimization_total > 0);
}

#[test]
fn eval_rejects_prompt_artifact_from_another_base() {
    let dir = tempfile::tempdir().unwrap();
    let collect_steps: Vec<ScriptStep> = (0..12)
        .map(|_| ScriptStep::new("Oops.\nFinal Answer: 0", 10, 5))
        .collect();
    let mut optimizer_steps = taxonomy_steps();
    optimizer_steps.push(ScriptStep::new(guidance_json(&[CAT_A, CAT_B]), 1, 1));
    let pipeline = make_pipeline(dir.path(), collect_steps, optimizer_steps);
    pipeline.cmd_optimize(Ablation::None).unwrap();

    // Same artifacts, different configured base prompt.
    let mut stale = make_pipeline(
        dir.path(),
        vec![ScriptStep::new("x", 1, 1)],
        vec![ScriptStep::new("x", 1, 1)],
    );
    stale.config.base_prompt = "A different base prompt.".to_string();
    let err = stale
        .cmd_eval(PromptKind::Optimized, DatasetRole::Validation, 1)
        .unwrap_err();
    assert!(matches!(err, PipelineError::StaleArtifact { .. }));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn guide_rejects_selection_from_another_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let collect_steps: Vec<ScriptStep> = (0..12)
        .map(|_| ScriptStep::new("Oops.\nFinal Answer: 0", 10, 5))
        .collect();
    let mut optimizer_steps = taxonomy_steps();
    optimizer_steps.push(ScriptStep::new(guidance_json(&[CAT_A, CAT_B]), 1, 1));
    let pipeline = make_pipeline(dir.path(), collect_steps, optimizer_steps);
    pipeline.cmd_optimize(Ablation::None).unwrap();

    // Corrupt the chain: rewrite selection.json with a bogus fingerprint.
    let selection_path = dir.path().join("out").join(filenames::SELECTION);
    let text = std::fs::read_to_string(&selection_path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["source_taxonomy_fingerprint"] = serde_json::json!("0000");
    std::fs::write(&selection_path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let retry = make_pipeline(
        dir.path(),
        vec![ScriptStep::new("x", 1, 1)],
        vec![ScriptStep::new("x", 1, 1)],
    );
    let err = retry.cmd_guide(Ablation::None).unwrap_err();
    match err {
        PipelineError::StaleArtifact {
            artifact, upstream, ..
        } => {
            assert!(artifact.ends_with(filenames::SELECTION));
            assert!(upstream.ends_with(filenames::TAXONOMY));
        }
        other => panic!("unexpected error: {other}"),
    }
}
