//! Error collection: run the backbone over the validation set K times, check
//! each answer, and record the failed traces.
//!
//! The system prompt sent to the backbone is exactly the prompt under
//! optimization; the answer-format instruction lives in a fixed suffix on the
//! user message so optimization operates on the prompt alone.

use std::collections::VecDeque;
use std::sync::Mutex;

use thiserror::Error;

use crate::gateway::{complete, Endpoint, GatewayError, ResponseFormat};
use crate::model::{
    fingerprint, Dataset, DatasetRole, FailedTrace, FailureLog, Phase, Role, RunConfig, TokenLedger,
};

/// Appended to every user message so the final answer is machine-extractable.
pub const ANSWER_SUFFIX: &str =
    "End your response with a line of the form \"Final Answer: <answer>\".";

const ANSWER_MARKER: &[u8] = b"final answer:";

const JUDGE_SYSTEM_PROMPT: &str =
    "You are a strict grader. Decide whether a predicted answer is equivalent to the gold answer.";

pub const JUDGE_AFFIRMATIVE: &str = "EQUIVALENT";
pub const JUDGE_NEGATIVE: &str = "NOT_EQUIVALENT";

#[derive(Debug, Error)]
pub enum CollectionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("could not extract an answer for problem `{problem_id}` run {run_id}")]
    ExtractionFailed { problem_id: String, run_id: u32 },
    #[error(
        "judge verdict contains neither {JUDGE_AFFIRMATIVE} nor {JUDGE_NEGATIVE}: {verdict:?}"
    )]
    JudgeUnparseable { verdict: String },
    #[error("error collection requires a validation dataset, got {0:?}")]
    NotValidationSet(DatasetRole),
    #[error(
        "{errored} of {total} attempts failed ({first_error}); aborting instead of producing a partial log"
    )]
    TooManyAttemptErrors {
        errored: usize,
        total: usize,
        first_error: String,
    },
}

/// One backbone attempt at one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub problem_id: String,
    pub run_id: u32,
    pub reasoning: String,
    pub predicted_answer: String,
    /// Unset until the answer has been checked.
    pub correct: Option<bool>,
}

/// Execution knobs shared by collection and evaluation.
#[derive(Debug, Clone)]
pub struct ExecutionOptions {
    /// Maximum in-flight attempts. 1 means strictly sequential, which keeps
    /// matcher-free mock scripts deterministic.
    pub max_parallel: usize,
    /// Abort when more than this fraction of attempts raise transport or
    /// extraction errors.
    pub max_error_fraction: f64,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        Self {
            max_parallel: 1,
            max_error_fraction: 0.2,
        }
    }
}

/// Answer normalization for exact match: trim, strip one trailing period,
/// case-fold, collapse internal whitespace.
pub fn normalize_answer(text: &str) -> String {
    let trimmed = text.trim();
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    crate::model::normalize_name(trimmed)
}

/// Pull the final answer out of a reasoning trace: the text after the last
/// case-insensitive `Final Answer:` marker, falling back to the last
/// non-empty line.
pub fn extract_final_answer(reasoning: &str) -> Option<String> {
    let bytes = reasoning.as_bytes();
    if bytes.len() >= ANSWER_MARKER.len() {
        let last = bytes
            .windows(ANSWER_MARKER.len())
            .rposition(|window| window.eq_ignore_ascii_case(ANSWER_MARKER));
        if let Some(pos) = last {
            let after = reasoning[pos + ANSWER_MARKER.len()..].trim();
            if !after.is_empty() {
                return Some(after.to_string());
            }
        }
    }
    reasoning
        .lines()
        .rev()
        .map(str::trim)
        .find(|line| !line.is_empty())
        .map(str::to_string)
}

/// Query the backbone once with the given system prompt and problem. The
/// returned record has `correct` unset.
pub fn run_attempt(
    prompt: &str,
    problem: &crate::model::Problem,
    run_id: u32,
    backbone: &Endpoint,
    ledger: &TokenLedger,
    phase: Phase,
) -> Result<AttemptRecord, CollectionError> {
    let user_message = format!("{}\n\n{ANSWER_SUFFIX}", problem.statement);
    let request = backbone.request(prompt, user_message, ResponseFormat::FreeText);
    let response = complete(&request, &backbone.backend, ledger, Role::Backbone, phase)?;
    let predicted_answer = extract_final_answer(&response.content).ok_or_else(|| {
        CollectionError::ExtractionFailed {
            problem_id: problem.id.clone(),
            run_id,
        }
    })?;
    Ok(AttemptRecord {
        problem_id: problem.id.clone(),
        run_id,
        reasoning: response.content,
        predicted_answer,
        correct: None,
    })
}

/// Decide whether a prediction is correct: normalized exact match first, and
/// only when that fails (and a judge is configured) one judge call.
pub fn check_answer(
    predicted: &str,
    gold: &str,
    judge: Option<&Endpoint>,
    ledger: &TokenLedger,
    phase: Phase,
) -> Result<bool, CollectionError> {
    if normalize_answer(predicted) == normalize_answer(gold) {
        return Ok(true);
    }
    let Some(judge) = judge else {
        return Ok(false);
    };
    let user_message = format!(
        "Gold answer: {gold}\nPredicted answer: {predicted}\n\nAre these answers equivalent for grading purposes? Reply with exactly {JUDGE_AFFIRMATIVE} or {JUDGE_NEGATIVE}."
    );
    let request = judge.request(JUDGE_SYSTEM_PROMPT, user_message, ResponseFormat::FreeText);
    let response = complete(&request, &judge.backend, ledger, Role::Judge, phase)?;
    // NOT_EQUIVALENT contains EQUIVALENT, so the negative token is checked first.
    if response.content.contains(JUDGE_NEGATIVE) {
        Ok(false)
    } else if response.content.contains(JUDGE_AFFIRMATIVE) {
        Ok(true)
    } else {
        Err(CollectionError::JudgeUnparseable {
            verdict: response.content,
        })
    }
}

/// Run every (problem, run) attempt and check it, with bounded parallelism.
///
/// Attempts are enumerated problem-major — for each problem, runs 1..=K —
/// and the returned slots follow that order regardless of completion order.
/// A `None` slot is an attempt that raised a transport or extraction error;
/// those are tolerated up to `max_error_fraction` of the total.
#[allow(clippy::too_many_arguments)]
pub(crate) fn execute_attempts(
    dataset: &Dataset,
    prompt: &str,
    runs: u32,
    backbone: &Endpoint,
    judge: Option<&Endpoint>,
    ledger: &TokenLedger,
    phase: Phase,
    options: &ExecutionOptions,
) -> Result<Vec<Option<AttemptRecord>>, CollectionError> {
    let tasks: Vec<(usize, u32)> = (0..dataset.len())
        .flat_map(|p| (1..=runs).map(move |r| (p, r)))
        .collect();
    let total = tasks.len();

    let attempt = |problem_index: usize, run_id: u32| -> Result<AttemptRecord, CollectionError> {
        let problem = &dataset.problems[problem_index];
        let mut record = run_attempt(prompt, problem, run_id, backbone, ledger, phase)?;
        let correct = check_answer(
            &record.predicted_answer,
            &problem.gold_answer,
            judge,
            ledger,
            phase,
        )?;
        record.correct = Some(correct);
        Ok(record)
    };

    let results: Vec<Result<AttemptRecord, CollectionError>> = if options.max_parallel <= 1 {
        tasks.iter().map(|&(p, r)| attempt(p, r)).collect()
    } else {
        let queue: Mutex<VecDeque<(usize, (usize, u32))>> =
            Mutex::new(tasks.iter().copied().enumerate().collect());
        let slots: Mutex<Vec<Option<Result<AttemptRecord, CollectionError>>>> =
            Mutex::new((0..total).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..options.max_parallel.min(total.max(1)) {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().pop_front();
                    let Some((slot, (p, r))) = next else { break };
                    let outcome = attempt(p, r);
                    slots.lock().unwrap()[slot] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|slot| slot.expect("every task produces a result"))
            .collect()
    };

    let mut out = Vec::with_capacity(total);
    let mut errored = 0usize;
    let mut first_error: Option<String> = None;
    // Judge verdict failures are grading bugs, not flaky infrastructure;
    // they abort immediately rather than counting toward the error budget.
    for result in results {
        match result {
            Ok(record) => out.push(Some(record)),
            Err(CollectionError::JudgeUnparseable { verdict }) => {
                return Err(CollectionError::JudgeUnparseable { verdict });
            }
            Err(e) => {
                errored += 1;
                first_error.get_or_insert_with(|| e.to_string());
                out.push(None);
            }
        }
    }
    if total > 0 && (errored as f64) > options.max_error_fraction * (total as f64) {
        return Err(CollectionError::TooManyAttemptErrors {
            errored,
            total,
            first_error: first_error.unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Step 1: K passes over the validation set, recording one failed trace per
/// incorrect (problem, run). Traces are ordered by (problem index, run id).
pub fn collect_errors(
    dataset: &Dataset,
    prompt: &str,
    config: &RunConfig,
    backbone: &Endpoint,
    judge: Option<&Endpoint>,
    ledger: &TokenLedger,
    options: &ExecutionOptions,
) -> Result<FailureLog, CollectionError> {
    collect_errors_in_phase(
        dataset,
        prompt,
        config,
        backbone,
        judge,
        ledger,
        options,
        Phase::Collection,
    )
}

/// Collection with an explicit ledger phase; the error-reduction analysis
/// gathers its after-log under the evaluation phase so optimization-phase
/// totals stay clean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn collect_errors_in_phase(
    dataset: &Dataset,
    prompt: &str,
    config: &RunConfig,
    backbone: &Endpoint,
    judge: Option<&Endpoint>,
    ledger: &TokenLedger,
    options: &ExecutionOptions,
    phase: Phase,
) -> Result<FailureLog, CollectionError> {
    if dataset.role != DatasetRole::Validation {
        return Err(CollectionError::NotValidationSet(dataset.role));
    }
    let runs = config.k_collection_runs;
    let records = execute_attempts(
        dataset, prompt, runs, backbone, judge, ledger, phase, options,
    )?;
    let traces: Vec<FailedTrace> = records
        .into_iter()
        .flatten()
        .filter(|r| r.correct == Some(false))
        .map(|r| FailedTrace {
            problem_id: r.problem_id,
            run_id: r.run_id,
            reasoning: r.reasoning,
            predicted_answer: r.predicted_answer,
        })
        .collect();
    Ok(FailureLog {
        prompt_fingerprint: fingerprint(prompt),
        total_attempts: dataset.len() as u64 * runs as u64,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptStep;
    use crate::model::DatasetRole;

    fn dataset(n: usize) -> Dataset {
        let problems = (1..=n)
            .map(|i| crate::model::Problem {
                id: format!("p{i}"),
                statement: format!("problem {i}"),
                gold_answer: "72".to_string(),
                metadata: Default::default(),
            })
            .collect();
        Dataset::new("d", DatasetRole::Validation, problems).unwrap()
    }

    fn config(k: u32) -> RunConfig {
        RunConfig {
            k_collection_runs: k,
            ..RunConfig::default()
        }
    }

    #[test]
    fn marker_extraction_takes_text_after_last_marker() {
        let text = "Some reasoning.\nFinal Answer: 17\nMore thoughts.\nfinal answer: 204";
        assert_eq!(extract_final_answer(text).unwrap(), "204");
    }

    #[test]
    fn extraction_falls_back_to_last_nonempty_line() {
        let text = "step one\nstep two\nthe answer is 9\n\n  \n";
        assert_eq!(extract_final_answer(text).unwrap(), "the answer is 9");
    }

    #[test]
    fn extraction_fails_on_blank_content() {
        assert!(extract_final_answer("  \n \n").is_none());
    }

    #[test]
    fn run_attempt_extracts_marker_answer() {
        let backbone = Endpoint::mock(vec![ScriptStep::new(
            "reasoning...\nFinal Answer: 204",
            10,
            5,
        )]);
        let ledger = TokenLedger::new();
        let problem = &dataset(1).problems[0];
        let record = run_attempt(
            "Solve it.",
            problem,
            1,
            &backbone,
            &ledger,
            Phase::Collection,
        )
        .unwrap();
        assert_eq!(record.predicted_answer, "204");
        assert_eq!(record.correct, None);
        assert_eq!(ledger.count(Role::Backbone, Phase::Collection), 1);
    }

    #[test]
    fn run_attempt_whitespace_reply_is_extraction_failure() {
        let backbone = Endpoint::mock(vec![ScriptStep::new("   \n  ", 1, 0)]);
        let ledger = TokenLedger::new();
        let problem = &dataset(1).problems[0];
        let err = run_attempt(
            "Solve it.",
            problem,
            2,
            &backbone,
            &ledger,
            Phase::Collection,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CollectionError::ExtractionFailed { run_id: 2, .. }
        ));
    }

    #[test]
    fn exact_match_short_circuits_without_judge_call() {
        let ledger = TokenLedger::new();
        // A scripted judge that would blow up if consulted.
        let judge = Endpoint::mock(vec![ScriptStep::new("NOT_EQUIVALENT", 1, 1)]);
        assert!(check_answer("72", "72", Some(&judge), &ledger, Phase::Collection).unwrap());
        assert!(check_answer(" 72. ", "72", Some(&judge), &ledger, Phase::Collection).unwrap());
        assert!(check_answer("Yes", "yes", Some(&judge), &ledger, Phase::Collection).unwrap());
        assert_eq!(ledger.len(), 0);
    }

    #[test]
    fn judge_decides_non_exact_matches() {
        let ledger = TokenLedger::new();
        let judge = Endpoint::mock(vec![
            ScriptStep::new("EQUIVALENT", 5, 1),
            ScriptStep::new("NOT_EQUIVALENT", 5, 1),
        ]);
        assert!(check_answer(
            "seventy-two",
            "72",
            Some(&judge),
            &ledger,
            Phase::Collection
        )
        .unwrap());
        assert!(!check_answer("71", "72", Some(&judge), &ledger, Phase::Collection).unwrap());
        assert_eq!(ledger.count(Role::Judge, Phase::Collection), 2);
    }

    #[test]
    fn no_judge_falls_back_to_exact_match() {
        let ledger = TokenLedger::new();
        assert!(!check_answer("seventy-two", "72", None, &ledger, Phase::Collection).unwrap());
    }

    #[test]
    fn unparseable_judge_verdict_is_an_error() {
        let ledger = TokenLedger::new();
        let judge = Endpoint::mock(vec![ScriptStep::new("hmm, unclear", 1, 1)]);
        let err = check_answer("a", "b", Some(&judge), &ledger, Phase::Collection).unwrap_err();
        assert!(matches!(err, CollectionError::JudgeUnparseable { .. }));
    }

    #[test]
    fn collect_all_wrong_yields_one_trace_per_attempt() {
        let dataset = dataset(2);
        let steps = (0..4)
            .map(|_| ScriptStep::new("Final Answer: 0", 10, 5))
            .collect();
        let backbone = Endpoint::mock(steps);
        let ledger = TokenLedger::new();
        let log = collect_errors(
            &dataset,
            "Solve it.",
            &config(2),
            &backbone,
            None,
            &ledger,
            &ExecutionOptions::default(),
        )
        .unwrap();
        assert_eq!(log.len(), 4);
        assert_eq!(log.total_attempts, 4);
        // Ordered by (problem index, run id).
        let keys: Vec<(String, u32)> = log
            .traces
            .iter()
            .map(|t| (t.problem_id.clone(), t.run_id))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("p1".to_string(), 1),
                ("p1".to_string(), 2),
                ("p2".to_string(), 1),
                ("p2".to_string(), 2)
            ]
        );
    }

    #[test]
    fn collect_all_correct_yields_empty_log() {
        let dataset = dataset(2);
        let steps = (0..4)
            .map(|_| ScriptStep::new("Final Answer: 72", 10, 5))
            .collect();
        let backbone = Endpoint::mock(steps);
        let ledger = TokenLedger::new();
        let log = collect_errors(
            &dataset,
            "Solve it.",
            &config(2),
            &backbone,
            None,
            &ledger,
            &ExecutionOptions::default(),
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(log.total_attempts, 4);
    }

    #[test]
    fn collect_records_only_wrong_runs() {
        // 1 problem, K=3, wrong on runs 1 and 3 only.
        let dataset = dataset(1);
        let backbone = Endpoint::mock(vec![
            ScriptStep::new("Final Answer: 5", 1, 1),
            ScriptStep::new("Final Answer: 72", 1, 1),
            ScriptStep::new("Final Answer: 9", 1, 1),
        ]);
        let ledger = TokenLedger::new();
        let log = collect_errors(
            &dataset,
            "Solve it.",
            &config(3),
            &backbone,
            None,
            &ledger,
            &ExecutionOptions::default(),
        )
        .unwrap();
        let run_ids: Vec<u32> = log.traces.iter().map(|t| t.run_id).collect();
        assert_eq!(run_ids, vec![1, 3]);
    }

    #[test]
    fn collect_requires_validation_role() {
        let mut d = dataset(1);
        d.role = DatasetRole::Test;
        let backbone = Endpoint::mock(vec![ScriptStep::new("Final Answer: 72", 1, 1)]);
        let ledger = TokenLedger::new();
        let err = collect_errors(
            &d,
            "Solve it.",
            &config(1),
            &backbone,
            None,
            &ledger,
            &ExecutionOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CollectionError::NotValidationSet(_)));
    }

    #[test]
    fn too_many_attempt_errors_aborts() {
        // 2 problems x 2 runs; the script exhausts after one step, so 3 of 4
        // attempts error out — far above the 0.2 default threshold.
        let dataset = dataset(2);
        let backbone = Endpoint::mock(vec![ScriptStep::new("Final Answer: 72", 1, 1)]);
        let ledger = TokenLedger::new();
        let err = collect_errors(
            &dataset,
            "Solve it.",
            &config(2),
            &backbone,
            None,
            &ledger,
            &ExecutionOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CollectionError::TooManyAttemptErrors {
                errored: 3,
                total: 4,
                ..
            }
        ));
    }

    #[test]
    fn deterministic_under_identical_scripts() {
        let run = || {
            let dataset = dataset(2);
            let steps = vec![
                ScriptStep::new("Final Answer: 1", 1, 1),
                ScriptStep::new("Final Answer: 72", 1, 1),
                ScriptStep::new("Final Answer: 3", 1, 1),
                ScriptStep::new("Final Answer: 4", 1, 1),
            ];
            let backbone = Endpoint::mock(steps);
            let ledger = TokenLedger::new();
            collect_errors(
                &dataset,
                "Solve it.",
                &config(2),
                &backbone,
                None,
                &ledger,
                &ExecutionOptions::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parallel_execution_preserves_output_order() {
        // Identical wrong answers, so it doesn't matter which worker gets
        // which step; the log must still come out in (problem, run) order.
        let dataset = dataset(3);
        let steps = (0..6)
            .map(|_| ScriptStep::new("Final Answer: 0", 1, 1))
            .collect();
        let backbone = Endpoint::mock(steps);
        let ledger = TokenLedger::new();
        let options = ExecutionOptions {
            max_parallel: 4,
            ..ExecutionOptions::default()
        };
        let log = collect_errors(
            &dataset,
            "Solve it.",
            &config(2),
            &backbone,
            None,
            &ledger,
            &options,
        )
        .unwrap();
        assert_eq!(log.len(), 6);
        assert!(log
            .traces
            .windows(2)
            .all(|w| (w[0].problem_id.as_str(), w[0].run_id)
                < (w[1].problem_id.as_str(), w[1].run_id)));
        assert_eq!(ledger.count(Role::Backbone, Phase::Collection), 6);
    }
}
