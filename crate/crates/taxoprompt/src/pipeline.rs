//! Stage commands behind the CLI.
//!
//! Each command loads its upstream artifacts, verifies the fingerprint
//! chain, runs one pipeline stage, and persists outputs atomically under the
//! configured output directory. `cmd_optimize` composes the stages in one
//! process and writes byte-identical artifacts to running them one at a
//! time.

use std::path::PathBuf;

use crate::artifacts::{
    filenames, read_failure_log, read_json, write_atomic, write_failure_log, write_json,
    ArtifactError, GuidanceDoc, LedgerDoc, SelectionDoc,
};
use crate::collection::collect_errors;
use crate::config::{ConfigError, PipelineConfig};
use crate::datasets::load_dataset;
use crate::evaluation::{error_reduction, evaluate_prompt, ErrorReductionReport, EvalReport};
use crate::guidance::{
    assemble_prompt, direct_categories_bundle, run_guidance, run_raw_sampling_guidance,
    GuidanceBundle,
};
use crate::model::{
    fingerprint, Dataset, DatasetRole, ErrorCategory, FailureLog, Phase, PromptArtifact, RunConfig,
    Taxonomy, TokenLedger,
};
use crate::selection::{ranked_table, select_categories, SelectionError, SelectionRow};
use crate::taxonomy::build_taxonomy;
use crate::templates::TemplateSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("stage `{stage}` failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("stale artifact: `{artifact}` was not produced from `{upstream}` ({detail})")]
    StaleArtifact {
        artifact: PathBuf,
        upstream: PathBuf,
        detail: String,
    },
}

impl PipelineError {
    /// CLI exit code: 2 config, 3 stage failure, 4 stale artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Artifact(_) | PipelineError::Stage { .. } => 3,
            PipelineError::StaleArtifact { .. } => 4,
        }
    }
}

fn stage_err(stage: &'static str, error: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: error.to_string(),
    }
}

/// Pipeline variants from the ablation study: skip taxonomy construction,
/// skip guidance generation, or shorten the guidance style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    RawSampling,
    DirectCategories,
    ShortGuidance,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw-sampling" => Ok(Self::RawSampling),
            "direct-categories" => Ok(Self::DirectCategories),
            "short-guidance" => Ok(Self::ShortGuidance),
            other => Err(format!(
                "unknown ablation `{other}` (expected raw-sampling, direct-categories, or short-guidance)"
            )),
        }
    }
}

/// Why an optimize run emitted the base prompt unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortCircuit {
    ZeroFailures,
    NoCategoriesSelected,
}

#[derive(Debug)]
pub struct OptimizeOutcome {
    pub artifact: PromptArtifact,
    pub short_circuit: Option<ShortCircuit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Base,
    Optimized,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub templates: TemplateSet,
    pub ledger: TokenLedger,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, templates: TemplateSet) -> Self {
        Self {
            config,
            templates,
            ledger: TokenLedger::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn run_config(&self, ablation: Ablation) -> RunConfig {
        let mut run = self.config.run.clone();
        if ablation == Ablation::ShortGuidance {
            run.guidance_style = crate::model::GuidanceStyle::Short;
        }
        run
    }

    fn validation_dataset(&self, stage: &'static str) -> Result<Dataset, PipelineError> {
        load_dataset(&self.config.validation_path, DatasetRole::Validation)
            .map_err(|e| stage_err(stage, e))
    }

    fn write_base_prompt(&self) -> Result<(), PipelineError> {
        write_atomic(
            &self.path(filenames::BASE_PROMPT),
            self.config.base_prompt.as_bytes(),
        )?;
        Ok(())
    }

    fn write_prompt_artifact(&self, artifact: &PromptArtifact) -> Result<(), PipelineError> {
        write_json(&self.path(filenames::PROMPT), artifact)?;
        write_atomic(
            &self.path(filenames::OPTIMIZED_PROMPT),
            artifact.assembled_prompt.as_bytes(),
        )?;
        Ok(())
    }

    fn write_ledger(&self) -> Result<(), PipelineError> {
        write_json(
            &self.path(filenames::LEDGER),
            &LedgerDoc::snapshot(&self.ledger),
        )?;
        Ok(())
    }

    /// Load the failure log and verify it was collected under the configured
    /// base prompt.
    fn load_checked_log(&self) -> Result<(FailureLog, String), PipelineError> {
        let log_path = self.path(filenames::FAILURE_LOG);
        let (log, file_fp) = read_failure_log(&log_path)?;
        if log.prompt_fingerprint != fingerprint(&self.config.base_prompt) {
            return Err(PipelineError::StaleArtifact {
                artifact: log_path,
                upstream: self.path(filenames::BASE_PROMPT),
                detail: "the log's prompt_fingerprint does not match the configured base prompt"
                    .to_string(),
            });
        }
        Ok((log, file_fp))
    }

    /// Load the taxonomy and verify it against the failure log file.
    fn load_checked_taxonomy(&self) -> Result<(Taxonomy, String, FailureLog), PipelineError> {
        let (log, log_fp) = self.load_checked_log()?;
        let taxonomy_path = self.path(filenames::TAXONOMY);
        let (taxonomy, taxonomy_fp) = read_json::<Taxonomy>(&taxonomy_path)?;
        if taxonomy.source_log_fingerprint != log_fp {
            return Err(PipelineError::StaleArtifact {
                artifact: taxonomy_path,
                upstream: self.path(filenames::FAILURE_LOG),
                detail: "the taxonomy's source_log_fingerprint does not match the log file"
                    .to_string(),
            });
        }
        Ok((taxonomy, taxonomy_fp, log))
    }

    /// Collect failed traces for the base prompt and persist the log.
    pub fn cmd_collect(&self) -> Result<FailureLog, PipelineError> {
        let dataset = self.validation_dataset("collection")?;
        let log = collect_errors(
            &dataset,
            &self.config.base_prompt,
            &self.config.run,
            &self.config.backbone,
            self.config.judge.as_ref(),
            &self.ledger,
            &self.config.execution,
        )
        .map_err(|e| stage_err("collection", e))?;
        self.write_base_prompt()?;
        write_failure_log(&self.path(filenames::FAILURE_LOG), &log)?;
        Ok(log)
    }

    /// Build the taxonomy from the persisted failure log.
    pub fn cmd_taxonomize(&self) -> Result<Taxonomy, PipelineError> {
        let (log, _) = self.load_checked_log()?;
        let dataset = self.validation_dataset("taxonomy")?;
        let taxonomy = build_taxonomy(
            &log,
            &dataset,
            &self.config.run,
            &self.config.optimizer,
            &self.ledger,
            &self.templates,
        )
        .map_err(|e| stage_err("taxonomy", e))?;
        write_json(&self.path(filenames::TAXONOMY), &taxonomy)?;
        Ok(taxonomy)
    }

    /// Rank categories and persist the selection table.
    pub fn cmd_select(&self) -> Result<Vec<SelectionRow>, PipelineError> {
        let (taxonomy, taxonomy_fp, _) = self.load_checked_taxonomy()?;
        let rows = ranked_table(&taxonomy, &self.config.run);
        write_json(
            &self.path(filenames::SELECTION),
            &SelectionDoc {
                source_taxonomy_fingerprint: taxonomy_fp,
                rows: rows.clone(),
            },
        )?;
        Ok(rows)
    }

    /// Generate guidance and assemble the optimized prompt from persisted
    /// artifacts.
    pub fn cmd_guide(&self, ablation: Ablation) -> Result<PromptArtifact, PipelineError> {
        let run = self.run_config(ablation);
        if ablation == Ablation::RawSampling {
            let (log, log_fp) = self.load_checked_log()?;
            if log.is_empty() {
                let artifact = assemble_prompt(&self.config.base_prompt, None);
                self.write_prompt_artifact(&artifact)?;
                return Ok(artifact);
            }
            let dataset = self.validation_dataset("guidance")?;
            let bundle = run_raw_sampling_guidance(
                &log,
                &dataset,
                &run,
                &self.config.base_prompt,
                &self.config.optimizer,
                &self.ledger,
                &self.templates,
            )
            .map_err(|e| stage_err("guidance", e))?;
            return self.finish_guide(bundle, log_fp);
        }

        let (taxonomy, taxonomy_fp, _) = self.load_checked_taxonomy()?;
        let selection_path = self.path(filenames::SELECTION);
        let (selection, selection_fp) = read_json::<SelectionDoc>(&selection_path)?;
        if selection.source_taxonomy_fingerprint != taxonomy_fp {
            return Err(PipelineError::StaleArtifact {
                artifact: selection_path,
                upstream: self.path(filenames::TAXONOMY),
                detail:
                    "the selection's source_taxonomy_fingerprint does not match the taxonomy file"
                        .to_string(),
            });
        }
        let selected = match select_categories(&taxonomy, &run) {
            Ok(selected) => selected,
            Err(SelectionError::NoCategoriesSelected) => {
                let artifact = assemble_prompt(&self.config.base_prompt, None);
                self.write_prompt_artifact(&artifact)?;
                return Ok(artifact);
            }
        };
        let bundle = self.make_bundle(&run, ablation, &selected, &taxonomy)?;
        self.finish_guide(bundle, selection_fp)
    }

    fn make_bundle(
        &self,
        run: &RunConfig,
        ablation: Ablation,
        selected: &[ErrorCategory],
        taxonomy: &Taxonomy,
    ) -> Result<GuidanceBundle, PipelineError> {
        if ablation == Ablation::DirectCategories {
            return Ok(direct_categories_bundle(selected, run.guidance_style));
        }
        run_guidance(
            selected,
            taxonomy.total_assignments(),
            run,
            &self.config.base_prompt,
            &self.config.optimizer,
            &self.ledger,
            &self.templates,
        )
        .map_err(|e| stage_err("guidance", e))
    }

    fn finish_guide(
        &self,
        bundle: GuidanceBundle,
        upstream_fingerprint: String,
    ) -> Result<PromptArtifact, PipelineError> {
        write_json(
            &self.path(filenames::GUIDANCE),
            &GuidanceDoc {
                upstream_fingerprint,
                bundle: bundle.clone(),
            },
        )?;
        let artifact = assemble_prompt(&self.config.base_prompt, Some(&bundle));
        self.write_prompt_artifact(&artifact)?;
        Ok(artifact)
    }

    /// Run the whole pipeline — collect, taxonomize, select, guide,
    /// assemble — in one process.
    pub fn cmd_optimize(&self, ablation: Ablation) -> Result<OptimizeOutcome, PipelineError> {
        let run = self.run_config(ablation);
        let dataset = self.validation_dataset("collection")?;
        self.write_base_prompt()?;
        let log = collect_errors(
            &dataset,
            &self.config.base_prompt,
            &run,
            &self.config.backbone,
            self.config.judge.as_ref(),
            &self.ledger,
            &self.config.execution,
        )
        .map_err(|e| stage_err("collection", e))?;
        let log_fp = write_failure_log(&self.path(filenames::FAILURE_LOG), &log)?;

        if log.is_empty() {
            let artifact = assemble_prompt(&self.config.base_prompt, None);
            self.write_prompt_artifact(&artifact)?;
            self.write_ledger()?;
            return Ok(OptimizeOutcome {
                artifact,
                short_circuit: Some(ShortCircuit::ZeroFailures),
            });
        }

        let bundle = if ablation == Ablation::RawSampling {
            let bundle = run_raw_sampling_guidance(
                &log,
                &dataset,
                &run,
                &self.config.base_prompt,
                &self.config.optimizer,
                &self.ledger,
                &self.templates,
            )
            .map_err(|e| stage_err("guidance", e))?;
            write_json(
                &self.path(filenames::GUIDANCE),
                &GuidanceDoc {
                    upstream_fingerprint: log_fp,
                    bundle: bundle.clone(),
                },
            )?;
            bundle
        } else {
            let taxonomy = build_taxonomy(
                &log,
                &dataset,
                &run,
                &self.config.optimizer,
                &self.ledger,
                &self.templates,
            )
            .map_err(|e| stage_err("taxonomy", e))?;
            let taxonomy_fp = write_json(&self.path(filenames::TAXONOMY), &taxonomy)?;
            let rows = ranked_table(&taxonomy, &run);
            let selection_fp = write_json(
                &self.path(filenames::SELECTION),
                &SelectionDoc {
                    source_taxonomy_fingerprint: taxonomy_fp,
                    rows,
                },
            )?;
            let selected = match select_categories(&taxonomy, &run) {
                Ok(selected) => selected,
                Err(SelectionError::NoCategoriesSelected) => {
                    let artifact = assemble_prompt(&self.config.base_prompt, None);
                    self.write_prompt_artifact(&artifact)?;
                    self.write_ledger()?;
                    return Ok(OptimizeOutcome {
                        artifact,
                        short_circuit: Some(ShortCircuit::NoCategoriesSelected),
                    });
                }
            };
            let bundle = self.make_bundle(&run, ablation, &selected, &taxonomy)?;
            write_json(
                &self.path(filenames::GUIDANCE),
                &GuidanceDoc {
                    upstream_fingerprint: selection_fp,
                    bundle: bundle.clone(),
                },
            )?;
            bundle
        };

        let artifact = assemble_prompt(&self.config.base_prompt, Some(&bundle));
        self.write_prompt_artifact(&artifact)?;
        self.write_ledger()?;
        Ok(OptimizeOutcome {
            artifact,
            short_circuit: None,
        })
    }

    fn eval_dataset(&self, role: DatasetRole) -> Result<Dataset, PipelineError> {
        let path = match role {
            DatasetRole::Validation => &self.config.validation_path,
            DatasetRole::Test => self.config.test_path.as_ref().ok_or_else(|| {
                ConfigError::Invalid("no test dataset configured (set [dataset] test)".into())
            })?,
        };
        load_dataset(path, role).map_err(|e| stage_err("evaluation", e))
    }

    fn resolve_prompt(&self, kind: PromptKind) -> Result<String, PipelineError> {
        match kind {
            PromptKind::Base => Ok(self.config.base_prompt.clone()),
            PromptKind::Optimized => {
                let path = self.path(filenames::PROMPT);
                let (artifact, _) = read_json::<PromptArtifact>(&path)?;
                if artifact.base_prompt != self.config.base_prompt {
                    return Err(PipelineError::StaleArtifact {
                        artifact: path,
                        upstream: self.path(filenames::BASE_PROMPT),
                        detail: "the prompt artifact was assembled from a different base prompt"
                            .to_string(),
                    });
                }
                Ok(artifact.assembled_prompt)
            }
        }
    }

    /// Evaluate the base or optimized prompt over several full passes.
    pub fn cmd_eval(
        &self,
        kind: PromptKind,
        split: DatasetRole,
        runs: u32,
    ) -> Result<EvalReport, PipelineError> {
        let prompt = self.resolve_prompt(kind)?;
        let dataset = self.eval_dataset(split)?;
        let report = evaluate_prompt(
            &dataset,
            &prompt,
            runs,
            &self.config.backbone,
            self.config.judge.as_ref(),
            &self.ledger,
            &self.config.execution,
        )
        .map_err(|e| stage_err("evaluation", e))?;
        let filename = match kind {
            PromptKind::Base => filenames::EVAL_BASE,
            PromptKind::Optimized => filenames::EVAL_OPTIMIZED,
        };
        write_json(&self.path(filename), &report)?;
        Ok(report)
    }

    /// Collect failures under the optimized prompt and compare per-category
    /// counts against the frozen taxonomy.
    pub fn cmd_error_reduction(&self, top_n: usize) -> Result<ErrorReductionReport, PipelineError> {
        let (taxonomy, _, before) = self.load_checked_taxonomy()?;
        let optimized = self.resolve_prompt(PromptKind::Optimized)?;
        let dataset = self.validation_dataset("error-reduction")?;
        // Analysis work is accounted under the evaluation phase.
        let after = crate::collection::collect_errors_in_phase(
            &dataset,
            &optimized,
            &self.config.run,
            &self.config.backbone,
            self.config.judge.as_ref(),
            &self.ledger,
            &self.config.execution,
            Phase::Evaluation,
        )
        .map_err(|e| stage_err("error-reduction", e))?;
        write_failure_log(&self.path(filenames::FAILURE_LOG_AFTER), &after)?;
        let report = error_reduction(
            &taxonomy,
            &before,
            &after,
            top_n,
            &self.config.run,
            &dataset,
            &self.config.optimizer,
            &self.ledger,
            &self.templates,
        )
        .map_err(|e| stage_err("error-reduction", e))?;
        write_json(&self.path(filenames::ERROR_REDUCTION), &report)?;
        Ok(report)
    }
}

/// Human-readable ranked category table.
pub fn render_selection_table(rows: &[SelectionRow]) -> String {
    let mut out = String::from("rank  failures  problems  selected  name\n");
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:>4}  {:>8}  {:>8}  {:>8}  {}\n",
            i + 1,
            row.failure_count,
            row.problem_count,
            if row.selected { "yes" } else { "no" },
            row.name
        ));
    }
    out
}

/// Human-readable accuracy report.
pub fn render_eval_report(report: &EvalReport) -> String {
    let per_run = report
        .per_run_accuracy
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut out = format!(
        "runs: {}\nper-run accuracy: [{per_run}]\nmean accuracy: {:.4} ± {:.4} ({})\n",
        report.runs_per_problem, report.mean_accuracy, report.ci_half_width, report.ci_method
    );
    for (role, totals) in &report.token_totals {
        out.push_str(&format!(
            "{role} tokens: {} in / {} out\n",
            totals.input_tokens, totals.output_tokens
        ));
    }
    out
}

/// Two-column before/after count table.
pub fn render_error_reduction(report: &ErrorReductionReport) -> String {
    let mut out = String::from("before  after  category\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{:>6}  {:>5}  {}\n",
            row.before_count, row.after_count, row.name
        ));
    }
    if !report.new_categories.is_empty() {
        out.push_str("new categories (after-only):\n");
        for row in &report.new_categories {
            out.push_str(&format!(
                "{:>6}  {:>5}  {}\n",
                "-", row.after_count, row.name
            ));
        }
    }
    out.push_str(&format!("total after-failures: {}\n", report.after_total));
    out
}

/// Per-phase token totals, with the optimization phases subtotaled.
pub fn render_token_summary(ledger: &TokenLedger) -> String {
    format!(
        "tokens by phase (input+output): collection {}, taxonomy {}, guidance {}, evaluation {}\noptimization-phase total: {}\n",
        ledger.phase_total(Phase::Collection),
        ledger.phase_total(Phase::Taxonomy),
        ledger.phase_total(Phase::Guidance),
        ledger.phase_total(Phase::Evaluation),
        ledger.optimization_total(),
    )
}
