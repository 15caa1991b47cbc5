//! Failure-driven prompt optimization.
//!
//! The pipeline runs in four steps: collect an LLM's failed reasoning traces
//! over a validation set, organize them into a prevalence-weighted error
//! taxonomy through batched optimizer calls, select the dominant error
//! categories, and generate targeted guidance that is appended to the base
//! system prompt. An evaluation harness measures multi-run accuracy with
//! confidence intervals, and a token ledger accounts every LLM call by role
//! and phase.
//!
//! Modules follow the stages:
//!
//! - [`model`] — shared domain types and the token ledger
//! - [`gateway`] — chat-completion backends (HTTP and scripted mock)
//! - [`datasets`] — JSONL datasets, sampling, bundled fixtures
//! - [`collection`] — backbone attempts, answer checking, failed traces
//! - [`taxonomy`] — batched error categorization
//! - [`selection`] — category filtering and ranking
//! - [`guidance`] — guidance generation and prompt assembly
//! - [`evaluation`] — accuracy reports and error-reduction analysis
//! - [`config`], [`artifacts`], [`pipeline`] — the config-driven runner

pub mod artifacts;
pub mod collection;
pub mod config;
pub mod datasets;
pub mod evaluation;
pub mod gateway;
pub mod guidance;
mod jsonx;
pub mod model;
pub mod pipeline;
pub mod selection;
pub mod taxonomy;
pub mod templates;

pub use config::PipelineConfig;
pub use gateway::{BackendConfig, ChatRequest, ChatResponse, Endpoint, MockScript, ScriptStep};
pub use model::{
    category_stats, Dataset, DatasetRole, ErrorCategory, FailedTrace, FailureLog, GuidanceItem,
    GuidanceStyle, Phase, Problem, PromptArtifact, Role, RunConfig, Taxonomy, TokenLedger,
};
pub use pipeline::{Ablation, Pipeline, PipelineError};
