//! Prompt templates and the placeholder engine behind them.
//!
//! Each template is a plain-text data file with `{name}` placeholders. The
//! defaults under `templates/` are compiled in; a directory override (the
//! CLI's `--templates-dir`) replaces individual templates by file name,
//! falling back to the embedded default for any file not present.
//!
//! Substitution is single-pass and only touches the placeholders a render
//! call provides, so literal braces elsewhere in a template (the JSON format
//! sections) pass through untouched.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` does not contain placeholder `{{{placeholder}}}`")]
    MissingPlaceholder {
        template: String,
        placeholder: &'static str,
    },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("at least one failed trace is required")]
    EmptyBatch,
    #[error("at least one selected category is required")]
    EmptySelection,
    #[error("taxonomy has no categories; the first-batch prompt must be used")]
    EmptyTaxonomy,
    #[error("failed to read template file `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Names of the compiled-in templates, paired with their default text.
const EMBEDDED: &[(&str, &str)] = &[
    (
        "taxonomy_first",
        include_str!("../templates/taxonomy_first.txt"),
    ),
    (
        "taxonomy_subsequent",
        include_str!("../templates/taxonomy_subsequent.txt"),
    ),
    (
        "failure_block",
        include_str!("../templates/failure_block.txt"),
    ),
    (
        "category_block",
        include_str!("../templates/category_block.txt"),
    ),
    ("guidance", include_str!("../templates/guidance.txt")),
    (
        "guidance_category_block",
        include_str!("../templates/guidance_category_block.txt"),
    ),
    (
        "guidance_style_detailed",
        include_str!("../templates/guidance_style_detailed.txt"),
    ),
    (
        "guidance_style_short",
        include_str!("../templates/guidance_style_short.txt"),
    ),
    (
        "guidance_raw_sampling",
        include_str!("../templates/guidance_raw_sampling.txt"),
    ),
];

/// A resolved set of templates, embedded defaults plus any overrides.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::embedded()
    }
}

impl TemplateSet {
    /// The compiled-in defaults.
    pub fn embedded() -> Self {
        let texts = EMBEDDED
            .iter()
            .map(|(name, text)| (name.to_string(), text.trim_end().to_string()))
            .collect();
        Self { texts }
    }

    /// Defaults with per-file overrides from a directory. A file named
    /// `<template>.txt` replaces that template; everything else keeps its
    /// embedded text.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::embedded();
        for (name, _) in EMBEDDED {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.texts
                    .insert(name.to_string(), text.trim_end().to_string());
            }
        }
        Ok(set)
    }

    pub fn text(&self, name: &str) -> Result<&str, TemplateError> {
        self.texts
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    /// Fill the named template. Every provided placeholder must occur in the
    /// template at least once; a template that lost a required slot (for
    /// example through a bad override) fails rather than rendering a prompt
    /// with missing content.
    pub fn render(
        &self,
        name: &str,
        values: &[(&'static str, &str)],
    ) -> Result<String, TemplateError> {
        let template = self.text(name)?;
        let mut rendered = template.to_string();
        for (placeholder, value) in values {
            let token = format!("{{{placeholder}}}");
            if !template.contains(&token) {
                return Err(TemplateError::MissingPlaceholder {
                    template: name.to_string(),
                    placeholder,
                });
            }
            rendered = rendered.replace(&token, value);
        }
        Ok(rendered)
    }
}
