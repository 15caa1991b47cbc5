//! Error category selection: drop categories seen on too few distinct
//! problems, rank the rest by failure count, and keep the top G.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorCategory, RunConfig, Taxonomy};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no categories remain after the problem-count filter; the base prompt should be emitted unchanged")]
    NoCategoriesSelected,
}

/// Ordering used for ranking: failure count descending, ties broken by
/// problem count descending, then by first appearance in the taxonomy
/// (stable sort keeps that order for full ties).
fn rank_key(category: &ErrorCategory) -> (usize, usize) {
    (category.failure_count(), category.problem_count())
}

/// Pick the categories that guidance will target.
///
/// Categories with `problem_count < min_problem_count` are dropped first —
/// errors confined to a single problem don't generalize — then survivors are
/// sorted by failure count (descending) and truncated to `max_categories`.
pub fn select_categories(
    taxonomy: &Taxonomy,
    config: &RunConfig,
) -> Result<Vec<ErrorCategory>, SelectionError> {
    let mut survivors: Vec<&ErrorCategory> = taxonomy
        .categories
        .iter()
        .filter(|c| c.problem_count() >= config.min_problem_count)
        .collect();
    survivors.sort_by_key(|c| std::cmp::Reverse(rank_key(c)));
    survivors.truncate(config.max_categories);
    if survivors.is_empty() {
        return Err(SelectionError::NoCategoriesSelected);
    }
    Ok(survivors.into_iter().cloned().collect())
}

/// One row of the ranked category table emitted by the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub name: String,
    pub failure_count: usize,
    pub problem_count: usize,
    pub selected: bool,
}

/// The full ranked table: every category in rank order, flagged with whether
/// it survived the filter and the top-G cut.
pub fn ranked_table(taxonomy: &Taxonomy, config: &RunConfig) -> Vec<SelectionRow> {
    let selected: Vec<String> = select_categories(taxonomy, config)
        .map(|cats| cats.into_iter().map(|c| c.name).collect())
        .unwrap_or_default();
    let mut ranked: Vec<&ErrorCategory> = taxonomy.categories.iter().collect();
    ranked.sort_by_key(|c| std::cmp::Reverse(rank_key(c)));
    ranked
        .into_iter()
        .map(|c| SelectionRow {
            name: c.name.clone(),
            failure_count: c.failure_count(),
            problem_count: c.problem_count(),
            selected: selected.contains(&c.name),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FailureAssignment;

    /// Build a category with the given failure count spread over
    /// `problem_count` distinct problems.
    fn category(name: &str, failure_count: usize, problem_count: usize) -> ErrorCategory {
        assert!(problem_count <= failure_count);
        let assignments = (0..failure_count)
            .map(|i| FailureAssignment {
                problem_id: format!("{name}-p{}", i.min(problem_count - 1)),
                run_id: (i + 1) as u32,
                location: String::new(),
                details: String::new(),
            })
            .collect();
        ErrorCategory {
            name: name.to_string(),
            summary: "s".into(),
            description: "d".into(),
            example: "e".into(),
            error_type: "t".into(),
            why_leads_to_wrong_answer: "w".into(),
            assignments,
        }
    }

    fn taxonomy(categories: Vec<ErrorCategory>) -> Taxonomy {
        Taxonomy {
            source_log_fingerprint: "f".into(),
            categories,
        }
    }

    fn config(max_categories: usize) -> RunConfig {
        RunConfig {
            max_categories,
            ..RunConfig::default()
        }
    }

    #[test]
    fn filter_then_sort_then_truncate() {
        // A: fc=5 pc=1 (filtered out); B: fc=3 pc=2; C: fc=4 pc=3.
        let t = taxonomy(vec![
            category("A", 5, 1),
            category("B", 3, 2),
            category("C", 4, 3),
        ]);
        let picked = select_categories(&t, &config(2)).unwrap();
        let names: Vec<&str> = picked.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["C", "B"]);
    }

    #[test]
    fn failure_count_tie_broken_by_problem_count() {
        let t = taxonomy(vec![category("X", 4, 2), category("Y", 4, 3)]);
        let picked = select_categories(&t, &config(10)).unwrap();
        assert_eq!(picked[0].name, "Y");
        assert_eq!(picked[1].name, "X");
    }

    #[test]
    fn full_tie_keeps_first_appearance_order() {
        let t = taxonomy(vec![category("First", 4, 2), category("Second", 4, 2)]);
        let picked = select_categories(&t, &config(10)).unwrap();
        assert_eq!(picked[0].name, "First");
        assert_eq!(picked[1].name, "Second");
    }

    #[test]
    fn all_single_problem_categories_is_an_error() {
        let t = taxonomy(vec![category("A", 3, 1), category("B", 2, 1)]);
        let err = select_categories(&t, &config(10)).unwrap_err();
        assert!(matches!(err, SelectionError::NoCategoriesSelected));
    }

    #[test]
    fn output_counts_are_non_increasing_and_bounded() {
        let t = taxonomy(vec![
            category("A", 7, 3),
            category("B", 2, 2),
            category("C", 9, 4),
            category("D", 2, 2),
        ]);
        let picked = select_categories(&t, &config(3)).unwrap();
        assert!(picked.len() <= 3);
        assert!(picked
            .windows(2)
            .all(|w| w[0].failure_count() >= w[1].failure_count()));
        assert!(picked.iter().all(|c| c.problem_count() >= 2));
    }

    #[test]
    fn ranked_table_flags_selection() {
        let t = taxonomy(vec![
            category("A", 5, 1),
            category("B", 3, 2),
            category("C", 4, 3),
        ]);
        let rows = ranked_table(&t, &config(1));
        assert_eq!(rows.len(), 3);
        // Rank order: A (fc 5) first even though filtered.
        assert_eq!(rows[0].name, "A");
        assert!(!rows[0].selected);
        assert_eq!(rows[1].name, "C");
        assert!(rows[1].selected);
        assert!(!rows[2].selected);
    }

    #[test]
    fn g_larger_than_supply_returns_everything_eligible() {
        let categories = (0..8)
            .map(|i| category(&format!("c{i}"), 4 + i, 2))
            .collect();
        let picked = select_categories(&taxonomy(categories), &config(10)).unwrap();
        assert_eq!(picked.len(), 8);
    }

    #[test]
    fn selection_is_pure() {
        let t = taxonomy(vec![
            category("A", 4, 2),
            category("B", 4, 2),
            category("C", 1, 1),
        ]);
        let c = config(2);
        assert_eq!(
            select_categories(&t, &c).unwrap(),
            select_categories(&t, &c).unwrap()
        );
    }
}
