//! Comparison tables: one row per run, ID and OOD accuracy as `mean±std`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{EvalReport, SplitSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub label: String,
    pub id_test: SplitSummary,
    pub ood_test: SplitSummary,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, report: &EvalReport) -> Self {
        ReportRow {
            label: label.into(),
            id_test: report.id_test.clone(),
            ood_test: report.ood_test.clone(),
        }
    }
}

/// Percentages with two decimals, e.g. `84.71±0.21`.
pub fn format_cell(s: &SplitSummary) -> String {
    format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std)
}

/// Markdown table; the best mean in each column is set in bold.
pub fn render_table(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("report", "no completed runs to report"));
    }
    let best = |f: fn(&ReportRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let best_id = best(|r| r.id_test.mean);
    let best_ood = best(|r| r.ood_test.mean);
    let mark = |s: &SplitSummary, top: f64| {
        let cell = format_cell(s);
        if s.mean == top {
            format!("**{cell}**")
        } else {
            cell
        }
    };

    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                mark(&r.id_test, best_id),
                mark(&r.ood_test, best_ood),
            ]
        })
        .collect();
    let header = ["Method", "ID", "OOD"].map(String::from);
    let widths: Vec<usize> = (0..3)
        .map(|c| {
            std::iter::once(&header)
                .chain(&cells)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |row: &[String; 3]| {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in &cells {
        out.push_str(&line(row));
    }
    Ok(out)
}
