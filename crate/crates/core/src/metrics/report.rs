//! Per-explanation-kind accounting of evaluator verdicts.

use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Verdict counts for one explanation kind. Parse failures are tracked but
/// excluded from the percentage denominators.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct KindCounts {
    pub uninformative: usize,
    pub unfaithful: usize,
    pub faithful: usize,
    pub parse_failures: usize,
}

impl KindCounts {
    pub fn total_categorized(&self) -> usize {
        self.uninformative + self.unfaithful + self.faithful
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportRow {
    pub label: String,
    pub uninformative_pct: f64,
    pub unfaithful_pct: f64,
    pub faithful_pct: f64,
    pub counts: KindCounts,
}

/// Percentages of uninformative / unfaithful / faithful verdicts per
/// explanation kind, rows in the order the caller grouped them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<EvalReportRow>,
    pub dataset_size: usize,
    /// One note per omitted (empty) group.
    pub notes: Vec<String>,
}

/// Build the report from `(row label, counts)` groups. Groups with no
/// categorized verdicts are omitted, with a note recording the omission.
pub fn build_eval_report(groups: &[(String, KindCounts)], dataset_size: usize) -> EvalReport {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (label, counts) in groups {
        let total = counts.total_categorized();
        if total == 0 {
            notes.push(format!("row '{label}' omitted: no categorized verdicts"));
            continue;
        }
        let pct = |c: usize| 100.0 * c as f64 / total as f64;
        rows.push(EvalReportRow {
            label: label.clone(),
            uninformative_pct: pct(counts.uninformative),
            unfaithful_pct: pct(counts.unfaithful),
            faithful_pct: pct(counts.faithful),
            counts: *counts,
        });
    }
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        dataset_size,
        notes,
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,uninformative_pct,unfaithful_pct,faithful_pct,uninformative,unfaithful,faithful,parse_failures\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{},{},{},{}\n",
                csv_escape(&row.label),
                row.uninformative_pct,
                row.unfaithful_pct,
                row.faithful_pct,
                row.counts.uninformative,
                row.counts.unfaithful,
                row.counts.faithful,
                row.counts.parse_failures,
            ));
        }
        out
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
