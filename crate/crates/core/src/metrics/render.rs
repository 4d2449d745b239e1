use std::collections::BTreeSet;
use std::fmt::Write;

use super::{CellKey, MetricsReport, Novelty, TimeRange, TypeGroup};

/// Plain-text grid: one row per (group, range, k), one precision/recall
/// column per novelty mode.
pub fn render_table(report: &MetricsReport) -> String {
    let groups: BTreeSet<TypeGroup> = report.cells.keys().map(|k| k.group).collect();
    let ranges: BTreeSet<TimeRange> = report.cells.keys().map(|k| k.range).collect();
    let ks: BTreeSet<usize> = report.cells.keys().map(|k| k.k).collect();
    let modes: BTreeSet<Novelty> = report.cells.keys().map(|k| k.novelty).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<12}{:>8}{:>6}", "type", "range", "top-k");
    for m in &modes {
        let _ = write!(out, "{:>16}", format!("{m:?} P/R"));
    }
    out.push('\n');
    for &group in &groups {
        for &range in &ranges {
            for &k in &ks {
                let _ = write!(out, "{:<12}{:>8}{:>6}", format!("{group:?}"), range.to_string(), k);
                for &novelty in &modes {
                    let cell = report.cell(&CellKey { group, range, k, novelty });
                    let text = match cell {
                        Some(c) => format!("{:.2}/{:.2}", c.totals.precision(), c.totals.recall()),
                        None => "-".to_string(),
                    };
                    let _ = write!(out, "{text:>16}");
                }
                out.push('\n');
            }
        }
    }
    out
}
