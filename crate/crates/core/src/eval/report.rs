//! Report rows with aligned-text and CSV renderings.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::Summary;
use super::{Level, SliceKind};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub slice: String,
    pub relevance_level: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Fact => "fact",
        Level::Predicate => "predicate",
        Level::Subject => "subject",
        Level::Object => "object",
    }
}

impl EvalReport {
    /// Appends the three metrics of one (method, slice, level) summary.
    #[allow(clippy::too_many_arguments)]
    pub fn push_summary(
        &mut self,
        method: &str,
        slice: SliceKind,
        level: Level,
        k: usize,
        summary: &Summary,
        n: usize,
        m: usize,
        seed: u64,
    ) {
        for (metric, ms) in [
            ("mrr".to_string(), summary.mrr),
            (format!("recall@{k}"), summary.recall),
            (format!("precision@{k}"), summary.precision),
        ] {
            self.rows.push(ReportRow {
                method: method.to_string(),
                slice: slice.to_string(),
                relevance_level: level_name(level).to_string(),
                metric,
                mean: ms.mean,
                std: ms.std,
                n,
                m,
                seed,
            });
        }
    }

    pub fn find(&self, method: &str, level: &str, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.relevance_level == level && r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row).map_err(|e| crate::error::Error::InvalidInput(e.to_string()))?;
        }
        out.flush().map_err(|e| crate::error::Error::InvalidInput(e.to_string()))?;
        Ok(())
    }

    /// Aligned table with one line per (method, slice, level) and metrics
    /// shown as `mean ± std` on a 0-100 scale.
    pub fn to_table(&self) -> String {
        let mut groups: Vec<((String, String, String, u64), Vec<&ReportRow>)> = Vec::new();
        for row in &self.rows {
            let key = (row.method.clone(), row.slice.clone(), row.relevance_level.clone(), row.seed);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        let metrics: Vec<String> = {
            let mut seen = Vec::new();
            for r in &self.rows {
                if !seen.contains(&r.metric) {
                    seen.push(r.metric.clone());
                }
            }
            seen
        };
        let mut lines = vec![];
        let mut header = vec!["method".to_string(), "slice".to_string(), "level".to_string(), "seed".to_string()];
        header.extend(metrics.iter().cloned());
        lines.push(header);
        for ((method, slice, level, seed), rows) in &groups {
            let mut line = vec![method.clone(), slice.clone(), level.clone(), seed.to_string()];
            for m in &metrics {
                line.push(match rows.iter().find(|r| &r.metric == m) {
                    Some(r) => format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std),
                    None => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in lines {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}", w = *w))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        out
    }
}
