use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{read_json, RunLayout};
use crate::dataset::{ClassLabel, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(format!("unknown table format {other:?} (expected md or csv)")),
        }
    }
}

/// One table row. Sensitivity, specificity and AUC are macro averages over
/// the three one-vs-rest problems; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

impl SummaryRow {
    pub fn from_report(name: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            sensitivity: r.macro_avg.sensitivity,
            specificity: r.macro_avg.specificity,
            accuracy: Some(r.accuracy),
            auc: r.macro_avg.auc,
        }
    }

    pub fn missing(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            sensitivity: None,
            specificity: None,
            accuracy: None,
            auc: None,
        }
    }

    fn values(&self) -> [Option<f64>; 4] {
        [self.sensitivity, self.specificity, self.accuracy, self.auc]
    }
}

#[derive(serde::Deserialize)]
struct EnsembleMembers {
    spec: crate::ensemble::EnsembleSpec,
}

/// One row per configured model, in configuration order, plus one ensemble
/// row. Missing reports produce rows of gaps. `ensemble` selects the
/// ensemble directory; by default the one matching the run's configured
/// member count and tie rule is used.
pub fn summary_rows(run_dir: &Path, ensemble: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let layout = RunLayout::new(run_dir);
    if !layout.config().is_file() {
        return Err(Error::Config(format!("{} is not a run directory", run_dir.display())));
    }
    let cfg = layout.read_config()?;
    let mut rows = Vec::with_capacity(cfg.models.len() + 1);
    for m in &cfg.models {
        let path = layout.mean_report(&m.name);
        rows.push(if path.is_file() {
            SummaryRow::from_report(&m.name, &MetricsReport::read_json(&path)?)
        } else {
            SummaryRow::missing(&m.name)
        });
    }
    let dir = match ensemble {
        Some(d) => d.to_path_buf(),
        None => layout.ensemble_dir(cfg.ensemble.members, cfg.ensemble.tie_break),
    };
    let report_path = dir.join("report.json");
    rows.push(if report_path.is_file() {
        let members: EnsembleMembers = read_json(&dir.join("ensemble.json"))?;
        let name = format!("ensemble [{}]", members.spec.member_ids.join(" + "));
        SummaryRow::from_report(name, &MetricsReport::read_json(&report_path)?)
    } else {
        SummaryRow::missing("ensemble")
    });
    Ok(rows)
}

const HEADERS: [&str; 4] = ["Sensitivity", "Specificity", "Accuracy", "AUC"];
const GAP: &str = "n/a";

pub fn render_table(rows: &[SummaryRow], format: TableFormat) -> String {
    let mut s = String::new();
    match format {
        TableFormat::Markdown => {
            writeln!(s, "| Model | {} |", HEADERS.join(" | ")).unwrap();
            writeln!(s, "|---|---:|---:|---:|---:|").unwrap();
            for r in rows {
                let cells: Vec<String> = r
                    .values()
                    .iter()
                    .map(|v| v.map_or(GAP.to_string(), |x| format!("{x:.4}")))
                    .collect();
                writeln!(s, "| {} | {} |", r.name, cells.join(" | ")).unwrap();
            }
        }
        TableFormat::Csv => {
            writeln!(s, "model,{}", HEADERS.map(str::to_lowercase).join(",")).unwrap();
            for r in rows {
                let cells: Vec<String> = r.values().iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect();
                let name = if r.name.contains([',', '"']) {
                    format!("\"{}\"", r.name.replace('"', "\"\""))
                } else {
                    r.name.clone()
                };
                writeln!(s, "{name},{}", cells.join(",")).unwrap();
            }
        }
    }
    s
}

/// Class distribution per origin and in total, one row each.
pub fn distribution_table(m: &DatasetManifest) -> String {
    let mut s = String::new();
    writeln!(s, "| Dataset | Normal | Benign | Malignant | Total |").unwrap();
    writeln!(s, "|---|---:|---:|---:|---:|").unwrap();
    let row = |s: &mut String, name: &str, counts: &dyn Fn(ClassLabel) -> usize| {
        let c: Vec<usize> = ClassLabel::ALL.iter().map(|&l| counts(l)).collect();
        writeln!(s, "| {name} | {} | {} | {} | {} |", c[0], c[1], c[2], c.iter().sum::<usize>()).unwrap();
    };
    for (origin, counts) in m.origin_counts() {
        row(&mut s, &origin, &|l| counts.get(&l).copied().unwrap_or(0));
    }
    row(&mut s, "Total", &|l| m.count(l));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<SummaryRow> {
        vec![
            SummaryRow {
                name: "a".into(),
                sensitivity: Some(0.9),
                specificity: Some(0.95),
                accuracy: Some(0.931),
                auc: Some(0.99),
            },
            SummaryRow::missing("ensemble"),
        ]
    }

    #[test]
    fn markdown_marks_gaps() {
        let t = render_table(&rows(), TableFormat::Markdown);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| a | 0.9000 | 0.9500 | 0.9310 | 0.9900 |"));
        assert!(t.contains("| ensemble | n/a | n/a | n/a | n/a |"));
    }

    #[test]
    fn csv_keeps_full_precision() {
        let t = render_table(&rows(), TableFormat::Csv);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "model,sensitivity,specificity,accuracy,auc");
        assert_eq!(lines[1], "a,0.9,0.95,0.931,0.99");
        assert_eq!(lines[2], "ensemble,,,,");
    }

    #[test]
    fn format_parsing() {
        assert_eq!("md".parse::<TableFormat>().unwrap(), TableFormat::Markdown);
        assert_eq!("csv".parse::<TableFormat>().unwrap(), TableFormat::Csv);
        assert!("xml".parse::<TableFormat>().is_err());
    }
}
