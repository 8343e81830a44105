//! Run directories: configuration, the cross-validation driver, ensemble
//! fusion over a finished run, and summary tables.
//!
//! Layout of one run:
//!
//! ```text
//! <out_root>/<name>-s<seed>[-<n>]/
//!   config.toml            configuration with every default filled in
//!   config.source.toml     configuration text as supplied (when read from a file)
//!   run.json               harness version and seeds
//!   manifest.csv           merged dataset manifest
//!   folds.json             fold plan
//!   fold<k>/model_<name>/  checkpoint.bin, trainrecord.json, report.json, predictions.jsonl
//!   reports/<name>.json    cross-fold mean report per model
//!   cv_summary.json        completed models and failed jobs
//!   ensemble_m<m>_<tie>/   ensemble.json, votes.jsonl, report.json, report_pooled.json,
//!                          confusion.csv, roc.csv, roc.svg
//! ```

mod config;
mod cv;
mod fuse;
mod table;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    derive_seed, AugmentSettings, Bagging, DatasetSource, EnsembleSettings, FoldSettings, ModelEntry, RunConfig,
    TrainSettings,
};
pub use cv::{build_manifest, fresh_run_dir, resolve_out_root, run_cv, CvOptions, CvOutcome, CvSummary, JobFailure};
pub use fuse::{plan_ensemble, run_ensemble, EnsembleOutcome};
pub use table::{distribution_table, render_table, summary_rows, SummaryRow, TableFormat};

use crate::dataset::ClassLabel;
use crate::ensemble::TieBreak;
use crate::error::{Error, Result};
use crate::neuralnet::Prediction;

/// Environment variable that replaces the built-in output root `runs`.
pub const RUN_ROOT_ENV: &str = "HARNESS_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn source_config(&self) -> PathBuf {
        self.root.join("config.source.toml")
    }

    pub fn run_info(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.json")
    }

    pub fn model_dir(&self, fold: usize, model: &str) -> PathBuf {
        self.root.join(format!("fold{fold}")).join(format!("model_{model}"))
    }

    pub fn mean_report(&self, model: &str) -> PathBuf {
        self.root.join("reports").join(format!("{model}.json"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("cv_summary.json")
    }

    pub fn ensemble_dir(&self, members: usize, tie_break: TieBreak) -> PathBuf {
        let tie = match tie_break {
            TieBreak::SummedProbability => "summed_probability",
            TieBreak::BestMember => "best_member",
        };
        self.root.join(format!("ensemble_m{members}_{tie}"))
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        let path = self.config();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn read_summary(&self) -> Result<CvSummary> {
        read_json(&self.summary())
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub label: ClassLabel,
    pub predicted: ClassLabel,
    pub probabilities: [f64; 3],
}

pub fn write_predictions(path: &Path, preds: &[(String, Prediction, ClassLabel)]) -> Result<()> {
    let records = preds.iter().map(|(id, p, l)| PredictionRecord {
        sample_id: id.clone(),
        label: *l,
        predicted: p.predicted,
        probabilities: p.probabilities,
    });
    write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, Prediction, ClassLabel)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line)?;
        out.push((
            r.sample_id,
            Prediction {
                probabilities: r.probabilities,
                predicted: r.predicted,
            },
            r.label,
        ));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
