use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{read_predictions, CvSummary, write_json, write_jsonl, write_text, RunLayout};
use crate::dataset::ClassLabel;
use crate::ensemble::{evaluate_ensemble, rank_members, select_members, EnsembleSpec, MemberEval, MemberScore, TieBreak, VoteOutcome};
use crate::error::{Error, Result};
use crate::metrics::{report, roc, MetricsReport, RocCurve, ScoredSample};
use crate::plots::roc_svg;

#[derive(Debug)]
pub struct EnsembleOutcome {
    pub dir: PathBuf,
    pub spec: EnsembleSpec,
    /// Mean over the per-fold ensemble reports, the same reduction used for members.
    pub report: MetricsReport,
    /// One report over the votes pooled from every fold.
    pub pooled: MetricsReport,
    pub member_reports: BTreeMap<String, MetricsReport>,
    pub votes: usize,
}

#[derive(Serialize)]
struct MemberInfo {
    id: String,
    rank: usize,
    mean_accuracy: f64,
    mean_macro_auc: Option<f64>,
}

#[derive(Serialize)]
struct EnsembleFile<'a> {
    spec: &'a EnsembleSpec,
    members: Vec<MemberInfo>,
    folds: usize,
    bagging: super::Bagging,
}

#[derive(Serialize)]
struct VoteRecord<'a> {
    fold: usize,
    label: ClassLabel,
    #[serde(flatten)]
    outcome: &'a VoteOutcome,
}

fn scored(outcomes: &[VoteOutcome], labels: &BTreeMap<String, ClassLabel>) -> Vec<ScoredSample> {
    outcomes
        .iter()
        .map(|o| (o.sample_id.clone(), o.mean_probabilities(), labels[&o.sample_id]))
        .collect()
}

fn load_member_reports(layout: &RunLayout, members: usize) -> Result<(CvSummary, BTreeMap<String, MetricsReport>)> {
    let summary = layout.read_summary()?;
    let mut member_reports = BTreeMap::new();
    for name in &summary.completed {
        member_reports.insert(name.clone(), MetricsReport::read_json(&layout.mean_report(name))?);
    }
    if members < 2 {
        return Err(Error::Config("an ensemble needs at least 2 members".into()));
    }
    if member_reports.len() < members {
        return Err(Error::Config(format!(
            "run has {} completed models, fewer than the {members} requested",
            member_reports.len()
        )));
    }
    Ok((summary, member_reports))
}

/// The `members` models an ensemble over this run would fuse, best first.
pub fn plan_ensemble(run_dir: &Path, members: usize) -> Result<Vec<String>> {
    let (_, reports) = load_member_reports(&RunLayout::new(run_dir), members)?;
    select_members(&reports, members)
}

/// Fuse the top `members` models of a finished cross-validation run by
/// majority vote and write the ensemble artifacts to a new subdirectory.
pub fn run_ensemble(run_dir: &Path, members: usize, tie_break: TieBreak) -> Result<EnsembleOutcome> {
    let layout = RunLayout::new(run_dir);
    let cfg = layout.read_config()?;
    let (summary, member_reports) = load_member_reports(&layout, members)?;
    let scores: BTreeMap<String, MemberScore> =
        member_reports.iter().map(|(k, r)| (k.clone(), MemberScore::from(r))).collect();
    let ranked = rank_members(&scores, members)?;
    let spec = EnsembleSpec::new(ranked, tie_break)?;

    let dir = layout.ensemble_dir(members, tie_break);
    fs::create_dir(&dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::Config(format!("{} already exists; ensembles are never overwritten", dir.display()))
        } else {
            Error::io(&dir, e)
        }
    })?;

    let mut fold_reports = Vec::with_capacity(summary.k);
    let mut all_votes = Vec::new();
    let mut all_scored = Vec::new();
    let mut all_pairs = Vec::new();
    for fold in 0..summary.k {
        let mut per_member: BTreeMap<String, MemberEval> = BTreeMap::new();
        for id in &spec.member_ids {
            per_member.insert(
                id.clone(),
                read_predictions(&layout.model_dir(fold, id).join("predictions.jsonl"))?,
            );
        }
        let labels: BTreeMap<String, ClassLabel> = per_member[&spec.member_ids[0]]
            .iter()
            .map(|(s, _, l)| (s.clone(), *l))
            .collect();
        let (outcomes, cm) = evaluate_ensemble(&spec, &per_member)?;
        let fold_scored = scored(&outcomes, &labels);
        fold_reports.push(report(&cm, &fold_scored)?);
        for o in &outcomes {
            all_pairs.push((labels[&o.sample_id], o.decided));
        }
        all_scored.extend(fold_scored);
        all_votes.extend(outcomes.into_iter().map(|o| (fold, labels[&o.sample_id], o)));
    }
    let mean = MetricsReport::mean_of(&fold_reports)?;
    let pooled = report(&crate::metrics::accumulate(&all_pairs), &all_scored)?;

    let info = EnsembleFile {
        spec: &spec,
        members: spec
            .member_ids
            .iter()
            .enumerate()
            .map(|(rank, id)| MemberInfo {
                id: id.clone(),
                rank: rank + 1,
                mean_accuracy: scores[id].accuracy,
                mean_macro_auc: scores[id].auc,
            })
            .collect(),
        folds: summary.k,
        bagging: cfg.ensemble.bagging,
    };
    write_json(&dir.join("ensemble.json"), &info)?;
    write_jsonl(
        &dir.join("votes.jsonl"),
        all_votes.iter().map(|(fold, label, outcome)| VoteRecord {
            fold: *fold,
            label: *label,
            outcome,
        }),
    )?;
    mean.write_json(&dir.join("report.json"))?;
    pooled.write_json(&dir.join("report_pooled.json"))?;
    write_text(&dir.join("confusion.csv"), &pooled.confusion.to_csv())?;

    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    for c in ClassLabel::ALL {
        let s: Vec<(f64, bool)> = all_scored.iter().map(|(_, p, t)| (p[c.index()], *t == c)).collect();
        if let Ok(r) = roc(&s) {
            curves.push((c.name().to_string(), r));
        }
    }
    let pooled_scores: Vec<(f64, bool)> = all_scored
        .iter()
        .flat_map(|(_, p, t)| ClassLabel::ALL.iter().map(move |c| (p[c.index()], t == c)))
        .collect();
    if let Ok(r) = roc(&pooled_scores) {
        curves.push(("micro".to_string(), r));
    }
    let mut csv = String::from("curve,threshold,fpr,tpr\n");
    for (name, curve) in &curves {
        for p in &curve.points {
            writeln!(csv, "{name},{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
    }
    write_text(&dir.join("roc.csv"), &csv)?;
    let labelled: Vec<(String, &RocCurve)> = curves.iter().map(|(n, c)| (n.clone(), c)).collect();
    let title = format!("Ensemble of {}", spec.member_ids.join(", "));
    write_text(&dir.join("roc.svg"), &roc_svg(&title, &labelled))?;

    Ok(EnsembleOutcome {
        dir,
        spec,
        report: mean,
        pooled,
        member_reports,
        votes: all_votes.len(),
    })
}
