//! Member selection and majority voting.
//!
//! Each member contributes one vote (its argmax label). The decided class is
//! the mode of the votes; when several classes share the top count, the tie
//! rule in [`EnsembleSpec::tie_break`] picks among them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::metrics::{accumulate, ConfusionMatrix, MetricsReport};
use crate::neuralnet::{Prediction, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    #[default]
    MajorityMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Among the tied classes, the one with the largest probability summed over all members.
    #[default]
    SummedProbability,
    /// The vote of the highest-ranked member that voted for one of the tied classes.
    BestMember,
}

impl std::str::FromStr for TieBreak {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "summed_probability" => Ok(TieBreak::SummedProbability),
            "best_member" => Ok(TieBreak::BestMember),
            other => Err(format!("unknown tie-break rule {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Members in rank order (best first).
    pub member_ids: Vec<String>,
    #[serde(default)]
    pub vote_rule: VoteRule,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
}

impl EnsembleSpec {
    pub fn new(member_ids: Vec<String>, tie_break: TieBreak) -> Result<Self> {
        let spec = Self {
            member_ids,
            vote_rule: VoteRule::MajorityMode,
            tie_break,
            selection_metric: SelectionMetric::Accuracy,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_ids.len() < 2 {
            return Err(Error::Invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                self.member_ids.len()
            )));
        }
        let unique: BTreeSet<&String> = self.member_ids.iter().collect();
        if unique.len() != self.member_ids.len() {
            return Err(Error::Invalid("ensemble member ids must be unique".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub sample_id: String,
    pub votes: Vec<ClassLabel>,
    pub probabilities: Vec<[f64; NUM_CLASSES]>,
    pub decided: ClassLabel,
    pub tie_broken: bool,
}

impl VoteOutcome {
    /// Mean of the member probability vectors.
    pub fn mean_probabilities(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for p in &self.probabilities {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        let n = self.probabilities.len() as f64;
        out.map(|v| v / n)
    }
}

/// Scores used to rank candidate members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberScore {
    pub accuracy: f64,
    pub auc: Option<f64>,
}

impl From<&MetricsReport> for MemberScore {
    fn from(r: &MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            auc: r.macro_avg.auc,
        }
    }
}

/// Rank by accuracy, then AUC (undefined last), then id; keep the top `m`.
pub fn rank_members(scores: &BTreeMap<String, MemberScore>, m: usize) -> Result<Vec<String>> {
    if m < 2 {
        return Err(Error::Invalid(format!("member count must be at least 2, got {m}")));
    }
    if m > scores.len() {
        return Err(Error::Invalid(format!(
            "asked for {m} members but only {} models are available",
            scores.len()
        )));
    }
    let mut ranked: Vec<(&String, &MemberScore)> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.1.accuracy
            .total_cmp(&a.1.accuracy)
            .then_with(|| {
                let ka = a.1.auc.unwrap_or(f64::NEG_INFINITY);
                let kb = b.1.auc.unwrap_or(f64::NEG_INFINITY);
                kb.total_cmp(&ka)
            })
            .then_with(|| a.0.cmp(b.0))
    });
    Ok(ranked.into_iter().take(m).map(|(id, _)| id.clone()).collect())
}

/// Pick the `m` best models by mean cross-validated accuracy.
pub fn select_members(reports: &BTreeMap<String, MetricsReport>, m: usize) -> Result<Vec<String>> {
    let scores = reports.iter().map(|(k, r)| (k.clone(), MemberScore::from(r))).collect();
    rank_members(&scores, m)
}

/// Combine one sample's member predictions (in `spec.member_ids` order).
pub fn vote(spec: &EnsembleSpec, sample_id: &str, member_predictions: &[Prediction]) -> Result<VoteOutcome> {
    if member_predictions.len() != spec.member_ids.len() {
        return Err(Error::Invalid(format!(
            "{} member predictions for {} members",
            member_predictions.len(),
            spec.member_ids.len()
        )));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for p in member_predictions {
        counts[p.predicted.index()] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..NUM_CLASSES).filter(|&c| counts[c] == top).collect();
    let (decided, tie_broken) = if tied.len() == 1 {
        (tied[0], false)
    } else {
        let winner = match spec.tie_break {
            TieBreak::SummedProbability => {
                let mut sums = [0.0; NUM_CLASSES];
                for p in member_predictions {
                    for (s, v) in sums.iter_mut().zip(p.probabilities) {
                        *s += v;
                    }
                }
                let mut best = tied[0];
                for &c in &tied[1..] {
                    if sums[c] > sums[best] {
                        best = c;
                    }
                }
                best
            }
            TieBreak::BestMember => member_predictions
                .iter()
                .map(|p| p.predicted.index())
                .find(|c| tied.contains(c))
                .expect("a tied class received votes"),
        };
        (winner, true)
    };
    Ok(VoteOutcome {
        sample_id: sample_id.to_string(),
        votes: member_predictions.iter().map(|p| p.predicted).collect(),
        probabilities: member_predictions.iter().map(|p| p.probabilities).collect(),
        decided: ClassLabel::from_index(decided).expect("index < 3"),
        tie_broken,
    })
}

/// One member's evaluation output: `(sample_id, prediction, true label)`.
pub type MemberEval = Vec<(String, Prediction, ClassLabel)>;

/// Vote on every sample that all members evaluated. Outcomes follow the
/// sample order of the first member.
pub fn evaluate_ensemble(
    spec: &EnsembleSpec,
    per_member: &BTreeMap<String, MemberEval>,
) -> Result<(Vec<VoteOutcome>, ConfusionMatrix)> {
    spec.validate()?;
    let mut lookups = Vec::with_capacity(spec.member_ids.len());
    for id in &spec.member_ids {
        let eval = per_member
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("no evaluation for member {id}")))?;
        let map: BTreeMap<&str, (&Prediction, ClassLabel)> =
            eval.iter().map(|(s, p, l)| (s.as_str(), (p, *l))).collect();
        lookups.push(map);
    }
    let all_ids: BTreeSet<&str> = lookups.iter().flat_map(|m| m.keys().copied()).collect();
    let missing: Vec<String> = all_ids
        .iter()
        .filter(|id| lookups.iter().any(|m| !m.contains_key(*id)))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::SampleMismatch(missing));
    }
    let first = &per_member[&spec.member_ids[0]];
    let mut outcomes = Vec::with_capacity(first.len());
    let mut pairs = Vec::with_capacity(first.len());
    for (sample_id, _, label) in first {
        let preds: Vec<Prediction> = lookups.iter().map(|m| *m[sample_id.as_str()].0).collect();
        if let Some(m) = lookups.iter().find(|m| m[sample_id.as_str()].1 != *label) {
            let other = m[sample_id.as_str()].1;
            return Err(Error::Invalid(format!(
                "members disagree on the true label of {sample_id}: {label} vs {other}"
            )));
        }
        let outcome = vote(spec, sample_id, &preds)?;
        pairs.push((*label, outcome.decided));
        outcomes.push(outcome);
    }
    Ok((outcomes, accumulate(&pairs)))
}
