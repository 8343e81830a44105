//! Confusion matrices, one-vs-rest diagnostic rates, ROC curves and AUC.
//!
//! Rates with a zero denominator are `None` (serialised as JSON `null`), never
//! NaN or a silent zero. Multi-class summaries are macro averages of the
//! one-vs-rest values; micro averages are reported alongside.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::neuralnet::{Prediction, NUM_CLASSES};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::Invalid(format!("confusion matrix needs at least 2 classes, got {k}")));
        }
        Ok(Self {
            class_names,
            counts: vec![vec![0; k]; k],
        })
    }

    /// Empty 3×3 matrix over the diagnostic classes.
    pub fn three_class() -> Self {
        Self::new(ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()).expect("3 classes")
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::Invalid("cannot merge confusion matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// CSV with a header of predicted class names and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for n in &self.class_names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(name);
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty confusion CSV".into()))?;
        let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut cm = Self::new(names)?;
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if i >= cm.num_classes() || cells.len() != cm.num_classes() + 1 {
                return Err(Error::Invalid(format!("malformed confusion CSV row {line:?}")));
            }
            for (j, c) in cells[1..].iter().enumerate() {
                cm.counts[i][j] = c
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad count {c:?} in confusion CSV")))?;
            }
        }
        Ok(cm)
    }
}

/// Tally `(true, predicted)` pairs into a 3×3 matrix.
pub fn accumulate(pairs: &[(ClassLabel, ClassLabel)]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::three_class();
    for &(t, p) in pairs {
        cm.record(t.index(), p.index());
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for BinaryCounts {
    type Output = BinaryCounts;

    fn add(self, o: BinaryCounts) -> BinaryCounts {
        BinaryCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Binary view with class `positive` (matrix index) against all others.
pub fn one_vs_rest(cm: &ConfusionMatrix, positive: usize) -> BinaryCounts {
    let tp = cm.counts[positive][positive];
    let row: u64 = cm.counts[positive].iter().sum();
    let col: u64 = cm.counts.iter().map(|r| r[positive]).sum();
    let fn_ = row - tp;
    let fp = col - tp;
    BinaryCounts {
        tp,
        fp,
        fn_,
        tn: cm.total() - tp - fn_ - fp,
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ScalarMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub npv: Option<f64>,
}

pub fn scalar_metrics(c: &BinaryCounts) -> ScalarMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    // Specificity is taken as 1 − fpr so the complement holds bit-exactly.
    let fpr = ratio(c.fp, c.fp + c.tn);
    ScalarMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        specificity: fpr.map(|f| 1.0 - f),
        sensitivity,
        f1,
        fpr,
        npv: ratio(c.tn, c.tn + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        s
    }
}

/// Sweep thresholds over the distinct scores (descending, tied scores as one
/// step) and integrate the curve with the trapezoid rule.
pub fn roc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    let positives = scores.iter().filter(|s| s.1).count() as u64;
    let negatives = scores.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::RocUndefined);
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::Invalid("ROC scores must not be NaN".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc2 = 0u64; // twice the area, in units of 1/(P·N)
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc2 += (fp - fp0) * (tp + tp0);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc2 as f64 / (2 * positives * negatives) as f64,
    })
}

/// One-vs-rest metrics for a class, including its AUC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub npv: Option<f64>,
    pub auc: Option<f64>,
}

impl ClassMetrics {
    fn from_scalars(s: &ScalarMetrics, auc: Option<f64>) -> Self {
        Self {
            sensitivity: s.sensitivity,
            specificity: s.specificity,
            precision: s.precision,
            f1: s.f1,
            fpr: s.fpr,
            npv: s.npv,
            auc,
        }
    }

    fn fields(&self) -> [Option<f64>; 7] {
        [self.sensitivity, self.specificity, self.precision, self.f1, self.fpr, self.npv, self.auc]
    }

    fn from_fields(f: [Option<f64>; 7]) -> Self {
        Self {
            sensitivity: f[0],
            specificity: f[1],
            precision: f[2],
            f1: f[3],
            fpr: f[4],
            npv: f[5],
            auc: f[6],
        }
    }

    /// Field-wise mean over the entries where the field is defined.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ClassMetrics>) -> ClassMetrics {
        let mut sums = [0.0f64; 7];
        let mut counts = [0usize; 7];
        for m in items {
            for (i, v) in m.fields().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        let mut out = [None; 7];
        for i in 0..7 {
            if counts[i] > 0 {
                out[i] = Some(sums[i] / counts[i] as f64);
            }
        }
        Self::from_fields(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<ClassLabel, ClassMetrics>,
    pub macro_avg: ClassMetrics,
    pub micro_avg: ClassMetrics,
    pub accuracy: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

/// Per-sample class probabilities with the true label.
pub type ScoredSample = (String, [f64; NUM_CLASSES], ClassLabel);

/// Full report from a confusion matrix and the per-sample probabilities that
/// produced it.
pub fn report(cm: &ConfusionMatrix, per_sample: &[ScoredSample]) -> Result<MetricsReport> {
    if cm.num_classes() != NUM_CLASSES {
        return Err(Error::Invalid(format!(
            "report expects a {NUM_CLASSES}-class matrix, got {}",
            cm.num_classes()
        )));
    }
    if cm.total() != per_sample.len() as u64 {
        return Err(Error::Invalid(format!(
            "confusion matrix counts {} samples but {} probability rows were given",
            cm.total(),
            per_sample.len()
        )));
    }
    for c in ClassLabel::ALL {
        let n = per_sample.iter().filter(|s| s.2 == c).count() as u64;
        if n != cm.row_total(c.index()) {
            return Err(Error::Invalid(format!(
                "class {c}: {n} labelled samples but matrix row holds {}",
                cm.row_total(c.index())
            )));
        }
    }
    let accuracy = cm
        .accuracy()
        .ok_or_else(|| Error::Invalid("cannot report on an empty confusion matrix".into()))?;

    let mut per_class = BTreeMap::new();
    let mut pooled = BinaryCounts::default();
    let mut pooled_scores = Vec::with_capacity(per_sample.len() * NUM_CLASSES);
    for c in ClassLabel::ALL {
        let counts = one_vs_rest(cm, c.index());
        pooled = pooled + counts;
        let scores: Vec<(f64, bool)> = per_sample
            .iter()
            .map(|(_, p, t)| (p[c.index()], *t == c))
            .collect();
        pooled_scores.extend_from_slice(&scores);
        let auc = roc(&scores).ok().map(|r| r.auc);
        per_class.insert(c, ClassMetrics::from_scalars(&scalar_metrics(&counts), auc));
    }
    let macro_avg = ClassMetrics::mean(per_class.values());
    let micro_avg = ClassMetrics::from_scalars(
        &scalar_metrics(&pooled),
        roc(&pooled_scores).ok().map(|r| r.auc),
    );
    Ok(MetricsReport {
        per_class,
        macro_avg,
        micro_avg,
        accuracy,
        samples: cm.total(),
        confusion: cm.clone(),
    })
}

/// Report straight from predictions: the matrix is tallied from argmax labels.
pub fn report_from_predictions(preds: &[(String, Prediction, ClassLabel)]) -> Result<MetricsReport> {
    let pairs: Vec<(ClassLabel, ClassLabel)> = preds.iter().map(|(_, p, t)| (*t, p.predicted)).collect();
    let scored: Vec<ScoredSample> = preds
        .iter()
        .map(|(id, p, t)| (id.clone(), p.probabilities, *t))
        .collect();
    report(&accumulate(&pairs), &scored)
}

impl MetricsReport {
    /// Cross-fold summary: scalar fields are means over the folds, the
    /// confusion matrix is the sum.
    pub fn mean_of(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Invalid("cannot average zero reports".into()))?;
        let mut confusion = first.confusion.clone();
        for r in &reports[1..] {
            confusion.merge(&r.confusion)?;
        }
        let per_class = ClassLabel::ALL
            .iter()
            .map(|c| (*c, ClassMetrics::mean(reports.iter().filter_map(|r| r.per_class.get(c)))))
            .collect();
        Ok(MetricsReport {
            per_class,
            macro_avg: ClassMetrics::mean(reports.iter().map(|r| &r.macro_avg)),
            micro_avg: ClassMetrics::mean(reports.iter().map(|r| &r.micro_avg)),
            accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64,
            samples: confusion.total(),
            confusion,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_accumulate_is_zero() {
        let cm = accumulate(&[]);
        assert_eq!(cm.counts, vec![vec![0; 3]; 3]);
        assert_eq!(cm.accuracy(), None);
    }

    #[test]
    fn accumulate_single_cell() {
        let cm = accumulate(&[(ClassLabel::Benign, ClassLabel::Benign); 5]);
        assert_eq!(cm.get(1, 1), 5);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn diagonal_one_vs_rest() {
        let mut cm = ConfusionMatrix::three_class();
        cm.counts = vec![vec![10, 0, 0], vec![0, 10, 0], vec![0, 0, 10]];
        for c in 0..3 {
            assert_eq!(one_vs_rest(&cm, c), BinaryCounts { tp: 10, fp: 0, fn_: 0, tn: 20 });
        }
    }

    #[test]
    fn hand_built_one_vs_rest() {
        let mut cm = ConfusionMatrix::three_class();
        cm.counts = vec![vec![5, 1, 0], vec![2, 7, 1], vec![0, 0, 4]];
        let b = one_vs_rest(&cm, ClassLabel::Benign.index());
        assert_eq!(b, BinaryCounts { tp: 7, fn_: 3, fp: 1, tn: 9 });
        for c in 0..3 {
            assert_eq!(one_vs_rest(&cm, c).total(), cm.total());
        }
    }

    #[test]
    fn scalar_metrics_by_hand() {
        let m = scalar_metrics(&BinaryCounts { tp: 8, fn_: 2, fp: 1, tn: 9 });
        assert_eq!(m.sensitivity, Some(0.8));
        assert_eq!(m.specificity, Some(0.9));
        assert_eq!(m.accuracy, Some(0.85));
        assert_eq!(m.precision, Some(8.0 / 9.0));
        assert_eq!(m.fpr, Some(0.1));
        assert_eq!(m.npv, Some(9.0 / 11.0));
        let f1 = m.f1.unwrap();
        assert!((f1 - 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8)).abs() < 1e-15);
        assert!((f1 - 0.8421).abs() < 1e-4);
    }

    #[test]
    fn undefined_rates_are_none() {
        let m = scalar_metrics(&BinaryCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.sensitivity, Some(0.0));
        let zero = scalar_metrics(&BinaryCounts { tp: 0, fp: 2, tn: 5, fn_: 3 });
        assert_eq!(zero.f1, Some(0.0));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"precision\":null"));
        assert!(!json.contains("NaN"));
    }

    #[test]
    fn perfect_classifier() {
        let m = scalar_metrics(&BinaryCounts { tp: 4, fp: 0, tn: 6, fn_: 0 });
        for v in [m.accuracy, m.precision, m.specificity, m.sensitivity, m.f1, m.npv] {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!(m.fpr, Some(0.0));
    }

    #[test]
    fn roc_examples() {
        let r = roc(&[(0.9, true), (0.8, true), (0.7, false), (0.1, false)]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc(&[(0.8, true), (0.4, true), (0.6, false), (0.2, false)]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(r.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(matches!(roc(&[(0.2, true), (0.3, true)]), Err(Error::RocUndefined)));
    }

    #[test]
    fn tied_scores_form_one_step() {
        let r = roc(&[(0.5, true), (0.5, false)]).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn report_perfect_predictions() {
        let preds: Vec<(String, Prediction, ClassLabel)> = (0..9)
            .map(|i| {
                let c = ClassLabel::ALL[i % 3];
                let mut p = [0.1; 3];
                p[c.index()] = 0.8;
                (format!("s{i}"), Prediction::from_probabilities(p), c)
            })
            .collect();
        let r = report_from_predictions(&preds).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_avg.sensitivity, Some(1.0));
        assert_eq!(r.macro_avg.specificity, Some(1.0));
        assert_eq!(r.macro_avg.auc, Some(1.0));
        let mean_sens = r.per_class.values().map(|m| m.sensitivity.unwrap()).sum::<f64>() / 3.0;
        assert_eq!(r.macro_avg.sensitivity, Some(mean_sens));
    }

    #[test]
    fn report_rejects_inconsistent_inputs() {
        let cm = accumulate(&[(ClassLabel::Normal, ClassLabel::Normal)]);
        assert!(report(&cm, &[]).is_err());
        let wrong_label = vec![("a".to_string(), [1.0, 0.0, 0.0], ClassLabel::Benign)];
        assert!(report(&cm, &wrong_label).is_err());
    }

    #[test]
    fn confusion_csv_roundtrip() {
        let mut cm = ConfusionMatrix::three_class();
        cm.counts = vec![vec![5, 1, 0], vec![2, 7, 1], vec![0, 0, 4]];
        let csv = cm.to_csv();
        assert!(csv.starts_with("true,normal,benign,malignant\nnormal,5,1,0\n"));
        assert_eq!(ConfusionMatrix::from_csv(&csv).unwrap(), cm);
    }

    #[test]
    fn roc_csv_has_header_and_infinite_first_threshold() {
        let r = roc(&[(0.8, true), (0.2, false)]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }
}
