use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counts with leukemia (label 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Predicts 1 when `p >= threshold`.
pub fn confusion(probabilities: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    if probabilities.len() != labels.len() {
        return Err(MetricsError::Data(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, 1) => cm.tp += 1,
            (true, 0) => cm.fp += 1,
            (false, 0) => cm.tn += 1,
            (false, 1) => cm.fn_ += 1,
            (_, other) => return Err(MetricsError::Data(format!("label {other} is not 0 or 1"))),
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the ratio had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Data("empty confusion matrix".into()));
    }
    let (accuracy, _) = ratio(cm.tp + cm.tn, cm.total());
    let (precision, pu) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, ru) = ratio(cm.tp, cm.tp + cm.fn_);
    let f1_undefined = pu || ru || precision + recall == 0.0;
    let f1 = if f1_undefined { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics { accuracy, precision, recall, f1, precision_undefined: pu, recall_undefined: ru, f1_undefined })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// Descending thresholds, starting with a `+∞` sentinel at (0, 0).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over every distinct score with trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != labels.len() {
        return Err(MetricsError::Data("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Data("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok(Roc { points, auc })
}

/// `metric,value` rows.
pub fn write_metrics_csv(path: &Path, m: &Metrics, auc: Option<f64>, cm: &ConfusionMatrix) -> Result<(), MetricsError> {
    let mut s = String::from("metric,value\n");
    let rows = [
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
    ];
    for (k, v) in rows {
        writeln!(s, "{k},{v:?}").expect("string write");
    }
    if let Some(a) = auc {
        writeln!(s, "auc,{a:?}").expect("string write");
    }
    for (k, v) in [("tp", cm.tp), ("fp", cm.fp), ("tn", cm.tn), ("fn", cm.fn_)] {
        writeln!(s, "{k},{v}").expect("string write");
    }
    for (k, v) in [
        ("precision_undefined", m.precision_undefined),
        ("recall_undefined", m.recall_undefined),
        ("f1_undefined", m.f1_undefined),
    ] {
        writeln!(s, "{k},{}", u8::from(v)).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// `threshold,fpr,tpr` rows in descending threshold order.
pub fn write_roc_csv(path: &Path, roc: &Roc) -> Result<(), MetricsError> {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        writeln!(s, "{:?},{:?},{:?}", p.threshold, p.fpr, p.tpr).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}
