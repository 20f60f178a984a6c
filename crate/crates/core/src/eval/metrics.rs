use std::fmt;
use std::ops::AddAssign;

use super::{check_len, EvalError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Counts over pixels where `mask` is set.
pub fn confusion(pred: &[bool], gt: &[bool], mask: &[bool]) -> Result<ConfusionCounts> {
    check_len("gt", pred.len(), gt.len())?;
    check_len("mask", pred.len(), mask.len())?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(c)
}

/// Sensitivity, specificity, precision, accuracy, G-mean, F1 and AUC.
/// A metric whose denominator vanishes is `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsReport {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub pr: Option<f64>,
    pub acc: Option<f64>,
    pub g: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Threshold metrics of `c`; `auc` is left empty.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let se = ratio(c.tp, c.tp + c.fn_);
    let sp = ratio(c.tn, c.tn + c.fp);
    let pr = ratio(c.tp, c.tp + c.fp);
    let acc = ratio(c.tp + c.tn, c.total());
    let g = se.zip(sp).map(|(a, b)| (a * b).sqrt());
    let f1 = match (pr, se) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    MetricsReport {
        se,
        sp,
        pr,
        acc,
        g,
        f1,
        auc: None,
    }
}

impl MetricsReport {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("se", self.se),
            ("sp", self.sp),
            ("pr", self.pr),
            ("acc", self.acc),
            ("g", self.g),
            ("f1", self.f1),
            ("auc", self.auc),
        ]
    }

    /// Element-wise mean of reports; a metric absent in any report is absent.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let avg = |f: fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricsReport {
            se: avg(|r| r.se),
            sp: avg(|r| r.sp),
            pr: avg(|r| r.pr),
            acc: avg(|r| r.acc),
            g: avg(|r| r.g),
            f1: avg(|r| r.f1),
            auc: avg(|r| r.auc),
        }
    }
}

pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".into(),
    }
}

/// One `key=value` line per metric, `NA` when absent.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={}", format_metric(v))?;
        }
        Ok(())
    }
}
