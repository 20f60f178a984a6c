//! Masked segmentation metrics: confusion counts, the six threshold
//! metrics, exact ROC/AUC and Otsu binarization.

mod metrics;
mod otsu;
mod roc;

pub use metrics::{compute_metrics, confusion, format_metric, ConfusionCounts, MetricsReport};
pub use otsu::{binarize, otsu_bin, otsu_threshold, OTSU_BINS};
pub use roc::{roc_auc, RocCurve};

use thiserror::Error;

use crate::data::{pad_sample, padded_size, DataError, Image, Sample};
use crate::model::{Generator, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {what} has {found} values, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("ROC needs both classes inside the mask: {positives} positives, {negatives} negatives")]
    DegenerateClass { positives: usize, negatives: usize },
    #[error("nothing to evaluate")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(EvalError::Length { what, expected, found })
    }
}

/// Probability map of `image` at its own size: pad to the size grid, run
/// the generator in eval mode, crop the padding off.
pub fn predict_map(g: &Generator, image: &Image) -> Result<Image> {
    let (pw, ph) = padded_size(image.width(), image.height());
    let blank = Image::zeros(image.width(), image.height(), 1)?;
    let mask = crate::data::FovMask::full(image.width(), image.height())?;
    let sample = Sample::new(image.clone(), blank, mask)?;
    let (padded, rec) = pad_sample(&sample, pw, ph)?;
    let out = g.predict(&padded.image.to_tensor())?;
    let map = Image::from_tensor(&out, 0)?;
    Ok(rec.unpad_image(&map)?)
}

/// One image's evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Pooled over every in-mask pixel of the dataset.
    pub report: MetricsReport,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageResult>,
}

impl Evaluation {
    /// Unweighted mean over images of each metric that is defined.
    pub fn macro_average(&self) -> MetricsReport {
        let reports: Vec<MetricsReport> = self.per_image.iter().map(|r| compute_metrics(&r.counts)).collect();
        let mean = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        MetricsReport {
            se: mean(|r| r.se),
            sp: mean(|r| r.sp),
            pr: mean(|r| r.pr),
            acc: mean(|r| r.acc),
            g: mean(|r| r.g),
            f1: mean(|r| r.f1),
            auc: None,
        }
    }
}

/// Scores one probability map against its sample: Otsu threshold over the
/// in-mask values, then confusion counts.
pub fn score_map(probs: &[f64], sample: &Sample) -> Result<ImageResult> {
    let mask = sample.mask.data();
    let threshold = otsu_threshold(probs, mask)?;
    let pred = binarize(probs, threshold);
    let gt: Vec<bool> = sample.gt.data().iter().map(|&v| v == 1.0).collect();
    Ok(ImageResult {
        threshold,
        counts: confusion(&pred, &gt, mask)?,
    })
}

/// Evaluates `g` on every sample and pools counts and ROC scores.
///
/// With `at_original_size` the map is cropped back before scoring;
/// otherwise the padded map is scored under the padded mask. Both give the
/// same counts because padding lies outside the mask.
pub fn evaluate(g: &Generator, samples: &[Sample], at_original_size: bool) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut counts = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(samples.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let (pw, ph) = padded_size(s.width(), s.height());
        let (padded, rec) = pad_sample(s, pw, ph)?;
        let out = g.predict(&padded.image.to_tensor())?;
        let (probs, scored) = if at_original_size {
            (rec.unpad_values(out.data()), s.clone())
        } else {
            (out.data().to_vec(), padded)
        };
        let result = score_map(&probs, &scored)?;
        counts += result.counts;
        per_image.push(result);
        for ((&p, &m), &y) in probs.iter().zip(scored.mask.data()).zip(scored.gt.data()) {
            if m {
                scores.push(p);
                labels.push(y == 1.0);
            }
        }
    }
    let mut report = compute_metrics(&counts);
    report.auc = match roc_auc(&scores, &labels, &vec![true; scores.len()]) {
        Ok((_, auc)) => Some(auc),
        Err(EvalError::DegenerateClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        report,
        counts,
        per_image,
    })
}
