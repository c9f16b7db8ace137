//! Probe classifiers and scores: adjusted parity, macro-F1, random-forest
//! probes, scalar 2-means change detection and a 2-D PCA projection.

mod forest;
mod kmeans;
mod pca;

pub use forest::{forest_fit, forest_predict, ForestModel, ForestParams, Tree, TreeNode};
pub use kmeans::{change_detection_accuracy, kmeans2_scalar, pair_distances};
pub use pca::pca2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("adjusted parity needs at least two domain scores, got {0}")]
    TooFewDomains(usize),
    #[error("score {0} outside [0, 1]")]
    ScoreRange(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("label {label} outside 0..{n_classes}")]
    Label { label: usize, n_classes: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Rescales accuracy so that chance level `1/n` maps to 0 and perfect to 1,
/// clipping below chance at 0.
pub fn normalize_score(acc: f64, n_classes: usize) -> f64 {
    let base = 1.0 / n_classes as f64;
    ((acc - base) / (1.0 - base)).max(0.0)
}

/// Mean of `xs` and its population standard deviation.
pub fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `S̄·(1 − 2σ)` over per-domain scores in `[0, 1]`, with σ the population
/// standard deviation.
pub fn adjusted_parity(scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewDomains(scores.len()));
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricsError::ScoreRange(s));
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Ok(scores[0]);
    }
    let (mean, std) = mean_and_population_std(scores);
    Ok(mean * (1.0 - 2.0 * std))
}

fn check_labels(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = pred.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(MetricsError::Label { label, n_classes });
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1. A class that appears in neither the
/// predictions nor the truth is left out of the mean.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    check_labels(pred, truth, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        counted += 1;
    }
    Ok(sum / counted as f64)
}

/// Mean with its standard error over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over `√n`; 0 for a single run.
    pub std_err: f64,
    pub n: usize,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std_err: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            / (n as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std_err, n }
}
