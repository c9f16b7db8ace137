use super::MetricsError;
use crate::tensor::Tensor;

const MAX_ITERS: usize = 10_000;

/// Two-cluster Lloyd iterations on scalars, starting from the minimum and
/// maximum. Label 0 is the cluster with the smaller centroid; identical
/// inputs all get label 0.
pub fn kmeans2_scalar(d: &[f64]) -> Result<Vec<u8>, MetricsError> {
    if d.len() < 2 {
        return Err(MetricsError::Invalid(format!(
            "need at least 2 values, got {}",
            d.len()
        )));
    }
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(MetricsError::Invalid("values must be finite".into()));
    }
    if lo == hi {
        return Ok(vec![0; d.len()]);
    }
    let (mut c0, mut c1) = (lo, hi);
    let assign = |v: f64, c0: f64, c1: f64| ((v - c0).abs() > (v - c1).abs()) as u8;
    for _ in 0..MAX_ITERS {
        let (mut s, mut n) = ([0.0; 2], [0usize; 2]);
        for &v in d {
            let k = assign(v, c0, c1) as usize;
            s[k] += v;
            n[k] += 1;
        }
        let n0 = if n[0] > 0 { s[0] / n[0] as f64 } else { c0 };
        let n1 = if n[1] > 0 { s[1] / n[1] as f64 } else { c1 };
        let delta = (n0 - c0).abs().max((n1 - c1).abs());
        c0 = n0;
        c1 = n1;
        if delta < 1e-9 {
            break;
        }
    }
    let flip = c0 > c1;
    Ok(d.iter().map(|&v| assign(v, c0, c1) ^ flip as u8).collect())
}

/// Row-wise Euclidean distances between two `N × d` embedding sets.
pub fn pair_distances(a: &Tensor, b: &Tensor) -> Result<Vec<f64>, MetricsError> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(MetricsError::Invalid(format!(
            "embedding shapes differ or are not N x d: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Fraction of pairs whose 2-means cluster of embedding distance matches
/// `changed` (1 = class changed, expected far apart).
pub fn change_detection_accuracy(
    a: &Tensor,
    b: &Tensor,
    changed: &[u8],
) -> Result<f64, MetricsError> {
    let d = pair_distances(a, b)?;
    if d.len() != changed.len() {
        return Err(MetricsError::Length(d.len(), changed.len()));
    }
    let pred = kmeans2_scalar(&d)?;
    Ok(pred.iter().zip(changed).filter(|(p, c)| p == c).count() as f64 / d.len() as f64)
}
