use super::MetricsError;
use crate::tensor::Tensor;

const TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|r| {
            c[r * d..(r + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenpair of a symmetric PSD matrix; `None` when it is zero.
fn power_iteration(c: &[f64], d: usize) -> Option<(f64, Vec<f64>)> {
    // start from the column with the largest norm
    let start = (0..d)
        .map(|j| (j, (0..d).map(|r| c[r * d + j].powi(2)).sum::<f64>()))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if start.1 <= 0.0 {
        return None;
    }
    let mut v: Vec<f64> = (0..d).map(|r| c[r * d + start.0]).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..MAX_ITERS {
        let w = mat_vec(c, d, &v);
        let n = norm(&w);
        if n <= 0.0 {
            return None;
        }
        let w: Vec<f64> = w.into_iter().map(|x| x / n).collect();
        let diff = norm(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        v = w;
        if diff < TOL {
            break;
        }
    }
    let lambda: f64 = v.iter().zip(mat_vec(c, d, &v)).map(|(a, b)| a * b).sum();
    if lambda <= 1e-14 * c.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300) {
        return None;
    }
    // sign convention: largest-magnitude entry positive
    let k = (0..d)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0);
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some((lambda, v))
}

/// Top-two principal directions of a symmetric covariance, by power
/// iteration with deflation. Missing directions come back as zeros.
pub fn top_two_components(cov: &[f64], d: usize) -> [(f64, Vec<f64>); 2] {
    let zero = || (0.0, vec![0.0; d]);
    let Some((l1, v1)) = power_iteration(cov, d) else {
        return [zero(), zero()];
    };
    let mut deflated = cov.to_vec();
    for r in 0..d {
        for s in 0..d {
            deflated[r * d + s] -= l1 * v1[r] * v1[s];
        }
    }
    let second = power_iteration(&deflated, d).unwrap_or_else(zero);
    [(l1, v1), second]
}

/// Projects the centered rows of `x` onto its top two principal components.
pub fn pca2(x: &Tensor) -> Result<Tensor, MetricsError> {
    if x.shape().len() != 2 || x.rows() < 2 {
        return Err(MetricsError::Invalid(format!(
            "need an N x d matrix with N >= 2, got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for r in 0..d {
            for s in 0..d {
                cov[r * d + s] += row[r] * row[s] / (n - 1) as f64;
            }
        }
    }
    let [(_, v1), (_, v2)] = top_two_components(&cov, d);
    let mut out = Vec::with_capacity(n * 2);
    for row in &centered {
        out.push(row.iter().zip(&v1).map(|(a, b)| a * b).sum());
        out.push(row.iter().zip(&v2).map(|(a, b)| a * b).sum());
    }
    Ok(Tensor::new(vec![n, 2], out).expect("n x 2"))
}
