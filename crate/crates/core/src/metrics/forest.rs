use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class counts of the training samples that reached the leaf.
    Leaf { counts: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
    pub n_features: usize,
    pub params: ForestParams,
    pub seed: u64,
}

fn argmax_low(counts: &[u32]) -> usize {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a [f64],
    d: usize,
    y: &'a [usize],
    n_classes: usize,
    max_depth: usize,
    max_features: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Best `(weighted child impurity, feature, threshold)` for one feature.
    fn best_split_on(&self, idx: &mut [usize], f: usize, total: &[u32]) -> Option<(f64, f64)> {
        let val = |i: usize| self.x[i * self.d + f];
        idx.sort_by(|&a, &b| val(a).total_cmp(&val(b)));
        let n = idx.len() as u32;
        let mut left = vec![0u32; self.n_classes];
        let mut best: Option<(f64, f64)> = None;
        for k in 0..idx.len() - 1 {
            left[self.y[idx[k]]] += 1;
            let (a, b) = (val(idx[k]), val(idx[k + 1]));
            if a == b {
                continue;
            }
            let nl = k as u32 + 1;
            let nr = n - nl;
            let right: Vec<u32> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.is_none_or(|(s, _)| score < s) {
                let mut thr = a + (b - a) / 2.0;
                if thr >= b {
                    thr = a;
                }
                best = Some((score, thr));
            }
        }
        best
    }

    fn grow<R: Rng>(&mut self, idx: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let counts = self.counts(idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            counts: counts.clone(),
        });
        if pure || depth >= self.max_depth || idx.len() < 2 {
            return at;
        }
        let mut features: Vec<usize> = (0..self.d).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, &f) in features.iter().enumerate() {
            if tried >= self.max_features && best.is_some() {
                break;
            }
            if let Some((s, thr)) = self.best_split_on(idx, f, &counts) {
                if best.is_none_or(|(bs, _, _)| s < bs) {
                    best = Some((s, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let val = |i: usize| self.x[i * self.d + feature];
        idx.sort_by(|&a, &b| val(a).total_cmp(&val(b)));
        let cut = idx.partition_point(|&i| val(i) <= threshold);
        let (l, r) = idx.split_at_mut(cut);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

impl Tree {
    fn leaf_counts(&self, row: &[f64]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { counts } => return counts,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> usize {
        argmax_low(self.leaf_counts(row))
    }
}

/// Fits a bagged ensemble of Gini CART trees, one independent random
/// stream per tree, trees built in parallel.
pub fn forest_fit(
    x: &Tensor,
    y: &[usize],
    n_classes: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel, MetricsError> {
    let n = x.rows();
    if x.shape().len() != 2 {
        return Err(MetricsError::Invalid(format!(
            "features must be N x d, got {:?}",
            x.shape()
        )));
    }
    if n != y.len() {
        return Err(MetricsError::Length(n, y.len()));
    }
    if n < 2 {
        return Err(MetricsError::Invalid(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
        return Err(MetricsError::Label { label, n_classes });
    }
    if params.n_trees == 0 {
        return Err(MetricsError::Invalid("n_trees must be positive".into()));
    }
    let d = x.row_len();
    let max_features = params
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = Builder {
                x: x.data(),
                d,
                y,
                n_classes,
                max_depth: params.max_depth,
                max_features,
                nodes: Vec::new(),
            };
            b.grow(&mut idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_classes,
        n_features: d,
        params: params.clone(),
        seed,
    })
}

/// Majority vote over trees; ties go to the lowest class index.
pub fn forest_predict(model: &ForestModel, x: &Tensor) -> Result<Vec<usize>, MetricsError> {
    if x.shape().len() != 2 || x.row_len() != model.n_features {
        return Err(MetricsError::Invalid(format!(
            "expected N x {} features, got {:?}",
            model.n_features,
            x.shape()
        )));
    }
    Ok((0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut votes = vec![0u32; model.n_classes];
            for t in &model.trees {
                votes[t.predict_row(row)] += 1;
            }
            argmax_low(&votes)
        })
        .collect())
}
