//! Datasets: MNIST ingestion, rotated-MNIST domains, pairing engines and
//! the synthetic confounded-additive-noise generator.

mod canm;
mod container;
mod idx;
mod pairs;
mod rotate;

pub use canm::{generate_canm, CanmMaps, CanmSpec};
pub use container::{read_container, write_container, CONTAINER_VERSION};
pub use idx::load_idx;
pub use pairs::{make_change_pairs, sample_pairs, ChangePairs, PairBatch, PairSampler, Pairing};
pub use rotate::{build_rotated_mnist, rotate_image, RotatedSplits, ROTATION_ANGLES};

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde_json::Value;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("class {class}: need {need} samples, only {have} available")]
    InsufficientSamples {
        class: i32,
        need: usize,
        have: usize,
    },
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("pair {index} mixes a single domain ({domain}) on both sides")]
    SameDomainPair { index: usize, domain: i32 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ground-truth generative factors retained by synthetic datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    /// `N × shared_dim`
    pub shared: Tensor,
    /// `N × domain_dim`
    pub domain: Tensor,
}

/// Images with a class label `y` and a domain (confounder) label `c` per item.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    /// `N × 1 × H × W`
    pub images: Tensor,
    pub class_labels: Vec<i32>,
    pub domain_labels: Vec<i32>,
    /// Index of the underlying source sample (the MNIST index for rotated
    /// MNIST, the shared-factor draw for synthetic data).
    pub source_index: Vec<i64>,
    pub factors: Option<Factors>,
    /// Provenance stamp (generator, config, seed).
    pub meta: Value,
}

impl DomainDataset {
    pub fn new(
        images: Tensor,
        class_labels: Vec<i32>,
        domain_labels: Vec<i32>,
    ) -> Result<Self, DataError> {
        let n = images.rows();
        let ds = Self {
            source_index: (0..n as i64).collect(),
            images,
            class_labels,
            domain_labels,
            factors: None,
            meta: Value::Null,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.images.rows();
        if self.images.shape().len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be N x C x H x W, got {:?}",
                self.images.shape()
            )));
        }
        if self.class_labels.len() != n
            || self.domain_labels.len() != n
            || self.source_index.len() != n
        {
            return Err(DataError::Invalid(format!(
                "{n} images but {} class labels, {} domain labels, {} source indices",
                self.class_labels.len(),
                self.domain_labels.len(),
                self.source_index.len()
            )));
        }
        if let Some(f) = &self.factors {
            if f.shared.rows() != n || f.domain.rows() != n {
                return Err(DataError::Invalid(
                    "factor rows do not match item count".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    /// `(channels, height, width)` of one item.
    pub fn item_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn domains(&self) -> Vec<i32> {
        self.domain_labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn classes(&self) -> Vec<i32> {
        self.class_labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// One more than the largest class label.
    pub fn n_classes(&self) -> usize {
        self.class_labels
            .iter()
            .map(|&c| c as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn n_domains(&self) -> usize {
        self.domain_labels
            .iter()
            .map(|&c| c as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            class_labels: idx.iter().map(|&i| self.class_labels[i]).collect(),
            domain_labels: idx.iter().map(|&i| self.domain_labels[i]).collect(),
            source_index: idx.iter().map(|&i| self.source_index[i]).collect(),
            factors: self.factors.as_ref().map(|f| Factors {
                shared: f.shared.select_rows(idx),
                domain: f.domain.select_rows(idx),
            }),
            meta: self.meta.clone(),
        }
    }

    pub fn indices_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(i)).collect()
    }

    /// Every item not in `domain`, with the kept indices.
    pub fn without_domain(&self, domain: i32) -> (Self, Vec<usize>) {
        let idx = self.indices_where(|i| self.domain_labels[i] != domain);
        (self.subset(&idx), idx)
    }

    pub fn only_domain(&self, domain: i32) -> (Self, Vec<usize>) {
        let idx = self.indices_where(|i| self.domain_labels[i] == domain);
        (self.subset(&idx), idx)
    }
}
