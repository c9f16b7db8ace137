use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DomainDataset};
use crate::tensor::Tensor;

/// What two paired items must share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Same class label.
    SharedClass,
    /// Same underlying source sample.
    SharedSource,
}

/// A batch of cross-domain pairs with a shared key.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_i: Tensor,
    pub x_j: Tensor,
    pub shared_key: Vec<i64>,
    pub domain_i: Vec<i32>,
    pub domain_j: Vec<i32>,
    /// Dataset-local indices of each side.
    pub index_i: Vec<usize>,
    pub index_j: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.index_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_i.is_empty()
    }

    /// Fails if any pair has both sides in the same domain.
    pub fn check_domains(&self) -> Result<(), DataError> {
        for (k, (a, b)) in self.domain_i.iter().zip(&self.domain_j).enumerate() {
            if a == b {
                return Err(DataError::SameDomainPair {
                    index: k,
                    domain: *a,
                });
            }
        }
        Ok(())
    }

    /// The same pairs with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            x_i: self.x_j.clone(),
            x_j: self.x_i.clone(),
            shared_key: self.shared_key.clone(),
            domain_i: self.domain_j.clone(),
            domain_j: self.domain_i.clone(),
            index_i: self.index_j.clone(),
            index_j: self.index_i.clone(),
        }
    }
}

/// Precomputed index of pairable items: key → (domain, items).
#[derive(Clone, Debug)]
pub struct PairSampler {
    pub pairing: Pairing,
    groups: Vec<(i64, Vec<Vec<usize>>)>,
}

impl PairSampler {
    pub fn new(ds: &DomainDataset, pairing: Pairing) -> Result<Self, DataError> {
        let mut by_key: BTreeMap<i64, BTreeMap<i32, Vec<usize>>> = BTreeMap::new();
        for i in 0..ds.len() {
            let key = match pairing {
                Pairing::SharedClass => ds.class_labels[i] as i64,
                Pairing::SharedSource => ds.source_index[i],
            };
            by_key
                .entry(key)
                .or_default()
                .entry(ds.domain_labels[i])
                .or_default()
                .push(i);
        }
        let mut groups = Vec::new();
        for (key, doms) in by_key {
            if doms.len() < 2 {
                if pairing == Pairing::SharedClass {
                    let d = doms.keys().next().copied().unwrap_or_default();
                    return Err(DataError::Pairing(format!(
                        "class {key} appears only in domain {d}; pairs need two distinct domains"
                    )));
                }
                continue;
            }
            groups.push((key, doms.into_values().collect()));
        }
        if groups.is_empty() {
            return Err(DataError::Pairing(
                "no key occurs in two distinct domains".into(),
            ));
        }
        Ok(Self { pairing, groups })
    }

    /// Draws one pair: a key uniformly, then an unordered pair of distinct
    /// domains holding it, then one item from each.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (i64, usize, usize) {
        let (key, doms) = &self.groups[rng.gen_range(0..self.groups.len())];
        let a = rng.gen_range(0..doms.len());
        let mut b = rng.gen_range(0..doms.len() - 1);
        if b >= a {
            b += 1;
        }
        let i = *doms[a].choose(rng).unwrap();
        let j = *doms[b].choose(rng).unwrap();
        (*key, i, j)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        ds: &DomainDataset,
        batch: usize,
        rng: &mut R,
    ) -> PairBatch {
        let mut keys = Vec::with_capacity(batch);
        let mut ii = Vec::with_capacity(batch);
        let mut jj = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (k, i, j) = self.draw(rng);
            keys.push(k);
            ii.push(i);
            jj.push(j);
        }
        PairBatch {
            x_i: ds.images.select_rows(&ii),
            x_j: ds.images.select_rows(&jj),
            shared_key: keys,
            domain_i: ii.iter().map(|&i| ds.domain_labels[i]).collect(),
            domain_j: jj.iter().map(|&j| ds.domain_labels[j]).collect(),
            index_i: ii,
            index_j: jj,
        }
    }
}

/// Samples `batch` cross-domain pairs sharing a class label.
pub fn sample_pairs<R: Rng + ?Sized>(
    ds: &DomainDataset,
    batch: usize,
    rng: &mut R,
) -> Result<PairBatch, DataError> {
    Ok(PairSampler::new(ds, Pairing::SharedClass)?.sample(ds, batch, rng))
}

/// Pairs for change detection: label 0 when the class is unchanged, 1 when it differs.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangePairs {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub changed: Vec<u8>,
}

/// Alternates same-class and different-class pairs, starting with same-class.
pub fn make_change_pairs<R: Rng + ?Sized>(
    ds: &DomainDataset,
    count: usize,
    rng: &mut R,
) -> Result<ChangePairs, DataError> {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in ds.class_labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    if classes.len() < 2 {
        return Err(DataError::Pairing(
            "change pairs need at least two classes".into(),
        ));
    }
    let mut out = ChangePairs {
        a: Vec::with_capacity(count),
        b: Vec::with_capacity(count),
        changed: Vec::with_capacity(count),
    };
    for k in 0..count {
        let changed = k % 2 == 1;
        let ca = rng.gen_range(0..classes.len());
        let cb = if changed {
            let mut c = rng.gen_range(0..classes.len() - 1);
            if c >= ca {
                c += 1;
            }
            c
        } else {
            ca
        };
        out.a.push(*classes[ca].choose(rng).unwrap());
        out.b.push(*classes[cb].choose(rng).unwrap());
        out.changed.push(changed as u8);
    }
    Ok(out)
}
