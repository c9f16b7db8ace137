use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{nested_loss, LossComponents, PairNoise};
use super::{BetaVae, ModelError, NestedVae, TrainConfig};
use crate::data::{DomainDataset, PairSampler};
use crate::nn::{Adam, NnError, ParamStore};
use crate::tensor::{Graph, TensorError};
use crate::vae::{beta_elbo_loss, sample_eps, BetaSchedule};

/// Mean of each loss component over one epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub beta: f64,
    pub components: Vec<(String, f64)>,
}

impl EpochLoss {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }
}

/// Dataset-local item indices used by one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub index_i: Vec<usize>,
    /// Empty for single-image training.
    pub index_j: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
    pub batches: Vec<BatchRecord>,
}

/// Training draws come from a stream separate from initialization.
fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn diverged(epoch: usize, batch: usize, e: impl std::fmt::Display) -> ModelError {
    ModelError::NonFinite {
        epoch,
        batch,
        detail: e.to_string(),
    }
}

fn lift(epoch: usize, batch: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Tensor(t @ TensorError::NonFinite { .. }) => diverged(epoch, batch, t),
        other => other,
    }
}

fn step(
    adam: &mut Adam,
    params: &mut ParamStore,
    g: &Graph,
    epoch: usize,
    batch: usize,
) -> Result<(), ModelError> {
    match adam.step(params, &g.param_grads()) {
        Err(e @ NnError::NonFiniteGradient(_)) => Err(diverged(epoch, batch, e)),
        other => Ok(other?),
    }
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

/// Joint training of all four parameter sets on cross-domain pairs.
/// Each epoch draws `len(ds)` pairs in batches of `batch_size`.
pub fn train_nested(
    model: &mut NestedVae,
    ds: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog, ModelError> {
    cfg.validate()?;
    if ds.domains().len() < 2 {
        return Err(ModelError::Config(
            "pair training needs at least two domains".into(),
        ));
    }
    let sampler = PairSampler::new(ds, cfg.pairing)?;
    let schedule = BetaSchedule::new(
        cfg.beta_max,
        cfg.warmup_fraction,
        cfg.anneal_fraction,
        cfg.epochs,
    )?;
    let mut rng = train_rng(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let steps = batches_per_epoch(ds.len(), cfg.batch_size);
    let (d, ds_dim) = (model.config.latent_dim, model.config.nested_dim);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let beta = schedule.beta_at(epoch)?;
        let mut sums = vec![0.0; LossComponents::default().entries().len()];
        for b in 0..steps {
            let batch = sampler.sample(ds, cfg.batch_size, &mut rng);
            let noise = PairNoise::sample(&mut rng, batch.len(), d, ds_dim);
            let mut g = Graph::new();
            let loss =
                nested_loss(&mut g, model, &batch, beta, &noise, cfg).map_err(lift(epoch, b))?;
            g.backward(loss.total)
                .map_err(|e| lift(epoch, b)(e.into()))?;
            step(&mut adam, &mut model.params, &g, epoch, b)?;
            for (s, (_, v)) in sums.iter_mut().zip(loss.components.entries()) {
                *s += v;
            }
            if cfg.record_batches {
                log.batches.push(BatchRecord {
                    epoch,
                    batch: b,
                    index_i: batch.index_i,
                    index_j: batch.index_j,
                });
            }
        }
        let entry = EpochLoss {
            epoch,
            beta,
            components: LossComponents::default()
                .entries()
                .into_iter()
                .zip(sums)
                .map(|((n, _), s)| (n.to_string(), s / steps as f64))
                .collect(),
        };
        log::info!(
            "nested epoch {epoch}: beta {beta:.4} loss {:.5}",
            entry.components[0].1
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Single-image β-VAE training with a reshuffle every epoch.
pub fn train_beta_vae(
    model: &mut BetaVae,
    ds: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog, ModelError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let schedule = BetaSchedule::new(
        cfg.baseline_beta_max,
        cfg.warmup_fraction,
        cfg.anneal_fraction,
        cfg.epochs,
    )?;
    let mut rng = train_rng(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let steps = batches_per_epoch(ds.len(), cfg.batch_size);
    let bs = cfg.batch_size.min(ds.len());
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let beta = schedule.beta_at(epoch)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for b in 0..steps {
            let idx = &order[b * bs..(b + 1) * bs];
            let eps = sample_eps(&mut rng, idx.len(), model.config.latent_dim);
            let mut g = Graph::new();
            let x = g.constant(ds.images.select_rows(idx));
            let e = beta_elbo_loss(&mut g, &model.params, &model.net, x, beta, &eps)
                .map_err(|e| lift(epoch, b)(e.into()))?;
            g.backward(e.loss).map_err(|e| lift(epoch, b)(e.into()))?;
            step(&mut adam, &mut model.params, &g, epoch, b)?;
            sums[0] += g.scalar_value(e.loss);
            sums[1] += g.scalar_value(e.recon);
            sums[2] += g.scalar_value(e.kl);
            if cfg.record_batches {
                log.batches.push(BatchRecord {
                    epoch,
                    batch: b,
                    index_i: idx.to_vec(),
                    index_j: Vec::new(),
                });
            }
        }
        let components = ["total", "recon", "kl"]
            .into_iter()
            .zip(sums)
            .map(|(n, s)| (n.to_string(), s / steps as f64))
            .collect();
        log::info!(
            "beta-vae epoch {epoch}: beta {beta:.4} loss {:.5}",
            sums[0] / steps as f64
        );
        log.epochs.push(EpochLoss {
            epoch,
            beta,
            components,
        });
    }
    Ok(log)
}
