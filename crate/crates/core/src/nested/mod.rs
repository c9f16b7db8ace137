//! The NestedVAE: one weight-shared outer VAE applied to both members of a
//! cross-domain pair, and a nested VAE that maps each member's latent mean
//! to the other's through a small shared code `z_s`.
//!
//! A plain β-VAE over single images is provided as the comparison baseline.

mod io;
mod loss;
mod train;

pub use io::{load_model, save_model, SavedModel};
pub use loss::{nested_loss, nested_loss_sampled, LossComponents, NestedLoss, PairNoise};
pub use train::{train_beta_vae, train_nested, BatchRecord, EpochLoss, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Pairing};
use crate::nn::arch::{ImageShape, OuterArch};
use crate::nn::{Activation, NnError, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::vae::{ScheduleError, VaeNet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// What the nested VAE reads from the outer latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedMode {
    /// Posterior means.
    #[default]
    Mu,
    /// Reparameterized samples.
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedLevel {
    Outer,
    Nested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub arch: OuterArch,
    pub latent_dim: usize,
    pub nested_dim: usize,
    pub nested_width: usize,
    pub output_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::default(),
            arch: OuterArch::default(),
            latent_dim: 10,
            nested_dim: 8,
            nested_width: 64,
            output_activation: Activation::Sigmoid,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 || self.nested_dim == 0 || self.nested_width == 0 {
            return Err(ModelError::Config("latent sizes must be positive".into()));
        }
        if self.nested_dim > self.latent_dim {
            return Err(ModelError::Config(format!(
                "nested_dim ({}) must not exceed latent_dim ({})",
                self.nested_dim, self.latent_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the two outer ELBO terms.
    pub gamma: f64,
    /// Weight of the two nested terms.
    pub lambda: f64,
    /// Peak outer β for the NestedVAE.
    pub beta_max: f64,
    /// Peak β for the β-VAE baseline.
    pub baseline_beta_max: f64,
    pub beta_nest: f64,
    pub feed: FeedMode,
    pub warmup_fraction: f64,
    pub anneal_fraction: f64,
    pub pairing: Pairing,
    /// Keep the item indices of every training batch in the log.
    pub record_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 8e-4,
            seed: 0,
            gamma: 0.5,
            lambda: 0.5,
            beta_max: 0.5,
            baseline_beta_max: 4.0,
            beta_nest: 0.0,
            feed: FeedMode::Mu,
            warmup_fraction: 0.3,
            anneal_fraction: 0.3,
            pairing: Pairing::SharedClass,
            record_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.gamma >= 0.0 && self.lambda >= 0.0 && self.gamma + self.lambda > 0.0) {
            return bad(format!(
                "need gamma >= 0, lambda >= 0, gamma + lambda > 0; got {} and {}",
                self.gamma, self.lambda
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.beta_nest >= 0.0) {
            return bad(format!("beta_nest must be >= 0, got {}", self.beta_nest));
        }
        Ok(())
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows per forward pass when embedding.
const EMBED_CHUNK: usize = 512;

fn chunked(
    x: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<Tensor, ModelError>,
) -> Result<Tensor, ModelError> {
    let n = x.rows();
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EMBED_CHUNK) {
        let idx: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
        let out = f(&x.select_rows(&idx))?;
        width = out.row_len();
        data.extend(out.into_data());
    }
    Ok(Tensor::new(vec![n, width], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestedVae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub outer: VaeNet,
    pub nested: VaeNet,
}

impl NestedVae {
    /// Glorot-initialized model.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let outer = VaeNet::outer(
            &config.arch,
            config.image,
            config.latent_dim,
            config.output_activation,
            &mut params,
            &mut rng,
        )?;
        let nested = VaeNet::nested(
            config.latent_dim,
            config.nested_width,
            config.nested_dim,
            &mut params,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            params,
            outer,
            nested,
        })
    }

    /// Posterior means, without sampling. `x` is `N × C × H × W`.
    pub fn embed(&self, x: &Tensor, level: EmbedLevel) -> Result<Tensor, ModelError> {
        chunked(x, |chunk| {
            let mut g = Graph::new();
            let xv = g.constant(chunk.clone());
            let mu = self.outer.encoder.encode_mean(&mut g, &self.params, xv)?;
            let out = match level {
                EmbedLevel::Outer => mu,
                EmbedLevel::Nested => self.nested.encoder.encode_mean(&mut g, &self.params, mu)?,
            };
            Ok(g.value(out).clone())
        })
    }

    /// Deterministic nested pass `μ_a → mean z_s → μ̂`.
    pub fn reconstruct_mu(&self, mu_a: &Tensor) -> Result<Tensor, ModelError> {
        if mu_a.shape().len() != 2 || mu_a.row_len() != self.config.latent_dim {
            return Err(TensorError::Dimension {
                op: "reconstruct_mu",
                detail: format!(
                    "expected N x {}, got {:?}",
                    self.config.latent_dim,
                    mu_a.shape()
                ),
            }
            .into());
        }
        chunked(mu_a, |chunk| {
            let mut g = Graph::new();
            let m = g.constant(chunk.clone());
            let zs = self.nested.encoder.encode_mean(&mut g, &self.params, m)?;
            let out = self.nested.decoder.forward(&mut g, &self.params, zs)?;
            Ok(g.value(out).clone())
        })
    }
}

/// The outer VAE trained alone on single images.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaVae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: VaeNet,
}

impl BetaVae {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let net = VaeNet::outer(
            &config.arch,
            config.image,
            config.latent_dim,
            config.output_activation,
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            net,
        })
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        chunked(x, |chunk| {
            let mut g = Graph::new();
            let xv = g.constant(chunk.clone());
            let mu = self.net.encoder.encode_mean(&mut g, &self.params, xv)?;
            Ok(g.value(mu).clone())
        })
    }
}
