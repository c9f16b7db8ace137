//! Single-VAE machinery: Gaussian encoding, reparameterized sampling, the
//! closed-form KL to a standard normal, reconstruction error, the β-weighted
//! ELBO and the β schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::arch::{self, ImageShape, OuterArch};
use crate::nn::{Activation, Layer, NnError, ParamStore, Sequential};
use crate::tensor::{Graph, ParamId, Tensor, TensorError, Var};

/// Numerical guard applied to every log-variance head.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Diagonal Gaussian posterior, as graph nodes of shape `B × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentGaussian {
    pub mu: Var,
    pub logvar: Var,
}

/// Encoder trunk followed by linear mean and log-variance heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEncoder {
    pub body: Sequential,
    pub mu_head: Layer,
    pub logvar_head: Layer,
    pub latent_dim: usize,
}

impl GaussianEncoder {
    pub fn new<R: Rng + ?Sized>(
        body: Sequential,
        width: usize,
        latent_dim: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let mu_head = Layer::dense(
            store,
            &format!("{prefix}.mu"),
            width,
            latent_dim,
            Activation::Identity,
            rng,
        );
        let logvar_head = Layer::dense(
            store,
            &format!("{prefix}.logvar"),
            width,
            latent_dim,
            Activation::Identity,
            rng,
        );
        Self {
            body,
            mu_head,
            logvar_head,
            latent_dim,
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<LatentGaussian, TensorError> {
        let h = self.body.forward(g, store, x)?;
        let mu = self.mu_head.forward(g, store, h)?;
        let raw = self.logvar_head.forward(g, store, h)?;
        let logvar = g.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok(LatentGaussian { mu, logvar })
    }

    /// Posterior mean only; the log-variance head is skipped.
    pub fn encode_mean(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, TensorError> {
        let h = self.body.forward(g, store, x)?;
        self.mu_head.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.body.params();
        p.extend(self.mu_head.params());
        p.extend(self.logvar_head.params());
        p
    }
}

/// An encoder/decoder pair whose parameters live in a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeNet {
    pub encoder: GaussianEncoder,
    pub decoder: Sequential,
}

impl VaeNet {
    /// Image VAE built from an architecture preset.
    pub fn outer<R: Rng + ?Sized>(
        arch: &OuterArch,
        image: ImageShape,
        latent_dim: usize,
        output_activation: Activation,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let (body, width) = arch::outer_encoder_body(arch, image, store, rng)?;
        let encoder = GaussianEncoder::new(body, width, latent_dim, "enc", store, rng);
        let decoder = arch::outer_decoder(arch, image, latent_dim, output_activation, store, rng)?;
        Ok(Self { encoder, decoder })
    }

    /// Latent-to-latent VAE: `d_in → width → width → d_s` and back.
    pub fn nested<R: Rng + ?Sized>(
        d_in: usize,
        width: usize,
        d_s: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let body = arch::nested_encoder_body(d_in, width, store, rng);
        let encoder = GaussianEncoder::new(body, width, d_s, "nest.enc", store, rng);
        let decoder = arch::nested_decoder(d_s, width, d_in, store, rng);
        Self { encoder, decoder }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }
}

/// `z = μ + ε·exp(logvar/2)`; `eps` enters as a constant.
pub fn reparameterize(
    g: &mut Graph,
    lat: LatentGaussian,
    eps: &Tensor,
) -> Result<Var, TensorError> {
    let shape = g.value(lat.mu).shape();
    if eps.shape() != shape {
        return Err(TensorError::Dimension {
            op: "reparameterize",
            detail: format!("eps {:?} vs mu {:?}", eps.shape(), shape),
        });
    }
    let e = g.constant(eps.clone());
    let half = g.scale(lat.logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(e, std)?;
    g.add(lat.mu, noise)
}

/// Batch mean of `½ Σ (exp(logvar) + μ² − logvar − 1)`.
pub fn kl_std_normal(g: &mut Graph, lat: LatentGaussian) -> Result<Var, TensorError> {
    let (rows, n) = {
        let v = g.value(lat.mu);
        (v.rows().max(1), v.len())
    };
    let var = g.exp(lat.logvar)?;
    let mu2 = g.square(lat.mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, lat.logvar)?;
    let s = g.sum(b)?;
    let s = g.shift(s, -(n as f64))?;
    g.scale(s, 0.5 / rows as f64)
}

/// Squared error summed over features, averaged over the batch.
pub fn recon_mse(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var, TensorError> {
    let (a, b) = (g.value(x_hat).shape(), g.value(x).shape());
    if a != b {
        return Err(TensorError::Dimension {
            op: "recon_mse",
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    let rows = g.value(x).rows().max(1);
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / rows as f64)
}

/// Graph handles of one β-ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Elbo {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    pub latent: LatentGaussian,
    pub z: Var,
    pub x_hat: Var,
}

/// `recon_mse(x̂, x) + β·KL`, with `x̂` decoded from a reparameterized sample.
pub fn beta_elbo_loss(
    g: &mut Graph,
    store: &ParamStore,
    net: &VaeNet,
    x: Var,
    beta: f64,
    eps: &Tensor,
) -> Result<Elbo, TensorError> {
    if !(beta >= 0.0) {
        return Err(TensorError::Domain {
            op: "beta_elbo_loss",
            detail: format!("beta must be >= 0, got {beta}"),
        });
    }
    let latent = net.encoder.encode(g, store, x)?;
    let z = reparameterize(g, latent, eps)?;
    let x_hat = net.decoder.forward(g, store, z)?;
    let recon = recon_mse(g, x_hat, x)?;
    let kl = kl_std_normal(g, latent)?;
    let weighted = g.scale(kl, beta)?;
    let loss = g.add(recon, weighted)?;
    Ok(Elbo {
        loss,
        recon,
        kl,
        latent,
        z,
        x_hat,
    })
}

/// `rows × cols` standard-normal draws.
pub fn sample_eps<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("epoch {epoch} outside 0..{total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

/// Piecewise-linear β: ramp from 0 to `beta_max` over the warm-up window,
/// hold, then decay linearly to `beta_max / 4` at the final epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub warmup_fraction: f64,
    pub anneal_fraction: f64,
    pub total_epochs: usize,
}

impl BetaSchedule {
    pub fn new(
        beta_max: f64,
        warmup_fraction: f64,
        anneal_fraction: f64,
        total_epochs: usize,
    ) -> Result<Self, ScheduleError> {
        let s = Self {
            beta_max,
            warmup_fraction,
            anneal_fraction,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let (w, a) = (self.warmup_fraction, self.anneal_fraction);
        if !(self.beta_max >= 0.0) || !self.beta_max.is_finite() {
            return Err(ScheduleError::Invalid(format!(
                "beta_max must be >= 0, got {}",
                self.beta_max
            )));
        }
        if !(w >= 0.0 && a >= 0.0 && w + a <= 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 <= warmup + anneal <= 1, got {w} + {a}"
            )));
        }
        if self.total_epochs == 0 {
            return Err(ScheduleError::Invalid(
                "total_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn beta_at(&self, epoch: usize) -> Result<f64, ScheduleError> {
        let total = self.total_epochs;
        if epoch >= total {
            return Err(ScheduleError::EpochOutOfRange { epoch, total });
        }
        let e = total as f64;
        let t = epoch as f64;
        let warm = self.warmup_fraction * e;
        let anneal_start = e - self.anneal_fraction * e;
        if t < warm {
            return Ok(self.beta_max * t / warm);
        }
        if t < anneal_start || self.anneal_fraction == 0.0 {
            return Ok(self.beta_max);
        }
        let span = (e - 1.0) - anneal_start;
        let progress = if span > 0.0 {
            (t - anneal_start) / span
        } else {
            1.0
        };
        Ok(self.beta_max * (1.0 - 0.75 * progress))
    }
}
