use rand::Rng;
use serde::Serialize;

use super::{FeedMode, ModelError, NestedVae, TrainConfig};
use crate::data::PairBatch;
use crate::tensor::{Graph, Tensor, Var};
use crate::vae::{beta_elbo_loss, kl_std_normal, recon_mse, reparameterize, sample_eps};

/// Standard-normal draws for one pair batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise {
    pub outer_i: Tensor,
    pub outer_j: Tensor,
    pub nested_i: Tensor,
    pub nested_j: Tensor,
}

impl PairNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, latent: usize, nested: usize) -> Self {
        Self {
            outer_i: sample_eps(rng, rows, latent),
            outer_j: sample_eps(rng, rows, latent),
            nested_i: sample_eps(rng, rows, nested),
            nested_j: sample_eps(rng, rows, nested),
        }
    }

    /// Noise matching [`PairBatch::swapped`].
    pub fn swapped(&self) -> Self {
        Self {
            outer_i: self.outer_j.clone(),
            outer_j: self.outer_i.clone(),
            nested_i: self.nested_j.clone(),
            nested_j: self.nested_i.clone(),
        }
    }
}

/// Scalar values of every loss term. `nested_i` is the loss of predicting
/// `μ_j` from `μ_i`; `nested_kl_*` are unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub total: f64,
    pub outer_i: f64,
    pub outer_j: f64,
    pub recon_i: f64,
    pub recon_j: f64,
    pub kl_i: f64,
    pub kl_j: f64,
    pub nested_i: f64,
    pub nested_j: f64,
    pub nested_kl_i: f64,
    pub nested_kl_j: f64,
}

impl LossComponents {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("total", self.total),
            ("outer_i", self.outer_i),
            ("outer_j", self.outer_j),
            ("recon_i", self.recon_i),
            ("recon_j", self.recon_j),
            ("kl_i", self.kl_i),
            ("kl_j", self.kl_j),
            ("nested_i", self.nested_i),
            ("nested_j", self.nested_j),
            ("nested_kl_i", self.nested_kl_i),
            ("nested_kl_j", self.nested_kl_j),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NestedLoss {
    pub total: Var,
    pub mu_i: Var,
    pub mu_j: Var,
    pub components: LossComponents,
}

struct NestedTerm {
    loss: Var,
    kl: Var,
}

fn nested_direction(
    g: &mut Graph,
    model: &NestedVae,
    input: Var,
    target: Var,
    beta_nest: f64,
    eps: &Tensor,
) -> Result<NestedTerm, ModelError> {
    let lat = model.nested.encoder.encode(g, &model.params, input)?;
    let zs = reparameterize(g, lat, eps)?;
    let mu_hat = model.nested.decoder.forward(g, &model.params, zs)?;
    let mse = recon_mse(g, mu_hat, target)?;
    let kl = kl_std_normal(g, lat)?;
    let weighted = g.scale(kl, beta_nest)?;
    let loss = g.add(mse, weighted)?;
    Ok(NestedTerm { loss, kl })
}

/// `γ·(L(x_i) + L(x_j)) + λ·(L_nest(i→j) + L_nest(j→i))` built on `g`.
///
/// Both pair members go through the same outer parameters, and the nested
/// targets are live graph nodes, so nested gradients reach the outer encoder
/// through both sides.
pub fn nested_loss(
    g: &mut Graph,
    model: &NestedVae,
    batch: &PairBatch,
    beta: f64,
    noise: &PairNoise,
    cfg: &TrainConfig,
) -> Result<NestedLoss, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty pair batch".into()));
    }
    batch.check_domains()?;
    let xi = g.constant(batch.x_i.clone());
    let xj = g.constant(batch.x_j.clone());
    let oi = beta_elbo_loss(g, &model.params, &model.outer, xi, beta, &noise.outer_i)?;
    let oj = beta_elbo_loss(g, &model.params, &model.outer, xj, beta, &noise.outer_j)?;
    let (mu_i, mu_j) = (oi.latent.mu, oj.latent.mu);
    let (in_i, in_j) = match cfg.feed {
        FeedMode::Mu => (mu_i, mu_j),
        FeedMode::Z => (oi.z, oj.z),
    };
    let ni = nested_direction(g, model, in_i, mu_j, cfg.beta_nest, &noise.nested_i)?;
    let nj = nested_direction(g, model, in_j, mu_i, cfg.beta_nest, &noise.nested_j)?;

    let outer = g.add(oi.loss, oj.loss)?;
    let outer = g.scale(outer, cfg.gamma)?;
    let inner = g.add(ni.loss, nj.loss)?;
    let inner = g.scale(inner, cfg.lambda)?;
    let total = g.add(outer, inner)?;

    let v = |g: &Graph, x: Var| g.scalar_value(x);
    let components = LossComponents {
        total: v(g, total),
        outer_i: v(g, oi.loss),
        outer_j: v(g, oj.loss),
        recon_i: v(g, oi.recon),
        recon_j: v(g, oj.recon),
        kl_i: v(g, oi.kl),
        kl_j: v(g, oj.kl),
        nested_i: v(g, ni.loss),
        nested_j: v(g, nj.loss),
        nested_kl_i: v(g, ni.kl),
        nested_kl_j: v(g, nj.kl),
    };
    Ok(NestedLoss {
        total,
        mu_i,
        mu_j,
        components,
    })
}

/// [`nested_loss`] with fresh noise drawn from `rng`.
pub fn nested_loss_sampled<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &NestedVae,
    batch: &PairBatch,
    beta: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<NestedLoss, ModelError> {
    let noise = PairNoise::sample(
        rng,
        batch.len(),
        model.config.latent_dim,
        model.config.nested_dim,
    );
    nested_loss(g, model, batch, beta, &noise, cfg)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::tests::tiny_config;
    use super::super::ModelConfig;
    use super::*;
    use crate::nn::arch::{ImageShape, OuterArch};
    use crate::nn::{grad_check_params, Activation};

    fn batch(rows: usize, pixels: usize, seed: u64) -> PairBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            Tensor::new(
                vec![rows, 1, 1, pixels],
                (0..rows * pixels)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
            )
            .unwrap()
        };
        let (x_i, x_j) = (img(), img());
        PairBatch {
            x_i,
            x_j,
            shared_key: vec![0; rows],
            domain_i: vec![0; rows],
            domain_j: vec![1; rows],
            index_i: (0..rows).collect(),
            index_j: (0..rows).collect(),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            image: ImageShape::new(1, 1, 4),
            ..tiny_config()
        }
    }

    #[test]
    fn lambda_zero_is_two_outer_losses() {
        let m = NestedVae::new(&small(), 1).unwrap();
        let b = batch(3, 4, 2);
        let noise = PairNoise::sample(&mut ChaCha8Rng::seed_from_u64(5), 3, 3, 2);
        let cfg = TrainConfig {
            gamma: 0.7,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let l = nested_loss(&mut g, &m, &b, 0.3, &noise, &cfg).unwrap();
        let c = l.components;
        assert_eq!(c.total, 0.7 * (c.outer_i + c.outer_j));
        assert!((c.outer_i - (c.recon_i + 0.3 * c.kl_i)).abs() < 1e-12);
    }

    #[test]
    fn swapping_pairs_and_noise_leaves_loss_unchanged() {
        let m = NestedVae::new(&small(), 4).unwrap();
        let b = batch(4, 4, 6);
        let noise = PairNoise::sample(&mut ChaCha8Rng::seed_from_u64(7), 4, 3, 2);
        for feed in [FeedMode::Mu, FeedMode::Z] {
            let cfg = TrainConfig {
                feed,
                beta_nest: 0.2,
                ..TrainConfig::default()
            };
            let mut g = Graph::new();
            let a = nested_loss(&mut g, &m, &b, 0.5, &noise, &cfg)
                .unwrap()
                .components;
            let mut g = Graph::new();
            let s = nested_loss(&mut g, &m, &b.swapped(), 0.5, &noise.swapped(), &cfg)
                .unwrap()
                .components;
            assert_eq!(a.total, s.total);
            assert_eq!(a.nested_i, s.nested_j);
            assert_eq!(a.outer_i, s.outer_j);
        }
    }

    #[test]
    fn same_domain_pair_is_rejected() {
        let m = NestedVae::new(&small(), 0).unwrap();
        let mut b = batch(2, 4, 0);
        b.domain_j = vec![1, 0];
        let mut g = Graph::new();
        let err = nested_loss_sampled(
            &mut g,
            &m,
            &b,
            1.0,
            &TrainConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Data(_)), "{err}");
    }

    #[test]
    fn both_outer_uses_share_parameter_nodes() {
        let m = NestedVae::new(&small(), 0).unwrap();
        let b = batch(2, 4, 0);
        let mut g = Graph::new();
        let before = g.len();
        nested_loss_sampled(
            &mut g,
            &m,
            &b,
            1.0,
            &TrainConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(g.len() > before);
        for id in m.outer.params() {
            let v = g.bound_param(id).expect("bound once");
            assert_eq!(g.bound_param(id), Some(v));
        }
        // one leaf per parameter, however many times it is used
        let leaves: std::collections::HashSet<_> =
            m.params.ids().filter_map(|id| g.bound_param(id)).collect();
        assert_eq!(leaves.len(), m.params.len());
    }

    #[test]
    fn nested_gradient_reaches_outer_encoder_through_both_sides() {
        let m = NestedVae::new(&small(), 2).unwrap();
        let b = batch(3, 4, 3);
        let noise = PairNoise::sample(&mut ChaCha8Rng::seed_from_u64(1), 3, 3, 2);
        let cfg = TrainConfig {
            gamma: 0.0,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let l = nested_loss(&mut g, &m, &b, 0.5, &noise, &cfg).unwrap();
        g.backward(l.total).unwrap();
        for v in [l.mu_i, l.mu_j] {
            assert!(g.grad(v).unwrap().iter().any(|&x| x != 0.0));
        }
        let enc_w = m.params.find("enc.mu.weight").unwrap();
        let gw = g.grad(g.bound_param(enc_w).unwrap()).unwrap();
        assert!(gw.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn perfect_nested_autoencoder_on_identical_members_has_zero_nested_loss() {
        let cfg_m = ModelConfig {
            latent_dim: 2,
            nested_dim: 2,
            nested_width: 2,
            image: ImageShape::new(1, 1, 4),
            arch: OuterArch::Mlp { hidden: 3 },
            output_activation: Activation::Sigmoid,
        };
        let mut m = NestedVae::new(&cfg_m, 0).unwrap();
        for id in m.nested.params() {
            let name = m.params.name(id).to_string();
            let t = m.params.get_mut(id);
            let fill = if name.ends_with(".weight") && !name.contains("logvar") {
                Tensor::identity(2).into_data()
            } else if name == "nest.enc.logvar.bias" {
                vec![-10.0; 2]
            } else {
                vec![0.0; t.len()]
            };
            t.data_mut().copy_from_slice(&fill);
        }
        // make outer means non-negative so the ReLU layers act as identity
        let bias = m.params.find("enc.mu.bias").unwrap();
        m.params
            .get_mut(bias)
            .data_mut()
            .copy_from_slice(&[50.0, 50.0]);
        let mut b = batch(3, 4, 9);
        b.x_j = b.x_i.clone();
        let noise = PairNoise {
            nested_i: Tensor::zeros(&[3, 2]),
            nested_j: Tensor::zeros(&[3, 2]),
            ..PairNoise::sample(&mut ChaCha8Rng::seed_from_u64(0), 3, 2, 2)
        };
        let cfg = TrainConfig {
            gamma: 0.0,
            lambda: 1.0,
            beta_nest: 0.0,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let c = nested_loss(&mut g, &m, &b, 1.0, &noise, &cfg)
            .unwrap()
            .components;
        assert!(
            c.nested_i.abs() < 1e-20 && c.nested_j.abs() < 1e-20 && c.total.abs() < 1e-20,
            "{c:?}"
        );
    }

    fn relu_dense(w: &[f64], b: &[f64], x: &[f64], d_out: usize, relu: bool) -> Vec<f64> {
        (0..d_out)
            .map(|o| {
                let v = b[o]
                    + x.iter()
                        .enumerate()
                        .map(|(i, xi)| xi * w[i * d_out + o])
                        .sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn hand_set_toy_matches_step_by_step_oracle() {
        let cfg_m = ModelConfig {
            image: ImageShape::new(1, 1, 2),
            arch: OuterArch::Mlp { hidden: 2 },
            latent_dim: 2,
            nested_dim: 1,
            nested_width: 2,
            output_activation: Activation::Identity,
        };
        let mut m = NestedVae::new(&cfg_m, 0).unwrap();
        for (k, id) in m.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            for (j, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.3 * ((k * 7 + j * 3) as f64).sin() + 0.1;
            }
        }
        let p = |name: &str| m.params.get(m.params.find(name).unwrap()).data().to_vec();
        let xi = [[0.2, 0.8], [0.6, 0.1]];
        let xj = [[0.9, 0.4], [0.3, 0.5]];
        let eo = [[[0.5, -0.3], [1.2, 0.1]], [[-0.7, 0.4], [0.0, 2.0]]];
        let en = [[[0.8], [-1.1]], [[0.25], [0.6]]];
        let (beta, beta_nest, gamma, lambda) = (0.6, 0.2, 0.4, 0.9);

        let outer = |x: &[f64; 2], e: &[f64; 2]| {
            let h = relu_dense(&p("enc.fc.weight"), &p("enc.fc.bias"), x, 2, true);
            let mu = relu_dense(&p("enc.mu.weight"), &p("enc.mu.bias"), &h, 2, false);
            let lv: Vec<f64> =
                relu_dense(&p("enc.logvar.weight"), &p("enc.logvar.bias"), &h, 2, false)
                    .into_iter()
                    .map(|v| v.clamp(-10.0, 10.0))
                    .collect();
            let z: Vec<f64> = (0..2).map(|k| mu[k] + e[k] * (lv[k] / 2.0).exp()).collect();
            let d1 = relu_dense(&p("dec.fc1.weight"), &p("dec.fc1.bias"), &z, 2, true);
            let xh = relu_dense(&p("dec.fc2.weight"), &p("dec.fc2.bias"), &d1, 2, false);
            let recon: f64 = (0..2).map(|k| (xh[k] - x[k]).powi(2)).sum();
            let kl: f64 = 0.5
                * (0..2)
                    .map(|k| lv[k].exp() + mu[k] * mu[k] - lv[k] - 1.0)
                    .sum::<f64>();
            (recon + beta * kl, mu)
        };
        let nested = |input: &[f64], target: &[f64], e: &[f64; 1]| {
            let h1 = relu_dense(
                &p("nest.enc.fc1.weight"),
                &p("nest.enc.fc1.bias"),
                input,
                2,
                true,
            );
            let h2 = relu_dense(
                &p("nest.enc.fc2.weight"),
                &p("nest.enc.fc2.bias"),
                &h1,
                2,
                true,
            );
            let mu = relu_dense(
                &p("nest.enc.mu.weight"),
                &p("nest.enc.mu.bias"),
                &h2,
                1,
                false,
            );
            let lv = relu_dense(
                &p("nest.enc.logvar.weight"),
                &p("nest.enc.logvar.bias"),
                &h2,
                1,
                false,
            )[0]
            .clamp(-10.0, 10.0);
            let zs = [mu[0] + e[0] * (lv / 2.0).exp()];
            let d1 = relu_dense(
                &p("nest.dec.fc1.weight"),
                &p("nest.dec.fc1.bias"),
                &zs,
                2,
                true,
            );
            let d2 = relu_dense(
                &p("nest.dec.fc2.weight"),
                &p("nest.dec.fc2.bias"),
                &d1,
                2,
                true,
            );
            let out = relu_dense(
                &p("nest.dec.out.weight"),
                &p("nest.dec.out.bias"),
                &d2,
                2,
                false,
            );
            let mse: f64 = (0..2).map(|k| (out[k] - target[k]).powi(2)).sum();
            let kl = 0.5 * (lv.exp() + mu[0] * mu[0] - lv - 1.0);
            mse + beta_nest * kl
        };
        let mut want = 0.0;
        for r in 0..2 {
            let (li, mi) = outer(&xi[r], &eo[0][r]);
            let (lj, mj) = outer(&xj[r], &eo[1][r]);
            let ni = nested(&mi, &mj, &en[0][r]);
            let nj = nested(&mj, &mi, &en[1][r]);
            // every term is a batch mean
            want += (gamma * (li + lj) + lambda * (ni + nj)) / 2.0;
        }

        let t = |rows: Vec<f64>, shape: Vec<usize>| Tensor::new(shape, rows).unwrap();
        let b = PairBatch {
            x_i: t(xi.concat(), vec![2, 1, 1, 2]),
            x_j: t(xj.concat(), vec![2, 1, 1, 2]),
            shared_key: vec![1, 1],
            domain_i: vec![0, 0],
            domain_j: vec![2, 3],
            index_i: vec![0, 1],
            index_j: vec![2, 3],
        };
        let noise = PairNoise {
            outer_i: t(eo[0].concat(), vec![2, 2]),
            outer_j: t(eo[1].concat(), vec![2, 2]),
            nested_i: t(en[0].concat(), vec![2, 1]),
            nested_j: t(en[1].concat(), vec![2, 1]),
        };
        let cfg = TrainConfig {
            gamma,
            lambda,
            beta_nest,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let got = nested_loss(&mut g, &m, &b, beta, &noise, &cfg)
            .unwrap()
            .components
            .total;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn joint_loss_passes_gradient_check() {
        let m = NestedVae::new(&small(), 8).unwrap();
        let b = batch(2, 4, 8);
        let noise = PairNoise::sample(&mut ChaCha8Rng::seed_from_u64(8), 2, 3, 2);
        let cfg = TrainConfig {
            beta_nest: 0.3,
            ..TrainConfig::default()
        };
        let err = grad_check_params(
            &m.params,
            |g, store| {
                let model = NestedVae {
                    params: store.clone(),
                    ..m.clone()
                };
                nested_loss(g, &model, &b, 0.7, &noise, &cfg)
                    .map(|l| l.total)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
