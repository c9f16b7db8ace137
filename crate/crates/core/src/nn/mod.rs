//! Layers, parameter storage and initialization, and the ADAM optimizer.

mod adam;
pub mod arch;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamId, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

/// Owns every trainable tensor of a model. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, self.get(id))
    }
}

/// Uniform Glorot initialization in `±√(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        weight: ParamId,
        bias: ParamId,
        d_in: usize,
        d_out: usize,
        activation: Activation,
    },
    Conv {
        kernel: ParamId,
        bias: ParamId,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    Upsample {
        factor: usize,
    },
    Flatten,
    /// Reshapes each item to `shape` (the batch axis is kept).
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    /// Glorot-initialized dense layer with zero bias.
    pub fn dense<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_init(&[d_in, d_out], d_in, d_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Layer::Dense {
            weight,
            bias,
            d_in,
            d_out,
            activation,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let area = size * size;
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot_init(
                &[out_channels, in_channels, size, size],
                in_channels * area,
                out_channels * area,
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Layer::Conv {
            kernel,
            bias,
            in_channels,
            out_channels,
            size,
            stride,
            pad,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        match self {
            Layer::Dense {
                weight,
                bias,
                d_in,
                activation,
                ..
            } => {
                let shape = g.value(x).shape();
                if shape.len() != 2 || shape[1] != *d_in {
                    return Err(TensorError::Dimension {
                        op: "dense",
                        detail: format!("expected B x {d_in}, got {shape:?}"),
                    });
                }
                let w = store.bind(g, *weight);
                let b = store.bind(g, *bias);
                let h = g.matmul(x, w)?;
                let h = g.add_bias(h, b)?;
                activation.apply(g, h)
            }
            Layer::Conv {
                kernel,
                bias,
                stride,
                pad,
                activation,
                ..
            } => {
                let k = store.bind(g, *kernel);
                let b = store.bind(g, *bias);
                let h = g.conv2d(x, k, *stride, *pad)?;
                let h = g.add_bias(h, b)?;
                activation.apply(g, h)
            }
            Layer::Upsample { factor } => g.upsample_nearest(x, *factor),
            Layer::Flatten => g.flatten(x),
            Layer::Reshape { shape } => {
                let mut full = vec![g.value(x).rows()];
                full.extend_from_slice(shape);
                g.reshape(x, &full)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Layer::Dense { weight, bias, .. } => vec![*weight, *bias],
            Layer::Conv { kernel, bias, .. } => vec![*kernel, *bias],
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::params).collect()
    }
}

/// Gradient check over every scalar of every parameter in `store`, with the
/// loss rebuilt from scratch for each perturbation.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let grads = g.param_grads();

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        let v = g.scalar_value(y);
        if !v.is_finite() {
            return Err(TensorError::Numeric("loss is not finite".into()));
        }
        Ok(v)
    };

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let analytic = grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(crate::tensor::relative_error(*a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn glorot_bound_three_by_three() {
        assert_eq!(glorot_bound(3, 3), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot_init(&[3, 3], 3, 3, &mut rng);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn glorot_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let t = glorot_init(&[n], 3, 3, &mut rng);
        let mean = t.data().iter().sum::<f64>() / n as f64;
        // uniform on [-b, b] has σ = b/√3
        let tol = 3.0 * 1.0 / (3.0 * n as f64).sqrt();
        assert!(mean.abs() < tol, "{mean} vs {tol}");
    }

    #[test]
    fn glorot_is_seed_deterministic() {
        let a = glorot_init(&[4, 5], 4, 5, &mut ChaCha8Rng::seed_from_u64(7));
        let b = glorot_init(&[4, 5], 4, 5, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    fn dense_with(w: Tensor, b: Tensor, act: Activation) -> (ParamStore, Layer) {
        let mut store = ParamStore::new();
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let weight = store.add("w", w);
        let bias = store.add("b", b);
        (
            store,
            Layer::Dense {
                weight,
                bias,
                d_in,
                d_out,
                activation: act,
            },
        )
    }

    #[test]
    fn dense_identity_weights() {
        let (store, layer) = dense_with(
            Tensor::identity(3),
            Tensor::zeros(&[3]),
            Activation::Identity,
        );
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, vx).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn dense_zero_weights_returns_bias() {
        let c = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let (store, layer) = dense_with(Tensor::zeros(&[3, 2]), c.clone(), Activation::Identity);
        let mut g = Graph::new();
        let vx = g.constant(Tensor::full(&[4, 3], 9.0));
        let y = layer.forward(&mut g, &store, vx).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), c.data());
        }
    }

    #[test]
    fn dense_matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = Layer::dense(&mut store, "d", 4, 3, Activation::Relu, &mut rng);
        store
            .get_mut(ParamId(1))
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = glorot_init(&[5, 4], 1, 1, &mut rng);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, vx).unwrap();
        let (w, b) = (store.get(ParamId(0)), store.get(ParamId(1)));
        for i in 0..5 {
            for j in 0..3 {
                let mut s = b.data()[j];
                for p in 0..4 {
                    s += x.data()[i * 4 + p] * w.data()[p * 3 + j];
                }
                assert!((g.value(y).data()[i * 3 + j] - s.max(0.0)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let (store, layer) = dense_with(
            Tensor::identity(3),
            Tensor::zeros(&[3]),
            Activation::Identity,
        );
        let mut g = Graph::new();
        let vx = g.constant(Tensor::zeros(&[2, 4]));
        assert!(layer.forward(&mut g, &store, vx).is_err());
    }

    #[test]
    fn layers_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let net = Sequential::new(vec![
            Layer::conv(
                &mut store,
                "c1",
                1,
                2,
                3,
                2,
                1,
                Activation::Sigmoid,
                &mut rng,
            ),
            Layer::Upsample { factor: 2 },
            Layer::conv(
                &mut store,
                "c2",
                2,
                2,
                3,
                1,
                1,
                Activation::Sigmoid,
                &mut rng,
            ),
            Layer::Flatten,
            Layer::dense(
                &mut store,
                "d1",
                2 * 6 * 6,
                5,
                Activation::Sigmoid,
                &mut rng,
            ),
            Layer::dense(&mut store, "d2", 5, 4, Activation::Identity, &mut rng),
            Layer::Reshape {
                shape: vec![1, 2, 2],
            },
        ]);
        for id in store.clone().ids() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = glorot_init(&[2, 1, 6, 6], 1, 1, &mut rng);
        let err = grad_check_params(
            &store,
            |g, s| {
                let vx = g.constant(x.clone());
                let y = net.forward(g, s, vx)?;
                let sq = g.square(y)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
