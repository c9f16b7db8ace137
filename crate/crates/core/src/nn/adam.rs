use crate::tensor::{ParamId, Tensor};

use super::{NnError, ParamStore};

/// ADAM with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters missing from `grads` are treated as
    /// having zero gradient. A non-finite gradient aborts the whole step
    /// before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
    ) -> Result<(), NnError> {
        for (id, g) in grads {
            if g.len() != store.get(*id).len() {
                return Err(NnError::Checkpoint(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    store.name(*id),
                    g.len(),
                    store.get(*id).len()
                )));
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut by_id: Vec<Option<&[f64]>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.0] = Some(g.data());
        }
        for id in store.ids() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let grad = by_id[id.0];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
