use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DataError, DomainDataset, Factors};
use crate::tensor::Tensor;

/// Synthetic confounded additive-noise dataset description:
/// `x = f_d(z_d) + g_d(z_s) + noise · ε` for each domain `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanmSpec {
    pub shared_dim: usize,
    pub domain_dim: usize,
    pub n_domains: usize,
    pub height: usize,
    pub width: usize,
    /// Hidden width of every random two-layer mixing map.
    pub hidden: usize,
    pub noise_scale: f64,
    /// Seed that fixes the mixing maps, independent of the sampling seed.
    pub map_seed: u64,
    /// Shift every map so its output has zero mean under a standard normal input.
    pub center_maps: bool,
    /// Use one `g` for all domains instead of one per domain.
    pub common_shared_map: bool,
}

impl Default for CanmSpec {
    fn default() -> Self {
        Self {
            shared_dim: 2,
            domain_dim: 2,
            n_domains: 4,
            height: 8,
            width: 8,
            hidden: 16,
            noise_scale: 0.05,
            map_seed: 1234,
            center_maps: true,
            common_shared_map: true,
        }
    }
}

impl CanmSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shared_dim == 0
            || self.domain_dim == 0
            || self.n_domains == 0
            || self.height == 0
            || self.width == 0
            || self.hidden == 0
        {
            return Err(DataError::Invalid(
                "CANM dimensions must be at least 1".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(DataError::Invalid(format!(
                "noise scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TwoLayer {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d_in: usize,
    hidden: usize,
}

impl TwoLayer {
    fn random<R: Rng>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let mut gauss = |n: usize, s: f64| {
            (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        };
        Self {
            w1: gauss(hidden * d_in, 1.5 / (d_in as f64).sqrt()),
            b1: gauss(hidden, 0.5),
            w2: gauss(d_out * hidden, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; d_out],
            d_in,
            hidden,
        }
    }

    fn center<R: Rng>(&mut self, samples: usize, rng: &mut R) {
        let mut mean = vec![0.0; self.b2.len()];
        for _ in 0..samples {
            let z: Vec<f64> = (0..self.d_in).map(|_| rng.sample(StandardNormal)).collect();
            self.apply_add(&z, &mut mean);
        }
        for (b, m) in self.b2.iter_mut().zip(mean) {
            *b -= m / samples as f64;
        }
    }

    fn apply_add(&self, z: &[f64], out: &mut [f64]) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let row = &self.w1[k * self.d_in..(k + 1) * self.d_in];
                (self.b1[k] + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        for (p, o) in out.iter_mut().enumerate() {
            let row = &self.w2[p * self.hidden..(p + 1) * self.hidden];
            *o += self.b2[p] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

const CENTER_SAMPLES: usize = 20_000;

/// The per-domain mixing maps `f_d` (domain factor) and `g_d` (shared factor).
#[derive(Clone, Debug)]
pub struct CanmMaps {
    spec: CanmSpec,
    f: Vec<TwoLayer>,
    g: Vec<TwoLayer>,
}

impl CanmMaps {
    pub fn new(spec: &CanmSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.map_seed);
        let pixels = spec.height * spec.width;
        let mut f = Vec::new();
        let mut g: Vec<TwoLayer> = Vec::new();
        for d in 0..spec.n_domains {
            f.push(TwoLayer::random(
                spec.domain_dim,
                spec.hidden,
                pixels,
                &mut rng,
            ));
            let gd = TwoLayer::random(spec.shared_dim, spec.hidden, pixels, &mut rng);
            g.push(if spec.common_shared_map && d > 0 {
                g[0].clone()
            } else {
                gd
            });
        }
        if spec.center_maps {
            for m in f.iter_mut().chain(g.iter_mut()) {
                m.center(CENTER_SAMPLES, &mut rng);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            f,
            g,
        })
    }

    /// Renders one image without noise.
    pub fn render(&self, domain: usize, z_domain: &[f64], z_shared: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.height * self.spec.width];
        self.f[domain].apply_add(z_domain, &mut out);
        self.g[domain].apply_add(z_shared, &mut out);
        out
    }
}

/// Draws `n_per_domain` shared factors and renders each of them once in
/// every domain with a fresh domain factor and noise. Item `k` of every
/// domain shares `z_s` and carries `source_index = k`; the class label is
/// the sign of the first shared factor.
pub fn generate_canm(
    spec: &CanmSpec,
    n_per_domain: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    let maps = CanmMaps::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let shared: Vec<Vec<f64>> = (0..n_per_domain).map(|_| normal(spec.shared_dim)).collect();
    let pixels = spec.height * spec.width;
    let n = n_per_domain * spec.n_domains;
    let mut images = Vec::with_capacity(n * pixels);
    let mut zs_all = Vec::with_capacity(n * spec.shared_dim);
    let mut zd_all = Vec::with_capacity(n * spec.domain_dim);
    let mut class = Vec::with_capacity(n);
    let mut domain = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    for d in 0..spec.n_domains {
        for (k, zs) in shared.iter().enumerate() {
            let zd = normal(spec.domain_dim);
            let eps = normal(pixels);
            let mut x = maps.render(d, &zd, zs);
            for (v, e) in x.iter_mut().zip(eps) {
                *v += spec.noise_scale * e;
            }
            images.extend(x);
            zs_all.extend_from_slice(zs);
            zd_all.extend(zd);
            class.push((zs[0] > 0.0) as i32);
            domain.push(d as i32);
            source.push(k as i64);
        }
    }
    let ds = DomainDataset {
        images: Tensor::new(vec![n, 1, spec.height, spec.width], images)?,
        class_labels: class,
        domain_labels: domain,
        source_index: source,
        factors: Some(Factors {
            shared: Tensor::new(vec![n, spec.shared_dim], zs_all)?,
            domain: Tensor::new(vec![n, spec.domain_dim], zd_all)?,
        }),
        meta: json!({
            "generator": "canm",
            "spec": spec,
            "n_per_domain": n_per_domain,
            "seed": seed,
        }),
    };
    ds.validate()?;
    Ok(ds)
}
