use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{DataError, DomainDataset};
use crate::tensor::Tensor;

/// Rotation angles in degrees; the domain label is the index into this list.
pub const ROTATION_ANGLES: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];

/// Rotates every channel of a `C × H × W` image counter-clockwise by
/// `degrees` about its centre, with bilinear interpolation and zero fill.
pub fn rotate_image(img: &Tensor, degrees: f64) -> Result<Tensor, DataError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(DataError::Invalid(format!(
            "expected C x H x W image, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[ch * h * w + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotatedSplits {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Draws `per_class` source digits per class for training and a disjoint
/// `per_class` for testing, then renders each draw at every angle.
pub fn build_rotated_mnist(
    source: &DomainDataset,
    per_class: usize,
    angles: &[f64],
    seed: u64,
) -> Result<RotatedSplits, DataError> {
    if angles.is_empty() || per_class == 0 {
        return Err(DataError::Invalid(
            "need at least one angle and one sample per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = source.n_classes();
    let mut train_src = Vec::new();
    let mut test_src = Vec::new();
    for class in 0..n_classes as i32 {
        let mut idx = source.indices_where(|i| source.class_labels[i] == class);
        if idx.len() < 2 * per_class {
            return Err(DataError::InsufficientSamples {
                class,
                need: 2 * per_class,
                have: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        train_src.extend_from_slice(&idx[..per_class]);
        test_src.extend_from_slice(&idx[per_class..2 * per_class]);
    }
    let stamp = json!({
        "generator": "rotated-mnist",
        "per_class": per_class,
        "angles": angles,
        "seed": seed,
    });
    Ok(RotatedSplits {
        train: render(source, &train_src, angles, stamp.clone())?,
        test: render(source, &test_src, angles, stamp)?,
    })
}

fn render(
    source: &DomainDataset,
    picks: &[usize],
    angles: &[f64],
    meta: serde_json::Value,
) -> Result<DomainDataset, DataError> {
    let (c, h, w) = source.item_shape();
    let item = c * h * w;
    let n = picks.len() * angles.len();
    let mut data = Vec::with_capacity(n * item);
    let mut class = Vec::with_capacity(n);
    let mut domain = Vec::with_capacity(n);
    let mut src_idx = Vec::with_capacity(n);
    for (d, &angle) in angles.iter().enumerate() {
        for &i in picks {
            let img = Tensor::new(vec![c, h, w], source.images.row(i).to_vec())?;
            data.extend(rotate_image(&img, angle)?.into_data());
            class.push(source.class_labels[i]);
            domain.push(d as i32);
            src_idx.push(source.source_index[i]);
        }
    }
    let ds = DomainDataset {
        images: Tensor::new(vec![n, c, h, w], data)?,
        class_labels: class,
        domain_labels: domain,
        source_index: src_idx,
        factors: None,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
