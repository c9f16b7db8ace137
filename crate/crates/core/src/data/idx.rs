use std::path::Path;

use super::{DataError, DomainDataset};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            detail: "truncated header".into(),
        })
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`;
/// every item gets domain 0.
pub fn load_idx(images: &Path, labels: &Path) -> Result<DomainDataset, DataError> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let fmt = |path: &Path, detail: String| DataError::Format {
        path: path.to_path_buf(),
        detail,
    };

    let magic = be_u32(&ib, 0, images)?;
    if magic != IMAGE_MAGIC {
        return Err(fmt(
            images,
            format!("expected image magic 0x803, found {magic:#x}"),
        ));
    }
    let n = be_u32(&ib, 4, images)? as usize;
    let h = be_u32(&ib, 8, images)? as usize;
    let w = be_u32(&ib, 12, images)? as usize;
    let pixels = &ib[16..];
    if pixels.len() != n * h * w {
        return Err(fmt(
            images,
            format!(
                "header promises {n}x{h}x{w} pixels, file holds {}",
                pixels.len()
            ),
        ));
    }

    let magic = be_u32(&lb, 0, labels)?;
    if magic != LABEL_MAGIC {
        return Err(fmt(
            labels,
            format!("expected label magic 0x801, found {magic:#x}"),
        ));
    }
    let nl = be_u32(&lb, 4, labels)? as usize;
    let raw = &lb[8..];
    if nl != n || raw.len() != n {
        return Err(fmt(
            labels,
            format!("{} labels for {n} images", raw.len().min(nl)),
        ));
    }

    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images_t = Tensor::new(vec![n, 1, h, w], data)?;
    let class = raw.iter().map(|&l| l as i32).collect();
    DomainDataset::new(images_t, class, vec![0; n])
}
