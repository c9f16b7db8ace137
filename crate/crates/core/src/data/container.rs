//! Versioned dataset cache.
//!
//! ```text
//! "NFDS" | version u32 | N u64 | H u32 | W u32
//!        | images f64[N·H·W] | class i32[N] | domain i32[N] | source i64[N]
//!        | shared_dim u32 | domain_dim u32 | shared f64[N·shared_dim] | domain f64[N·domain_dim]
//!        | meta_len u64 | meta (UTF-8 JSON)
//! ```
//!
//! Everything is little-endian. Factor dims of zero mean "no factors".
//! Images are single-channel.

use std::path::Path;

use super::{DataError, DomainDataset, Factors};
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NFDS";

pub fn to_bytes(ds: &DomainDataset) -> Result<Vec<u8>, DataError> {
    ds.validate()?;
    let (c, h, w) = ds.item_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!(
            "container stores single-channel images, got {c} channels"
        )));
    }
    let n = ds.len();
    let mut out = Vec::with_capacity(32 + ds.images.len() * 8 + n * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    ds.images
        .data()
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    ds.class_labels
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    ds.domain_labels
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    ds.source_index
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    let (sd, dd) = ds
        .factors
        .as_ref()
        .map_or((0, 0), |f| (f.shared.row_len(), f.domain.row_len()));
    out.extend_from_slice(&(sd as u32).to_le_bytes());
    out.extend_from_slice(&(dd as u32).to_le_bytes());
    if let Some(f) = &ds.factors {
        f.shared
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        f.domain
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    let meta = serde_json::to_vec(&ds.meta).map_err(|e| DataError::Invalid(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Format {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {}", self.at),
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        Ok(self
            .take(n.saturating_mul(8))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DomainDataset, DataError> {
    let fmt = |detail: String| DataError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(fmt("not a dataset container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(fmt(format!("unsupported container version {version}")));
    }
    let n = r.u64()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let images = r.f64s(n.saturating_mul(h * w))?;
    let class = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let domain = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let source = r
        .take(n * 8)?
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let sd = r.u32()? as usize;
    let dd = r.u32()? as usize;
    let factors = if sd + dd > 0 {
        Some(Factors {
            shared: Tensor::new(vec![n, sd], r.f64s(n * sd)?)?,
            domain: Tensor::new(vec![n, dd], r.f64s(n * dd)?)?,
        })
    } else {
        None
    };
    let mlen = r.u64()?;
    let meta = serde_json::from_slice(r.take(mlen)?).map_err(|e| fmt(format!("metadata: {e}")))?;
    if r.at != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let ds = DomainDataset {
        images: Tensor::new(vec![n, 1, h, w], images)?,
        class_labels: class,
        domain_labels: domain,
        source_index: source,
        factors,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_container(path: &Path, ds: &DomainDataset) -> Result<(), DataError> {
    std::fs::write(path, to_bytes(ds)?).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_container(path: &Path) -> Result<DomainDataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, path)
}
