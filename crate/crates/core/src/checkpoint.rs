//! Checkpoint file format.
//!
//! Layout: magic bytes `PIMCKPT1`, a little-endian u32 manifest length, the
//! manifest text (a resolved config file), then every parameter tensor in
//! declaration order as little-endian f32. A 64-bit run appends a second
//! full pass of the same parameters as little-endian f64, so double
//! precision round-trips bit-exactly; the manifest's `run.precision` key
//! says whether that section is present.

use std::fs;
use std::path::Path;

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"PIMCKPT1";

#[derive(Debug)]
pub struct CheckpointData {
    pub manifest: String,
    /// All parameter elements, flattened in declaration order.
    pub f32_data: Vec<f32>,
    /// Present when the manifest says `run.precision=f64`.
    pub f64_data: Option<Vec<f64>>,
}

pub fn save<F: Real>(path: &Path, manifest: &str, store: &ParamStore<F>) -> Result<()> {
    let total = store.total_elements();
    let with_f64 = F::PRECISION_NAME == "f64";
    let mut bytes = Vec::with_capacity(
        MAGIC.len() + 4 + manifest.len() + total * if with_f64 { 12 } else { 4 },
    );
    bytes.extend_from_slice(MAGIC);
    let mlen = u32::try_from(manifest.len())
        .map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    bytes.extend_from_slice(&mlen.to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    for p in store.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    if with_f64 {
        for p in store.iter() {
            for &v in p.value.data() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + mlen;
    if bytes.len() < body {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest = String::from_utf8(bytes[12..body].to_vec())
        .map_err(|_| Error::Checkpoint("manifest is not utf-8".into()))?;
    let cfg = RunConfig::parse_str(&manifest)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    let payload = &bytes[body..];
    let (f32_bytes, f64_bytes): (&[u8], Option<&[u8]>) = match cfg.precision {
        Precision::F32 => (payload, None),
        Precision::F64 => {
            // n*4 + n*8 = len
            if payload.len() % 12 != 0 {
                return Err(Error::Checkpoint(format!(
                    "payload of {} bytes is not a whole f32+f64 section pair",
                    payload.len()
                )));
            }
            let n = payload.len() / 12;
            (&payload[..n * 4], Some(&payload[n * 4..]))
        }
    };
    if f32_bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("truncated parameter block".into()));
    }
    let f32_data = f32_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let f64_data = f64_bytes.map(|b| {
        b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Ok(CheckpointData { manifest, f32_data, f64_data })
}

/// Fill a freshly built parameter store from checkpoint data. The store's
/// precision picks the section: f64 stores use the exact f64 section when
/// present, everything else reads the f32 blocks.
pub fn restore<F: Real>(store: &mut ParamStore<F>, data: &CheckpointData) -> Result<()> {
    let total = store.total_elements();
    if data.f32_data.len() != total {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter elements, model needs {total}",
            data.f32_data.len()
        )));
    }
    let use_f64 = F::PRECISION_NAME == "f64" && data.f64_data.is_some();
    let mut offset = 0;
    for p in store.iter_mut() {
        let n = p.value.numel();
        let dst = p.value.data_mut();
        if use_f64 {
            let src = &data.f64_data.as_ref().unwrap()[offset..offset + n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = F::from_f64(s);
            }
        } else {
            let src = &data.f32_data[offset..offset + n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = F::from_f32(s);
            }
        }
        offset += n;
    }
    Ok(())
}
