//! `UAP1` perturbation files.
//!
//! ```text
//! b"UAP1" | u32 LE header length | JSON {shape:[H,W,C], dtype:"f32", epsilon, meta} | H*W*C f32 LE
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Result, UapError};
use crate::types::{Uap, BUDGET_SLACK};

pub const UAP_MAGIC: &[u8; 4] = b"UAP1";

#[derive(Debug, Serialize, Deserialize)]
struct UapHeader {
    shape: [usize; 3],
    dtype: String,
    epsilon: f64,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn encode_uap(uap: &Uap) -> Vec<u8> {
    let (h, w, c) = uap.shape();
    let header = UapHeader {
        shape: [h, w, c],
        dtype: "f32".into(),
        epsilon: uap.epsilon(),
        meta: uap.meta.clone(),
    };
    container::encode(UAP_MAGIC, &header, uap.data().iter().map(|&v| v as f32))
}

pub fn save_uap(uap: &Uap, path: &Path) -> Result<()> {
    container::write_atomic(path, &encode_uap(uap))
}

pub fn decode_uap(path: &Path, bytes: &[u8]) -> Result<Uap> {
    let (header, values): (UapHeader, _) = container::decode(path, bytes, UAP_MAGIC, |h: &UapHeader| {
        if h.dtype != "f32" {
            return Err(UapError::format(path, format!("unsupported dtype '{}'", h.dtype)));
        }
        if h.shape.contains(&0) {
            return Err(UapError::format(path, "shape has a zero extent"));
        }
        if !(h.epsilon.is_finite() && h.epsilon >= 0.0) {
            return Err(UapError::format(path, format!("invalid epsilon {}", h.epsilon)));
        }
        h.shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| UapError::format(path, "shape overflows"))
    })?;
    let [h, w, c] = header.shape;
    let data = Array3::from_shape_vec((h, w, c), values.into_iter().map(f64::from).collect()).expect("length checked");
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(UapError::format(path, format!("non-finite entry {bad}")));
    }
    let worst = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > header.epsilon + BUDGET_SLACK {
        return Err(UapError::format(
            path,
            format!("max |v| = {worst} exceeds declared epsilon {}", header.epsilon),
        ));
    }
    let mut uap = Uap::new(data, header.epsilon).map_err(|e| UapError::format(path, e.to_string()))?;
    uap.meta = header.meta;
    Ok(uap)
}

pub fn load_uap(path: &Path) -> Result<Uap> {
    let bytes = container::read(path)?;
    decode_uap(path, &bytes)
}
