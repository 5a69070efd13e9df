//! Frozen store of negative-sample embeddings.
//!
//! The encoder never changes during an attack, so negatives are encoded once
//! and only sampled afterwards.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::corpus::Corpus;
use crate::encoders::{encode_embed, hex_digest, ImageEncoder};
use crate::error::{Result, UapError};
use crate::par;
use crate::types::{snap_f32_within, Embedding, UNIT_NORM_TOL};

pub const BANK_MAGIC: &[u8; 4] = b"MBK1";

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    embeddings: Array2<f64>,
    source_ids: Vec<String>,
    source_digests: Vec<String>,
    encoder_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "D")]
    d: usize,
    dtype: String,
    encoder_fingerprint: String,
    source_ids: Vec<String>,
    /// Content digests of the source images, used for disjointness checks.
    #[serde(default)]
    source_digests: Vec<String>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn source_digests(&self) -> &[String] {
        &self.source_digests
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn row(&self, i: usize) -> Embedding {
        Embedding::unit_unchecked(self.embeddings.row(i).to_owned())
    }

    /// Digest of the embedding matrix, for immutability checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.embeddings.iter() {
            h.update(v.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }

    pub fn check_encoder(&self, encoder: &dyn ImageEncoder) -> Result<()> {
        let fp = encoder.fingerprint();
        if fp != self.encoder_fingerprint {
            return Err(UapError::Config(format!(
                "memory bank was built with encoder {} but is used with {}",
                short(&self.encoder_fingerprint),
                short(&fp)
            )));
        }
        Ok(())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// Encodes the first `m` corpus images.
pub fn build_membank(encoder: &dyn ImageEncoder, corpus: &Corpus, m: usize) -> Result<MemoryBank> {
    if m == 0 {
        return Err(UapError::Config("memory bank size must be at least 1".into()));
    }
    if corpus.len() < m {
        return Err(UapError::Config(format!(
            "corpus has {} images, memory bank needs {m}",
            corpus.len()
        )));
    }
    let images = &corpus.images()[..m];
    let rows = par::map(images, |img| encode_embed(encoder, img.image.view()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].dim();
    let mut embeddings = Array2::zeros((m, d));
    for (mut dst, e) in embeddings.axis_iter_mut(Axis(0)).zip(&rows) {
        // store exactly what the f32 file format can hold
        for (o, &v) in dst.iter_mut().zip(e.data().iter()) {
            *o = snap_f32_within(v, 1.0) as f64;
        }
    }
    Ok(MemoryBank {
        embeddings,
        source_ids: images.iter().map(|i| i.id.clone()).collect(),
        source_digests: images.iter().map(|i| i.digest.clone()).collect(),
        encoder_fingerprint: encoder.fingerprint(),
    })
}

/// `k` distinct rows drawn uniformly without replacement, in random order.
pub fn sample_negatives<R: Rng + ?Sized>(bank: &MemoryBank, k: usize, rng: &mut R) -> Result<Vec<Embedding>> {
    if k == 0 || k > bank.len() {
        return Err(UapError::Contract(format!(
            "cannot sample {k} negatives from a bank of {}",
            bank.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, bank.len(), k)
        .into_iter()
        .map(|i| bank.row(i))
        .collect())
}

pub fn save_membank(bank: &MemoryBank, path: &Path) -> Result<()> {
    let header = BankHeader {
        m: bank.len(),
        d: bank.dim(),
        dtype: "f32".into(),
        encoder_fingerprint: bank.encoder_fingerprint.clone(),
        source_ids: bank.source_ids.clone(),
        source_digests: bank.source_digests.clone(),
    };
    let bytes = container::encode(BANK_MAGIC, &header, bank.embeddings.iter().map(|&v| v as f32));
    container::write_atomic(path, &bytes)
}

pub fn load_membank(path: &Path) -> Result<MemoryBank> {
    let bytes = container::read(path)?;
    let (header, values): (BankHeader, _) = container::decode(path, &bytes, BANK_MAGIC, |h: &BankHeader| {
        if h.dtype != "f32" {
            return Err(UapError::format(path, format!("unsupported dtype '{}'", h.dtype)));
        }
        if h.m == 0 || h.d == 0 {
            return Err(UapError::format(path, "empty bank"));
        }
        if h.source_ids.len() != h.m {
            return Err(UapError::format(path, "source_ids length differs from M"));
        }
        h.m.checked_mul(h.d)
            .ok_or_else(|| UapError::format(path, "M*D overflows"))
    })?;
    let embeddings = Array2::from_shape_vec((header.m, header.d), values.into_iter().map(f64::from).collect())
        .expect("length checked");
    for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(UapError::format(path, format!("row {i} has norm {n}")));
        }
    }
    Ok(MemoryBank {
        embeddings,
        source_ids: header.source_ids,
        source_digests: header.source_digests,
        encoder_fingerprint: header.encoder_fingerprint,
    })
}
