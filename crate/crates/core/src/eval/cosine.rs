use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::{encode_embed, ImageEncoder};
use crate::error::{Result, UapError};
use crate::ops::{cosine_similarity, ordered_mean};
use crate::optim::stream_rng;
use crate::par;
use crate::types::Uap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosineConfig {
    pub weight: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for CosineConfig {
    fn default() -> Self {
        Self {
            weight: 1.0,
            draws: 100,
            seed: 0,
        }
    }
}

/// Mean cosine similarities of the four input pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    /// `v` vs `v + w·x`.
    pub positive: f64,
    /// `v` vs `x`.
    pub negative: f64,
    /// `clamp(x + v)` vs `x`.
    pub adv_clean: f64,
    /// `x1` vs `x2`.
    pub random_pair: f64,
}

impl CosineReport {
    pub fn to_csv(&self) -> String {
        format!(
            "pair,cosine\npositive,{}\nnegative,{}\nadv_clean,{}\nrandom,{}\n",
            self.positive, self.negative, self.adv_clean, self.random_pair
        )
    }
}

pub fn cosine_analysis(
    encoder: &dyn ImageEncoder,
    uap: &Uap,
    corpus: &Corpus,
    cfg: &CosineConfig,
) -> Result<CosineReport> {
    if corpus.len() < 2 {
        return Err(UapError::Config(format!(
            "cosine analysis needs at least 2 images, got {}",
            corpus.len()
        )));
    }
    if cfg.draws == 0 {
        return Err(UapError::Config("draws must be >= 1".into()));
    }
    let shape = encoder.input_shape();
    if uap.shape() != shape {
        return Err(UapError::Contract(format!(
            "perturbation shape {:?} differs from encoder input {:?}",
            uap.shape(),
            shape
        )));
    }
    corpus.check_shape(shape)?;

    let v = uap.data();
    let q = encode_embed(encoder, v.view())?;
    let rows = par::map_range(cfg.draws, |i| -> Result<[f64; 4]> {
        let mut rng = stream_rng(cfg.seed, i as u64);
        let a = rng.gen_range(0..corpus.len());
        let mut b = rng.gen_range(0..corpus.len() - 1);
        if b >= a {
            b += 1;
        }
        let x = corpus.get(a).image.data();
        let ex = encode_embed(encoder, x.view())?;
        let pos = encode_embed(encoder, (v + &(x * cfg.weight)).view())?;
        let adv = (x + v).mapv(|p| p.clamp(0.0, 1.0));
        let eadv = encode_embed(encoder, adv.view())?;
        let ex2 = encode_embed(encoder, corpus.get(b).image.view())?;
        Ok([
            cosine_similarity(&q, &pos)?,
            cosine_similarity(&q, &ex)?,
            cosine_similarity(&eadv, &ex)?,
            cosine_similarity(&ex, &ex2)?,
        ])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |j: usize| ordered_mean(rows.iter().map(|r| r[j]));
    Ok(CosineReport {
        positive: col(0),
        negative: col(1),
        adv_clean: col(2),
        random_pair: col(3),
    })
}
