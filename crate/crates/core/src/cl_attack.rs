//! Perturbation-centric UAP generation with an InfoNCE objective.
//!
//! The perturbation itself is the anchor, an augmented copy of it is the
//! positive, and negatives are embeddings of natural images drawn from a
//! frozen memory bank.

use std::collections::BTreeSet;

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentSpec};
use crate::corpus::Corpus;
use crate::encoders::{embed, embed_backward, encode_embed_backward, ImageEncoder, Pooling};
use crate::error::{Result, UapError};
use crate::membank::{sample_negatives, MemoryBank};
use crate::ops::{check_unit, linf_project_inplace};
use crate::optim::{stream_rng, Adam, InitMode};
use crate::types::{Embedding, Shape3, Uap, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClConfig {
    pub tau: f64,
    /// Negatives per step.
    pub k: usize,
    /// Weight of the natural image in the `add_image` augmentation.
    pub weight: f64,
    pub augment: AugmentKind,
    /// Overrides the default parameters of `augment` when set. For
    /// `add_image` the `weight` field above takes precedence.
    pub augment_spec: Option<AugmentSpec>,
    pub epsilon: f64,
    pub steps: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub init: InitMode,
    /// Backpropagate through the positive branch as well as the anchor.
    pub positive_grad: bool,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            k: 100,
            weight: 1.0,
            augment: AugmentKind::AddImage,
            augment_spec: None,
            epsilon: DEFAULT_EPSILON,
            steps: 2000,
            lr: 1e-2,
            adam_betas: (0.9, 0.999),
            seed: 0,
            init: InitMode::Zeros,
            positive_grad: true,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(UapError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(UapError::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(UapError::Config("steps must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(UapError::Config("k must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(UapError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// The augmentation actually applied at `shape`.
    pub fn effective_augment(&self, shape: Shape3) -> AugmentSpec {
        let spec = match self.augment_spec {
            Some(s) if s.kind() == self.augment => s,
            _ => AugmentSpec::default_for(self.augment, shape),
        };
        match spec {
            AugmentSpec::AddImage { .. } => AugmentSpec::AddImage { weight: self.weight },
            other => other,
        }
    }
}

/// Loss value and gradients of InfoNCE with respect to the anchor and positive.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub grad_q: Array1<f64>,
    pub grad_pos: Array1<f64>,
    pub pos_sim: f64,
    pub mean_neg_sim: f64,
}

fn check_infonce_inputs(q: &Embedding, k_pos: &Embedding, k_negs: &[Embedding], tau: f64) -> Result<()> {
    if k_negs.is_empty() {
        return Err(UapError::Contract("InfoNCE needs at least one negative".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(UapError::Contract(format!("temperature must be > 0, got {tau}")));
    }
    check_unit(q, "anchor")?;
    check_unit(k_pos, "positive")?;
    for k in k_negs {
        check_unit(k, "negative")?;
        if k.dim() != q.dim() {
            return Err(UapError::Contract("negative dimension differs from anchor".into()));
        }
    }
    if k_pos.dim() != q.dim() {
        return Err(UapError::Contract("positive dimension differs from anchor".into()));
    }
    Ok(())
}

/// `-log( e^{q·k+/τ} / (e^{q·k+/τ} + Σ e^{q·k-/τ}) )`, evaluated as a
/// max-shifted log-sum-exp.
pub fn infonce_loss(q: &Embedding, k_pos: &Embedding, k_negs: &[Embedding], tau: f64) -> Result<f64> {
    Ok(infonce_loss_grad(q, k_pos, k_negs, tau)?.loss)
}

pub fn infonce_loss_grad(q: &Embedding, k_pos: &Embedding, k_negs: &[Embedding], tau: f64) -> Result<InfoNceGrad> {
    check_infonce_inputs(q, k_pos, k_negs, tau)?;
    let pos_sim = q.data().dot(k_pos.data());
    let neg_sims: Vec<f64> = k_negs.iter().map(|k| q.data().dot(k.data())).collect();
    let z0 = pos_sim / tau;
    let zmax = neg_sims.iter().map(|s| s / tau).fold(z0, f64::max);
    let e0 = (z0 - zmax).exp();
    let es: Vec<f64> = neg_sims.iter().map(|s| (s / tau - zmax).exp()).collect();
    let denom = e0 + es.iter().sum::<f64>();
    let loss = denom.ln() - (z0 - zmax);

    // dL/dz_i = p_i - [i == 0]
    let p0 = e0 / denom;
    let mut grad_q = k_pos.data() * ((p0 - 1.0) / tau);
    for (k, e) in k_negs.iter().zip(&es) {
        grad_q.scaled_add(e / denom / tau, k.data());
    }
    let grad_pos = q.data() * ((p0 - 1.0) / tau);
    let mean_neg_sim = neg_sims.iter().sum::<f64>() / neg_sims.len() as f64;
    Ok(InfoNceGrad {
        loss,
        grad_q,
        grad_pos,
        pos_sim,
        mean_neg_sim,
    })
}

pub fn init_uap(shape: Shape3, epsilon: f64, mode: InitMode, seed: u64) -> Result<Uap> {
    if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
        return Err(UapError::Contract(format!("invalid shape {shape:?}")));
    }
    let data = match mode {
        InitMode::Zeros => Array3::zeros(shape),
        InitMode::Uniform => {
            let mut rng = stream_rng(seed, 0xC0FFEE);
            Array3::from_shape_fn(shape, |_| {
                if epsilon == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-epsilon..=epsilon)
                }
            })
        }
    };
    Uap::new(data, epsilon)
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    /// Anchor-positive similarity (contrastive runs only).
    pub pos_sim: Option<f64>,
    /// Mean anchor-negative similarity (contrastive runs only).
    pub neg_sim: Option<f64>,
    /// `max |v|` after the projection of this iteration.
    pub linf: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub uap: Uap,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    /// `iteration,loss,pos_sim,neg_sim` with empty cells for absent values.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss,pos_sim,neg_sim\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                r.loss,
                opt(r.pos_sim),
                opt(r.neg_sim)
            ));
        }
        out
    }
}

pub(crate) fn join_digests(sets: impl IntoIterator<Item = BTreeSet<String>>) -> String {
    let mut all = BTreeSet::new();
    for s in sets {
        all.extend(s);
    }
    all.into_iter().collect::<Vec<_>>().join(",")
}

/// Optimizes a UAP against `encoder` using the memory bank for negatives and
/// `aug_corpus` for the `add_image` positive.
pub fn train_uap_cl(
    encoder: &dyn ImageEncoder,
    aug_corpus: &Corpus,
    bank: &MemoryBank,
    config: &ClConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    bank.check_encoder(encoder)?;
    if aug_corpus.is_empty() {
        return Err(UapError::Config("augmentation corpus is empty".into()));
    }
    if config.k > bank.len() {
        return Err(UapError::Config(format!(
            "k = {} exceeds memory bank size {}",
            config.k,
            bank.len()
        )));
    }
    let shape = encoder.input_shape();
    aug_corpus.check_shape(shape)?;
    let augment = config.effective_augment(shape);
    augment.validate(shape)?;

    let init = init_uap(shape, config.epsilon, config.init, config.seed)?;
    let mut v = init.data().clone();
    let mut adam = Adam::new(shape, config.lr, config.adam_betas);
    let mut aug_rng = stream_rng(config.seed, 1);
    let mut neg_rng = stream_rng(config.seed, 2);
    let mut trace = Vec::with_capacity(config.steps);

    for it in 0..config.steps {
        let q_fm = encoder.encode(v.view())?;
        let q = embed(&q_fm)?;
        let draw = augment.draw(shape, &mut aug_rng, aug_corpus)?;
        let pos_input = draw.forward(v.view());
        let k_fm = encoder.encode(pos_input.view())?;
        let k_pos = embed(&k_fm)?;
        let negs = sample_negatives(bank, config.k, &mut neg_rng)?;
        let g = infonce_loss_grad(&q, &k_pos, &negs, config.tau)?;
        if !g.loss.is_finite() {
            return Err(UapError::Divergence {
                iteration: it,
                detail: format!("loss = {}, pos_sim = {}", g.loss, g.pos_sim),
            });
        }

        let mut grad = encoder.encode_backward(v.view(), embed_backward(&q_fm, Pooling::Flatten, &g.grad_q).view())?;
        if config.positive_grad {
            let gk = encode_embed_backward(encoder, pos_input.view(), &g.grad_pos)?;
            grad += &draw.backward(gk.view());
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(UapError::Divergence {
                iteration: it,
                detail: "non-finite gradient".into(),
            });
        }
        adam.step(&mut v, &grad);
        linf_project_inplace(&mut v, config.epsilon).map_err(|e| UapError::Divergence {
            iteration: it,
            detail: e.to_string(),
        })?;
        trace.push(TraceRow {
            iteration: it,
            loss: g.loss,
            pos_sim: Some(g.pos_sim),
            neg_sim: Some(g.mean_neg_sim),
            linf: v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }

    let cfg_json = serde_json::to_string(config).expect("config serializes");
    let uap = Uap::new(v, config.epsilon)?
        .with_meta("method", "contrastive")
        .with_meta("seed", config.seed)
        .with_meta("anchor_input", "raw")
        .with_meta("augment", augment.kind())
        .with_meta("tau", config.tau)
        .with_meta("k", config.k)
        .with_meta("bank_size", bank.len())
        .with_meta("weight", config.weight)
        .with_meta("config", &cfg_json)
        .with_meta("config_hash", crate::config_hash(&cfg_json))
        .with_meta("encoder_fingerprint", encoder.fingerprint())
        .with_meta(
            "excluded_digests",
            join_digests([aug_corpus.digests(), bank.source_digests().iter().cloned().collect()]),
        );
    Ok(TrainOutcome { uap, trace })
}
