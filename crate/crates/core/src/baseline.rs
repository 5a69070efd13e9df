//! Image-centric (supervised) attacks.
//!
//! The clean prediction of each training image is frozen as ground truth and
//! the perturbation is optimized to remove the formerly masked region. The
//! image-dependent attack keeps one image; the image-agnostic variant visits
//! a different training image every iteration.

use ndarray::{Array2, Array3, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cl_attack::{init_uap, join_digests, TraceRow, TrainOutcome};
use crate::corpus::{Corpus, FeatureCache};
use crate::encoders::{embed, embed_backward, FeatureMap, Pooling, Segmenter};
use crate::error::{Result, UapError};
use crate::ops::{binarize_mask, linf_project_inplace};
use crate::optim::{stream_rng, Adam, InitMode};
use crate::types::{BinaryMask, ImageTensor, MaskLogits, Prompt, Shape3, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    ImageDependent,
    ImageAgnostic,
}

/// Where the supervised loss is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineObjective {
    /// Squared hinge on the decoder logits of formerly masked pixels.
    #[default]
    MaskLogits,
    /// Cosine similarity between adversarial and clean encoder embeddings.
    EncoderFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub mode: BaselineMode,
    pub prompts_per_image: usize,
    pub target_logit: f64,
    pub seed: u64,
    pub objective: BaselineObjective,
    /// Draw a new prompt on every visit of an image (agnostic mode).
    pub fresh_prompts: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            steps: 300,
            lr: 1e-2,
            adam_betas: (0.9, 0.999),
            mode: BaselineMode::ImageAgnostic,
            prompts_per_image: 1,
            target_logit: -10.0,
            seed: 0,
            objective: BaselineObjective::MaskLogits,
            fresh_prompts: true,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(UapError::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(UapError::Config("steps must be >= 1".into()));
        }
        if self.prompts_per_image == 0 {
            return Err(UapError::Config("prompts_per_image must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(UapError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Value of the removal loss; `empty_mask` flags a clean mask with no pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemovalLoss {
    pub value: f64,
    pub empty_mask: bool,
}

/// Mean over formerly masked pixels of `max(logit - target, 0)^2`.
pub fn mask_removal_loss(adv_logits: &MaskLogits, clean_mask: &BinaryMask, target_logit: f64) -> Result<RemovalLoss> {
    if adv_logits.dim() != clean_mask.dim() {
        return Err(UapError::Contract("logit and mask shapes differ".into()));
    }
    let n = clean_mask.area();
    if n == 0 {
        log::warn!("mask removal loss on an empty clean mask");
        return Ok(RemovalLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut sum = 0.0;
    Zip::from(&adv_logits.0).and(&clean_mask.0).for_each(|&y, &m| {
        if m {
            let e = (y - target_logit).max(0.0);
            sum += e * e;
        }
    });
    Ok(RemovalLoss {
        value: sum / n as f64,
        empty_mask: false,
    })
}

/// Gradient of [`mask_removal_loss`] with respect to the logits.
pub fn mask_removal_grad(adv_logits: &MaskLogits, clean_mask: &BinaryMask, target_logit: f64) -> Result<Array2<f64>> {
    if adv_logits.dim() != clean_mask.dim() {
        return Err(UapError::Contract("logit and mask shapes differ".into()));
    }
    let n = clean_mask.area();
    let mut g = Array2::zeros(adv_logits.dim());
    if n == 0 {
        return Ok(g);
    }
    Zip::from(&mut g)
        .and(&adv_logits.0)
        .and(&clean_mask.0)
        .for_each(|g, &y, &m| {
            if m {
                *g = 2.0 * (y - target_logit).max(0.0) / n as f64;
            }
        });
    Ok(g)
}

/// Uniform random point prompts for training visits.
pub fn training_prompts(seed: u64, image_index: usize, visit: usize, shape: Shape3, n: usize) -> Vec<Prompt> {
    let stream = ((image_index as u64) << 32) | visit as u64;
    let mut rng = stream_rng(seed ^ 0x5EED_BA5E, stream);
    (0..n)
        .map(|_| Prompt::Point {
            row: rng.gen_range(0..shape.0),
            col: rng.gen_range(0..shape.1),
        })
        .collect()
}

/// `clamp(x + v)` together with the mask of entries where the clamp is inactive.
fn adversarial_input(x: &ImageTensor, v: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let sum = x.data() + v;
    let pass = sum.mapv(|s| if (0.0..=1.0).contains(&s) { 1.0 } else { 0.0 });
    (sum.mapv(|s| s.clamp(0.0, 1.0)), pass)
}

struct Target<'a> {
    image: &'a ImageTensor,
    clean: &'a FeatureMap,
    prompts: Vec<Prompt>,
}

/// Loss and dL/dv for one visit.
fn visit_loss_grad(
    seg: &dyn Segmenter,
    target: &Target<'_>,
    v: &Array3<f64>,
    cfg: &BaselineConfig,
) -> Result<(f64, Array3<f64>)> {
    let (adv, pass) = adversarial_input(target.image, v);
    let enc = seg.encoder();
    let adv_fm = enc.encode(adv.view())?;
    let (loss, grad_fm) = match cfg.objective {
        BaselineObjective::MaskLogits => {
            let mut total = 0.0;
            let mut grad_fm = Array3::zeros(adv_fm.dim());
            let scale = 1.0 / target.prompts.len() as f64;
            for p in &target.prompts {
                let clean_mask = binarize_mask(&seg.decode(target.clean, p)?);
                let logits = seg.decode(&adv_fm, p)?;
                total += mask_removal_loss(&logits, &clean_mask, cfg.target_logit)?.value * scale;
                let gl = mask_removal_grad(&logits, &clean_mask, cfg.target_logit)? * scale;
                grad_fm += &seg.decode_backward(&adv_fm, p, gl.view())?;
            }
            (total, grad_fm)
        }
        BaselineObjective::EncoderFeatures => {
            let clean = embed(target.clean)?;
            let a = embed(&adv_fm)?;
            let sim = a.data().dot(clean.data());
            (sim, embed_backward(&adv_fm, Pooling::Flatten, clean.data()))
        }
    };
    let g_img = enc.encode_backward(adv.view(), grad_fm.view())?;
    Ok((loss, g_img * pass))
}

fn run_loop<'a>(
    seg: &dyn Segmenter,
    cfg: &BaselineConfig,
    mut schedule: impl FnMut(usize) -> Result<Target<'a>>,
) -> Result<(Array3<f64>, Vec<TraceRow>)> {
    let shape = seg.input_shape();
    let mut v = init_uap(shape, cfg.epsilon, InitMode::Zeros, cfg.seed)?.data().clone();
    let mut adam = Adam::new(shape, cfg.lr, cfg.adam_betas);
    let mut trace = Vec::with_capacity(cfg.steps);
    for it in 0..cfg.steps {
        let target = schedule(it)?;
        let (loss, grad) = visit_loss_grad(seg, &target, &v, cfg)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(UapError::Divergence {
                iteration: it,
                detail: format!("loss = {loss}"),
            });
        }
        adam.step(&mut v, &grad);
        linf_project_inplace(&mut v, cfg.epsilon).map_err(|e| UapError::Divergence {
            iteration: it,
            detail: e.to_string(),
        })?;
        trace.push(TraceRow {
            iteration: it,
            loss,
            pos_sim: None,
            neg_sim: None,
            linf: v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }
    Ok((v, trace))
}

fn finish(
    v: Array3<f64>,
    trace: Vec<TraceRow>,
    cfg: &BaselineConfig,
    mode: BaselineMode,
    seg: &dyn Segmenter,
    digests: String,
) -> Result<TrainOutcome> {
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    let mode_name = match mode {
        BaselineMode::ImageDependent => "image_dependent",
        BaselineMode::ImageAgnostic => "image_agnostic",
    };
    let objective = match cfg.objective {
        BaselineObjective::MaskLogits => "mask_logits",
        BaselineObjective::EncoderFeatures => "encoder_features",
    };
    let uap = crate::types::Uap::new(v, cfg.epsilon)?
        .with_meta("method", format!("baseline_{mode_name}"))
        .with_meta("objective", objective)
        .with_meta("seed", cfg.seed)
        .with_meta("config", &cfg_json)
        .with_meta("config_hash", crate::config_hash(&cfg_json))
        .with_meta("encoder_fingerprint", seg.encoder().fingerprint())
        .with_meta("excluded_digests", digests);
    Ok(TrainOutcome { uap, trace })
}

/// Optimizes a perturbation for a single image and fixed prompts.
pub fn attack_image_dependent(
    seg: &dyn Segmenter,
    image: &ImageTensor,
    prompts: &[Prompt],
    cfg: &BaselineConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = seg.input_shape();
    if image.shape() != shape {
        return Err(UapError::Contract(format!(
            "image shape {:?} differs from segmenter input {:?}",
            image.shape(),
            shape
        )));
    }
    if prompts.is_empty() {
        return Err(UapError::Contract("at least one prompt is required".into()));
    }
    for p in prompts {
        p.validate(shape.0, shape.1)?;
    }
    // ground truth is computed once and frozen
    let clean = seg.encoder().encode(image.view())?;
    let (v, trace) = run_loop(seg, cfg, |_| {
        Ok(Target {
            image,
            clean: &clean,
            prompts: prompts.to_vec(),
        })
    })?;
    let digest = crate::corpus::image_digest(image);
    finish(v, trace, cfg, BaselineMode::ImageDependent, seg, digest)
}

/// Universal variant: each iteration attacks the next image of a shuffled
/// round-robin over `train`. Clean features are cached per image.
pub fn attack_image_agnostic(seg: &dyn Segmenter, train: &Corpus, cfg: &BaselineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = seg.input_shape();
    if train.is_empty() {
        return Err(UapError::Config("training corpus is empty".into()));
    }
    if train.len() < 2 {
        log::warn!("image-agnostic attack on a single image degenerates to the image-dependent attack");
    }
    train.check_shape(shape)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 3));
    let mut visits = vec![0usize; train.len()];
    let mut cache = FeatureCache::new(train.len());
    // prime the cache so the schedule closure can hand out shared borrows
    for &i in &order {
        cache.get_or_insert_with(i, || seg.encoder().encode(train.get(i).image.view()))?;
    }
    let cache = cache;
    let (v, trace) = run_loop(seg, cfg, |it| {
        let idx = order[it % order.len()];
        let visit = if cfg.fresh_prompts { visits[idx] } else { 0 };
        visits[idx] += 1;
        Ok(Target {
            image: &train.get(idx).image,
            clean: cache.get(idx).expect("primed"),
            prompts: training_prompts(cfg.seed, idx, visit, shape, cfg.prompts_per_image),
        })
    })?;
    finish(
        v,
        trace,
        cfg,
        BaselineMode::ImageAgnostic,
        seg,
        join_digests([train.digests()]),
    )
}

/// Dispatches on `cfg.mode`; the dependent mode attacks the first image with
/// its first-visit training prompts.
pub fn run_baseline(seg: &dyn Segmenter, train: &Corpus, cfg: &BaselineConfig) -> Result<TrainOutcome> {
    match cfg.mode {
        BaselineMode::ImageAgnostic => attack_image_agnostic(seg, train, cfg),
        BaselineMode::ImageDependent => {
            if train.is_empty() {
                return Err(UapError::Config("training corpus is empty".into()));
            }
            let prompts = training_prompts(cfg.seed, 0, 0, seg.input_shape(), cfg.prompts_per_image);
            attack_image_dependent(seg, &train.get(0).image, &prompts, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::mask_from_fn;
    use ndarray::arr2;

    #[test]
    fn saturated_hinge_is_zero() {
        let logits = MaskLogits(Array2::from_elem((4, 4), -12.0));
        let mask = mask_from_fn(4, 4, |i, _| i < 2);
        assert_eq!(mask_removal_loss(&logits, &mask, -10.0).unwrap().value, 0.0);
        assert!(mask_removal_grad(&logits, &mask, -10.0)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_closed_form() {
        let logits = MaskLogits(arr2(&[[-9.0, 5.0], [5.0, 5.0]]));
        let mask = mask_from_fn(2, 2, |i, j| i == 0 && j == 0);
        assert_eq!(mask_removal_loss(&logits, &mask, -10.0).unwrap().value, 1.0);
    }

    #[test]
    fn empty_mask_flags_warning() {
        let logits = MaskLogits(Array2::zeros((2, 2)));
        let r = mask_removal_loss(&logits, &mask_from_fn(2, 2, |_, _| false), -10.0).unwrap();
        assert!(r.empty_mask);
        assert_eq!(r.value, 0.0);
        assert!(mask_removal_loss(&logits, &mask_from_fn(3, 2, |_, _| true), -10.0).is_err());
    }

    #[test]
    fn training_prompts_are_seeded() {
        let a = training_prompts(3, 1, 0, (64, 64, 3), 4);
        assert_eq!(a, training_prompts(3, 1, 0, (64, 64, 3), 4));
        assert_ne!(a, training_prompts(3, 1, 1, (64, 64, 3), 4));
        assert_ne!(a, training_prompts(3, 2, 0, (64, 64, 3), 4));
    }
}
