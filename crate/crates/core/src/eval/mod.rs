//! Measurement battery: mIoU between clean and adversarial masks, the
//! uniform-noise control, embedding diagnostics, ablation sweeps and
//! qualitative overlays.

mod cosine;
mod overlay;
mod plot;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::Segmenter;
use crate::error::{Result, UapError};
use crate::ops::{binarize_mask, iou, ordered_mean};
use crate::optim::stream_rng;
use crate::par;
use crate::types::{ImageTensor, Prompt, PromptKind, Shape3, Uap};

pub use cosine::{cosine_analysis, CosineConfig, CosineReport};
pub use overlay::{emit_overlays, split_panels, OverlayRecord};
pub use plot::write_line_plot_svg;
pub use sweep::{sweep, SweepCell, SweepInputs, SweepKind, SweepReport};

/// Where evaluation point prompts are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSampling {
    /// Uniform over the whole pixel grid.
    #[default]
    Uniform,
    /// Rejection-sampled so that the clean mask covers less than half the
    /// image, i.e. the point lands on an object rather than the background.
    Foreground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_images: usize,
    pub prompt_kind: PromptKind,
    pub prompts_per_image: usize,
    pub seed: u64,
    /// Clamp `x + v` to [0,1] before inference.
    pub clamp_adv: bool,
    pub sampling: PromptSampling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            prompt_kind: PromptKind::Point,
            prompts_per_image: 1,
            seed: 0,
            clamp_adv: true,
            sampling: PromptSampling::Uniform,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(UapError::Config("n_images must be >= 1".into()));
        }
        if self.prompts_per_image == 0 {
            return Err(UapError::Config("prompts_per_image must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::config_hash(&serde_json::to_string(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageIou {
    pub image_id: String,
    pub prompt: Prompt,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean IoU in percent.
    pub miou: f64,
    pub per_image: Vec<ImageIou>,
    pub config_hash: String,
    pub clamp_adv: bool,
    pub uap_meta: BTreeMap<String, String>,
}

impl EvalReport {
    /// `image_id,prompt_kind,row,col,iou`; box prompts report their top-left corner.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,prompt_kind,row,col,iou\n");
        for r in &self.per_image {
            let (row, col) = r.prompt.anchor();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.image_id,
                r.prompt.kind().as_str(),
                row,
                col,
                r.iou
            ));
        }
        out
    }

    /// mIoU rounded to two decimals, as printed in tables.
    pub fn miou_display(&self) -> String {
        format!("{:.2}", self.miou)
    }
}

/// Digests of images the perturbation was trained on, recorded in its metadata.
pub fn excluded_digests(uap: &Uap) -> BTreeSet<String> {
    uap.meta
        .get("excluded_digests")
        .map(|s| s.split(',').filter(|d| !d.is_empty()).map(str::to_owned).collect())
        .unwrap_or_default()
}

fn random_prompt<R: Rng>(rng: &mut R, kind: PromptKind, shape: Shape3) -> Prompt {
    let (h, w, _) = shape;
    match kind {
        PromptKind::Point => Prompt::Point {
            row: rng.gen_range(0..h),
            col: rng.gen_range(0..w),
        },
        PromptKind::Box => {
            let pair = |rng: &mut R, n: usize| {
                let a = rng.gen_range(0..n);
                let mut b = rng.gen_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                (a.min(b), a.max(b))
            };
            let (row_min, row_max) = pair(rng, h);
            let (col_min, col_max) = pair(rng, w);
            Prompt::Box {
                row_min,
                col_min,
                row_max,
                col_max,
            }
        }
    }
}

/// Prompts for test image `index`; identical for the clean and adversarial passes.
pub fn evaluation_prompts(
    seg: &dyn Segmenter,
    image: &ImageTensor,
    index: usize,
    cfg: &EvalConfig,
) -> Result<Vec<Prompt>> {
    let shape = seg.input_shape();
    let mut rng = stream_rng(cfg.seed, index as u64);
    let mut prompts = Vec::with_capacity(cfg.prompts_per_image);
    let clean_fm = match cfg.sampling {
        PromptSampling::Foreground => Some(seg.encoder().encode(image.view())?),
        PromptSampling::Uniform => None,
    };
    for _ in 0..cfg.prompts_per_image {
        let mut p = random_prompt(&mut rng, cfg.prompt_kind, shape);
        if let Some(fm) = &clean_fm {
            let half = shape.0 * shape.1 / 2;
            for _ in 0..32 {
                if binarize_mask(&seg.decode(fm, &p)?).area() < half {
                    break;
                }
                p = random_prompt(&mut rng, cfg.prompt_kind, shape);
            }
        }
        prompts.push(p);
    }
    Ok(prompts)
}

/// Adds the perturbation to an image, clamping when requested.
pub fn perturb(image: &ImageTensor, uap: &Uap, clamp: bool) -> Array3<f64> {
    let sum = image.data() + uap.data();
    if clamp {
        sum.mapv(|v| v.clamp(0.0, 1.0))
    } else {
        sum
    }
}

/// mIoU between clean and perturbed predictions over the first
/// `cfg.n_images` test images.
pub fn evaluate_uap(seg: &dyn Segmenter, uap: &Uap, test: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let shape = seg.input_shape();
    if uap.shape() != shape {
        return Err(UapError::Contract(format!(
            "perturbation shape {:?} differs from segmenter input {:?}",
            uap.shape(),
            shape
        )));
    }
    if test.len() < cfg.n_images {
        return Err(UapError::Config(format!(
            "test corpus has {} images, evaluation needs {}",
            test.len(),
            cfg.n_images
        )));
    }
    let test = test.take(cfg.n_images);
    test.check_shape(shape)?;
    test.ensure_disjoint(&excluded_digests(uap), "perturbation's training data")?;

    let per_image = par::map_range(test.len(), |index| -> Result<Vec<ImageIou>> {
        let img = test.get(index);
        let prompts = evaluation_prompts(seg, &img.image, index, cfg)?;
        let clean_fm = seg.encoder().encode(img.image.view())?;
        let adv = perturb(&img.image, uap, cfg.clamp_adv);
        let adv_fm = seg.encoder().encode(adv.view())?;
        prompts
            .into_iter()
            .map(|p| {
                let clean = binarize_mask(&seg.decode(&clean_fm, &p)?);
                let advm = binarize_mask(&seg.decode(&adv_fm, &p)?);
                Ok(ImageIou {
                    image_id: img.id.clone(),
                    prompt: p,
                    iou: iou(&clean, &advm)?,
                })
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();

    let miou = ordered_mean(per_image.iter().map(|r| r.iou)) * 100.0;
    Ok(EvalReport {
        miou,
        per_image,
        config_hash: cfg.hash(),
        clamp_adv: cfg.clamp_adv,
        uap_meta: uap.meta.clone(),
    })
}

/// A single `U(-ε, ε)` draw evaluated like a trained perturbation.
pub fn uniform_noise_uap(shape: Shape3, epsilon: f64, seed: u64) -> Result<Uap> {
    let mut rng = stream_rng(seed, 0x4015E);
    let data = Array3::from_shape_fn(shape, |_| {
        if epsilon > 0.0 {
            rng.gen_range(-epsilon..=epsilon)
        } else {
            0.0
        }
    });
    Ok(Uap::new(data, epsilon)?
        .with_meta("method", "uniform_noise")
        .with_meta("seed", seed))
}

pub fn random_noise_baseline(
    seg: &dyn Segmenter,
    test: &Corpus,
    cfg: &EvalConfig,
    epsilon: f64,
    seed: u64,
) -> Result<EvalReport> {
    let uap = uniform_noise_uap(seg.input_shape(), epsilon, seed)?;
    evaluate_uap(seg, &uap, test, cfg)
}

/// Image-dependent reference: every test image gets its own perturbation,
/// optimized against exactly the prompts it is then evaluated with.
pub fn evaluate_image_dependent(
    seg: &dyn Segmenter,
    test: &Corpus,
    cfg: &EvalConfig,
    attack: &crate::baseline::BaselineConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if test.len() < cfg.n_images {
        return Err(UapError::Config(format!(
            "test corpus has {} images, evaluation needs {}",
            test.len(),
            cfg.n_images
        )));
    }
    let test = test.take(cfg.n_images);
    test.check_shape(seg.input_shape())?;
    let per_image = par::map_range(test.len(), |index| -> Result<Vec<ImageIou>> {
        let img = test.get(index);
        let prompts = evaluation_prompts(seg, &img.image, index, cfg)?;
        let uap = crate::baseline::attack_image_dependent(seg, &img.image, &prompts, attack)?.uap;
        let clean_fm = seg.encoder().encode(img.image.view())?;
        let adv_fm = seg.encoder().encode(perturb(&img.image, &uap, cfg.clamp_adv).view())?;
        prompts
            .into_iter()
            .map(|p| {
                Ok(ImageIou {
                    image_id: img.id.clone(),
                    prompt: p,
                    iou: iou(
                        &binarize_mask(&seg.decode(&clean_fm, &p)?),
                        &binarize_mask(&seg.decode(&adv_fm, &p)?),
                    )?,
                })
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();
    let mut meta = BTreeMap::new();
    meta.insert("method".to_owned(), "baseline_image_dependent".to_owned());
    meta.insert(
        "config".to_owned(),
        serde_json::to_string(attack).expect("config serializes"),
    );
    Ok(EvalReport {
        miou: ordered_mean(per_image.iter().map(|r| r.iou)) * 100.0,
        per_image,
        config_hash: cfg.hash(),
        clamp_adv: cfg.clamp_adv,
        uap_meta: meta,
    })
}
