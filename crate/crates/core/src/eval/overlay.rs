use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::perturb;
use crate::corpus::Corpus;
use crate::encoders::Segmenter;
use crate::error::{Result, UapError};
use crate::ops::binarize_mask;
use crate::types::{BinaryMask, Prompt, Uap};

const GAP: u32 = 4;
const MARK: Rgb<u8> = Rgb([255, 32, 32]);

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayRecord {
    pub image_id: String,
    pub prompt: Prompt,
    pub path: PathBuf,
    pub clean_area: usize,
    pub adv_area: usize,
}

fn to_rgb(data: &ndarray::Array3<f64>) -> RgbImage {
    let (h, w, c) = data.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (data[[y as usize, x as usize, k.min(c - 1)]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn mask_rgb(mask: &BinaryMask) -> RgbImage {
    let (h, w) = mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if mask.0[[y as usize, x as usize]] {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

fn draw_prompt(img: &mut RgbImage, prompt: &Prompt) {
    let (w, h) = img.dimensions();
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, MARK);
        }
    };
    match *prompt {
        Prompt::Point { row, col } => {
            let (r, c) = (row as i64, col as i64);
            for d in -2..=2 {
                put(c + d, r);
                put(c, r + d);
            }
        }
        Prompt::Box {
            row_min,
            col_min,
            row_max,
            col_max,
        } => {
            for c in col_min..=col_max {
                put(c as i64, row_min as i64);
                put(c as i64, row_max as i64);
            }
            for r in row_min..=row_max {
                put(col_min as i64, r as i64);
                put(col_max as i64, r as i64);
            }
        }
    }
}

/// One PNG per (image, prompt) with four panels: clean image with prompt,
/// adversarial image with prompt, clean mask, adversarial mask.
pub fn emit_overlays(
    seg: &dyn Segmenter,
    uap: &Uap,
    images: &Corpus,
    prompts: &[Prompt],
    out_dir: &Path,
) -> Result<Vec<OverlayRecord>> {
    let shape = seg.input_shape();
    if uap.shape() != shape {
        return Err(UapError::Contract(format!(
            "perturbation shape {:?} differs from segmenter input {:?}",
            uap.shape(),
            shape
        )));
    }
    images.check_shape(shape)?;
    for p in prompts {
        p.validate(shape.0, shape.1)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| UapError::io(out_dir, e))?;

    let (h, w) = (shape.0 as u32, shape.1 as u32);
    let mut records = Vec::new();
    for img in images {
        let clean_fm = seg.encoder().encode(img.image.view())?;
        let adv = perturb(&img.image, uap, true);
        let adv_fm = seg.encoder().encode(adv.view())?;
        let clean_rgb = to_rgb(img.image.data());
        let adv_rgb = to_rgb(&adv);
        let stem: String = img
            .id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        for (j, p) in prompts.iter().enumerate() {
            let clean = binarize_mask(&seg.decode(&clean_fm, p)?);
            let advm = binarize_mask(&seg.decode(&adv_fm, p)?);
            let mut canvas = RgbImage::from_pixel(4 * w + 3 * GAP, h, Rgb([255, 255, 255]));
            let mut a = clean_rgb.clone();
            draw_prompt(&mut a, p);
            let mut b = adv_rgb.clone();
            draw_prompt(&mut b, p);
            for (k, panel) in [a, b, mask_rgb(&clean), mask_rgb(&advm)].iter().enumerate() {
                image::imageops::replace(&mut canvas, panel, (k as u32 * (w + GAP)) as i64, 0);
            }
            let path = out_dir.join(format!("{stem}_{}{j}.png", p.kind().as_str()));
            canvas.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => UapError::io(&path, io),
                other => UapError::format(&path, other.to_string()),
            })?;
            records.push(OverlayRecord {
                image_id: img.id.clone(),
                prompt: *p,
                path,
                clean_area: clean.area(),
                adv_area: advm.area(),
            });
        }
    }
    Ok(records)
}

/// Splits an overlay file back into its four panels.
pub fn split_panels(path: &Path, width: u32) -> Result<[RgbImage; 4]> {
    let img = image::open(path)
        .map_err(|e| UapError::format(path, e.to_string()))?
        .to_rgb8();
    let h = img.height();
    let panel = |k: u32| image::imageops::crop_imm(&img, k * (width + GAP), 0, width, h).to_image();
    Ok([panel(0), panel(1), panel(2), panel(3)])
}
