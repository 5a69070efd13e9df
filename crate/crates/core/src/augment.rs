//! Augmentations that turn the perturbation (the anchor) into a positive sample.
//!
//! Every augmentation is affine in the perturbation, so a drawn augmentation
//! can be replayed forward and its transpose applied to a gradient.
//! Outputs are deliberately neither projected onto the budget nor clamped.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::bilinear_matrix;
use crate::error::{Result, UapError};
use crate::types::{Shape3, Uap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentSpec {
    /// Random `rows × cols` window, resized back to full resolution.
    CropResize { rows: usize, cols: usize },
    /// Random `rows × cols` window set to zero.
    Cutout { rows: usize, cols: usize },
    /// Independent `U(-m, m)` noise on every entry.
    UniformNoise { magnitude: f64 },
    /// One `U(-m, m)` offset per channel, constant over space.
    ColorShift { magnitude: f64 },
    /// `v + weight * x` for a random corpus image `x`.
    AddImage { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    CropResize,
    Cutout,
    UniformNoise,
    ColorShift,
    AddImage,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] = [
        AugmentKind::CropResize,
        AugmentKind::Cutout,
        AugmentKind::UniformNoise,
        AugmentKind::ColorShift,
        AugmentKind::AddImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::CropResize => "crop_resize",
            AugmentKind::Cutout => "cutout",
            AugmentKind::UniformNoise => "uniform_noise",
            AugmentKind::ColorShift => "color_shift",
            AugmentKind::AddImage => "add_image",
        }
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = UapError;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UapError::Config(format!("unknown augmentation '{s}'")))
    }
}

impl std::fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl AugmentSpec {
    /// Default parameters for `kind` at the given resolution: a window of
    /// 200/1024 of each side, full-range noise and shift, unit image weight.
    pub fn default_for(kind: AugmentKind, shape: Shape3) -> Self {
        let side = |n: usize| ((n as f64 * 200.0 / 1024.0).round() as usize).clamp(1, n);
        let (rows, cols) = (side(shape.0), side(shape.1));
        match kind {
            AugmentKind::CropResize => AugmentSpec::CropResize { rows, cols },
            AugmentKind::Cutout => AugmentSpec::Cutout { rows, cols },
            AugmentKind::UniformNoise => AugmentSpec::UniformNoise { magnitude: 1.0 },
            AugmentKind::ColorShift => AugmentSpec::ColorShift { magnitude: 1.0 },
            AugmentKind::AddImage => AugmentSpec::AddImage { weight: 1.0 },
        }
    }

    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentSpec::CropResize { .. } => AugmentKind::CropResize,
            AugmentSpec::Cutout { .. } => AugmentKind::Cutout,
            AugmentSpec::UniformNoise { .. } => AugmentKind::UniformNoise,
            AugmentSpec::ColorShift { .. } => AugmentKind::ColorShift,
            AugmentSpec::AddImage { .. } => AugmentKind::AddImage,
        }
    }

    pub fn validate(&self, shape: Shape3) -> Result<()> {
        match *self {
            AugmentSpec::CropResize { rows, cols } | AugmentSpec::Cutout { rows, cols } => {
                if rows == 0 || cols == 0 || rows > shape.0 || cols > shape.1 {
                    return Err(UapError::Contract(format!(
                        "window {rows}x{cols} does not fit in {}x{}",
                        shape.0, shape.1
                    )));
                }
            }
            AugmentSpec::UniformNoise { magnitude } | AugmentSpec::ColorShift { magnitude } => {
                if !(0.0..=1.0).contains(&magnitude) {
                    return Err(UapError::Config(format!("magnitude {magnitude} outside [0,1]")));
                }
            }
            AugmentSpec::AddImage { weight } => {
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(UapError::Config(format!("image weight {weight} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    /// Samples the random parts of the augmentation.
    pub fn draw<R: Rng + ?Sized>(&self, shape: Shape3, rng: &mut R, corpus: &Corpus) -> Result<AugmentDraw> {
        self.validate(shape)?;
        let (h, w, c) = shape;
        Ok(match *self {
            AugmentSpec::CropResize { rows, cols } => {
                let (r0, c0) = (rng.gen_range(0..=h - rows), rng.gen_range(0..=w - cols));
                AugmentDraw::CropResize { r0, c0, rows, cols }
            }
            AugmentSpec::Cutout { rows, cols } => {
                let (r0, c0) = (rng.gen_range(0..=h - rows), rng.gen_range(0..=w - cols));
                AugmentDraw::Cutout { r0, c0, rows, cols }
            }
            AugmentSpec::UniformNoise { magnitude } => {
                AugmentDraw::Additive(Array3::from_shape_fn(shape, |_| uniform_sym(rng, magnitude)))
            }
            AugmentSpec::ColorShift { magnitude } => {
                let shift: Vec<f64> = (0..c).map(|_| uniform_sym(rng, magnitude)).collect();
                AugmentDraw::Additive(Array3::from_shape_fn(shape, |(_, _, k)| shift[k]))
            }
            AugmentSpec::AddImage { weight } => {
                if corpus.is_empty() {
                    return Err(UapError::Config(
                        "add_image augmentation needs a non-empty corpus".into(),
                    ));
                }
                let idx = rng.gen_range(0..corpus.len());
                let x = &corpus.get(idx).image;
                if x.shape() != shape {
                    return Err(UapError::Contract(format!(
                        "corpus image {} has shape {:?}, expected {:?}",
                        corpus.get(idx).id,
                        x.shape(),
                        shape
                    )));
                }
                AugmentDraw::Additive(x.data() * weight)
            }
        })
    }
}

fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else {
        rng.gen_range(-magnitude..=magnitude)
    }
}

/// One realized augmentation.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentDraw {
    CropResize {
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    },
    Cutout {
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    },
    /// `v + offset`.
    Additive(Array3<f64>),
}

impl AugmentDraw {
    pub fn forward(&self, v: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, c) = v.dim();
        match self {
            &AugmentDraw::CropResize { r0, c0, rows, cols } => {
                let ry = bilinear_matrix(h, rows);
                let rx = bilinear_matrix(w, cols);
                let mut out = Array3::zeros((h, w, c));
                for k in 0..c {
                    let win = v.slice(s![r0..r0 + rows, c0..c0 + cols, k]);
                    out.index_axis_mut(Axis(2), k).assign(&ry.dot(&win).dot(&rx.t()));
                }
                out
            }
            &AugmentDraw::Cutout { r0, c0, rows, cols } => {
                let mut out = v.to_owned();
                out.slice_mut(s![r0..r0 + rows, c0..c0 + cols, ..]).fill(0.0);
                out
            }
            AugmentDraw::Additive(offset) => &v + offset,
        }
    }

    /// Transpose of the linear part, applied to `grad` (dL/d output).
    pub fn backward(&self, grad: ArrayView3<'_, f64>) -> Array3<f64> {
        let (h, w, c) = grad.dim();
        match self {
            &AugmentDraw::CropResize { r0, c0, rows, cols } => {
                let ry = bilinear_matrix(h, rows);
                let rx = bilinear_matrix(w, cols);
                let mut out = Array3::zeros((h, w, c));
                for k in 0..c {
                    let g = grad.index_axis(Axis(2), k);
                    out.slice_mut(s![r0..r0 + rows, c0..c0 + cols, k])
                        .assign(&ry.t().dot(&g).dot(&rx));
                }
                out
            }
            &AugmentDraw::Cutout { r0, c0, rows, cols } => {
                let mut out = grad.to_owned();
                out.slice_mut(s![r0..r0 + rows, c0..c0 + cols, ..]).fill(0.0);
                out
            }
            AugmentDraw::Additive(_) => grad.to_owned(),
        }
    }
}

/// Draws and applies one augmentation of `v`.
pub fn apply_augmentation<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    v: &Uap,
    rng: &mut R,
    corpus: &Corpus,
) -> Result<Array3<f64>> {
    let draw = spec.draw(v.shape(), rng, corpus)?;
    Ok(draw.forward(v.view()))
}
