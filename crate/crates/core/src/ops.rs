//! Pure numeric operations: projection, clamping, mask binarization, IoU and
//! embedding geometry.

use ndarray::{Array, Array1, Array2, Dimension, Zip};

use crate::error::{Result, UapError};
use crate::types::{all_finite, BinaryMask, Embedding, ImageTensor, MaskLogits, UNIT_NORM_TOL};

/// Elementwise projection onto the L∞ ball of radius `epsilon`.
pub fn linf_project<D: Dimension>(delta: &Array<f64, D>, epsilon: f64) -> Result<Array<f64, D>> {
    let mut out = delta.clone();
    linf_project_inplace(&mut out, epsilon)?;
    Ok(out)
}

pub fn linf_project_inplace<D: Dimension>(delta: &mut Array<f64, D>, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(UapError::InvalidValue(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !all_finite(delta.iter()) {
        return Err(UapError::InvalidValue("perturbation contains non-finite values".into()));
    }
    delta.mapv_inplace(|d| d.clamp(-epsilon, epsilon));
    Ok(())
}

pub fn clamp_pixels(image: &ImageTensor) -> ImageTensor {
    ImageTensor::new(image.data().mapv(|p| p.clamp(0.0, 1.0))).expect("clamped finite image")
}

/// Strict zero threshold: a pixel is masked iff its logit is positive.
pub fn binarize_mask(logits: &MaskLogits) -> BinaryMask {
    BinaryMask(logits.0.mapv(|y| y > 0.0))
}

/// Intersection over union. Two empty masks agree perfectly and score 1.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(UapError::Contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(&a.0).and(&b.0).for_each(|&x, &y| {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    });
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn l2_normalize(vec: &Array1<f64>) -> Result<Embedding> {
    if !all_finite(vec.iter()) {
        return Err(UapError::InvalidValue("vector contains non-finite values".into()));
    }
    let norm = vec.dot(vec).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(UapError::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(Embedding::unit_unchecked(vec / norm))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if !a.is_normalized() || !b.is_normalized() {
        return Err(UapError::Contract(
            "cosine similarity requires normalized embeddings".into(),
        ));
    }
    if a.dim() != b.dim() {
        return Err(UapError::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.data().dot(b.data()).clamp(-1.0, 1.0))
}

/// Backpropagates through `y = x / |x|`: returns dL/dx given dL/dy.
pub(crate) fn normalize_backward(x: &Array1<f64>, grad_y: &Array1<f64>) -> Array1<f64> {
    let norm = x.dot(x).sqrt();
    let y = x / norm;
    let proj = grad_y.dot(&y);
    (grad_y - &(y * proj)) / norm
}

pub(crate) fn check_unit(e: &Embedding, what: &str) -> Result<()> {
    if !e.is_normalized() {
        return Err(UapError::Contract(format!("{what} must be normalized")));
    }
    let n = e.data().dot(e.data()).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(UapError::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Mean of `values`, summed in order so results are reproducible.
pub(crate) fn ordered_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn mask_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    BinaryMask(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)))
}
