//! Differentiable image encoders and prompt-conditioned mask predictors.
//!
//! Gradients are exposed as vector-Jacobian products: given an input and the
//! gradient of a scalar loss with respect to the output, `*_backward`
//! returns the gradient with respect to the input image. Implementations
//! recompute the forward pass, so no state is shared between calls and a
//! handle can be used from many threads at once.

mod external;
mod toy;

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UapError};
use crate::ops::{l2_normalize, normalize_backward};
use crate::types::{Embedding, MaskLogits, Prompt, Shape3};

pub use external::{load_external_segmenter, ModelDescriptor, SamVariant};
pub use toy::{make_toy_segmenter, ToyConfig, ToySegmenter};

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoder output of shape `(h, w, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn dim(&self) -> Shape3 {
        self.0.dim()
    }
}

/// Frozen image encoder `x -> features`.
pub trait ImageEncoder: Send + Sync {
    fn input_shape(&self) -> Shape3;

    fn feature_shape(&self) -> Shape3;

    /// Encodes any finite array of the input shape. Values outside [0,1] are
    /// accepted because the contrastive attack feeds the raw perturbation.
    fn encode(&self, input: ArrayView3<'_, f64>) -> Result<FeatureMap>;

    /// Gradient of `<features(input), grad_features>` with respect to `input`.
    fn encode_backward(&self, input: ArrayView3<'_, f64>, grad_features: ArrayView3<'_, f64>) -> Result<Array3<f64>>;

    /// Hex digest over the parameters and feature shape.
    fn fingerprint(&self) -> String;

    fn check_input(&self, input: ArrayView3<'_, f64>) -> Result<()> {
        if input.dim() != self.input_shape() {
            return Err(UapError::Contract(format!(
                "input shape {:?} does not match encoder input {:?}",
                input.dim(),
                self.input_shape()
            )));
        }
        Ok(())
    }
}

/// Encoder plus a lightweight prompt-conditioned mask head.
pub trait Segmenter: Send + Sync {
    fn encoder(&self) -> &dyn ImageEncoder;

    /// Decodes logits of shape `(H, W)` from a feature map and a prompt.
    fn decode(&self, features: &FeatureMap, prompt: &Prompt) -> Result<MaskLogits>;

    /// Gradient of `<decode(features, prompt), grad_logits>` with respect to the features.
    fn decode_backward(
        &self,
        features: &FeatureMap,
        prompt: &Prompt,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>>;

    fn input_shape(&self) -> Shape3 {
        self.encoder().input_shape()
    }

    fn predict_mask(&self, image: ArrayView3<'_, f64>, prompt: &Prompt) -> Result<MaskLogits> {
        let (h, w, _) = self.input_shape();
        prompt.validate(h, w)?;
        let fm = self.encoder().encode(image)?;
        self.decode(&fm, prompt)
    }

    /// Gradient of `<predict_mask(image, prompt), grad_logits>` with respect to the image.
    fn predict_mask_backward(
        &self,
        image: ArrayView3<'_, f64>,
        prompt: &Prompt,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>> {
        let (h, w, _) = self.input_shape();
        prompt.validate(h, w)?;
        if grad_logits.dim() != (h, w) {
            return Err(UapError::Contract("logit gradient shape mismatch".into()));
        }
        let fm = self.encoder().encode(image)?;
        let g = self.decode_backward(&fm, prompt, grad_logits)?;
        self.encoder().encode_backward(image, g.view())
    }
}

pub type SegmenterHandle = Arc<dyn Segmenter>;

/// How a feature map is collapsed into an embedding vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row-major flatten of the whole map.
    #[default]
    Flatten,
    /// Mean over spatial positions, one value per channel.
    Mean,
}

/// Flattens (or pools) a feature map and L2-normalizes it.
pub fn embed(fm: &FeatureMap) -> Result<Embedding> {
    embed_with(fm, Pooling::Flatten)
}

pub fn embed_with(fm: &FeatureMap, pooling: Pooling) -> Result<Embedding> {
    l2_normalize(&pool(fm, pooling))
}

fn pool(fm: &FeatureMap, pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Flatten => fm.0.iter().copied().collect(),
        Pooling::Mean => {
            let (h, w, d) = fm.dim();
            let flat = fm.0.to_shape((h * w, d)).expect("contiguous feature map");
            flat.mean_axis(ndarray::Axis(0)).expect("non-empty map")
        }
    }
}

/// Gradient through [`embed_with`]: maps dL/d(embedding) to dL/d(feature map).
pub fn embed_backward(fm: &FeatureMap, pooling: Pooling, grad: &Array1<f64>) -> Array3<f64> {
    let pooled = pool(fm, pooling);
    let g = normalize_backward(&pooled, grad);
    let (h, w, d) = fm.dim();
    match pooling {
        Pooling::Flatten => Array3::from_shape_vec((h, w, d), g.to_vec()).expect("shape"),
        Pooling::Mean => {
            let scale = 1.0 / (h * w) as f64;
            Array3::from_shape_fn((h, w, d), |(_, _, k)| g[k] * scale)
        }
    }
}

/// Encodes then embeds.
pub fn encode_embed(encoder: &dyn ImageEncoder, input: ArrayView3<'_, f64>) -> Result<Embedding> {
    embed(&encoder.encode(input)?)
}

/// Gradient of `<embed(encode(input)), grad>` with respect to `input`.
pub fn encode_embed_backward(
    encoder: &dyn ImageEncoder,
    input: ArrayView3<'_, f64>,
    grad: &Array1<f64>,
) -> Result<Array3<f64>> {
    let fm = encoder.encode(input)?;
    let gf = embed_backward(&fm, Pooling::Flatten, grad);
    encoder.encode_backward(input, gf.view())
}

/// Bilinear upsampling weights (half-pixel centers, edge clamped) from `n_in`
/// cells to `n_out` pixels, as an `n_out × n_in` matrix.
pub(crate) fn bilinear_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let t = src - lo as f64;
        m[[i, lo]] += 1.0 - t;
        m[[i, hi]] += t;
    }
    m
}
