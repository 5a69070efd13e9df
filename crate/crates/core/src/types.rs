//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UapError};

/// Default L∞ budget, 10/255 on the [0,1] pixel scale.
pub const DEFAULT_EPSILON: f64 = 10.0 / 255.0;

/// Slack allowed on the budget check after storage rounding.
pub const BUDGET_SLACK: f64 = 1e-9;

/// Tolerance on the unit norm of a normalized embedding.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// `(height, width, channels)`.
pub type Shape3 = (usize, usize, usize);

pub(crate) fn all_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> bool {
    values.all(|v| v.is_finite())
}

/// An H×W×C pixel array. Values are expected in [0,1] once passed through
/// [`crate::ops::clamp_pixels`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(UapError::Contract("image must have positive extent".into()));
        }
        if !all_finite(data.iter()) {
            return Err(UapError::InvalidValue("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.data.dim()
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn is_valid_pixels(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Round `x` to the nearest f32 without leaving `[-bound, bound]`.
pub(crate) fn snap_f32_within(x: f64, bound: f64) -> f32 {
    let mut s = x as f32;
    while (s as f64) > bound {
        s = s.next_down();
    }
    while (s as f64) < -bound {
        s = s.next_up();
    }
    s
}

/// A universal perturbation `v` with its L∞ budget and provenance metadata.
///
/// Entries are always representable in single precision so that the on-disk
/// `f32` payload round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Uap {
    data: Array3<f64>,
    epsilon: f64,
    pub meta: BTreeMap<String, String>,
}

impl Uap {
    /// Builds a perturbation, rounding entries to single precision.
    ///
    /// Fails if any entry is non-finite or exceeds the budget by more than
    /// [`BUDGET_SLACK`].
    pub fn new(data: Array3<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(UapError::InvalidValue(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        if data.is_empty() {
            return Err(UapError::Contract("perturbation must have positive extent".into()));
        }
        if !all_finite(data.iter()) {
            return Err(UapError::InvalidValue("perturbation contains non-finite values".into()));
        }
        let worst = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst > epsilon + BUDGET_SLACK {
            return Err(UapError::Contract(format!(
                "perturbation max |v| = {worst} exceeds epsilon {epsilon}"
            )));
        }
        let data = data.mapv(|v| snap_f32_within(v, epsilon) as f64);
        Ok(Self {
            data,
            epsilon,
            meta: BTreeMap::new(),
        })
    }

    pub fn zeros(shape: Shape3, epsilon: f64) -> Self {
        Self {
            data: Array3::zeros(shape),
            epsilon,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shape(&self) -> Shape3 {
        self.data.dim()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Conditioning signal for the mask decoder. Box corners are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Point {
        row: usize,
        col: usize,
    },
    Box {
        row_min: usize,
        col_min: usize,
        row_max: usize,
        col_max: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Point,
    Box,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Point => "point",
            PromptKind::Box => "box",
        }
    }
}

impl std::str::FromStr for PromptKind {
    type Err = UapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(PromptKind::Point),
            "box" => Ok(PromptKind::Box),
            other => Err(UapError::Config(format!("unknown prompt kind '{other}'"))),
        }
    }
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Point { .. } => PromptKind::Point,
            Prompt::Box { .. } => PromptKind::Box,
        }
    }

    /// Anchor coordinate reported in CSVs: the point itself or the box's top-left corner.
    pub fn anchor(&self) -> (usize, usize) {
        match *self {
            Prompt::Point { row, col } => (row, col),
            Prompt::Box { row_min, col_min, .. } => (row_min, col_min),
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match *self {
            Prompt::Point { row, col } => {
                if row >= height || col >= width {
                    return Err(UapError::Contract(format!(
                        "point ({row}, {col}) outside {height}x{width} image"
                    )));
                }
            }
            Prompt::Box {
                row_min,
                col_min,
                row_max,
                col_max,
            } => {
                if row_max >= height || col_max >= width {
                    return Err(UapError::Contract(format!(
                        "box ({row_min}, {col_min}, {row_max}, {col_max}) outside {height}x{width} image"
                    )));
                }
                if row_max <= row_min || col_max <= col_min {
                    return Err(UapError::Contract(format!(
                        "box ({row_min}, {col_min}, {row_max}, {col_max}) has no area"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Real-valued per-pixel decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits(pub Array2<f64>);

impl MaskLogits {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !all_finite(data.iter()) {
            return Err(UapError::InvalidValue("mask logits contain non-finite values".into()));
        }
        Ok(Self(data))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn area(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&m| m)
    }
}

/// A feature vector, optionally known to have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    data: Array1<f64>,
    normalized: bool,
}

impl Embedding {
    /// Wraps a raw vector without normalizing it.
    pub fn raw(data: Array1<f64>) -> Self {
        Self {
            data,
            normalized: false,
        }
    }

    /// Wraps a vector the caller asserts is unit norm; the claim is checked.
    pub fn from_unit(data: Array1<f64>) -> Result<Self> {
        let norm = data.dot(&data).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(UapError::Contract(format!("expected unit norm, got {norm}")));
        }
        Ok(Self { data, normalized: true })
    }

    pub(crate) fn unit_unchecked(data: Array1<f64>) -> Self {
        Self { data, normalized: true }
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}
