//! Seeded patch-embedding segmenter used for desk-scale experiments.
//!
//! Encoder: split the image into non-overlapping patches and map each patch
//! through one shared set of weights, then `tanh`. The pre-activation sums a
//! linear term (a smooth part plus a zero-mean high-pass part), a texture
//! energy term on squared within-patch deviations and a near-black term that
//! only sees pixel values close to zero. Decoder: bilinearly upsample the
//! feature grid to pixel resolution and score every pixel by the cosine
//! between its feature and the prompt feature (feature at the point, or the
//! mean feature inside the box), shifted by a fixed bias and scaled.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{bilinear_matrix, hex_digest, FeatureMap, ImageEncoder, Segmenter};
use crate::error::{Result, UapError};
use crate::types::{MaskLogits, Prompt, Shape3};

/// Stabilizer inside the per-pixel feature norm.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub input_shape: Shape3,
    pub feature_shape: Shape3,
    /// Amplitude of the spatially smooth part of each patch filter.
    pub smooth_gain: f64,
    /// Amplitude of the white (pixel-independent) part of each patch filter.
    pub rough_gain: f64,
    pub bias_std: f64,
    /// Logit scale applied to `cos - decoder_bias`.
    pub decoder_scale: f64,
    pub decoder_bias: f64,
    /// Knee of the compressive pixel transfer `knee * asinh(p / knee)`;
    /// 0 keeps pixels linear.
    pub input_knee: f64,
    /// Gain of the texture-energy path: a zero-sum weighting of squared
    /// within-patch deviations. Flat and two-level patches give exactly zero.
    pub energy_gain: f64,
    /// Gain of the near-black path, which only responds to pixel values
    /// within a few `dark_width` of zero.
    pub dark_gain: f64,
    pub dark_width: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            input_shape: (64, 64, 3),
            feature_shape: (8, 8, 16),
            smooth_gain: 2.0,
            rough_gain: 60.0,
            bias_std: 0.01,
            decoder_scale: 20.0,
            decoder_bias: 0.8,
            input_knee: 0.0,
            energy_gain: 4000.0,
            dark_gain: 50.0,
            dark_width: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySegmenter {
    config: ToyConfig,
    patch: (usize, usize),
    /// `d × patch_dim`, patch vector laid out as `(row, col, channel)`.
    weights: Array2<f64>,
    /// `d × patch_dim` weights of the texture-energy path.
    energy: Array2<f64>,
    /// `d × patch_dim` weights of the near-black path.
    dark: Array2<f64>,
    bias: Array1<f64>,
    up_rows: Array2<f64>,
    up_cols: Array2<f64>,
    fingerprint: String,
}

pub fn make_toy_segmenter(seed: u64, input_shape: Shape3, feature_shape: Shape3) -> Result<ToySegmenter> {
    ToySegmenter::new(ToyConfig {
        seed,
        input_shape,
        feature_shape,
        ..ToyConfig::default()
    })
}

impl ToySegmenter {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let (hh, ww, cc) = config.input_shape;
        let (h, w, d) = config.feature_shape;
        if [hh, ww, cc, h, w, d].contains(&0) {
            return Err(UapError::Contract("toy segmenter shapes must be positive".into()));
        }
        if hh % h != 0 || ww % w != 0 {
            return Err(UapError::Contract(format!(
                "feature grid {h}x{w} must divide input {hh}x{ww}"
            )));
        }
        let (ph, pw) = (hh / h, ww / w);
        let n = ph * pw * cc;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Array2::zeros((d, n));
        for k in 0..d {
            for c in 0..cc {
                let dc = normal(&mut rng);
                let waves: Vec<(f64, f64, f64, f64)> = (0..2)
                    .map(|_| {
                        let u = rng.gen_range(0..2) as f64;
                        let v = rng.gen_range(0..2) as f64;
                        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                        (u, v, phase, 0.5 * normal(&mut rng))
                    })
                    .collect();
                // zero-mean over the patch: the rough part ignores flat colour
                let mut rough: Vec<f64> = (0..ph * pw).map(|_| normal(&mut rng)).collect();
                let mean = rough.iter().sum::<f64>() / rough.len() as f64;
                rough.iter_mut().for_each(|r| *r -= mean);
                for py in 0..ph {
                    for px in 0..pw {
                        let mut smooth = dc;
                        for &(u, v, phase, amp) in &waves {
                            let arg = std::f64::consts::TAU * (u * py as f64 / ph as f64 + v * px as f64 / pw as f64);
                            smooth += amp * (arg + phase).cos();
                        }
                        let j = (py * pw + px) * cc + c;
                        weights[[k, j]] =
                            (config.smooth_gain * smooth + config.rough_gain * rough[py * pw + px]) / n as f64;
                    }
                }
            }
        }
        let bias = Array1::from_shape_fn(d, |_| config.bias_std * normal(&mut rng));
        let mut energy = Array2::zeros((d, n));
        for k in 0..d {
            for c in 0..cc {
                let e: Vec<f64> = (0..ph * pw).map(|_| normal(&mut rng)).collect();
                let mean = e.iter().sum::<f64>() / e.len() as f64;
                for (q, v) in e.iter().enumerate() {
                    energy[[k, q * cc + c]] = config.energy_gain * (v - mean) / n as f64;
                }
            }
        }

        let dark = Array2::from_shape_fn((d, n), |_| config.dark_gain * normal(&mut rng) / n as f64);

        let mut hasher = Sha256::new();
        hasher.update(b"toy-segmenter-v1");
        for v in [hh, ww, cc, h, w, d] {
            hasher.update((v as u64).to_le_bytes());
        }
        for v in weights
            .iter()
            .chain(bias.iter())
            .chain(energy.iter())
            .chain(dark.iter())
        {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(config.decoder_scale.to_le_bytes());
        hasher.update(config.decoder_bias.to_le_bytes());
        for v in [
            config.input_knee,
            config.energy_gain,
            config.dark_gain,
            config.dark_width,
        ] {
            hasher.update(v.to_le_bytes());
        }
        let fingerprint = hex_digest(&hasher.finalize());

        Ok(Self {
            config,
            patch: (ph, pw),
            weights,
            energy,
            dark,
            bias,
            up_rows: bilinear_matrix(hh, h),
            up_cols: bilinear_matrix(ww, w),
            fingerprint,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Pixel transfer, centred so that mid-grey maps to 0.
    fn transfer(&self, p: f64) -> f64 {
        let k = self.config.input_knee;
        if k > 0.0 {
            k * ((p / k).asinh() - (0.5 / k).asinh())
        } else {
            p - 0.5
        }
    }

    fn transfer_grad(&self, p: f64) -> f64 {
        let k = self.config.input_knee;
        if k > 0.0 {
            1.0 / (1.0 + (p / k).powi(2)).sqrt()
        } else {
            1.0
        }
    }

    fn patches(&self, input: ArrayView3<'_, f64>) -> Array2<f64> {
        self.raw_patches(input).mapv(|v| self.transfer(v))
    }

    /// Raw pixel values per patch, `(h*w) × patch_dim`.
    fn raw_patches(&self, input: ArrayView3<'_, f64>) -> Array2<f64> {
        let (h, w, _) = self.config.feature_shape;
        let (ph, pw) = self.patch;
        let n = ph * pw * self.config.input_shape.2;
        let mut out = Array2::zeros((h * w, n));
        for a in 0..h {
            for b in 0..w {
                let block = input.slice(s![a * ph..(a + 1) * ph, b * pw..(b + 1) * pw, ..]);
                out.row_mut(a * w + b)
                    .iter_mut()
                    .zip(block.iter())
                    .for_each(|(d, &s)| *d = s);
            }
        }
        out
    }

    fn dark_response(&self, p: f64) -> f64 {
        let w = self.config.dark_width;
        p * (-0.5 * (p / w).powi(2)).exp()
    }

    fn dark_response_grad(&self, p: f64) -> f64 {
        let r = p / self.config.dark_width;
        (1.0 - r * r) * (-0.5 * r * r).exp()
    }

    /// Pre-activations, `(h*w) × d`.
    fn preact(&self, input: ArrayView3<'_, f64>) -> Array2<f64> {
        let p = self.patches(input);
        let mut z = p.dot(&self.weights.t()) + &self.bias;
        if self.config.energy_gain != 0.0 {
            let dev = self.deviations(&p);
            z += &(&dev * &dev).dot(&self.energy.t());
        }
        if self.config.dark_gain != 0.0 {
            let raw = self.raw_patches(input);
            z += &raw.mapv(|v| self.dark_response(v)).dot(&self.dark.t());
        }
        z
    }

    /// Patch values minus their per-channel patch mean.
    fn deviations(&self, p: &Array2<f64>) -> Array2<f64> {
        let cc = self.config.input_shape.2;
        let mut dev = p.clone();
        for mut row in dev.rows_mut() {
            for c in 0..cc {
                let mut lane = row.slice_mut(s![c..;cc]);
                let m = lane.mean().expect("non-empty patch");
                lane -= m;
            }
        }
        dev
    }

    /// Upsampled pixel features `(H, W, d)`.
    fn upsample(&self, fm: &FeatureMap) -> Array3<f64> {
        let (hh, ww, _) = self.config.input_shape;
        let (_, _, d) = fm.dim();
        let mut out = Array3::zeros((hh, ww, d));
        for k in 0..d {
            let plane = fm.0.index_axis(Axis(2), k);
            let up = self.up_rows.dot(&plane).dot(&self.up_cols.t());
            out.index_axis_mut(Axis(2), k).assign(&up);
        }
        out
    }

    fn upsample_backward(&self, grad_up: &Array3<f64>) -> Array3<f64> {
        let (h, w, d) = self.config.feature_shape;
        let mut out = Array3::zeros((h, w, d));
        for k in 0..d {
            let g = grad_up.index_axis(Axis(2), k);
            let down = self.up_rows.t().dot(&g).dot(&self.up_cols);
            out.index_axis_mut(Axis(2), k).assign(&down);
        }
        out
    }

    fn prompt_feature(up: &Array3<f64>, prompt: &Prompt) -> Array1<f64> {
        match *prompt {
            Prompt::Point { row, col } => up.slice(s![row, col, ..]).to_owned(),
            Prompt::Box {
                row_min,
                col_min,
                row_max,
                col_max,
            } => {
                let region = up.slice(s![row_min..=row_max, col_min..=col_max, ..]);
                let count = ((row_max - row_min + 1) * (col_max - col_min + 1)) as f64;
                region.sum_axis(Axis(0)).sum_axis(Axis(0)) / count
            }
        }
    }
}

impl ImageEncoder for ToySegmenter {
    fn input_shape(&self) -> Shape3 {
        self.config.input_shape
    }

    fn feature_shape(&self) -> Shape3 {
        self.config.feature_shape
    }

    fn encode(&self, input: ArrayView3<'_, f64>) -> Result<FeatureMap> {
        self.check_input(input)?;
        let (h, w, d) = self.config.feature_shape;
        let act = self.preact(input).mapv(f64::tanh);
        let fm = act.into_shape_with_order((h, w, d)).expect("feature shape");
        if fm.iter().any(|v| !v.is_finite()) {
            return Err(UapError::InvalidValue("non-finite encoder input".into()));
        }
        Ok(FeatureMap(fm))
    }

    fn encode_backward(&self, input: ArrayView3<'_, f64>, grad_features: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        self.check_input(input)?;
        let (h, w, d) = self.config.feature_shape;
        if grad_features.dim() != (h, w, d) {
            return Err(UapError::Contract("feature gradient shape mismatch".into()));
        }
        let pre = self.preact(input);
        let g = grad_features.to_shape((h * w, d)).expect("contiguous gradient");
        let gpre = &g
            * &pre.mapv(|z| {
                let t = z.tanh();
                1.0 - t * t
            });
        let mut gpatch = gpre.dot(&self.weights);
        if self.config.energy_gain != 0.0 {
            let dev = self.deviations(&self.patches(input));
            // d/d dev of sum_j e_j dev_j^2, then through the mean removal
            let gdev = gpre.dot(&self.energy) * &dev * 2.0;
            gpatch += &self.deviations(&gdev);
        }
        let raw = self.raw_patches(input);
        let mut graw = gpatch * &raw.mapv(|v| self.transfer_grad(v));
        if self.config.dark_gain != 0.0 {
            graw += &(gpre.dot(&self.dark) * &raw.mapv(|v| self.dark_response_grad(v)));
        }
        let (ph, pw) = self.patch;
        let mut out = Array3::zeros(self.config.input_shape);
        for a in 0..h {
            for b in 0..w {
                let mut block = out.slice_mut(s![a * ph..(a + 1) * ph, b * pw..(b + 1) * pw, ..]);
                block
                    .iter_mut()
                    .zip(graw.row(a * w + b).iter())
                    .for_each(|(d, &g)| *d = g);
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

impl Segmenter for ToySegmenter {
    fn encoder(&self) -> &dyn ImageEncoder {
        self
    }

    fn decode(&self, features: &FeatureMap, prompt: &Prompt) -> Result<MaskLogits> {
        let (hh, ww, _) = self.config.input_shape;
        prompt.validate(hh, ww)?;
        if features.dim() != self.config.feature_shape {
            return Err(UapError::Contract("feature map shape mismatch".into()));
        }
        let up = self.upsample(features);
        let p = Self::prompt_feature(&up, prompt);
        let p_hat = &p / (p.dot(&p) + NORM_EPS).sqrt();
        let (scale, bias) = (self.config.decoder_scale, self.config.decoder_bias);
        let logits = Array2::from_shape_fn((hh, ww), |(i, j)| {
            let u = up.slice(s![i, j, ..]);
            let cos = u.dot(&p_hat) / (u.dot(&u) + NORM_EPS).sqrt();
            scale * (cos - bias)
        });
        MaskLogits::new(logits)
    }

    fn decode_backward(
        &self,
        features: &FeatureMap,
        prompt: &Prompt,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>> {
        let (hh, ww, _) = self.config.input_shape;
        prompt.validate(hh, ww)?;
        if grad_logits.dim() != (hh, ww) {
            return Err(UapError::Contract("logit gradient shape mismatch".into()));
        }
        let up = self.upsample(features);
        let d = up.dim().2;
        let p = Self::prompt_feature(&up, prompt);
        let p_norm = (p.dot(&p) + NORM_EPS).sqrt();
        let p_hat = &p / p_norm;
        let scale = self.config.decoder_scale;

        let mut grad_up = Array3::zeros((hh, ww, d));
        // dL/d(p_hat), accumulated over pixels.
        let mut grad_phat = Array1::<f64>::zeros(d);
        for i in 0..hh {
            for j in 0..ww {
                let gc = scale * grad_logits[[i, j]];
                if gc == 0.0 {
                    continue;
                }
                let u = up.slice(s![i, j, ..]);
                let u_norm = (u.dot(&u) + NORM_EPS).sqrt();
                let n = &u / u_norm;
                let cos = n.dot(&p_hat);
                // d cos / d u = (p_hat - cos * u / |u|) / |u|
                let du = (&p_hat - &(&u * (cos / u_norm))) * (gc / u_norm);
                grad_up.slice_mut(s![i, j, ..]).scaled_add(1.0, &du);
                grad_phat.scaled_add(gc, &n);
            }
        }
        let gp = (&grad_phat - &(&p * (grad_phat.dot(&p) / (p_norm * p_norm)))) / p_norm;
        match *prompt {
            Prompt::Point { row, col } => {
                grad_up.slice_mut(s![row, col, ..]).scaled_add(1.0, &gp);
            }
            Prompt::Box {
                row_min,
                col_min,
                row_max,
                col_max,
            } => {
                let count = ((row_max - row_min + 1) * (col_max - col_min + 1)) as f64;
                let share = &gp / count;
                for i in row_min..=row_max {
                    for j in col_min..=col_max {
                        grad_up.slice_mut(s![i, j, ..]).scaled_add(1.0, &share);
                    }
                }
            }
        }
        Ok(self.upsample_backward(&grad_up))
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
