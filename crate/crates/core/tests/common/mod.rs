#![allow(dead_code)]

use ndarray::{Array, Array1, Array2, Array3, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uap_core::{l2_normalize, Embedding};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Embedding {
    l2_normalize(&Array1::from_shape_fn(d, |_| gaussian(rng))).unwrap()
}

pub fn random_array3(rng: &mut impl Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn dot<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` at `t = 0` with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Direct evaluation without max-subtraction; sums use Neumaier compensation.
pub fn naive_infonce(q: &[f64], kp: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        neumaier(a.iter().zip(b).map(|(x, y)| x * y))
    }
    let pos = (dot(q, kp) / tau).exp();
    let denom = neumaier(std::iter::once(pos).chain(negs.iter().map(|k| (dot(q, k) / tau).exp())));
    -(pos / denom).ln()
}

pub fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn loop_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[[i, j]] && b[[i, j]] {
                inter += 1;
            }
            if a[[i, j]] || b[[i, j]] {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
