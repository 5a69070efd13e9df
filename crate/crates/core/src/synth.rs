//! Synthetic scenes standing in for natural images at desk scale.
//!
//! Scenes are locally smooth: a two-colour gradient background with a few
//! soft-edged ellipses and rectangles on top.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::types::{BinaryMask, ImageTensor, Shape3};

/// Seed offset separating held-out scenes from training scenes.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;
/// Seed offset for memory-bank scenes.
pub const BANK_SEED_OFFSET: u64 = 2_000_000;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// A random scene with values in [0,1].
pub fn scene(seed: u64, shape: Shape3) -> ImageTensor {
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = random_color(&mut rng, 0.05, 0.75);
    let c1 = random_color(&mut rng, 0.05, 0.75);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut img = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let t = 0.5 + 0.5 * ((i as f64 / h as f64 - 0.5) * dy + (j as f64 / w as f64 - 0.5) * dx);
        let k = k.min(2);
        c0[k] * (1.0 - t) + c1[k] * t
    });
    let n_shapes = rng.gen_range(2..=4);
    let scale = h.min(w) as f64;
    for _ in 0..n_shapes {
        let color = random_color(&mut rng, 0.0, 1.0);
        let cy = rng.gen_range(0.1..0.9) * h as f64;
        let cx = rng.gen_range(0.1..0.9) * w as f64;
        let ry = rng.gen_range(0.08..0.25) * scale;
        let rx = rng.gen_range(0.08..0.25) * scale;
        let rect = rng.gen_bool(0.35);
        let soft = 1.2;
        for i in 0..h {
            for j in 0..w {
                let (y, x) = ((i as f64 - cy) / ry, (j as f64 - cx) / rx);
                // signed distance proxy in pixels, positive inside
                let inside = if rect {
                    (1.0 - y.abs()).min(1.0 - x.abs()) * ry.min(rx)
                } else {
                    (1.0 - (y * y + x * x).sqrt()) * ry.min(rx)
                };
                let a = logistic(inside / soft);
                for k in 0..c {
                    let v = &mut img[[i, j, k]];
                    *v = *v * (1.0 - a) + color[k.min(2)] * a;
                }
            }
        }
    }
    ImageTensor::new(img.mapv(|v| v.clamp(0.0, 1.0))).expect("finite scene")
}

/// A dark image with a bright red square (upper left) and a bright blue
/// square (lower right), each 3/8 of the image side. At sizes divisible by 8
/// the squares sit on an 8×8 cell grid. Returns the image, the two masks and
/// the square centres.
pub fn two_blob(shape: Shape3) -> (ImageTensor, [BinaryMask; 2], [(usize, usize); 2]) {
    let (h, w, c) = shape;
    let spans = [(0, 3 * h / 8, 0, 3 * w / 8), (5 * h / 8, h, 5 * w / 8, w)];
    let centers = spans.map(|(r0, r1, c0, c1)| ((r0 + r1) / 2, (c0 + c1) / 2));
    let colors = [[0.95, 0.15, 0.1], [0.1, 0.2, 0.95]];
    let bg = [0.08, 0.08, 0.1];
    let inside = |b: usize, i: usize, j: usize| {
        let (r0, r1, c0, c1) = spans[b];
        (r0..r1).contains(&i) && (c0..c1).contains(&j)
    };
    let img = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let k = k.min(2);
        if inside(0, i, j) {
            colors[0][k]
        } else if inside(1, i, j) {
            colors[1][k]
        } else {
            bg[k]
        }
    });
    let masks = [0, 1].map(|b| BinaryMask(ndarray::Array2::from_shape_fn((h, w), |(i, j)| inside(b, i, j))));
    (ImageTensor::new(img).expect("finite"), masks, centers)
}

pub fn scene_corpus(prefix: &str, first_seed: u64, n: usize, shape: Shape3) -> Corpus {
    Corpus::from_tensors(prefix, (0..n as u64).map(|i| scene(first_seed + i, shape)))
}

/// Train / bank / held-out split of synthetic scenes. The three sets are
/// generated from disjoint seed ranges.
#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub train: Corpus,
    pub bank: Corpus,
    pub test: Corpus,
}

impl ToyFixture {
    pub fn new(shape: Shape3, n_train: usize, n_bank: usize, n_test: usize) -> Self {
        Self {
            train: scene_corpus("train-", 0, n_train, shape),
            bank: scene_corpus("bank-", BANK_SEED_OFFSET, n_bank, shape),
            test: scene_corpus("test-", TEST_SEED_OFFSET, n_test, shape),
        }
    }

    /// 20 training, 64 bank and 20 held-out 64×64×3 scenes.
    pub fn standard() -> Self {
        Self::new((64, 64, 3), 20, 64, 20)
    }
}
