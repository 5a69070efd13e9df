mod common;

use common::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use uap_core::baseline::mask_removal_grad;
use uap_core::encoders::{encode_embed, encode_embed_backward, ToyConfig, ToySegmenter};
use uap_core::synth::scene;
use uap_core::*;

const PROBES: usize = 20;
const TOL: f64 = 1e-3;

fn toy() -> ToySegmenter {
    ToySegmenter::new(ToyConfig::default()).unwrap()
}

/// Half the probes sit on natural scenes, half in the small-amplitude regime
/// of a bare perturbation.
fn probe_input(rng: &mut impl Rng, i: usize, shape: (usize, usize, usize)) -> Array3<f64> {
    if i.is_multiple_of(2) {
        let base = scene(1000 + i as u64, shape).into_inner();
        base + random_array3(rng, shape, -0.02, 0.02)
    } else {
        random_array3(rng, shape, -0.04, 0.04)
    }
}

fn random_prompt(rng: &mut impl Rng, h: usize, w: usize) -> Prompt {
    if rng.gen_bool(0.5) {
        Prompt::Point {
            row: rng.gen_range(0..h),
            col: rng.gen_range(0..w),
        }
    } else {
        let (r0, c0) = (rng.gen_range(0..h - 8), rng.gen_range(0..w - 8));
        Prompt::Box {
            row_min: r0,
            col_min: c0,
            row_max: rng.gen_range(r0 + 4..h),
            col_max: rng.gen_range(c0 + 4..w),
        }
    }
}

#[test]
fn infonce_gradient_on_the_sphere() {
    let mut rng = rng(11);
    for probe in 0..PROBES {
        let d = rng.gen_range(4..40);
        let q = random_unit(&mut rng, d);
        let kp = random_unit(&mut rng, d);
        let negs: Vec<Embedding> = (0..rng.gen_range(1..9)).map(|_| random_unit(&mut rng, d)).collect();
        let tau = [0.05, 0.1, 0.5, 1.0][probe % 4];
        let g = infonce_loss_grad(&q, &kp, &negs, tau).unwrap();
        let dq = random_unit(&mut rng, d);
        let dk = random_unit(&mut rng, d);
        // derivative of normalize(u + t d) at t = 0 for unit u
        let tangent = |u: &Embedding, dir: &Embedding| dir.data() - &(u.data() * u.data().dot(dir.data()));
        let analytic = g.grad_q.dot(&tangent(&q, &dq)) + g.grad_pos.dot(&tangent(&kp, &dk));
        let numeric = central_diff(
            |t| {
                let q2 = l2_normalize(&(q.data() + &(dq.data() * t))).unwrap();
                let k2 = l2_normalize(&(kp.data() + &(dk.data() * t))).unwrap();
                infonce_loss(&q2, &k2, &negs, tau).unwrap()
            },
            1e-6,
        );
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn infonce_gradient_through_the_encoder() {
    let seg = toy();
    let enc = seg.encoder();
    let shape = enc.input_shape();
    let mut rng = rng(12);
    let bank: Vec<Embedding> = (0..4)
        .map(|i| encode_embed(enc, scene(500 + i, shape).view()).unwrap())
        .collect();
    for probe in 0..PROBES {
        let v = random_array3(&mut rng, shape, -DEFAULT_EPSILON, DEFAULT_EPSILON);
        let x = scene(700 + probe as u64, shape).into_inner();
        let dir = random_array3(&mut rng, shape, -1.0, 1.0);
        let loss = |v: &Array3<f64>| {
            let q = encode_embed(enc, v.view()).unwrap();
            let k = encode_embed(enc, (v + &x).view()).unwrap();
            infonce_loss(&q, &k, &bank, 0.1).unwrap()
        };
        let q = encode_embed(enc, v.view()).unwrap();
        let k = encode_embed(enc, (&v + &x).view()).unwrap();
        let g = infonce_loss_grad(&q, &k, &bank, 0.1).unwrap();
        let grad = encode_embed_backward(enc, v.view(), &g.grad_q).unwrap()
            + encode_embed_backward(enc, (&v + &x).view(), &g.grad_pos).unwrap();
        let analytic = dot(&grad, &dir);
        let numeric = central_diff(|t| loss(&(&v + &(&dir * t))), 1e-6);
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn mask_removal_gradient() {
    let mut rng = rng(13);
    for probe in 0..PROBES {
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let logits = Array2::from_shape_fn((h, w), |_| rng.gen_range(-20.0..10.0));
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.5));
        mask[[0, 0]] = true;
        let mask = BinaryMask(mask);
        let target = -10.0;
        let dir = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
        let g = mask_removal_grad(&MaskLogits::new(logits.clone()).unwrap(), &mask, target).unwrap();
        let analytic = dot(&g, &dir);
        let numeric = central_diff(
            |t| {
                let l = MaskLogits::new(&logits + &(&dir * t)).unwrap();
                mask_removal_loss(&l, &mask, target).unwrap().value
            },
            1e-6,
        );
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn predict_mask_gradient() {
    let seg = toy();
    let shape = Segmenter::input_shape(&seg);
    let mut rng = rng(14);
    for probe in 0..PROBES {
        let x = probe_input(&mut rng, probe, shape);
        let p = random_prompt(&mut rng, shape.0, shape.1);
        let dir = random_array3(&mut rng, shape, -1.0, 1.0);
        let ones = Array2::ones((shape.0, shape.1));
        let grad = seg.predict_mask_backward(x.view(), &p, ones.view()).unwrap();
        let analytic = dot(&grad, &dir);
        let numeric = central_diff(
            |t| seg.predict_mask((&x + &(&dir * t)).view(), &p).unwrap().0.sum(),
            1e-6,
        );
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn encoder_directional_derivative() {
    let seg = toy();
    let enc = seg.encoder();
    let shape = enc.input_shape();
    let fshape = enc.feature_shape();
    let n = (fshape.0 * fshape.1 * fshape.2) as f64;
    let mut rng = rng(15);
    for probe in 0..PROBES {
        let x = probe_input(&mut rng, probe, shape);
        let dir = random_array3(&mut rng, shape, -1.0, 1.0);
        let gmean = Array3::from_elem(fshape, 1.0 / n);
        let grad = enc.encode_backward(x.view(), gmean.view()).unwrap();
        let analytic = dot(&grad, &dir);
        let numeric = central_diff(
            |t| enc.encode((&x + &(&dir * t)).view()).unwrap().0.mean().unwrap(),
            1e-6,
        );
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn baseline_objective_gradient_end_to_end() {
    let seg = toy();
    let shape = Segmenter::input_shape(&seg);
    let mut rng = rng(16);
    for probe in 0..PROBES / 4 {
        let x = scene(900 + probe as u64, shape).into_inner();
        let p = random_prompt(&mut rng, shape.0, shape.1);
        let clean = binarize_mask(&seg.predict_mask(x.view(), &p).unwrap());
        let v = random_array3(&mut rng, shape, -DEFAULT_EPSILON, DEFAULT_EPSILON);
        let loss = |v: &Array3<f64>| {
            let l = seg.predict_mask((&x + v).view(), &p).unwrap();
            mask_removal_loss(&l, &clean, -10.0).unwrap().value
        };
        let l = seg.predict_mask((&x + &v).view(), &p).unwrap();
        let gl = mask_removal_grad(&l, &clean, -10.0).unwrap();
        let grad = seg.predict_mask_backward((&x + &v).view(), &p, gl.view()).unwrap();
        let dir = random_array3(&mut rng, shape, -1.0, 1.0);
        let analytic = dot(&grad, &dir);
        let numeric = central_diff(|t| loss(&(&v + &(&dir * t))), 1e-6);
        assert!(
            rel_err(analytic, numeric) < TOL,
            "probe {probe}: {analytic} vs {numeric}"
        );
    }
}
