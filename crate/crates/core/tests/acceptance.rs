//! Desk-scale acceptance suite. Prints one line per criterion and exits
//! nonzero if any gating criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uap_core::baseline::{mask_removal_grad, BaselineConfig, BaselineMode};
use uap_core::encoders::{encode_embed, encode_embed_backward, ToySegmenter};
use uap_core::eval::{evaluate_image_dependent, CosineConfig};
use uap_core::eval::{SweepInputs, SweepKind};
use uap_core::synth::{scene, ToyFixture};
use uap_core::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const CL_STEPS: usize = 1000;

type Outcome = (bool, String);
type Criterion = (&'static str, Box<dyn Fn(&Env) -> Outcome>);

struct Env {
    seg: ToySegmenter,
    fx: ToyFixture,
    bank: MemoryBank,
    eval: EvalConfig,
}

impl Env {
    fn new() -> Self {
        let seg = ToySegmenter::new(Default::default()).unwrap();
        let fx = ToyFixture::standard();
        let bank = build_membank(seg.encoder(), &fx.bank, fx.bank.len()).unwrap();
        let eval = EvalConfig {
            n_images: fx.test.len(),
            ..Default::default()
        };
        Self { seg, fx, bank, eval }
    }

    fn cl(&self) -> ClConfig {
        ClConfig {
            k: 32,
            steps: CL_STEPS,
            ..Default::default()
        }
    }

    fn sweep(&self, kind: SweepKind, grid: &[&str], base: ClConfig) -> Vec<f64> {
        let grid: Vec<String> = grid.iter().map(|s| s.to_string()).collect();
        let inputs = SweepInputs {
            segmenter: &self.seg,
            aug_corpus: &self.fx.train,
            bank: &self.bank,
            test: &self.fx.test,
            base,
            eval: self.eval.clone(),
            seeds: SEEDS.to_vec(),
            out_dir: None,
        };
        let report = eval::sweep(kind, &grid, &inputs).unwrap();
        report.cells.iter().map(|c| c.miou.expect("cell succeeded")).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn infonce_oracle() -> Outcome {
    let mut rng = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(2..64);
        let q = random_unit(&mut rng, d);
        let kp = random_unit(&mut rng, d);
        let negs: Vec<Embedding> = (0..rng.gen_range(1..33)).map(|_| random_unit(&mut rng, d)).collect();
        let tau = 10f64.powf(rng.gen_range(-1.5..0.5));
        let raw: Vec<Vec<f64>> = negs.iter().map(|k| k.data().to_vec()).collect();
        let want = naive_infonce(q.data().as_slice().unwrap(), kp.data().as_slice().unwrap(), &raw, tau);
        worst = worst.max((infonce_loss(&q, &kp, &negs, tau).unwrap() - want).abs());
    }
    let e = |i: usize| Embedding::from_unit(Array1::from_shape_fn(3, |j| if i == j { 1.0 } else { 0.0 })).unwrap();
    let ln2 = (infonce_loss(&e(0), &e(1), &[e(2)], 0.1).unwrap() - std::f64::consts::LN_2).abs();
    let orth = (infonce_loss(&e(0), &e(0), &[e(1)], 1.0).unwrap() - (1.0 + (-1.0f64).exp()).ln()).abs();
    (
        worst < 1e-9 && ln2 < 1e-12 && orth < 1e-12,
        format!("max |err| {worst:.2e} over 1000 instances; ln 2 off by {ln2:.1e}; ln(1+1/e) off by {orth:.1e}"),
    )
}

fn gradient_checks(env: &Env) -> Outcome {
    let seg = &env.seg;
    let enc = seg.encoder();
    let shape = enc.input_shape();
    let mut rng = rng(102);
    let negs: Vec<Embedding> = (0..4).map(|i| env.bank.row(i)).collect();
    let (mut w_info, mut w_mask, mut w_pred) = (0.0f64, 0.0f64, 0.0f64);
    for probe in 0..20 {
        let dir = random_array3(&mut rng, shape, -1.0, 1.0);

        let v = random_array3(&mut rng, shape, -DEFAULT_EPSILON, DEFAULT_EPSILON);
        let x = scene(3000 + probe, shape).into_inner();
        let info = |v: &Array3<f64>| {
            let q = encode_embed(enc, v.view()).unwrap();
            let k = encode_embed(enc, (v + &x).view()).unwrap();
            infonce_loss(&q, &k, &negs, 0.1).unwrap()
        };
        let q = encode_embed(enc, v.view()).unwrap();
        let k = encode_embed(enc, (&v + &x).view()).unwrap();
        let g = infonce_loss_grad(&q, &k, &negs, 0.1).unwrap();
        let grad = encode_embed_backward(enc, v.view(), &g.grad_q).unwrap()
            + encode_embed_backward(enc, (&v + &x).view(), &g.grad_pos).unwrap();
        let fd = central_diff(|t| info(&(&v + &(&dir * t))), 1e-6);
        w_info = w_info.max(rel_err(dot(&grad, &dir), fd));

        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let logits = Array2::from_shape_fn((h, w), |_| rng.gen_range(-20.0..10.0));
        let mask = BinaryMask(Array2::from_shape_fn((h, w), |(i, j)| i + j == 0 || rng.gen_bool(0.5)));
        let ldir = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
        let gm = mask_removal_grad(&MaskLogits::new(logits.clone()).unwrap(), &mask, -10.0).unwrap();
        let fd = central_diff(
            |t| {
                let l = MaskLogits::new(&logits + &(&ldir * t)).unwrap();
                mask_removal_loss(&l, &mask, -10.0).unwrap().value
            },
            1e-6,
        );
        w_mask = w_mask.max(rel_err(dot(&gm, &ldir), fd));

        let img = &x + &random_array3(&mut rng, shape, -0.02, 0.02);
        let p = Prompt::Point {
            row: rng.gen_range(0..shape.0),
            col: rng.gen_range(0..shape.1),
        };
        let ones = Array2::ones((shape.0, shape.1));
        let gp = seg.predict_mask_backward(img.view(), &p, ones.view()).unwrap();
        let fd = central_diff(
            |t| seg.predict_mask((&img + &(&dir * t)).view(), &p).unwrap().0.sum(),
            1e-6,
        );
        w_pred = w_pred.max(rel_err(dot(&gp, &dir), fd));
    }
    (
        w_info < 1e-3 && w_mask < 1e-3 && w_pred < 1e-3,
        format!("worst relative error: infonce {w_info:.1e}, mask removal {w_mask:.1e}, predict_mask {w_pred:.1e}"),
    )
}

fn miou_oracle(env: &Env) -> Outcome {
    let mask = |bits: u32| Array2::from_shape_fn((2, 2), |(i, j)| bits >> (2 * i + j) & 1 == 1);
    let mut exhaustive = 0;
    for a in 0..16 {
        for b in 0..16 {
            let (ma, mb) = (mask(a), mask(b));
            if iou(&BinaryMask(ma.clone()), &BinaryMask(mb.clone())).unwrap() == loop_iou(&ma, &mb) {
                exhaustive += 1;
            }
        }
    }
    let mut rng = rng(103);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.gen_range(0.05..0.95);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(p));
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(p));
        worst = worst.max((iou(&BinaryMask(a.clone()), &BinaryMask(b.clone())).unwrap() - loop_iou(&a, &b)).abs());
    }
    let zero = Uap::zeros(Segmenter::input_shape(&env.seg), DEFAULT_EPSILON);
    let box_cfg = EvalConfig {
        prompt_kind: PromptKind::Box,
        prompts_per_image: 3,
        ..env.eval.clone()
    };
    let m1 = evaluate_uap(&env.seg, &zero, &env.fx.test, &env.eval).unwrap().miou;
    let m2 = evaluate_uap(
        &env.seg,
        &zero,
        &env.fx.bank,
        &EvalConfig {
            n_images: 64,
            ..box_cfg
        },
    )
    .unwrap()
    .miou;
    (
        exhaustive == 256 && worst < 1e-12 && m1 == 100.0 && m2 == 100.0,
        format!("2x2 exact {exhaustive}/256; 16x16 max err {worst:.1e}; mIoU(v=0) = {m1} (points), {m2} (boxes)"),
    )
}

fn budget(env: &Env) -> Outcome {
    let limit = 10.0 / 255.0 + 1e-9;
    let cl = train_uap_cl(
        env.seg.encoder(),
        &env.fx.train,
        &env.bank,
        &ClConfig { steps: 100, ..env.cl() },
    )
    .unwrap();
    let mut worst = cl
        .uap
        .linf_norm()
        .max(cl.trace.iter().map(|r| r.linf).fold(0.0, f64::max));
    for mode in [BaselineMode::ImageAgnostic, BaselineMode::ImageDependent] {
        let b = run_baseline(
            &env.seg,
            &env.fx.train,
            &BaselineConfig {
                steps: 100,
                mode,
                ..Default::default()
            },
        )
        .unwrap();
        worst = worst
            .max(b.uap.linf_norm())
            .max(b.trace.iter().map(|r| r.linf).fold(0.0, f64::max));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    let mut bytes = uapfile::encode_uap(&cl.uap);
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&(2.0 * DEFAULT_EPSILON as f32).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let rejected = matches!(load_uap(&path), Err(UapError::Format { .. }));
    (
        worst <= limit && rejected,
        format!("max |v| over contrastive, agnostic and dependent runs {worst:.6} (limit {limit:.6}); over-budget file rejected: {rejected}"),
    )
}

fn baseline_ordering(env: &Env) -> Outcome {
    let noise: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            random_noise_baseline(&env.seg, &env.fx.test, &env.eval, DEFAULT_EPSILON, s)
                .unwrap()
                .miou
        })
        .collect();
    let agnostic: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let b = run_baseline(
                &env.seg,
                &env.fx.train,
                &BaselineConfig {
                    seed: s,
                    ..Default::default()
                },
            )
            .unwrap();
            evaluate_uap(&env.seg, &b.uap, &env.fx.test, &env.eval).unwrap().miou
        })
        .collect();
    let dependent: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let cfg = BaselineConfig {
                seed: s,
                mode: BaselineMode::ImageDependent,
                ..Default::default()
            };
            evaluate_image_dependent(
                &env.seg,
                &env.fx.test,
                &EvalConfig {
                    seed: s,
                    ..env.eval.clone()
                },
                &cfg,
            )
            .unwrap()
            .miou
        })
        .collect();
    let (n, a, d) = (mean(&noise), mean(&agnostic), mean(&dependent));
    (
        n > a && a > d && d < 5.0 && n - a >= 5.0 && a - d >= 5.0,
        format!("noise {n:.2} > agnostic {a:.2} > dependent {d:.2}"),
    )
}

fn augmentation_ranking(env: &Env) -> Outcome {
    let kinds = ["crop_resize", "cutout", "uniform_noise", "color_shift", "add_image"];
    let m = env.sweep(SweepKind::Augmentation, &kinds, env.cl());
    let add = m[4];
    let pass = m[..3].iter().all(|&o| o - add >= 5.0);
    let detail = kinds
        .iter()
        .zip(&m)
        .map(|(k, v)| format!("{k} {v:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    (pass, detail)
}

fn negatives_trend(env: &Env) -> Outcome {
    let ks = ["1", "2", "4", "8", "16"];
    let m = env.sweep(SweepKind::Negatives, &ks, env.cl());
    let pass = m.windows(2).all(|w| w[1] <= w[0] + 3.0);
    let detail = ks
        .iter()
        .zip(&m)
        .map(|(k, v)| format!("K={k} {v:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    (pass, detail)
}

fn cosine_ordering(env: &Env) -> Outcome {
    let out = train_uap_cl(env.seg.encoder(), &env.fx.train, &env.bank, &env.cl()).unwrap();
    let c = cosine_analysis(env.seg.encoder(), &out.uap, &env.fx.test, &CosineConfig::default()).unwrap();
    (
        c.positive > c.adv_clean && c.positive > c.negative,
        format!(
            "positive {:.3}, negative {:.3}, adv/clean {:.3}, random {:.3}",
            c.positive, c.negative, c.adv_clean, c.random_pair
        ),
    )
}

fn determinism(env: &Env) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ClConfig { steps: 100, ..env.cl() };
    let mut files = Vec::new();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let bank = build_membank(env.seg.encoder(), &env.fx.bank, env.fx.bank.len()).unwrap();
        let out = train_uap_cl(env.seg.encoder(), &env.fx.train, &bank, &cfg).unwrap();
        let p = dir.path().join(format!("{run}.bin"));
        save_uap(&out.uap, &p).unwrap();
        files.push(std::fs::read(&p).unwrap());
        csvs.push(
            evaluate_uap(&env.seg, &out.uap, &env.fx.test, &env.eval)
                .unwrap()
                .to_csv(),
        );
    }
    let uap_a = load_uap(&dir.path().join("0.bin")).unwrap();
    let p2 = dir.path().join("again.bin");
    save_uap(&uap_a, &p2).unwrap();
    let uap_trip = std::fs::read(&p2).unwrap() == files[0];

    let bp = dir.path().join("bank.bin");
    save_membank(&env.bank, &bp).unwrap();
    let back = load_membank(&bp).unwrap();
    let bank_trip = back
        .embeddings()
        .iter()
        .zip(env.bank.embeddings().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let s1 = sample_negatives(&env.bank, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let s2 = sample_negatives(&back, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ok = files[0] == files[1] && csvs[0] == csvs[1] && uap_trip && bank_trip && s1 == s2;
    (
        ok,
        format!(
            "uap files equal {}, csv equal {}, uap round trip {uap_trip}, bank round trip {bank_trip}",
            files[0] == files[1],
            csvs[0] == csvs[1]
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let env = Env::new();
    let criteria: Vec<Criterion> = vec![
        ("infonce oracle", Box::new(|_| infonce_oracle())),
        ("gradient checks", Box::new(gradient_checks)),
        ("miou oracle", Box::new(miou_oracle)),
        ("budget invariants", Box::new(budget)),
        ("baseline ordering", Box::new(baseline_ordering)),
        ("augmentation ranking", Box::new(augmentation_ranking)),
        ("negatives trend", Box::new(negatives_trend)),
        ("cosine ordering", Box::new(cosine_ordering)),
        ("determinism and persistence", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = run(&env);
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} ({detail}) [{:.1}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("criterion 10 external model at full scale: SKIP (optional; needs an external segmenter checkpoint and a 100-image natural test set)");
    println!(
        "acceptance: {}/{} gating criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
