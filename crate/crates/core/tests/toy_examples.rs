use std::path::PathBuf;

use uap_core::baseline::BaselineConfig;
use uap_core::encoders::{make_toy_segmenter, ToySegmenter};
use uap_core::eval::evaluate_uap;
use uap_core::synth::{two_blob, ToyFixture};
use uap_core::*;

fn toy() -> ToySegmenter {
    make_toy_segmenter(7, (64, 64, 3), (8, 8, 16)).unwrap()
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_seed7_zeros.txt")
}

/// Feature map of the all-zeros image, one f64 bit pattern per line.
/// Set `UAP_BLESS=1` to rewrite the file.
#[test]
fn zeros_encoding_matches_golden_file() {
    let seg = toy();
    let fm = seg.encode(ImageTensor::zeros((64, 64, 3)).view()).unwrap();
    let text: String = fm.0.iter().map(|v| format!("{:016x}\n", v.to_bits())).collect();
    let path = golden_path();
    if std::env::var("UAP_BLESS").is_ok_and(|v| v == "1") {
        std::fs::write(&path, &text).unwrap();
    }
    let want = std::fs::read_to_string(&path).expect("golden file present");
    assert_eq!(text, want);
}

fn blob_masks(seg: &ToySegmenter) -> (ImageTensor, [BinaryMask; 2], [Prompt; 2]) {
    let (img, masks, centers) = two_blob(Segmenter::input_shape(seg));
    let prompts = centers.map(|(row, col)| Prompt::Point { row, col });
    (img, masks, prompts)
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.0.iter().zip(b.0.iter()).filter(|(x, y)| **x && **y).count()
}

#[test]
fn point_on_a_blob_selects_that_blob() {
    let seg = toy();
    let (img, masks, prompts) = blob_masks(&seg);
    for (b, p) in prompts.iter().enumerate() {
        let m = binarize_mask(&seg.predict_mask(img.view(), p).unwrap());
        let own = overlap(&m, &masks[b]) as f64 / masks[b].area() as f64;
        let other = overlap(&m, &masks[1 - b]) as f64 / masks[1 - b].area() as f64;
        assert!(own >= 0.8, "blob {b}: covers {own}");
        assert!(other < 0.2, "blob {b}: leaks {other} into the other blob");
    }
}

#[test]
fn clean_runs_agree_and_seeds_differ() {
    let (a, b) = (toy(), toy());
    let (img, _, prompts) = blob_masks(&a);
    for p in &prompts {
        let ma = binarize_mask(&a.predict_mask(img.view(), p).unwrap());
        let mb = binarize_mask(&b.predict_mask(img.view(), p).unwrap());
        assert_eq!(iou(&ma, &mb).unwrap(), 1.0);
        assert_eq!(
            a.predict_mask(img.view(), p).unwrap(),
            b.predict_mask(img.view(), p).unwrap()
        );
    }
    let c = make_toy_segmenter(8, (64, 64, 3), (8, 8, 16)).unwrap();
    let x = uap_core::synth::scene(3, (64, 64, 3));
    assert_ne!(a.encode(x.view()).unwrap(), c.encode(x.view()).unwrap());
}

#[test]
fn image_dependent_attack_erases_the_blobs() {
    let seg = toy();
    let (img, _, prompts) = blob_masks(&seg);
    let out = attack_image_dependent(&seg, &img, &prompts, &BaselineConfig::default()).unwrap();
    assert!(out.uap.linf_norm() <= DEFAULT_EPSILON);
    let adv = ImageTensor::new(eval::perturb(&img, &out.uap, true)).unwrap();
    let mut total = 0.0;
    for p in &prompts {
        let clean = binarize_mask(&seg.predict_mask(img.view(), p).unwrap());
        let advm = binarize_mask(&seg.predict_mask(adv.view(), p).unwrap());
        total += iou(&clean, &advm).unwrap();
    }
    let miou = total / prompts.len() as f64;
    assert!(miou < 0.05, "mIoU {miou}");
}

#[test]
fn zero_lr_dependent_attack_is_noop() {
    let seg = toy();
    let (img, _, prompts) = blob_masks(&seg);
    let cfg = BaselineConfig {
        lr: 0.0,
        steps: 5,
        ..Default::default()
    };
    let out = attack_image_dependent(&seg, &img, &prompts, &cfg).unwrap();
    assert!(out.uap.data().iter().all(|&v| v == 0.0));
}

#[test]
fn contrastive_defaults_reduce_loss_and_beat_noise() {
    let seg = toy();
    let fx = ToyFixture::standard();
    let bank = build_membank(seg.encoder(), &fx.bank, fx.bank.len()).unwrap();
    let cfg = ClConfig {
        k: 32,
        steps: 500,
        ..Default::default()
    };
    let out = train_uap_cl(seg.encoder(), &fx.train, &bank, &cfg).unwrap();
    assert!(out.trace.iter().all(|r| r.linf <= DEFAULT_EPSILON));
    let (first, last) = (out.trace[0].loss, out.trace.last().unwrap().loss);
    assert!(last < first, "loss {first} -> {last}");

    let ecfg = EvalConfig {
        n_images: 20,
        ..Default::default()
    };
    let cl = evaluate_uap(&seg, &out.uap, &fx.test, &ecfg).unwrap().miou;
    let noise = random_noise_baseline(&seg, &fx.test, &ecfg, DEFAULT_EPSILON, 0)
        .unwrap()
        .miou;
    assert!(cl < noise, "contrastive {cl} vs noise {noise}");
    assert!(noise - cl >= 10.0, "contrastive {cl} vs noise {noise}");

    // point prompts on the two-blob image shrink under the trained perturbation
    let (img, _, prompts) = blob_masks(&seg);
    let adv = ImageTensor::new(eval::perturb(&img, &out.uap, true)).unwrap();
    for p in &prompts {
        let clean = binarize_mask(&seg.predict_mask(img.view(), p).unwrap()).area();
        let advm = binarize_mask(&seg.predict_mask(adv.view(), p).unwrap()).area();
        assert!(advm <= clean, "adversarial area {advm} > clean {clean}");
    }
}

#[test]
fn agnostic_held_out_is_weaker_than_dependent() {
    let seg = toy();
    let fx = ToyFixture::standard();
    let ecfg = EvalConfig {
        n_images: 20,
        ..Default::default()
    };
    let agn = run_baseline(&seg, &fx.train, &BaselineConfig::default()).unwrap();
    let held_out = evaluate_uap(&seg, &agn.uap, &fx.test, &ecfg).unwrap().miou;
    let dep = eval::evaluate_image_dependent(&seg, &fx.test, &ecfg, &BaselineConfig::default())
        .unwrap()
        .miou;
    assert!(held_out > dep, "agnostic {held_out} vs dependent {dep}");
}
