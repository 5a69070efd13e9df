mod common;

use common::*;
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uap_core::baseline::{BaselineConfig, BaselineMode};
use uap_core::encoders::make_toy_segmenter;
use uap_core::synth::ToyFixture;
use uap_core::*;

fn small_fixture() -> ToyFixture {
    ToyFixture::new((32, 32, 3), 6, 12, 6)
}

fn small_cl() -> ClConfig {
    ClConfig {
        k: 8,
        steps: 40,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_files_and_reports() {
    let seg = make_toy_segmenter(7, (32, 32, 3), (4, 4, 8)).unwrap();
    let fx = small_fixture();
    let dir = tempfile::tempdir().unwrap();
    let ecfg = EvalConfig {
        n_images: 6,
        prompts_per_image: 2,
        ..Default::default()
    };
    let mut files = Vec::new();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let bank = build_membank(seg.encoder(), &fx.bank, 12).unwrap();
        let out = train_uap_cl(seg.encoder(), &fx.train, &bank, &small_cl()).unwrap();
        let path = dir.path().join(format!("run{run}.bin"));
        save_uap(&out.uap, &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
        csvs.push(evaluate_uap(&seg, &out.uap, &fx.test, &ecfg).unwrap().to_csv());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(csvs[0], csvs[1]);

    let other = train_uap_cl(
        seg.encoder(),
        &fx.train,
        &build_membank(seg.encoder(), &fx.bank, 12).unwrap(),
        &ClConfig { seed: 1, ..small_cl() },
    )
    .unwrap();
    assert_ne!(uapfile::encode_uap(&other.uap), files[0]);
}

#[test]
fn baselines_are_deterministic() {
    let seg = make_toy_segmenter(7, (32, 32, 3), (4, 4, 8)).unwrap();
    let fx = small_fixture();
    for mode in [BaselineMode::ImageAgnostic, BaselineMode::ImageDependent] {
        let cfg = BaselineConfig {
            steps: 20,
            mode,
            ..Default::default()
        };
        let a = run_baseline(&seg, &fx.train, &cfg).unwrap();
        let b = run_baseline(&seg, &fx.train, &cfg).unwrap();
        assert_eq!(uapfile::encode_uap(&a.uap), uapfile::encode_uap(&b.uap));
    }
}

#[test]
fn uap_round_trip_is_bit_exact() {
    let seg = make_toy_segmenter(7, (32, 32, 3), (4, 4, 8)).unwrap();
    let fx = small_fixture();
    let bank = build_membank(seg.encoder(), &fx.bank, 12).unwrap();
    let out = train_uap_cl(seg.encoder(), &fx.train, &bank, &small_cl()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.bin");
    save_uap(&out.uap, &path).unwrap();
    let back = load_uap(&path).unwrap();
    assert_eq!(back, out.uap);
    assert!(back
        .data()
        .iter()
        .zip(out.uap.data().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let again = dir.path().join("v2.bin");
    save_uap(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn load_rejects_over_budget_payload() {
    let uap = Uap::new(Array3::from_elem((2, 2, 1), 0.01), DEFAULT_EPSILON).unwrap();
    let mut bytes = uapfile::encode_uap(&uap);
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&0.5f32.to_le_bytes());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_uap(&path), Err(UapError::Format { .. })));
}

#[test]
fn bank_round_trip_and_sampling() {
    let seg = make_toy_segmenter(7, (32, 32, 3), (4, 4, 8)).unwrap();
    let fx = small_fixture();
    let bank = build_membank(seg.encoder(), &fx.bank, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.bin");
    save_membank(&bank, &path).unwrap();
    let back = load_membank(&path).unwrap();
    assert!(back
        .embeddings()
        .iter()
        .zip(bank.embeddings().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.source_ids(), bank.source_ids());
    let a = sample_negatives(&bank, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_negatives(&back, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);

    let other = make_toy_segmenter(8, (32, 32, 3), (4, 4, 8)).unwrap();
    assert!(matches!(back.check_encoder(other.encoder()), Err(UapError::Config(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_membank(&path), Err(UapError::Format { .. })));
}

#[test]
fn evaluation_refuses_training_images() {
    let seg = make_toy_segmenter(7, (32, 32, 3), (4, 4, 8)).unwrap();
    let fx = small_fixture();
    let bank = build_membank(seg.encoder(), &fx.bank, 12).unwrap();
    let out = train_uap_cl(seg.encoder(), &fx.train, &bank, &ClConfig { steps: 2, ..small_cl() }).unwrap();
    let ecfg = EvalConfig {
        n_images: 6,
        ..Default::default()
    };
    assert!(matches!(
        evaluate_uap(&seg, &out.uap, &fx.train, &ecfg),
        Err(UapError::Config(_))
    ));
    assert!(matches!(
        evaluate_uap(&seg, &out.uap, &fx.bank, &ecfg),
        Err(UapError::Config(_))
    ));
    assert!(evaluate_uap(&seg, &out.uap, &fx.test, &ecfg).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_in_budget_uap_round_trips(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 1usize..4, eps in 0.0f64..0.2) {
        let mut r = rng(seed);
        let data = random_array3(&mut r, (h, w, c), -1.0, 1.0) * eps;
        let uap = Uap::new(data, eps).unwrap().with_meta("seed", seed);
        prop_assert!(uap.linf_norm() <= eps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_uap(&uap, &path).unwrap();
        prop_assert_eq!(load_uap(&path).unwrap(), uap);
    }
}
