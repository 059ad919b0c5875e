use proptest::prelude::*;
use qsattn::data::*;
use qsattn::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bank(n: usize, dim: usize, seed: u64, f: impl Fn(f64) -> f64) -> PatchBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchBank::new(dim, (0..n * dim).map(|_| f(rng.random::<f64>())).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_dimensional_shift_is_recovered_exactly(seed in 0u64..1000, shift in -3.0f64..3.0, n in 1usize..200) {
        // every 1-D unit direction is ±1, and W1 of a translate is the offset
        let a = bank(n, 1, seed, |v| v);
        let b = bank(n, 1, seed, |v| v + shift);
        prop_assert!((swd(&a, &b, 16, seed).unwrap() - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn distance_scales_linearly(seed in 0u64..1000, k in 0.1f64..5.0) {
        let a = bank(100, 4, seed, |v| v);
        let b = bank(100, 4, seed + 1, |v| v * v);
        let ka = bank(100, 4, seed, |v| k * v);
        let kb = bank(100, 4, seed + 1, |v| k * v * v);
        let base = swd(&a, &b, 32, 3).unwrap();
        prop_assert!((swd(&ka, &kb, 32, 3).unwrap() - k * base).abs() < 1e-9 * (1.0 + k * base));
    }

    #[test]
    fn synthetic_masks_cover_a_bounded_share(seed in 0u64..500) {
        let pair = synth_pair(seed, 2, 32).unwrap();
        for s in pair.x.iter().chain(&pair.y) {
            let c = s.mask_coverage().unwrap();
            prop_assert!((0.2..=0.5).contains(&c), "coverage {}", c);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(seed in 0u64..1000, epoch in 0usize..50, n in 1usize..12) {
        let img = qsattn_tensor::Tensor::<f32>::zeros(vec![3, 8, 8]);
        let data = UnpairedData::new(vec![img.clone(); n], vec![img]).unwrap();
        let mut order = data.epoch_order(seed, epoch);
        prop_assert_eq!(&order, &data.epoch_order(seed, epoch));
        order.sort();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn more_projections_give_a_steadier_estimate() {
    let a = bank(1024, 12, 1, |v| v);
    let b = bank(1024, 12, 2, |v| v * v);
    let spread = |projections: usize| {
        let v: Vec<f64> = (0..12).map(|s| swd(&a, &b, projections, 100 + s).unwrap()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let (few, many) = (spread(8), spread(512));
    assert!(many < few / 4.0, "{many} vs {few}");
}

#[test]
fn palette_classifier_separates_the_synthetic_domains() {
    let pair = synth_pair(3, 16, 32).unwrap();
    let images = |s: &[DomainSample]| s.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
    let masks = |s: &[DomainSample]| s.iter().map(|s| s.mask.clone().unwrap()).collect::<Vec<_>>();
    assert_eq!(domain_score(&images(&pair.x), &masks(&pair.x), &SYNTH_PALETTES).unwrap(), 0.0);
    assert_eq!(domain_score(&images(&pair.y), &masks(&pair.y), &SYNTH_PALETTES).unwrap(), 1.0);
    // Y patches sit closer to Y than X patches do
    let bx = PatchBank::sample(&images(&pair.x), DEFAULT_PATCH, MIN_BANK, 1).unwrap();
    let by = PatchBank::sample(&images(&pair.y), DEFAULT_PATCH, MIN_BANK, 2).unwrap();
    let other = synth_pair(4, 16, 32).unwrap();
    let by2 = PatchBank::sample(&images(&other.y), DEFAULT_PATCH, MIN_BANK, 3).unwrap();
    assert!(swd(&by2, &by, 64, 0).unwrap() < swd(&bx, &by, 64, 0).unwrap());
}

#[test]
fn written_dataset_loads_back_and_bad_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_dataset(dir.path(), 7, 3, 2, 32).unwrap();
    std::fs::write(dir.path().join(TRAIN_A).join("broken.png"), b"not an image").unwrap();
    let data = UnpairedData::from_root(dir.path(), 32).unwrap();
    assert_eq!((data.x.len(), data.y.len()), (3, 3));
    let original = synth_pair(7, 3, 32).unwrap();
    // PNG stores 8 bits per channel
    for (loaded, s) in data.x.iter().zip(&original.x) {
        let err = loaded.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0 + 1e-6, "{err}");
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(load_folder(empty.path(), 32, Preprocess::Center, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn augmentation_crops_to_the_requested_size() {
    let pair = synth_pair(8, 1, 64).unwrap();
    let img = tensor_to_rgb(&pair.x[0].image).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        assert_eq!(preprocess(&img, 32, Preprocess::Augment, &mut rng).dimensions(), (32, 32));
    }
    let center = preprocess(&img, 64, Preprocess::Center, &mut rng);
    assert_eq!(rgb_to_tensor(&center), rgb_to_tensor(&img));
}
