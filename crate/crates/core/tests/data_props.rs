use drtl_core::data::*;
use drtl_core::rng;
use drtl_core::scenes::generate_scenes;
use drtl_core::synth::{apply_gaussian_noise, DistortionKind, synthesize_pairs};
use drtl_core::{DrtlError, Image};
use proptest::prelude::*;

#[test]
fn missing_png_names_the_item() {
    let clean = generate_scenes(1, 4, 16, 16, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_pairs(&clean, DistortionKind::GaussNoise, 2).unwrap();
    write_paired(dir.path(), &ds, 2).unwrap();
    std::fs::remove_file(dir.path().join("GaussNoise/distorted/2.png")).unwrap();
    match load_pairs(&dir.path().join("GaussNoise/manifest.json")) {
        Err(DrtlError::Item { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected item error, got {other:?}"),
    }
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "none", &[], 0).unwrap();
    let ds = load_pairs(&dir.path().join("none/manifest.json")).unwrap();
    assert!(ds.is_empty());
}

#[test]
fn residual_std_tracks_noise_sigma() {
    let img = Image::filled(128, 128, 3, 0.5).unwrap();
    for sigma in [10.0, 25.0] {
        let noisy = apply_gaussian_noise(&img, sigma, &mut rng::from_seed(1)).unwrap();
        let r = residual(&img, &noisy).unwrap();
        let n = r.data().len() as f64;
        let m = r.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let s = (r.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((s - sigma / 255.0).abs() / (sigma / 255.0) < 0.05, "{s}");
    }
}

#[test]
fn residual_constants() {
    let a = Image::filled(8, 8, 1, 0.6).unwrap();
    let b = Image::filled(8, 8, 1, 0.5).unwrap();
    assert!(residual(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(residual(&a, &b).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-6));
    assert!(residual(&a, &Image::filled(9, 8, 1, 0.5).unwrap()).is_err());
}

#[test]
fn few_shot_split_bounds() {
    let ds = synthesize_pairs(&generate_scenes(3, 6, 16, 16, 1).unwrap(), DistortionKind::GaussBlur, 1).unwrap();
    assert!(few_shot_split(&ds, 0, 1).is_err());
    assert!(few_shot_split(&ds, 7, 1).is_err());
    let s = few_shot_split(&ds, 6, 1).unwrap();
    assert_eq!(s.train.len(), 6);
    assert!(s.eval.is_empty());
}

fn arb_image(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0u8..=255, h * w * c).prop_map(move |b| Image::from_u8(h, w, c, &b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residual_is_antisymmetric(a in arb_image(8, 9, 3), b in arb_image(8, 9, 3)) {
        let ab = residual(&a, &b).unwrap();
        let ba = residual(&b, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn split_partitions_and_is_deterministic(n in 1usize..20, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let items: Vec<PairItem> = (0..n).map(|i| {
            let c = Image::filled(8, 8, 1, i as f32 / 20.0).unwrap();
            PairItem { index: i, clean: c.clone(), distorted: c, record: None }
        }).collect();
        let ds = PairedDataset { kind: "t".into(), items };
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let s = few_shot_split(&ds, k, seed).unwrap();
        prop_assert_eq!(s.train.len(), k);
        prop_assert_eq!(s.train.len() + s.eval.len(), n);
        let mut idx: Vec<usize> = s.train.iter().chain(&s.eval).map(|p| p.index).collect();
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(few_shot_split(&ds, k, seed).unwrap(), s);
    }

    #[test]
    fn patches_stay_aligned(seed in any::<u64>()) {
        let clean = generate_scenes(seed % 7, 2, 24, 24, 3).unwrap();
        let items: Vec<PairItem> = clean.into_iter().enumerate().map(|(i, c)| {
            let d = Image::new(24, 24, 3, c.data().iter().map(|v| 1.0 - v).collect()).unwrap();
            PairItem { index: i, clean: c, distorted: d, record: None }
        }).collect();
        let b = sample_patch_batch(&items, 4, 16, &mut rng::from_seed(seed)).unwrap();
        for (x, y) in b.clean.data().iter().zip(b.distorted.data()) {
            prop_assert!((x + y - 1.0).abs() < 1e-6);
        }
    }
}
