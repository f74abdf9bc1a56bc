use std::collections::BTreeMap;

use drtl_core::backbones::{Arch, BackboneConfig};
use drtl_core::eval::*;
use drtl_core::rng;
use drtl_core::synth::apply_gaussian_noise;
use drtl_core::scenes::generate_scene;
use drtl_core::trainers::{RunManifest, TrainConfig};
use drtl_core::Image;
use proptest::prelude::*;

#[test]
fn psnr_of_known_offset() {
    let a = Image::filled(16, 16, 3, 0.5).unwrap();
    let b = Image::filled(16, 16, 3, 0.6).unwrap();
    // mse = 0.01 -> 20 dB
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(&a, &Image::filled(16, 15, 3, 0.5).unwrap()).is_err());
}

#[test]
fn metrics_degrade_with_noise_level() {
    let img = generate_scene(12, 64, 64, 3).unwrap();
    let mut last = (f64::INFINITY, 1.0 + 1e-9);
    for sigma in [5.0, 15.0, 30.0, 50.0] {
        let noisy = apply_gaussian_noise(&img, sigma, &mut rng::from_seed(0)).unwrap();
        let (p, s) = (psnr(&noisy, &img).unwrap(), ssim(&noisy, &img).unwrap());
        assert!(p < last.0 && s < last.1, "sigma {sigma}: {p} {s}");
        last = (p, s);
    }
}

#[test]
fn capped_mean_ignores_infinite_excess() {
    let per = vec![
        ImageMetric { index: 0, psnr: f64::INFINITY, ssim: 1.0 },
        ImageMetric { index: 1, psnr: 30.0, ssim: 0.5 },
    ];
    let r = MetricReport::from_metrics("x", "h".into(), 0, per).unwrap();
    assert_eq!(r.mean_psnr, (PSNR_CAP + 30.0) / 2.0);
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert!(MetricReport::from_metrics("x", "h".into(), 0, vec![]).is_err());
}

fn manifest(regime: &str, seed: u64, psnr: f64, hash: &str, k: Option<usize>) -> RunManifest {
    let per = vec![ImageMetric { index: 0, psnr, ssim: 0.8 }];
    RunManifest {
        regime: regime.into(),
        backbone: BackboneConfig { arch: Arch::TinyDnCNN, depth: 3, width: 4, channels: 3 },
        train: TrainConfig::default(),
        config_hash: format!("cfg-{regime}"),
        seed,
        dataset_hashes: BTreeMap::new(),
        relation_hash: None,
        gamma: None,
        k,
        init: None,
        loss_log: vec![],
        wall_time_secs: 0.0,
        checkpoint: "model.ckpt".into(),
        eval: Some(MetricReport::from_metrics(regime, hash.into(), seed, per).unwrap()),
        status: "ok".into(),
    }
}

#[test]
fn report_has_one_row_per_regime_and_is_stable() {
    let regimes = ["baseline", "pretrain", "maml", "drtl-p", "drtl-m"];
    let mut ms = Vec::new();
    for (i, r) in regimes.iter().enumerate() {
        for seed in 0..3 {
            ms.push(manifest(r, seed, 25.0 + i as f64 + seed as f64 * 0.1, "eval", None));
        }
    }
    let rep = build_report(&ms).unwrap();
    assert_eq!(rep.rows.len(), 5);
    for (row, r) in rep.rows.iter().zip(regimes) {
        assert_eq!(row.regime, r);
        assert_eq!(row.seeds, vec![0, 1, 2]);
    }
    assert!((rep.rows[3].mean_psnr - 28.1).abs() < 1e-9);
    let a = serde_json::to_vec(&rep).unwrap();
    let b = serde_json::to_vec(&build_report(&ms).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(render_markdown(&rep), render_markdown(&build_report(&ms).unwrap()));
    assert_eq!(render_markdown(&rep).lines().filter(|l| l.starts_with("| drtl")).count(), 2);
}

#[test]
fn report_refuses_mixed_eval_sets_and_unevaluated_runs() {
    let ms = vec![manifest("baseline", 0, 25.0, "a", None), manifest("drtl-p", 0, 26.0, "b", None)];
    assert!(build_report(&ms).is_err());
    let mut m = manifest("baseline", 0, 25.0, "a", None);
    m.eval = None;
    assert!(build_report(&[m]).is_err());
    assert!(build_report(&[]).is_err());
}

#[test]
fn sweep_points_average_over_seeds() {
    let ms = vec![
        manifest("baseline", 0, 24.0, "e", Some(5)),
        manifest("baseline", 1, 26.0, "e", Some(5)),
        manifest("baseline", 0, 27.0, "e", Some(10)),
    ];
    let rep = build_report(&ms).unwrap();
    assert!(rep.rows.is_empty());
    let s = &rep.sweep["baseline"];
    assert_eq!((s[0].k, s[0].seeds, s[0].mean_psnr), (5, 2, 25.0));
    assert_eq!((s[1].k, s[1].seeds), (10, 1));
}

fn arb_image() -> impl Strategy<Value = Image> {
    proptest::collection::vec(0u8..=255, 16 * 16 * 3).prop_map(|b| Image::from_u8(16, 16, 3, &b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(a in arb_image(), b in arb_image()) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }
}
