mod common;

use common::{
    natural_image, psnr_oracle, random_image, random_raster, rasters_equal_bitwise, ssim_oracle,
};
use fundus_enhance::degrade::{DegradationSpec, PairedSample};
use fundus_enhance::enhance::{
    enhance_image, evaluate, psnr, psnr_raster, route_for, ssim, ssim_raster, EnhanceConfig,
    MetricReport, Route, PSNR_CAP,
};
use fundus_enhance::imagedata::{ImageRecord, Raster};
use fundus_enhance::networks::{init_model, ModelBundle, NetConfig};
use fundus_enhance::quality::{ClassifierParams, QualityScore};
use fundus_enhance::Error;
use fundus_nn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_direct_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let a = random_raster(&mut rng, 32, 32);
        let b = random_raster(&mut rng, 32, 32);
        assert!((psnr_raster(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-6);
        assert!((ssim_raster(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
    }
    let n = natural_image(48).pixels;
    let mut m = n.clone();
    m.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v * 0.9 + 0.03).min(1.0));
    assert!((ssim_raster(&n, &m).unwrap() - ssim_oracle(&n, &m)).abs() < 1e-6);
}

#[test]
fn metric_closed_forms() {
    let a = random_image(1, 32);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let zero = Raster::new(32, 32);
    let half = Raster::filled(32, 32, [0.5; 3]);
    assert!((psnr_raster(&zero, &half).unwrap() - 6.0206).abs() < 1e-4);
}

#[test]
fn metrics_reject_mismatched_or_tiny_inputs() {
    assert!(matches!(
        psnr_raster(&Raster::new(8, 8), &Raster::new(8, 9)),
        Err(Error::Argument(_))
    ));
    assert!(ssim_raster(&Raster::new(10, 10), &Raster::new(10, 10)).is_err());
}

/// A classifier whose output ignores the input: `p_high = sigmoid(logit)`.
fn constant_qa(input_size: usize, logit: f64) -> ClassifierParams {
    let mut qa = ClassifierParams::init(2, input_size, 0.1, 0).unwrap();
    qa.store.insert("qa.head.w", Tensor::zeros(&[1, 4]));
    qa.store.insert("qa.head.b", Tensor::full(&[1], logit));
    qa
}

fn ready_bundle(patch: usize) -> ModelBundle {
    let mut b = init_model(
        &NetConfig {
            patch_size: patch,
            ..NetConfig::thumbnail()
        },
        5,
    )
    .unwrap();
    b.mean_target_style = Some(vec![0.1, -0.2]);
    b
}

fn config(patch: usize) -> EnhanceConfig {
    EnhanceConfig {
        patch_size: patch,
        ..Default::default()
    }
}

#[test]
fn high_target_patches_pass_through_bitwise() {
    let img = random_image(3, 512);
    let bundle = ready_bundle(128);
    let out = enhance_image(&img, &bundle, &constant_qa(128, 40.0), &config(128)).unwrap();
    assert_eq!(out.routes.len(), 16);
    assert!(out.routes.iter().all(|r| *r == Route::PassThrough));
    assert!(rasters_equal_bitwise(&out.image.pixels, &img.pixels));
}

#[test]
fn low_patches_are_lifted_and_stay_in_range() {
    let img = natural_image(32);
    let bundle = ready_bundle(16);
    let out = enhance_image(&img, &bundle, &constant_qa(16, -40.0), &config(16)).unwrap();
    assert_eq!(out.routes, vec![Route::Lifted; 4]);
    let px = &out.image.pixels;
    assert_eq!((px.height(), px.width()), (32, 32));
    assert!(px.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(!rasters_equal_bitwise(px, &img.pixels));
    let again = enhance_image(&img, &bundle, &constant_qa(16, -40.0), &config(16)).unwrap();
    assert!(rasters_equal_bitwise(&again.image.pixels, px));
}

#[test]
fn routing_follows_the_switches() {
    let patch = natural_image(16).pixels;
    let bundle = ready_bundle(16);
    let high = QualityScore::from_probability(0.9, 0.5);
    let low = QualityScore::from_probability(0.1, 0.5);
    let cfg = |align, pass| EnhanceConfig {
        style_align_all: align,
        pass_through_target: pass,
        ..config(16)
    };
    assert_eq!(
        route_for(&patch, &bundle, &low, &cfg(false, false)).unwrap(),
        Route::Lifted
    );
    // No style gate: every HIGH patch counts as target style.
    assert_eq!(
        route_for(&patch, &bundle, &high, &cfg(true, true)).unwrap(),
        Route::PassThrough
    );
    assert_eq!(
        route_for(&patch, &bundle, &high, &cfg(false, true)).unwrap(),
        Route::Unchanged
    );
    assert_eq!(
        route_for(&patch, &bundle, &high, &cfg(true, false)).unwrap(),
        Route::Aligned
    );
    assert_eq!(
        route_for(&patch, &bundle, &high, &cfg(false, false)).unwrap(),
        Route::Unchanged
    );
}

#[test]
fn missing_style_code_is_a_state_error() {
    let mut bundle = ready_bundle(16);
    bundle.mean_target_style = None;
    let r = enhance_image(
        &natural_image(32),
        &bundle,
        &constant_qa(16, 0.0),
        &config(16),
    );
    assert!(matches!(r, Err(Error::State(_))));
}

fn identity_pair(seed: u64) -> PairedSample {
    let clean = random_image(seed, 32);
    PairedSample {
        degraded: clean.clone(),
        clean,
        spec: DegradationSpec::default(),
        seed,
    }
}

#[test]
fn evaluation_of_untouched_images() {
    let pairs: Vec<PairedSample> = (0..3).map(identity_pair).collect();
    let dir = tempfile::tempdir().unwrap();
    let report = evaluate(
        &pairs,
        &ready_bundle(16),
        &constant_qa(16, 40.0),
        &config(16),
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(report.n_images, 3);
    for r in &report.rows {
        assert_eq!((r.psnr, r.psnr_input), (PSNR_CAP, PSNR_CAP));
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!((r.lifted, r.aligned), (0, 0));
    }
    assert!(dir.path().join("panel_0002.png").exists());
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().last().unwrap().starts_with("# mean"));
    assert!(evaluate(
        &[],
        &ready_bundle(16),
        &constant_qa(16, 0.0),
        &config(16),
        None
    )
    .is_err());
}

#[test]
fn report_means_are_row_averages() {
    let pairs: Vec<PairedSample> = (0..4)
        .map(|s| {
            let clean = random_image(s, 32);
            let degraded =
                ImageRecord::from_raster(Raster::filled(32, 32, [0.1 * s as f32; 3]), "flat");
            PairedSample {
                clean,
                degraded,
                spec: DegradationSpec::default(),
                seed: s,
            }
        })
        .collect();
    let r = evaluate(
        &pairs,
        &ready_bundle(16),
        &constant_qa(16, -40.0),
        &config(16),
        None,
    )
    .unwrap();
    let mean =
        |f: fn(&fundus_enhance::enhance::MetricRow) -> f64| r.rows.iter().map(f).sum::<f64>() / 4.0;
    assert!((r.mean_psnr - mean(|x| x.psnr)).abs() < 1e-12);
    assert!((r.mean_ssim_input - mean(|x| x.ssim_input)).abs() < 1e-12);
    assert!(r.rows.iter().all(|x| x.lifted == 4));
    assert_eq!(MetricReport::from_rows(r.rows.clone()).unwrap(), r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_raster(&mut rng, 16, 16);
        let b = random_raster(&mut rng, 16, 16);
        prop_assert_eq!(psnr_raster(&a, &b).unwrap(), psnr_raster(&b, &a).unwrap());
        prop_assert!((ssim_raster(&a, &b).unwrap() - ssim_raster(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim_raster(&a, &b).unwrap() <= 1.0 + 1e-12);
    }
}
