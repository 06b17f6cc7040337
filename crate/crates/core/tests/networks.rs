mod common;

use fundus_enhance::imagedata::rasters_to_tensor;
use fundus_enhance::losses::{feature_d_var, image_d_var};
use fundus_enhance::networks::{
    init_model, CodeKind, EncoderRole, GeneratorId, ImageDomain, NetConfig,
};
use fundus_enhance::synth::{synth_corpus, SynthConfig};
use fundus_enhance::Error;
use fundus_nn::optim::{Adam, AdamConfig};
use fundus_nn::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(seed: u64, n: usize, p: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * p * p).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(&[n, 3, p, p], data).unwrap()
}

#[test]
fn init_statistics() {
    let cfg = NetConfig {
        patch_size: 32,
        content_channels: 64,
        ..NetConfig::default()
    };
    let b = init_model(&cfg, 7).unwrap();
    let mut checked = 0;
    for (name, t) in b.gen.iter().chain(b.disc.iter()) {
        if name.ends_with(".b") {
            assert!(
                t.data().iter().all(|&v| v == 0.0),
                "{name} has a nonzero bias"
            );
        } else if t.len() >= 10_000 {
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let std = (t
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n)
                .sqrt();
            assert!((0.018..=0.022).contains(&std), "{name}: std {std}");
            checked += 1;
        }
    }
    assert!(checked > 0);
    assert_eq!(init_model(&cfg, 7).unwrap(), b);
    assert_ne!(init_model(&cfg, 8).unwrap().gen, b.gen);
}

#[test]
fn default_shapes() {
    let cfg = NetConfig::default();
    let b = init_model(&cfg, 0).unwrap();
    let x = random_batch(1, 1, 128);
    let z = b.encode(EncoderRole::ContentL, &x).unwrap();
    assert_eq!(z.shape(), &[1, 256, 32, 32]);
    let q = b.encode(EncoderRole::Quality, &x).unwrap();
    assert_eq!(q.shape(), &[1, cfg.quality_dim]);
    let up = b.generate(GeneratorId::HighSource, &z, None).unwrap();
    assert_eq!(up.shape(), x.shape());
    let down = b
        .generate(GeneratorId::Low, &z, Some((CodeKind::Quality, &q)))
        .unwrap();
    assert_eq!(down.shape(), x.shape());
}

#[test]
fn code_contracts_are_enforced() {
    let b = init_model(&NetConfig::thumbnail(), 0).unwrap();
    let x = random_batch(2, 2, 8);
    let z = b.encode(EncoderRole::ContentS, &x).unwrap();
    let s = b.encode(EncoderRole::Style, &x).unwrap();
    let q = b.encode(EncoderRole::Quality, &x).unwrap();
    assert!(matches!(
        b.generate(GeneratorId::HighSource, &z, Some((CodeKind::Style, &s))),
        Err(Error::Argument(_))
    ));
    assert!(b.generate(GeneratorId::Low, &z, None).is_err());
    assert!(b
        .generate(GeneratorId::Low, &z, Some((CodeKind::Style, &s)))
        .is_err());
    assert!(b
        .generate(GeneratorId::HighTarget, &z, Some((CodeKind::Quality, &q)))
        .is_err());
    assert!(b
        .encode(EncoderRole::ContentL, &random_batch(0, 1, 16))
        .is_err());
}

#[test]
fn content_discriminator_outputs_distributions() {
    let b = init_model(&NetConfig::thumbnail(), 4).unwrap();
    let z = b
        .encode(EncoderRole::ContentT, &random_batch(3, 5, 8))
        .unwrap();
    let p = b.discriminate_content(&z).unwrap();
    assert_eq!(p.shape(), &[5, 3]);
    for row in p.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(b.discriminate_content(&z).unwrap(), p);
}

#[test]
fn content_discriminator_learns_separable_roles() {
    let cfg = NetConfig::thumbnail();
    let mut b = init_model(&cfg, 5).unwrap();
    let side = cfg.content_side();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Each role's maps cluster around a different constant level.
    let mut maps = |role: usize, n: usize| {
        let data = (0..n * cfg.content_channels * side * side)
            .map(|_| role as f64 - 1.0 + rng.random_range(-0.2..0.2))
            .collect();
        Tensor::from_vec(&[n, cfg.content_channels, side, side], data).unwrap()
    };
    let train: Vec<Tensor> = (0..3).map(|r| maps(r, 16)).collect();
    let test: Vec<Tensor> = (0..3).map(|r| maps(r, 16)).collect();
    let mut opt = Adam::new(AdamConfig {
        lr: 1e-2,
        ..Default::default()
    });
    for _ in 0..150 {
        let mut g = Graph::new();
        let p = b.disc.bind(true);
        let logits = [0, 1, 2].map(|r| {
            let z = g.constant(train[r].clone());
            b.content_logits_var(&mut g, p, z)
        });
        let loss = feature_d_var(&mut g, logits);
        let grads = g.backward(loss);
        opt.step(&mut b.disc, &grads);
    }
    let mut correct = 0;
    for (role, t) in test.iter().enumerate() {
        let p = b.discriminate_content(t).unwrap();
        for row in p.data().chunks(3) {
            let arg = (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            correct += usize::from(arg == role);
        }
    }
    let acc = correct as f64 / 48.0;
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn image_discriminator_separates_real_from_frozen_fakes() {
    let cfg = NetConfig {
        patch_size: 16,
        ..NetConfig::thumbnail()
    };
    let mut b = init_model(&cfg, 8).unwrap();
    let corpus = synth_corpus(
        &SynthConfig {
            size: 64,
            ..Default::default()
        },
        8,
        1,
    );
    let crops: Vec<_> = corpus
        .iter()
        .map(|c| c.record.pixels.crop(20, 20, 16, 16))
        .collect();
    let real = rasters_to_tensor(&crops).unwrap();
    let z = b.encode(EncoderRole::ContentL, &real).unwrap();
    let fake = b.generate(GeneratorId::HighSource, &z, None).unwrap();
    let before = b.gen.clone();
    let mut opt = Adam::new(AdamConfig {
        lr: 5e-3,
        ..Default::default()
    });
    for _ in 0..100 {
        let mut g = Graph::new();
        let p = b.disc.bind(true);
        let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
        let rl = b.image_logits_var(&mut g, p, ImageDomain::High, r);
        let fl = b.image_logits_var(&mut g, p, ImageDomain::High, f);
        let loss = image_d_var(&mut g, rl, fl);
        let grads = g.backward(loss);
        opt.step(&mut b.disc, &grads);
    }
    assert_eq!(b.gen, before);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let sr = b.discriminate_image(ImageDomain::High, &real).unwrap();
    let sf = b.discriminate_image(ImageDomain::High, &fake).unwrap();
    assert!(sr.iter().chain(&sf).all(|&s| s > 0.0 && s < 1.0));
    assert_eq!(b.discriminate_image(ImageDomain::High, &real).unwrap(), sr);
    let gap = mean(sr) - mean(sf);
    assert!(gap >= 0.5, "real-fake gap {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_translation_closes_over_patch_shape(seed in any::<u64>(), n in 1usize..4, double in any::<bool>()) {
        let cfg = NetConfig {
            patch_size: if double { 16 } else { 8 },
            ..NetConfig::thumbnail()
        };
        let b = init_model(&cfg, seed).unwrap();
        let x = random_batch(seed, n, cfg.patch_size);
        let q = b.encode(EncoderRole::Quality, &x).unwrap();
        let s = b.encode(EncoderRole::Style, &x).unwrap();
        let mut content_shape: Option<Vec<usize>> = None;
        for role in [EncoderRole::ContentL, EncoderRole::ContentS, EncoderRole::ContentT] {
            let z = b.encode(role, &x).unwrap();
            if let Some(shape) = &content_shape {
                prop_assert_eq!(z.shape(), &shape[..]);
            }
            content_shape = Some(z.shape().to_vec());
            for (id, code) in [
                (GeneratorId::Low, Some((CodeKind::Quality, &q))),
                (GeneratorId::HighSource, None),
                (GeneratorId::HighTarget, Some((CodeKind::Style, &s))),
            ] {
                let y = b.generate(id, &z, code).unwrap();
                prop_assert_eq!(y.shape(), x.shape());
                prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
