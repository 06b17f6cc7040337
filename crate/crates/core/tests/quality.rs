mod common;

use common::{accuracy, blur_task, random_raster};
use fundus_enhance::imagedata::{PatchRecord, Raster};
use fundus_enhance::quality::{
    assess, partition, train_quality_classifier, ClassifierParams, QaTrainConfig, QualityLabel,
    QualityScore,
};
use fundus_enhance::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fast_config(seed: u64) -> QaTrainConfig {
    QaTrainConfig {
        width: 8,
        epochs: 60,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

fn as_patches(rasters: &[Raster]) -> Vec<PatchRecord> {
    rasters
        .iter()
        .enumerate()
        .map(|(i, r)| PatchRecord {
            pixels: r.clone(),
            grid_row: i / 4,
            grid_col: i % 4,
            parent_id: "toy".into(),
        })
        .collect()
}

#[test]
fn separates_sharp_from_blurred_and_partitions_exactly() {
    let data = blur_task(100, 1);
    let (train, held) = data.split_at(160);
    let report = train_quality_classifier(train, &fast_config(0)).unwrap();
    assert!(
        report.train_accuracy >= 0.95,
        "train accuracy {}",
        report.train_accuracy
    );
    let probs = report
        .params
        .probabilities(&held.iter().map(|(r, _)| r).collect::<Vec<_>>())
        .unwrap();
    assert!(accuracy(&probs, held) >= 0.9);

    // A sharp training exemplar scores HIGH.
    let sharp = &train[0].0;
    assert!(assess(sharp, &report.params, 0.5).unwrap().p_high > 0.5);

    // Sixteen held-out patches, four of them blurred.
    let mut cells = Vec::new();
    let mut blurred_ids = Vec::new();
    for (i, pair) in held.chunks(2).take(16).enumerate() {
        if i % 4 == 1 {
            cells.push(pair[1].0.clone());
            blurred_ids.push(i);
        } else {
            cells.push(pair[0].0.clone());
        }
    }
    let patches = as_patches(&cells);
    let part = partition(&patches, &report.params, 0.5).unwrap();
    let low: Vec<usize> = part
        .low
        .iter()
        .map(|p| p.grid_row * 4 + p.grid_col)
        .collect();
    let expected: Vec<usize> = (0..cells.len())
        .filter(|&i| assess(&cells[i], &report.params, 0.5).unwrap().label == QualityLabel::Low)
        .collect();
    assert_eq!(low, expected);
    assert_eq!(part.high.len(), 16 - low.len());
    assert!(blurred_ids.iter().all(|i| low.contains(i)), "{low:?}");
}

#[test]
fn training_is_deterministic() {
    let data = blur_task(16, 2);
    let cfg = QaTrainConfig {
        epochs: 2,
        ..fast_config(5)
    };
    let a = train_quality_classifier(&data, &cfg).unwrap();
    let b = train_quality_classifier(&data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_loss, b.epoch_loss);
}

#[test]
fn unlearnable_task_still_trains() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_raster(&mut rng, 16, 16);
    let data: Vec<_> = (0..40)
        .map(|i| {
            (
                r.clone(),
                if i % 2 == 0 {
                    QualityLabel::High
                } else {
                    QualityLabel::Low
                },
            )
        })
        .collect();
    let report = train_quality_classifier(&data, &fast_config(1)).unwrap();
    assert!((report.train_accuracy - 0.5).abs() < 1e-9);
    assert!(report.epoch_loss.iter().all(|l| l.is_finite()));
}

#[test]
fn single_class_is_a_data_error() {
    let data = vec![(Raster::new(8, 8), QualityLabel::High); 4];
    assert!(matches!(
        train_quality_classifier(&data, &fast_config(0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn threshold_edges() {
    for p in [0.0, 0.3, 0.999_999] {
        assert_eq!(
            QualityScore::from_probability(p, 1.0).label,
            QualityLabel::Low
        );
    }
    for p in [0.0, 0.5, 1.0] {
        assert_eq!(
            QualityScore::from_probability(p, 0.0).label,
            QualityLabel::High
        );
    }
}

#[test]
fn wrong_patch_size_is_rejected() {
    let params = ClassifierParams::init(4, 16, 0.1, 0).unwrap();
    assert!(matches!(
        assess(&Raster::new(8, 8), &params, 0.5),
        Err(Error::Argument(_))
    ));
    assert!(assess(&Raster::new(16, 16), &params, 1.5).is_err());
}

#[test]
fn usable_counts_as_low() {
    assert_eq!("usable".parse::<QualityLabel>().unwrap(), QualityLabel::Low);
    assert_eq!("high".parse::<QualityLabel>().unwrap(), QualityLabel::High);
    assert_eq!(QualityLabel::Low.to_string(), "low");
}

#[test]
fn params_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = ClassifierParams::init(4, 16, 0.1, 9).unwrap();
    let path = dir.path().join("qa.params");
    params.save(&path).unwrap();
    assert_eq!(ClassifierParams::load(&path).unwrap(), params);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(ClassifierParams::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_conserves_and_is_monotone(seed in any::<u64>(), n in 1usize..20, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let params = ClassifierParams::init(4, 8, 0.5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rasters: Vec<Raster> = (0..n).map(|_| random_raster(&mut rng, 8, 8)).collect();
        let patches = as_patches(&rasters);
        let (lo_t, hi_t) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = partition(&patches, &params, lo_t).unwrap();
        let b = partition(&patches, &params, hi_t).unwrap();
        prop_assert_eq!(a.low.len() + a.high.len(), n);
        prop_assert_eq!(b.low.len() + b.high.len(), n);
        for (sa, sb) in a.scores.iter().zip(&b.scores) {
            prop_assert!(!(sa.label == QualityLabel::Low && sb.label == QualityLabel::High));
        }
        let mut ids: Vec<String> = a.low.iter().chain(&a.high).map(|p| p.id()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}
