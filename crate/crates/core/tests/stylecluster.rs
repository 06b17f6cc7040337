mod common;

use fundus_enhance::imagedata::{PatchRecord, Raster};
use fundus_enhance::stylecluster::{
    cluster_styles, embed, kmeans, largest_cluster, nearest_centroid, train_style_autoencoder,
    AeParams, AeTrainConfig, StyleDomains, StyleEmbedding, KMEANS_MAX_ITERS, KMEANS_TOL,
};
use fundus_enhance::synth::{synth_corpus, SynthConfig};
use fundus_nn::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two well separated blobs: ten points around the origin, five around (10, 10).
fn blobs() -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for i in 0..15 {
        let (c, blob) = if i < 10 { (0.0, 0) } else { (10.0, 1) };
        pts.push(vec![
            c + rng.random_range(-0.5..0.5),
            c + rng.random_range(-0.5..0.5),
        ]);
        truth.push(blob);
    }
    (pts, truth)
}

fn embeddings(points: &[Vec<f64>]) -> Vec<StyleEmbedding> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| StyleEmbedding {
            vector: p.clone(),
            patch_ref: format!("pt#{i},0"),
        })
        .collect()
}

#[test]
fn blobs_cluster_exactly() {
    let (pts, truth) = blobs();
    let r = kmeans(&pts, 2, 3, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
    for (p, &a) in pts.iter().zip(&r.assignments) {
        // Brute-force nearest centroid.
        let d: Vec<f64> = r
            .centroids
            .iter()
            .map(|c| c.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let best = if d[0] <= d[1] { 0 } else { 1 };
        assert_eq!(a, best);
    }
    // Same partition as the blob membership, up to relabeling.
    let map = r.assignments[0];
    for (&a, &t) in r.assignments.iter().zip(&truth) {
        assert_eq!(a == map, t == 0);
    }
    for w in r.inertia_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    let domains = cluster_styles(&embeddings(&pts), 2, 3).unwrap();
    assert_eq!(domains.target_id, domains.assignments["pt#0,0"]);
    let mut sizes = domains.sizes();
    sizes.sort();
    assert_eq!(sizes, vec![5, 10]);
}

#[test]
fn k_equal_to_n_gives_singletons() {
    let (pts, _) = blobs();
    let r = kmeans(&pts, pts.len(), 1, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
    assert_eq!(r.inertia(), 0.0);
    let mut a = r.assignments.clone();
    a.sort();
    a.dedup();
    assert_eq!(a.len(), pts.len());
}

#[test]
fn clustering_is_reproducible() {
    let (pts, _) = blobs();
    let a = cluster_styles(&embeddings(&pts), 3, 17).unwrap();
    let b = cluster_styles(&embeddings(&pts), 3, 17).unwrap();
    assert_eq!(a, b);
}

#[test]
fn target_selection_examples() {
    assert_eq!(largest_cluster(&[3, 10, 7]).unwrap(), 1);
    assert_eq!(largest_cluster(&[5, 5]).unwrap(), 0);
    assert!(largest_cluster(&[0, 0]).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let (pts, _) = blobs();
    assert!(kmeans(&pts, 0, 0, 10, 1e-6).is_err());
    assert!(kmeans(&pts[..2], 3, 0, 10, 1e-6).is_err());
    let dup = embeddings(&[vec![0.0], vec![1.0]]);
    let dup = vec![dup[0].clone(), dup[0].clone()];
    assert!(cluster_styles(&dup, 1, 0).is_err());
}

#[test]
fn domains_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (pts, _) = blobs();
    let d = cluster_styles(&embeddings(&pts), 2, 0).unwrap();
    let path = dir.path().join("domains.json");
    d.save(&path).unwrap();
    assert_eq!(StyleDomains::load(&path).unwrap(), d);
}

#[test]
fn untrained_autoencoder_preserves_shape() {
    let ae = AeParams::init(16, 4, 8, 0.1, 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(fundus_nn::Tensor::full(&[2, 3, 16, 16], 0.5));
    let z = ae.encode(&mut g, x, false);
    assert_eq!(g.value(z).shape(), &[2, 8]);
    let y = ae.decode(&mut g, z, false);
    assert_eq!(g.value(y).shape(), &[2, 3, 16, 16]);
}

#[test]
fn constant_patches_are_reconstructed() {
    let patch = Raster::filled(16, 16, [0.6, 0.3, 0.2]);
    let set: Vec<&Raster> = vec![&patch; 64];
    let cfg = AeTrainConfig {
        dim: 8,
        width: 4,
        epochs: 120,
        batch_size: 16,
        seed: 2,
        ..Default::default()
    };
    let a = train_style_autoencoder(&set, &cfg).unwrap();
    assert!(a.final_error < 1e-4, "reconstruction mse {}", a.final_error);
    let b = train_style_autoencoder(&set, &cfg).unwrap();
    assert_eq!(a.epoch_loss, b.epoch_loss);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn embeddings_separate_illumination_styles() {
    // Bright warm patches versus the same patches dimmed under a blue cast.
    let corpus = synth_corpus(&SynthConfig::default(), 6, 4);
    let mut warm = Vec::new();
    let mut cool = Vec::new();
    for img in &corpus {
        for (y, x) in [(32, 32), (32, 64), (64, 32), (64, 64)] {
            let p = img.record.pixels.crop(y, x, 16, 16);
            let dim = Raster::from_fn(16, 16, |yy, xx| {
                let v = p.get(yy, xx);
                [v[0] * 0.45, v[1] * 0.7, (v[2] * 1.6 + 0.15).min(1.0)]
            });
            warm.push(p);
            cool.push(dim);
        }
    }
    let all: Vec<&Raster> = warm.iter().chain(&cool).collect();
    let cfg = AeTrainConfig {
        dim: 16,
        width: 4,
        epochs: 15,
        batch_size: 8,
        seed: 1,
        ..Default::default()
    };
    let ae = train_style_autoencoder(&all, &cfg).unwrap().params;
    let to_patch = |r: &Raster, i: usize| PatchRecord {
        pixels: r.clone(),
        grid_row: i,
        grid_col: 0,
        parent_id: "s".into(),
    };
    let ew: Vec<Vec<f64>> = warm
        .iter()
        .enumerate()
        .map(|(i, r)| embed(&to_patch(r, i), &ae).unwrap().vector)
        .collect();
    let ec: Vec<Vec<f64>> = cool
        .iter()
        .enumerate()
        .map(|(i, r)| embed(&to_patch(r, i), &ae).unwrap().vector)
        .collect();
    assert_eq!(ew[0].len(), 16);
    assert_eq!(embed(&to_patch(&warm[0], 0), &ae).unwrap().vector, ew[0]);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for i in 0..ew.len() {
        for j in 0..ew.len() {
            if i != j {
                same.push(cosine(&ew[i], &ew[j]));
                same.push(cosine(&ec[i], &ec[j]));
            }
            cross.push(cosine(&ew[i], &ec[j]));
        }
    }
    let (s, c) = (mean(same), mean(cross));
    assert!(c < s, "cross-style cosine {c} vs same-style {s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inertia_never_increases(seed in any::<u64>(), n in 3usize..40, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random::<f64>()]).collect();
        let r = kmeans(&pts, k.min(n), seed, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        for (p, &a) in pts.iter().zip(&r.assignments) {
            prop_assert_eq!(a, nearest_centroid(p, &r.centroids));
        }
    }

    #[test]
    fn target_is_invariant_to_relabeling(sizes in prop::collection::vec(0usize..20, 1..8), rot in 0usize..8) {
        prop_assume!(sizes.iter().any(|&s| s > 0));
        let t = largest_cluster(&sizes).unwrap();
        let n = sizes.len();
        let r = rot % n;
        let rotated: Vec<usize> = (0..n).map(|i| sizes[(i + r) % n]).collect();
        let t2 = largest_cluster(&rotated).unwrap();
        prop_assert_eq!(rotated[t2], sizes[t]);
        let max = *sizes.iter().max().unwrap();
        if sizes.iter().filter(|&&s| s == max).count() == 1 {
            prop_assert_eq!((t2 + r) % n, t);
        }
    }
}
