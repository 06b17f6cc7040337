//! Style domains over high-quality patches: a convolutional autoencoder
//! embeds each patch, k-means groups the embeddings, and the most populous
//! cluster becomes the target style.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fundus_nn::{Adam, AdamConfig, Conv2d, GaussianInit, Graph, Linear, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{rasters_to_tensor, PatchRecord, Raster};
use crate::paramfile::{self, field, layout_hash};

const AE_MAGIC: &str = "fundus-ae";
const AE_VERSION: u32 = 1;

/// Encoder/decoder pair for patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AeParams {
    pub store: ParamStore,
    pub patch_size: usize,
    pub width: usize,
    pub dim: usize,
}

struct AeLayers {
    enc: [Conv2d; 2],
    enc_fc: Linear,
    dec_fc: Linear,
    dec: [Conv2d; 3],
    /// Side of the pooled bottleneck grid.
    grid: usize,
    /// `patch/4 / grid`.
    pool: usize,
}

/// Largest divisor of `n` that is at most 4.
fn bottleneck_grid(n: usize) -> usize {
    (1..=4.min(n))
        .rev()
        .find(|g| n.is_multiple_of(*g))
        .unwrap_or(1)
}

impl AeParams {
    fn layers(patch_size: usize, width: usize, dim: usize) -> AeLayers {
        let w = width;
        let grid = bottleneck_grid(patch_size / 4);
        let flat = 2 * w * grid * grid;
        AeLayers {
            enc: [
                Conv2d::new("ae.enc0", 3, w, 3, 2, 1),
                Conv2d::new("ae.enc1", w, 2 * w, 3, 2, 1),
            ],
            enc_fc: Linear::new("ae.enc_fc", flat, dim),
            dec_fc: Linear::new("ae.dec_fc", dim, flat),
            dec: [
                Conv2d::new("ae.dec0", 2 * w, w, 3, 1, 1),
                Conv2d::new("ae.dec1", w, w, 3, 1, 1),
                Conv2d::new("ae.dec2", w, 3, 3, 1, 1),
            ],
            grid,
            pool: patch_size / 4 / grid,
        }
    }

    pub fn init(
        patch_size: usize,
        width: usize,
        dim: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if patch_size < 4 || !patch_size.is_multiple_of(4) || width == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "autoencoder needs patch divisible by 4 and positive width/dim (got {patch_size}, {width}, {dim})"
            )));
        }
        let l = Self::layers(patch_size, width, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = GaussianInit { std: init_std };
        let mut store = ParamStore::new();
        for c in &l.enc {
            c.init(&mut store, init, &mut rng);
        }
        l.enc_fc.init(&mut store, init, &mut rng);
        l.dec_fc.init(&mut store, init, &mut rng);
        for c in &l.dec {
            c.init(&mut store, init, &mut rng);
        }
        Ok(Self {
            store,
            patch_size,
            width,
            dim,
        })
    }

    /// `En(x)`: `[N, 3, P, P]` to `[N, D]`.
    pub fn encode(&self, g: &mut Graph, x: Var, trainable: bool) -> Var {
        let l = Self::layers(self.patch_size, self.width, self.dim);
        let p = self.store.bind(trainable);
        let mut h = x;
        for c in &l.enc {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, 0.2);
        }
        if l.pool > 1 {
            h = g.avg_pool(h, l.pool);
        }
        let n = g.value(h).shape()[0];
        let flat = g.reshape(h, &[n, 2 * self.width * l.grid * l.grid]);
        l.enc_fc.forward(g, p, flat)
    }

    /// `De(z)`: `[N, D]` to `[N, 3, P, P]` in `(0, 1)`.
    pub fn decode(&self, g: &mut Graph, z: Var, trainable: bool) -> Var {
        let l = Self::layers(self.patch_size, self.width, self.dim);
        let p = self.store.bind(trainable);
        let n = g.value(z).shape()[0];
        let h = l.dec_fc.forward(g, p, z);
        let h = g.leaky_relu(h, 0.2);
        let mut h = g.reshape(h, &[n, 2 * self.width, l.grid, l.grid]);
        if l.pool > 1 {
            h = g.upsample(h, l.pool);
        }
        h = l.dec[0].forward(g, p, h);
        h = g.leaky_relu(h, 0.2);
        h = g.upsample2x(h);
        h = l.dec[1].forward(g, p, h);
        h = g.leaky_relu(h, 0.2);
        h = g.upsample2x(h);
        h = l.dec[2].forward(g, p, h);
        g.sigmoid(h)
    }

    fn check(&self, r: &Raster) -> Result<()> {
        if r.height() != self.patch_size || r.width() != self.patch_size {
            return Err(Error::Argument(format!(
                "autoencoder expects {s}x{s} patches, got {}x{}",
                r.height(),
                r.width(),
                s = self.patch_size
            )));
        }
        Ok(())
    }

    /// Embeddings for a batch of patches, one row each.
    pub fn embed_all(&self, rasters: &[&Raster]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rasters.len());
        for chunk in rasters.chunks(64) {
            for r in chunk {
                self.check(r)?;
            }
            let mut g = Graph::new();
            let x = g.constant(rasters_to_tensor(chunk.iter().copied())?);
            let z = self.encode(&mut g, x, false);
            out.extend(g.value(z).data().chunks(self.dim).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Mean squared reconstruction error over all elements.
    pub fn reconstruction_error(&self, rasters: &[&Raster]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in rasters.chunks(64) {
            for r in chunk {
                self.check(r)?;
            }
            let mut g = Graph::new();
            let x = g.constant(rasters_to_tensor(chunk.iter().copied())?);
            let z = self.encode(&mut g, x, false);
            let y = self.decode(&mut g, z, false);
            let l = g.mean_sq_diff(y, x);
            let n = g.value(x).len();
            total += g.value(l).item() * n as f64;
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = format!(
            "patch={} width={} dim={} hash={:016x}",
            self.patch_size,
            self.width,
            self.dim,
            layout_hash(self.store.iter())
        );
        paramfile::write(
            path.as_ref(),
            AE_MAGIC,
            AE_VERSION,
            &header,
            self.store.iter(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        const WHAT: &str = "autoencoder params";
        let blob = paramfile::read(path.as_ref(), WHAT, AE_MAGIC)?;
        if blob.version != AE_VERSION {
            return Err(Error::format(
                WHAT,
                format!("unsupported version {}", blob.version),
            ));
        }
        let kv = paramfile::parse_kv(WHAT, &blob.header)?;
        let (patch_size, width, dim) = (
            field(WHAT, &kv, "patch")?,
            field(WHAT, &kv, "width")?,
            field(WHAT, &kv, "dim")?,
        );
        let expected = Self::init(patch_size, width, dim, 1.0, 0)?;
        if layout_hash(expected.store.iter()) != layout_hash(blob.tensors.iter()) {
            return Err(Error::format(
                WHAT,
                "tensors do not match the declared shape",
            ));
        }
        Ok(Self {
            store: ParamStore::from(blob.tensors),
            patch_size,
            width,
            dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub dim: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            width: 8,
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AeTrainReport {
    pub params: AeParams,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Reconstruction MSE over the whole set after training.
    pub final_error: f64,
}

/// Minimizes the mean squared reconstruction error `|De(En(x)) - x|^2`.
pub fn train_style_autoencoder(
    patches: &[&Raster],
    config: &AeTrainConfig,
) -> Result<AeTrainReport> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Data("autoencoder needs at least one patch".into()))?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = AeParams::init(
        first.height(),
        config.width,
        config.dim,
        config.init_std,
        config.seed,
    )?;
    for r in patches {
        params.check(r)?;
    }
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(rasters_to_tensor(chunk.iter().map(|&i| patches[i]))?);
            let z = params.encode(&mut g, x, true);
            let y = params.decode(&mut g, z, true);
            let loss = g.mean_sq_diff(y, x);
            total += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss);
            opt.step(&mut params.store, &grads);
        }
        epoch_loss.push(total / patches.len() as f64);
    }
    let final_error = params.reconstruction_error(patches)?;
    Ok(AeTrainReport {
        params,
        epoch_loss,
        final_error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
    pub patch_ref: String,
}

pub fn embed(patch: &PatchRecord, params: &AeParams) -> Result<StyleEmbedding> {
    let vector = params.embed_all(&[&patch.pixels])?.remove(0);
    Ok(StyleEmbedding {
        vector,
        patch_ref: patch.id(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Rounding can walk past the end; fall back to the farthest point.
            if d2[chosen] == 0.0 {
                chosen = (0..d2.len())
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                    .expect("non-empty");
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding. Stops when the total squared
/// centroid shift relative to the centroid energy drops below `tol`, or
/// after `max_iters`. Empty clusters keep their previous centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Data(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Argument(
            "embeddings must be finite and equally sized".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignments = vec![0; points.len()];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest_centroid(p, &centroids);
            inertia += sq_dist(p, &centroids[*a]);
        }
        inertia_history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        let mut energy = 0.0;
        for j in 0..k {
            energy += centroids[j].iter().map(|v| v * v).sum::<f64>();
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift += sq_dist(&new, &centroids[j]);
            centroids[j] = new;
        }
        if shift <= tol * energy.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest_centroid(p, &centroids);
        inertia += sq_dist(p, &centroids[*a]);
    }
    inertia_history.push(inertia);
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia_history,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleDomains {
    pub k: usize,
    /// Patch id to cluster id.
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub target_id: usize,
    /// Autoencoder parameter file, relative to the domains file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ae_params: Option<PathBuf>,
}

impl StyleDomains {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("domains serialize");
        paramfile::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Self = serde_json::from_str(&text)
            .map_err(|e| Error::format("style domains", e.to_string()))?;
        if d.centroids.len() != d.k
            || d.target_id >= d.k
            || d.assignments.values().any(|&c| c >= d.k)
        {
            return Err(Error::format("style domains", "cluster ids out of range"));
        }
        Ok(d)
    }
}

/// Clusters embeddings into `k` style domains and picks the target.
pub fn cluster_styles(embeddings: &[StyleEmbedding], k: usize, seed: u64) -> Result<StyleDomains> {
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let result = kmeans(&points, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
    let mut assignments = BTreeMap::new();
    for (e, &a) in embeddings.iter().zip(&result.assignments) {
        if assignments.insert(e.patch_ref.clone(), a).is_some() {
            return Err(Error::Data(format!(
                "patch `{}` embedded twice",
                e.patch_ref
            )));
        }
    }
    let mut domains = StyleDomains {
        k,
        assignments,
        centroids: result.centroids,
        target_id: 0,
        ae_params: None,
    };
    domains.target_id = select_target_domain(&domains)?;
    Ok(domains)
}

/// Cluster with the most members; ties go to the lowest id.
pub fn largest_cluster(sizes: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (id, &n) in sizes.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((id, n));
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::Data("every style cluster is empty".into()))
}

pub fn select_target_domain(domains: &StyleDomains) -> Result<usize> {
    largest_cluster(&domains.sizes())
}

/// Frozen autoencoder plus centroids, used at inference to decide whether a
/// high-quality patch already carries the target style.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleGate {
    pub ae: AeParams,
    pub centroids: Vec<Vec<f64>>,
    pub target_id: usize,
}

impl StyleGate {
    pub fn is_target(&self, patch: &Raster) -> Result<bool> {
        let z = self.ae.embed_all(&[patch])?.remove(0);
        Ok(nearest_centroid(&z, &self.centroids) == self.target_id)
    }

    pub fn to_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .ae
            .store
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect();
        let k = self.centroids.len();
        let d = self.centroids.first().map_or(0, Vec::len);
        let flat = self.centroids.concat();
        out.insert(
            format!("{prefix}centroids"),
            Tensor::from_vec(&[k, d], flat).expect("centroid shape"),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_grid_divides() {
        assert_eq!(bottleneck_grid(8), 4);
        assert_eq!(bottleneck_grid(32), 4);
        assert_eq!(bottleneck_grid(6), 3);
        assert_eq!(bottleneck_grid(2), 2);
        assert_eq!(bottleneck_grid(5), 1);
    }

    #[test]
    fn tie_break_and_argmax() {
        assert_eq!(largest_cluster(&[3, 10, 7]).unwrap(), 1);
        assert_eq!(largest_cluster(&[5, 5]).unwrap(), 0);
        assert_eq!(largest_cluster(&[0, 2, 2]).unwrap(), 1);
        assert!(largest_cluster(&[0, 0]).is_err());
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 5, 3, KMEANS_MAX_ITERS, KMEANS_TOL).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&[vec![0.0]], 2, 0, 10, 1e-6),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn autoencoder_shapes() {
        let ae = AeParams::init(16, 4, 10, 0.1, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.3));
        let z = ae.encode(&mut g, x, false);
        assert_eq!(g.value(z).shape(), &[2, 10]);
        let y = ae.decode(&mut g, z, false);
        assert_eq!(g.value(y).shape(), &[2, 3, 16, 16]);
    }
}
