//! Patch-level binary quality assessment.
//!
//! A four-block CNN with a global-pool linear head produces one logit per
//! patch; `p_high = sigmoid(logit)` is thresholded into LOW/HIGH.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fundus_nn::{
    sigmoid, Adam, AdamConfig, Conv2d, GaussianInit, Graph, Linear, ParamStore, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagedata::{rasters_to_tensor, PatchRecord, Raster};
use crate::paramfile::{self, field, layout_hash};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QualityLabel {
    Low,
    High,
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityLabel::Low => "low",
            QualityLabel::High => "high",
        })
    }
}

impl FromStr for QualityLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(QualityLabel::Low),
            "high" => Ok(QualityLabel::High),
            // Usable-but-imperfect images count as low quality.
            "usable" => Ok(QualityLabel::Low),
            other => Err(Error::format(
                "quality label",
                format!("unknown label `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityScore {
    pub p_high: f64,
    pub label: QualityLabel,
    pub threshold_used: f64,
}

impl QualityScore {
    pub fn from_probability(p_high: f64, threshold: f64) -> Self {
        let label = if p_high >= threshold {
            QualityLabel::High
        } else {
            QualityLabel::Low
        };
        Self {
            p_high,
            label,
            threshold_used: threshold,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QualityPartition {
    pub low: Vec<PatchRecord>,
    pub high: Vec<PatchRecord>,
    /// One score per input patch, in input order.
    pub scores: Vec<QualityScore>,
}

pub const QA_FORMAT_VERSION: u32 = 1;
const QA_MAGIC: &str = "fundus-qa";
const ARCH: &str = "qa-cnn4";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub store: ParamStore,
    pub width: usize,
    pub input_size: usize,
    pub version: u32,
}

struct Layers {
    convs: [Conv2d; 4],
    head: Linear,
}

fn layers(width: usize) -> Layers {
    let w = width;
    Layers {
        convs: [
            Conv2d::new("qa.conv0", 3, w, 3, 1, 1),
            Conv2d::new("qa.conv1", w, w, 3, 2, 1),
            Conv2d::new("qa.conv2", w, 2 * w, 3, 2, 1),
            Conv2d::new("qa.conv3", 2 * w, 2 * w, 3, 2, 1),
        ],
        head: Linear::new("qa.head", 2 * w, 1),
    }
}

impl ClassifierParams {
    pub fn init(width: usize, input_size: usize, init_std: f64, seed: u64) -> Result<Self> {
        if width == 0 || input_size < 8 {
            return Err(Error::Config(format!(
                "classifier needs width >= 1 and input >= 8, got {width} and {input_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = GaussianInit { std: init_std };
        let mut store = ParamStore::new();
        let l = layers(width);
        for c in &l.convs {
            c.init(&mut store, init, &mut rng);
        }
        l.head.init(&mut store, init, &mut rng);
        Ok(Self {
            store,
            width,
            input_size,
            version: QA_FORMAT_VERSION,
        })
    }

    /// Logits `[N, 1]` for an `[N, 3, S, S]` batch.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Var {
        let p = self.store.bind(trainable);
        let l = layers(self.width);
        let mut h = x;
        for c in &l.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.global_avg_pool(h);
        l.head.forward(g, p, pooled)
    }

    fn check_patch(&self, r: &Raster) -> Result<()> {
        if r.height() != self.input_size || r.width() != self.input_size {
            return Err(Error::Argument(format!(
                "classifier expects {s}x{s} patches, got {}x{}",
                r.height(),
                r.width(),
                s = self.input_size
            )));
        }
        Ok(())
    }

    /// `p_high` for each raster.
    pub fn probabilities(&self, rasters: &[&Raster]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rasters.len());
        for chunk in rasters.chunks(64) {
            for r in chunk {
                self.check_patch(r)?;
            }
            let mut g = Graph::new();
            let x = g.constant(rasters_to_tensor(chunk.iter().copied())?);
            let logits = self.forward(&mut g, x, false);
            out.extend(g.value(logits).data().iter().map(|&z| sigmoid(z)));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = format!(
            "arch={ARCH} width={} input_size={} hash={:016x}",
            self.width,
            self.input_size,
            layout_hash(self.store.iter())
        );
        paramfile::write(
            path.as_ref(),
            QA_MAGIC,
            self.version,
            &header,
            self.store.iter(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        const WHAT: &str = "classifier params";
        let blob = paramfile::read(path.as_ref(), WHAT, QA_MAGIC)?;
        if blob.version != QA_FORMAT_VERSION {
            return Err(Error::format(
                WHAT,
                format!("unsupported version {}", blob.version),
            ));
        }
        let kv = paramfile::parse_kv(WHAT, &blob.header)?;
        if field::<String>(WHAT, &kv, "arch")? != ARCH {
            return Err(Error::format(WHAT, "unknown architecture"));
        }
        let width: usize = field(WHAT, &kv, "width")?;
        let input_size: usize = field(WHAT, &kv, "input_size")?;
        let hash = layout_hash(blob.tensors.iter());
        if format!("{hash:016x}") != field::<String>(WHAT, &kv, "hash")? {
            return Err(Error::format(
                WHAT,
                "tensor layout does not match header hash",
            ));
        }
        let expected = Self::init(width, input_size, 1.0, 0)?;
        if layout_hash(expected.store.iter()) != hash {
            return Err(Error::format(
                WHAT,
                "tensors do not match the declared width",
            ));
        }
        Ok(Self {
            store: ParamStore::from(blob.tensors),
            width,
            input_size,
            version: blob.version,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaTrainConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        Self {
            width: 12,
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaTrainReport {
    pub params: ClassifierParams,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

pub fn train_quality_classifier(
    labeled: &[(Raster, QualityLabel)],
    config: &QaTrainConfig,
) -> Result<QaTrainReport> {
    let first = labeled
        .first()
        .ok_or_else(|| Error::Data("no labeled patches".into()))?;
    let n_high = labeled
        .iter()
        .filter(|(_, l)| *l == QualityLabel::High)
        .count();
    if n_high == 0 || n_high == labeled.len() {
        return Err(Error::Data(
            "quality training needs patches of both classes".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let size = first.0.height();
    let mut params = ClassifierParams::init(config.width, size, config.init_std, config.seed)?;
    for (r, _) in labeled {
        params.check_patch(r)?;
    }
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = rasters_to_tensor(chunk.iter().map(|&i| &labeled[i].0))?;
            let targets: Vec<f64> = chunk
                .iter()
                .map(|&i| {
                    if labeled[i].1 == QualityLabel::High {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = params.forward(&mut g, xv, true);
            let n = targets.len();
            let loss = g.bce_clamped_with(logits, Tensor::from_vec(&[n, 1], targets)?);
            total += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss);
            opt.step(&mut params.store, &grads);
        }
        epoch_loss.push(total / labeled.len() as f64);
    }
    let probs = params.probabilities(&labeled.iter().map(|(r, _)| r).collect::<Vec<_>>())?;
    let correct = probs
        .iter()
        .zip(labeled)
        .filter(|(p, (_, l))| QualityScore::from_probability(**p, 0.5).label == *l)
        .count();
    Ok(QaTrainReport {
        params,
        epoch_loss,
        train_accuracy: correct as f64 / labeled.len() as f64,
    })
}

pub fn assess(patch: &Raster, params: &ClassifierParams, threshold: f64) -> Result<QualityScore> {
    check_threshold(threshold)?;
    let p = params.probabilities(&[patch])?[0];
    Ok(QualityScore::from_probability(p, threshold))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn partition(
    patches: &[PatchRecord],
    params: &ClassifierParams,
    threshold: f64,
) -> Result<QualityPartition> {
    if patches.is_empty() {
        return Err(Error::Data("cannot partition zero patches".into()));
    }
    check_threshold(threshold)?;
    let size = patches[0].pixels.height();
    if patches
        .iter()
        .any(|p| p.pixels.height() != size || p.pixels.width() != size)
    {
        return Err(Error::Argument("patches differ in size".into()));
    }
    let probs = params.probabilities(&patches.iter().map(|p| &p.pixels).collect::<Vec<_>>())?;
    let mut out = QualityPartition {
        low: Vec::new(),
        high: Vec::new(),
        scores: Vec::with_capacity(patches.len()),
    };
    for (patch, p) in patches.iter().zip(probs) {
        let s = QualityScore::from_probability(p, threshold);
        match s.label {
            QualityLabel::Low => out.low.push(patch.clone()),
            QualityLabel::High => out.high.push(patch.clone()),
        }
        out.scores.push(s);
    }
    Ok(out)
}
