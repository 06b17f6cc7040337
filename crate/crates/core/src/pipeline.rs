//! End-to-end orchestration on a synthetic corpus: render, degrade, train
//! the quality classifier, partition, cluster styles, train the translation
//! networks and evaluate on held-out degraded/clean pairs.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{
    degrade, ArtifactSpec, DegradationSpec, IlluminationSpec, PairedSample, Stage,
};
use crate::enhance::{evaluate, psnr_raster, EnhanceConfig, MetricReport};
use crate::error::{Error, Result};
use crate::imagedata::{patchify, PatchRecord, Raster};
use crate::losses::LossReport;
use crate::networks::NetConfig;
use crate::quality::{
    partition, train_quality_classifier, ClassifierParams, QaTrainConfig, QualityLabel,
};
use crate::stylecluster::{
    cluster_styles, embed, train_style_autoencoder, AeTrainConfig, StyleDomains, StyleGate,
};
use crate::synth::{synth_corpus, SynthConfig};
use crate::trainer::{
    compute_target_style_code, train, Domains, TrainConfig, TrainOutput, TrainerState,
};

#[derive(Clone, Debug)]
pub struct E2eConfig {
    pub synth: SynthConfig,
    pub n_images: usize,
    pub n_test: usize,
    /// Fraction of training images that are degraded.
    pub degraded_fraction: f64,
    pub degradation: DegradationSpec,
    /// A degraded patch is labeled LOW for classifier training only when its
    /// PSNR against the clean patch is below this many dB.
    pub damage_db: f64,
    pub k: usize,
    pub qa: QaTrainConfig,
    pub ae: AeTrainConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

/// Degradation used by the desk-scale experiment: strong uneven
/// illumination with mild blur and a few faint blobs.
pub fn desk_degradation() -> DegradationSpec {
    DegradationSpec {
        illumination: IlluminationSpec {
            gradient_strength: 0.6,
            center: None,
            radial_falloff: 0.45,
        },
        blur_sigma: 0.7,
        artifacts: ArtifactSpec {
            count: 2,
            radius_range: (4.0, 10.0),
            intensity_range: (0.05, 0.15),
        },
        enabled: [Stage::Illum, Stage::Blur, Stage::Artifact]
            .into_iter()
            .collect(),
    }
}

/// Small networks sized for CPU runs on 32x32 patches.
pub fn desk_net(patch_size: usize) -> NetConfig {
    NetConfig {
        patch_size,
        content_channels: 32,
        quality_dim: 8,
        style_dim: 8,
        residual_blocks: 2,
        base_width: 8,
        init_std: 0.1,
        content_norm: false,
    }
}

impl E2eConfig {
    /// The desk-scale configuration: 200 images of 128 px, 32 px patches, K = 3.
    pub fn desk(seed: u64) -> Self {
        let patch = 32;
        Self {
            synth: SynthConfig::default(),
            n_images: 200,
            n_test: 20,
            degraded_fraction: 0.5,
            degradation: desk_degradation(),
            damage_db: 30.0,
            k: 3,
            qa: QaTrainConfig {
                seed,
                ..Default::default()
            },
            ae: AeTrainConfig {
                seed,
                epochs: 4,
                ..Default::default()
            },
            net: desk_net(patch),
            train: TrainConfig {
                lr: 5e-4,
                batch_size: 8,
                max_iters: 3000,
                seed,
                checkpoint_every: 0,
                patch_size: patch,
                ..Default::default()
            },
            enhance: EnhanceConfig {
                patch_size: patch,
                style_align_all: false,
                ..Default::default()
            },
            seed,
            out_dir: None,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.net.patch_size
    }

    /// Applies a patch size to every stage that depends on it.
    pub fn set_patch_size(&mut self, p: usize) {
        self.net.patch_size = p;
        self.train.patch_size = p;
        self.enhance.patch_size = p;
    }
}

pub struct E2eResult {
    pub report: MetricReport,
    pub state: TrainerState,
    pub qa: ClassifierParams,
    pub qa_train_accuracy: f64,
    pub domains: StyleDomains,
    pub domain_sizes: (usize, usize, usize),
    pub train_log: Vec<LossReport>,
}

fn is_background(r: &Raster) -> bool {
    r.mean() < 0.02
}

/// Runs the full pipeline.
pub fn run_e2e(cfg: &E2eConfig) -> Result<E2eResult> {
    let p = cfg.patch_size();
    if cfg.n_test == 0 || cfg.n_test >= cfg.n_images {
        return Err(Error::Config(
            "n_test must be between 1 and n_images - 1".into(),
        ));
    }
    cfg.degradation.validate()?;
    let t0 = Instant::now();
    let corpus = synth_corpus(&cfg.synth, cfg.n_images, cfg.seed);
    let (train_imgs, test_imgs) = corpus.split_at(cfg.n_images - cfg.n_test);

    // Unpaired training pool: each image enters either clean or degraded.
    let mut order: Vec<usize> = (0..train_imgs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let n_deg = (cfg.degraded_fraction * train_imgs.len() as f64).round() as usize;
    let mut degraded_flag = vec![false; train_imgs.len()];
    for &i in &order[..n_deg] {
        degraded_flag[i] = true;
    }
    let mut pool: Vec<PatchRecord> = Vec::new();
    let mut labeled: Vec<(Raster, QualityLabel)> = Vec::new();
    for (i, img) in train_imgs.iter().enumerate() {
        let clean_grid = patchify(&img.record, p)?;
        if degraded_flag[i] {
            let pair = degrade(
                &img.record,
                &cfg.degradation,
                cfg.seed.wrapping_add(i as u64),
            )?;
            let grid = patchify(&pair.degraded, p)?;
            for (dp, cp) in grid.patches.iter().zip(&clean_grid.patches) {
                if psnr_raster(&cp.pixels, &dp.pixels)? < cfg.damage_db {
                    labeled.push((dp.pixels.clone(), QualityLabel::Low));
                }
            }
            pool.extend(grid.patches);
        } else {
            for cp in &clean_grid.patches {
                labeled.push((cp.pixels.clone(), QualityLabel::High));
            }
            pool.extend(clean_grid.patches);
        }
    }
    info!(
        "pool: {} patches, {} labeled for QA ({:.1}s)",
        pool.len(),
        labeled.len(),
        t0.elapsed().as_secs_f64()
    );

    let qa_report = train_quality_classifier(&labeled, &cfg.qa)?;
    info!(
        "QA train accuracy {:.3} ({:.1}s)",
        qa_report.train_accuracy,
        t0.elapsed().as_secs_f64()
    );
    let qa = qa_report.params;
    let part = partition(&pool, &qa, cfg.enhance.quality_threshold)?;

    // Background tiles carry no style; cluster only the fundus patches.
    let styled: Vec<&PatchRecord> = part
        .high
        .iter()
        .filter(|r| !is_background(&r.pixels))
        .collect();
    let ae = train_style_autoencoder(
        &styled.iter().map(|r| &r.pixels).collect::<Vec<_>>(),
        &cfg.ae,
    )?;
    let mut embeddings = Vec::with_capacity(styled.len());
    for r in &styled {
        embeddings.push(embed(r, &ae.params)?);
    }
    let domains = cluster_styles(&embeddings, cfg.k, cfg.seed)?;
    let mut train_domains = Domains {
        low: part.low.iter().map(|r| r.pixels.clone()).collect(),
        ..Default::default()
    };
    for r in &part.high {
        let in_target = domains.assignments.get(&r.id()) == Some(&domains.target_id);
        if in_target {
            train_domains.high_target.push(r.pixels.clone());
        } else {
            train_domains.high_source.push(r.pixels.clone());
        }
    }
    let sizes = (
        train_domains.low.len(),
        train_domains.high_source.len(),
        train_domains.high_target.len(),
    );
    info!(
        "domains L/S/T = {:?}, cluster sizes {:?} ({:.1}s)",
        sizes,
        domains.sizes(),
        t0.elapsed().as_secs_f64()
    );

    let output = TrainOutput {
        dir: cfg.out_dir.clone(),
    };
    let mut state = train(&train_domains, &cfg.net, &cfg.train, &output)?;
    info!("training done ({:.1}s)", t0.elapsed().as_secs_f64());
    let train_log = match &cfg.out_dir {
        Some(dir) => read_loss_log(&dir.join(crate::trainer::LOSS_LOG))?,
        None => Vec::new(),
    };
    let target: Vec<&Raster> = train_domains.high_target.iter().collect();
    compute_target_style_code(&mut state.bundle, &target)?;
    state.bundle.style_gate = Some(StyleGate {
        ae: ae.params,
        centroids: domains.centroids.clone(),
        target_id: domains.target_id,
    });
    if let Some(dir) = &cfg.out_dir {
        crate::trainer::save_checkpoint(&state, &dir.join("final.ckpt"))?;
        qa.save(dir.join("qa.params"))?;
    }

    let pairs: Vec<PairedSample> = test_imgs
        .iter()
        .enumerate()
        .map(|(i, img)| {
            degrade(
                &img.record,
                &cfg.degradation,
                cfg.seed.wrapping_add(1_000_000 + i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let panels = cfg.out_dir.as_ref().map(|d| d.join("panels"));
    let report = evaluate(&pairs, &state.bundle, &qa, &cfg.enhance, panels.as_deref())?;
    info!(
        "eval: PSNR {:.3} -> {:.3}, SSIM {:.4} -> {:.4} ({:.1}s)",
        report.mean_psnr_input,
        report.mean_psnr,
        report.mean_ssim_input,
        report.mean_ssim,
        t0.elapsed().as_secs_f64()
    );
    Ok(E2eResult {
        report,
        state,
        qa,
        qa_train_accuracy: qa_report.train_accuracy,
        domains,
        domain_sizes: sizes,
        train_log,
    })
}

/// Parses a loss log written by the trainer (header line skipped).
pub fn read_loss_log(path: &std::path::Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line
            .split('\t')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("loss log", format!("bad record `{line}`")))?;
        if f.len() != 10 {
            return Err(Error::format(
                "loss log",
                format!("expected 10 fields in `{line}`"),
            ));
        }
        out.push(LossReport {
            l_q: f[1],
            l_t: f[2],
            l_c: f[3],
            l_s: f[4],
            l_adv_feat: f[5],
            l_adv_img: f[6],
            total: f[7],
            d_feat: f[8],
            d_img: f[9],
            ..Default::default()
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    Clusters,
    PatchSize,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::Clusters => "k",
            Knob::PatchSize => "patch_size",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub psnr_input: f64,
    pub ssim_input: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Runs the pipeline once per knob value.
pub fn sweep(base: &E2eConfig, knob: Knob, values: &[usize]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match knob {
            Knob::Clusters => cfg.k = v,
            Knob::PatchSize => cfg.set_patch_size(v),
        }
        if let Some(dir) = &base.out_dir {
            cfg.out_dir = Some(dir.join(format!("{}_{v}", knob.name())));
        }
        info!("sweep {} = {v}", knob.name());
        let r = run_e2e(&cfg)?.report;
        rows.push(SweepRow {
            value: v,
            psnr_input: r.mean_psnr_input,
            ssim_input: r.mean_ssim_input,
            psnr: r.mean_psnr,
            ssim: r.mean_ssim,
        });
    }
    Ok(rows)
}

pub fn sweep_table(knob: Knob, rows: &[SweepRow]) -> String {
    let mut s = format!("{}\tpsnr_input\tssim_input\tpsnr\tssim\n", knob.name());
    for r in rows {
        writeln!(
            s,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.value, r.psnr_input, r.ssim_input, r.psnr, r.ssim
        )
        .expect("string write");
    }
    s
}
