//! Inference and paired evaluation.
//!
//! LOW patches are lifted to high quality with `G_H^S(E^C_L(x))` and then
//! re-styled with `G_H^T(E^C_S(·) ⊕ s̄)`, where `s̄` is the mean target style
//! code. HIGH patches are either re-styled or passed through, depending on
//! the style gate and [`EnhanceConfig`].

use std::fmt::Write as _;
use std::path::Path;

use crate::degrade::PairedSample;
use crate::error::{Error, Result};
use crate::imagedata::{
    patchify, rasters_to_tensor, reassemble, save_png, tensor_to_rasters, ImageRecord, PatchGrid,
    Raster, CHANNELS,
};
use crate::networks::{CodeKind, EncoderRole, GeneratorId, ModelBundle};
use crate::paramfile::write_atomic;
use crate::quality::{ClassifierParams, QualityLabel, QualityScore};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceConfig {
    pub patch_size: usize,
    pub quality_threshold: f64,
    /// Re-style HIGH patches that are not in the target style.
    pub style_align_all: bool,
    /// Leave HIGH target-style patches untouched.
    pub pass_through_target: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            quality_threshold: 0.5,
            style_align_all: true,
            pass_through_target: true,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return Err(Error::Config("quality_threshold must lie in [0, 1]".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_same(a: &Raster, b: &Raster) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr_raster(a: &Raster, b: &Raster) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &ImageRecord, b: &ImageRecord) -> Result<f64> {
    psnr_raster(&a.pixels, &b.pixels)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

// Valid-region separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim_raster(a: &Raster, b: &Raster) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let x: Vec<f64> = a
            .data()
            .iter()
            .skip(c)
            .step_by(CHANNELS)
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b
            .data()
            .iter()
            .skip(c)
            .step_by(CHANNELS)
            .map(|&v| v as f64)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / CHANNELS as f64)
}

pub fn ssim(a: &ImageRecord, b: &ImageRecord) -> Result<f64> {
    ssim_raster(&a.pixels, &b.pixels)
}

/// What happened to one patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    /// LOW: quality lift then style alignment.
    Lifted,
    /// HIGH, re-styled to the target.
    Aligned,
    /// HIGH target-style patch left untouched.
    PassThrough,
    /// HIGH patch left untouched because re-styling is disabled.
    Unchanged,
}

fn mean_style(bundle: &ModelBundle) -> Result<&[f64]> {
    bundle
        .mean_target_style
        .as_deref()
        .ok_or_else(|| Error::State("bundle has no mean target style code".into()))
}

fn restyle(
    bundle: &ModelBundle,
    x: &fundus_nn::Tensor,
    style: &[f64],
) -> Result<fundus_nn::Tensor> {
    let n = x.shape()[0];
    let content = bundle.encode(EncoderRole::ContentS, x)?;
    let mut codes = Vec::with_capacity(n * style.len());
    for _ in 0..n {
        codes.extend_from_slice(style);
    }
    let code = fundus_nn::Tensor::from_vec(&[n, style.len()], codes)?;
    bundle.generate(
        GeneratorId::HighTarget,
        &content,
        Some((CodeKind::Style, &code)),
    )
}

/// Decides a patch's route without running the generators.
pub fn route_for(
    patch: &Raster,
    bundle: &ModelBundle,
    score: &QualityScore,
    config: &EnhanceConfig,
) -> Result<Route> {
    if score.label == QualityLabel::Low {
        return Ok(Route::Lifted);
    }
    if !config.style_align_all && config.pass_through_target {
        // Nothing downstream depends on the gate's answer here.
        return Ok(Route::Unchanged);
    }
    // Without a style gate every HIGH patch counts as target style.
    let is_target = match &bundle.style_gate {
        Some(gate) => gate.is_target(patch)?,
        None => true,
    };
    Ok(if is_target && config.pass_through_target {
        Route::PassThrough
    } else if config.style_align_all {
        Route::Aligned
    } else {
        Route::Unchanged
    })
}

pub fn enhance_patch_routed(
    patch: &Raster,
    bundle: &ModelBundle,
    score: &QualityScore,
    config: &EnhanceConfig,
) -> Result<(Raster, Route)> {
    let style = mean_style(bundle)?;
    let route = route_for(patch, bundle, score, config)?;
    let x = rasters_to_tensor([patch])?;
    let out = match route {
        Route::PassThrough | Route::Unchanged => return Ok((patch.clone(), route)),
        Route::Lifted => {
            let z = bundle.encode(EncoderRole::ContentL, &x)?;
            let lifted = bundle.generate(GeneratorId::HighSource, &z, None)?;
            restyle(bundle, &lifted, style)?
        }
        Route::Aligned => restyle(bundle, &x, style)?,
    };
    Ok((tensor_to_rasters(&out).remove(0), route))
}

pub fn enhance_patch(
    patch: &Raster,
    bundle: &ModelBundle,
    score: &QualityScore,
    config: &EnhanceConfig,
) -> Result<Raster> {
    enhance_patch_routed(patch, bundle, score, config).map(|(r, _)| r)
}

#[derive(Clone, Debug)]
pub struct EnhancedImage {
    pub image: ImageRecord,
    /// Route of each patch, in grid (row-major) order.
    pub routes: Vec<Route>,
}

/// patchify, assess, enhance each patch, reassemble.
pub fn enhance_image(
    image: &ImageRecord,
    bundle: &ModelBundle,
    qa: &ClassifierParams,
    config: &EnhanceConfig,
) -> Result<EnhancedImage> {
    config.validate()?;
    mean_style(bundle)?;
    let grid = patchify(image, config.patch_size)?;
    let probs = qa.probabilities(&grid.patches.iter().map(|p| &p.pixels).collect::<Vec<_>>())?;
    let mut patches = Vec::with_capacity(grid.patches.len());
    let mut routes = Vec::with_capacity(grid.patches.len());
    for (p, prob) in grid.patches.iter().zip(probs) {
        let score = QualityScore::from_probability(prob, config.quality_threshold);
        let (pixels, route) = enhance_patch_routed(&p.pixels, bundle, &score, config)?;
        routes.push(route);
        patches.push(crate::imagedata::PatchRecord {
            pixels,
            ..p.clone()
        });
    }
    let out = reassemble(&PatchGrid { patches, ..grid })?;
    Ok(EnhancedImage {
        image: ImageRecord {
            pixels: out.pixels,
            source_path: image.source_path.clone(),
            original_size: image.original_size,
        },
        routes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_input: f64,
    pub ssim_input: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lifted: usize,
    pub aligned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub n_images: usize,
    /// Enhanced versus clean.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Degraded input versus clean.
    pub mean_psnr_input: f64,
    pub mean_ssim_input: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("metric report needs at least one row".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            n_images: rows.len(),
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_psnr_input: mean(|r| r.psnr_input),
            mean_ssim_input: mean(|r| r.ssim_input),
            rows,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tpsnr_input\tssim_input\tpsnr\tssim\tlifted\taligned\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                r.id, r.psnr_input, r.ssim_input, r.psnr, r.ssim, r.lifted, r.aligned
            )
            .expect("string write");
        }
        writeln!(
            s,
            "# mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\tn={}",
            self.mean_psnr_input,
            self.mean_ssim_input,
            self.mean_psnr,
            self.mean_ssim,
            self.n_images
        )
        .expect("string write");
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_tsv().as_bytes())
    }
}

/// Clean, degraded and enhanced images side by side.
pub fn side_by_side(images: &[&Raster]) -> Raster {
    let h = images.iter().map(|r| r.height()).max().unwrap_or(0);
    let w: usize = images.iter().map(|r| r.width()).sum();
    let mut out = Raster::new(h, w);
    let mut x = 0;
    for r in images {
        out.paste(0, x, r);
        x += r.width();
    }
    out
}

/// Enhances every degraded image and scores it against its clean original.
/// Writes one comparison panel per pair when `panels` is given.
pub fn evaluate(
    pairs: &[PairedSample],
    bundle: &ModelBundle,
    qa: &ClassifierParams,
    config: &EnhanceConfig,
    panels: Option<&Path>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation needs at least one pair".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let enhanced = enhance_image(&pair.degraded, bundle, qa, config)?;
        let id = if pair.clean.source_path.is_empty() {
            format!("pair_{i:04}")
        } else {
            pair.clean.source_path.clone()
        };
        if let Some(dir) = panels {
            let panel = side_by_side(&[
                &pair.clean.pixels,
                &pair.degraded.pixels,
                &enhanced.image.pixels,
            ]);
            save_png(&panel, dir.join(format!("panel_{i:04}.png")))?;
        }
        rows.push(MetricRow {
            id,
            psnr_input: psnr(&pair.clean, &pair.degraded)?,
            ssim_input: ssim(&pair.clean, &pair.degraded)?,
            psnr: psnr(&pair.clean, &enhanced.image)?,
            ssim: ssim(&pair.clean, &enhanced.image)?,
            lifted: enhanced
                .routes
                .iter()
                .filter(|r| **r == Route::Lifted)
                .count(),
            aligned: enhanced
                .routes
                .iter()
                .filter(|r| **r == Route::Aligned)
                .count(),
        });
    }
    MetricReport::from_rows(rows)
}
