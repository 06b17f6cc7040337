//! Parametric degradation: uneven illumination, Gaussian blur and blob
//! artifacts, used to synthesize paired clean/degraded data.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{ImageRecord, Raster, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Illum,
    Blur,
    Artifact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlluminationSpec {
    pub gradient_strength: f64,
    /// Normalized `(x, y)`; drawn from the seed when absent.
    #[serde(default)]
    pub center: Option<(f64, f64)>,
    #[serde(default = "default_falloff")]
    pub radial_falloff: f64,
}

fn default_falloff() -> f64 {
    0.5
}

impl Default for IlluminationSpec {
    fn default() -> Self {
        Self {
            gradient_strength: 0.0,
            center: None,
            radial_falloff: default_falloff(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSpec {
    pub count: usize,
    /// Blob radius in pixels.
    pub radius_range: (f64, f64),
    /// Signed additive intensity; negative values darken.
    pub intensity_range: (f64, f64),
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            count: 0,
            radius_range: (4.0, 12.0),
            intensity_range: (0.1, 0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    #[serde(default)]
    pub illumination: IlluminationSpec,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default)]
    pub artifacts: ArtifactSpec,
    #[serde(default)]
    pub enabled: BTreeSet<Stage>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            illumination: IlluminationSpec::default(),
            blur_sigma: 0.0,
            artifacts: ArtifactSpec::default(),
            enabled: BTreeSet::new(),
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let il = &self.illumination;
        if !(0.0..=1.0).contains(&il.gradient_strength) {
            return Err(Error::Config("gradient_strength must lie in [0, 1]".into()));
        }
        if !(il.radial_falloff > 0.0) {
            return Err(Error::Config("radial_falloff must be positive".into()));
        }
        if let Some((cx, cy)) = il.center {
            if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                return Err(Error::Config(
                    "illumination center must lie in [0, 1]^2".into(),
                ));
            }
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Config("blur_sigma must be non-negative".into()));
        }
        let a = &self.artifacts;
        if !(a.radius_range.0 > 0.0 && a.radius_range.0 <= a.radius_range.1) {
            return Err(Error::Config(
                "radius_range must be positive and ordered".into(),
            ));
        }
        if !(a.intensity_range.0 <= a.intensity_range.1) {
            return Err(Error::Config("intensity_range must be ordered".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is always representable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: ImageRecord,
    pub degraded: ImageRecord,
    pub spec: DegradationSpec,
    pub seed: u64,
}

// Each stage draws from its own stream so toggling one stage does not
// perturb the randomness of the others.
fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

/// Value of the illumination mask at normalized distance `d` from the centre.
pub fn illumination_gain(d: f64, strength: f64, falloff: f64) -> f64 {
    1.0 - strength * (1.0 - (-(d / falloff).powi(2)).exp())
}

pub fn apply_illumination(
    image: &ImageRecord,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<ImageRecord> {
    spec.validate()?;
    let il = &spec.illumination;
    if il.gradient_strength == 0.0 {
        return Ok(image.clone());
    }
    let (cx, cy) = il.center.unwrap_or_else(|| {
        let mut rng = stage_rng(seed, Stage::Illum);
        (rng.random::<f64>(), rng.random::<f64>())
    });
    let src = &image.pixels;
    let (h, w) = (src.height(), src.width());
    let nx = (w.max(2) - 1) as f64;
    let ny = (h.max(2) - 1) as f64;
    let mut out = src.clone();
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 / nx - cx).powi(2) + (y as f64 / ny - cy).powi(2)).sqrt();
            let g = illumination_gain(d, il.gradient_strength, il.radial_falloff) as f32;
            let px = src.get(y, x);
            out.set(y, x, [px[0] * g, px[1] * g, px[2] * g]);
        }
    }
    out.clamp01();
    Ok(ImageRecord {
        pixels: out,
        ..image.clone()
    })
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

// Reflect-101 (mirror without repeating the edge sample).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur on a raster.
pub fn blur_raster(src: &Raster, sigma: f64) -> Raster {
    if sigma == 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (src.height(), src.width());
    let data = src.data();
    let mut tmp = vec![0.0f64; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - r, w);
                    acc += kv * data[(y * w + xx) * CHANNELS + c] as f64;
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = Raster::new(h, w);
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + j as i64 - r, h);
                    acc += kv * tmp[(yy * w + x) * CHANNELS + c];
                }
                od[(y * w + x) * CHANNELS + c] = acc as f32;
            }
        }
    }
    out
}

pub fn apply_blur(image: &ImageRecord, sigma: f64) -> Result<ImageRecord> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!(
            "blur sigma must be non-negative, got {sigma}"
        )));
    }
    let mut pixels = blur_raster(&image.pixels, sigma);
    pixels.clamp01();
    Ok(ImageRecord {
        pixels,
        ..image.clone()
    })
}

/// Raised-cosine blob profile: 1 at the centre, 0 at and beyond `radius`.
pub fn blob_weight(d: f64, radius: f64) -> f64 {
    if d < radius {
        0.5 * (1.0 + (std::f64::consts::PI * d / radius).cos())
    } else {
        0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn apply_artifacts(
    image: &ImageRecord,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<ImageRecord> {
    spec.validate()?;
    let a = &spec.artifacts;
    if a.count == 0 {
        return Ok(image.clone());
    }
    let mut rng = stage_rng(seed, Stage::Artifact);
    let mut out = image.pixels.clone();
    let (h, w) = (out.height(), out.width());
    for _ in 0..a.count {
        let cx = rng.random::<f64>() * (w - 1) as f64;
        let cy = rng.random::<f64>() * (h - 1) as f64;
        let radius = uniform(&mut rng, a.radius_range);
        let intensity = uniform(&mut rng, a.intensity_range);
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(h - 1);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let delta = (intensity * blob_weight(d, radius)) as f32;
                if delta != 0.0 {
                    let px = out.get(y, x);
                    out.set(y, x, [px[0] + delta, px[1] + delta, px[2] + delta]);
                }
            }
        }
    }
    out.clamp01();
    Ok(ImageRecord {
        pixels: out,
        ..image.clone()
    })
}

/// Applies the enabled stages in the fixed order illumination, blur, artifacts.
pub fn degrade(image: &ImageRecord, spec: &DegradationSpec, seed: u64) -> Result<PairedSample> {
    spec.validate()?;
    let mut cur = image.clone();
    if spec.enabled.contains(&Stage::Illum) {
        cur = apply_illumination(&cur, spec, seed)?;
    }
    if spec.enabled.contains(&Stage::Blur) {
        cur = apply_blur(&cur, spec.blur_sigma)?;
    }
    if spec.enabled.contains(&Stage::Artifact) {
        cur = apply_artifacts(&cur, spec, seed)?;
    }
    Ok(PairedSample {
        clean: image.clone(),
        degraded: cur,
        spec: spec.clone(),
        seed,
    })
}

/// One clean/degraded file pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEntry {
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub seed: u64,
}

/// Sidecar listing written by the degrade command: a header line, then
/// `clean<TAB>degraded<TAB>seed` per pair. Relative paths resolve against
/// the listing's directory.
pub fn write_pairs(path: &Path, entries: &[PairEntry]) -> Result<()> {
    let mut s = String::from("clean\tdegraded\tseed\n");
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            e.clean.display(),
            e.degraded.display(),
            e.seed
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || {
            Error::format(
                "pair listing",
                format!("line {}: expected clean, degraded, seed", n + 1),
            )
        };
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(PairEntry {
            clean: base.join(f[0]),
            degraded: base.join(f[1]),
            seed: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
