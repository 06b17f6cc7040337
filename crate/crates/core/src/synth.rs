//! Procedural fundus-like images: a dark surround, an orange-red retinal
//! disk, a bright optic disc, curved vessel trees and fine background
//! texture, rendered in one of two illumination styles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::degrade::blur_raster;
use crate::imagedata::{ImageRecord, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IlluminationStyle {
    /// Warm, evenly lit.
    Warm,
    /// Slightly dimmer red with a green-blue cast.
    Cool,
}

impl IlluminationStyle {
    fn grade(self, rgb: [f32; 3]) -> [f32; 3] {
        match self {
            IlluminationStyle::Warm => rgb,
            IlluminationStyle::Cool => [rgb[0] * 0.92, rgb[1] * 1.06, rgb[2] * 1.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Fraction of images rendered in [`IlluminationStyle::Warm`].
    pub warm_fraction: f64,
    pub vessels: usize,
    /// Amplitude of the fine background texture.
    pub texture: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            warm_fraction: 0.6,
            vessels: 8,
            texture: 0.03,
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one image. All randomness comes from `rng`.
pub fn render_fundus(cfg: &SynthConfig, style: IlluminationStyle, rng: &mut impl Rng) -> Raster {
    let n = cfg.size;
    let s = n as f64;
    let (cx, cy) = (
        s / 2.0 + rng.random_range(-0.03..0.03) * s,
        s / 2.0 + rng.random_range(-0.03..0.03) * s,
    );
    let radius = s * rng.random_range(0.47..0.5);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let (dx, dy) = (
        cx + side * s * rng.random_range(0.18..0.24),
        cy + rng.random_range(-0.06..0.06) * s,
    );
    let disc_r = s * rng.random_range(0.06..0.08);
    let base = [
        rng.random_range(0.72..0.82),
        rng.random_range(0.32..0.40),
        rng.random_range(0.12..0.18),
    ];

    // Vessel darkness accumulates as a max over stamped discs.
    let mut vessel = vec![0.0f64; n * n];
    for v in 0..cfg.vessels {
        let mut angle =
            std::f64::consts::TAU * (v as f64 + rng.random::<f64>()) / cfg.vessels as f64;
        let curvature = rng.random_range(-0.015..0.015);
        let mut width = s * rng.random_range(0.012..0.022);
        let (mut px, mut py) = (dx, dy);
        let length = s * rng.random_range(0.35..0.6);
        let steps = (length * 2.0) as usize;
        for _ in 0..steps {
            px += 0.5 * angle.cos();
            py += 0.5 * angle.sin();
            angle += curvature + rng.random_range(-0.02..0.02);
            width = (width * 0.997).max(0.6);
            let r = width + 1.0;
            let (y0, y1) = (
                (py - r).floor().max(0.0) as usize,
                ((py + r).ceil().max(0.0) as usize).min(n - 1),
            );
            let (x0, x1) = (
                (px - r).floor().max(0.0) as usize,
                ((px + r).ceil().max(0.0) as usize).min(n - 1),
            );
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let a = 1.0 - smoothstep(width * 0.5, width * 0.5 + 1.0, d);
                    let cell = &mut vessel[y * n + x];
                    *cell = cell.max(a);
                }
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut texture = Raster::new(n, n);
    for v in texture.data_mut().iter_mut() {
        *v = normal.sample(rng) as f32;
    }
    let texture = blur_raster(&texture, 0.8);

    Raster::from_fn(n, n, |y, x| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / radius;
        let inside = 1.0 - smoothstep(0.97, 1.0, r);
        if inside <= 0.0 {
            return [0.0; 3];
        }
        let shade = 1.0 - 0.22 * r * r;
        let t = cfg.texture * texture.get(y, x)[0] as f64;
        let mut rgb = [
            base[0] * shade + t,
            base[1] * shade + 0.6 * t,
            base[2] * shade + 0.3 * t,
        ];
        let dd = ((fx - dx).powi(2) + (fy - dy).powi(2)).sqrt() / disc_r;
        let disc = (-dd * dd).exp();
        let disc_rgb = [1.0, 0.88, 0.6];
        for c in 0..3 {
            rgb[c] += (disc_rgb[c] - rgb[c]) * disc;
        }
        let a = vessel[y * n + x];
        let vessel_rgb = [0.42, 0.08, 0.05];
        for c in 0..3 {
            rgb[c] += (vessel_rgb[c] * shade - rgb[c]) * a * 0.85;
        }
        let rgb = [rgb[0] * inside, rgb[1] * inside, rgb[2] * inside];
        let g = style.grade([rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
        [
            g[0].clamp(0.0, 1.0),
            g[1].clamp(0.0, 1.0),
            g[2].clamp(0.0, 1.0),
        ]
    })
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub record: ImageRecord,
    pub style: IlluminationStyle,
}

/// Renders `count` images deterministically; image `i` uses stream `i` of the seed.
pub fn synth_corpus(cfg: &SynthConfig, count: usize, seed: u64) -> Vec<SynthImage> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let style = if rng.random::<f64>() < cfg.warm_fraction {
                IlluminationStyle::Warm
            } else {
                IlluminationStyle::Cool
            };
            let pixels = render_fundus(cfg, style, &mut rng);
            SynthImage {
                record: ImageRecord::from_raster(pixels, format!("synth_{i:04}.png")),
                style,
            }
        })
        .collect()
}
