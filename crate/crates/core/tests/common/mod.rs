//! Shared helpers: independent metric oracles and small image builders.
#![allow(dead_code)]

use fundus_enhance::imagedata::{ImageRecord, Raster};
use fundus_enhance::networks::EncoderRole;
use fundus_enhance::trainer::CycleNets;
use fundus_nn::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct PSNR over every pixel and channel, with the 99 dB cap.
pub fn psnr_oracle(a: &Raster, b: &Raster) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            for c in 0..3 {
                let d = p[c] as f64 - q[c] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// SSIM from the textbook definition: an 11x11 Gaussian window (sigma 1.5)
/// evaluated as a full 2-D sum at every position where it fits, averaged
/// over positions and channels.
pub fn ssim_oracle(a: &Raster, b: &Raster) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let mut w2 = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            w2[i][j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += w2[i][j];
        }
    }
    for row in &mut w2 {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut acc = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for y0 in 0..=a.height() - WIN {
            for x0 in 0..=a.width() - WIN {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let w = w2[i][j];
                        let p = a.get(y0 + i, x0 + j)[c] as f64;
                        let q = b.get(y0 + i, x0 + j)[c] as f64;
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    acc / n as f64
}

pub fn random_raster(rng: &mut impl Rng, h: usize, w: usize) -> Raster {
    Raster::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn random_image(seed: u64, side: usize) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRecord::from_raster(
        random_raster(&mut rng, side, side),
        format!("random_{seed}"),
    )
}

/// Smooth structured image: gradients plus a few sinusoids.
pub fn natural_image(side: usize) -> ImageRecord {
    let s = side as f32;
    let r = Raster::from_fn(side, side, |y, x| {
        let (u, v) = (x as f32 / s, y as f32 / s);
        [
            0.5 + 0.4 * (6.0 * u).sin() * (4.0 * v).cos(),
            0.3 + 0.5 * u * v,
            0.5 + 0.3 * (11.0 * (u + v)).sin(),
        ]
    });
    ImageRecord::from_raster(r, "natural")
}

pub fn rasters_equal_bitwise(a: &Raster, b: &Raster) -> bool {
    a.height() == b.height()
        && a.width() == b.width()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// `n` clean 32x32 patches cropped from inside the disk of synthetic fundus
/// images, each followed by its copy blurred with sigma 4.
pub fn blur_task(n: usize, seed: u64) -> Vec<(Raster, fundus_enhance::quality::QualityLabel)> {
    use fundus_enhance::degrade::apply_blur;
    use fundus_enhance::quality::QualityLabel;
    use fundus_enhance::synth::{synth_corpus, SynthConfig};

    let cfg = SynthConfig::default();
    let per_image = 4;
    let corpus = synth_corpus(&cfg, n.div_ceil(per_image), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1);
    let mut out = Vec::with_capacity(2 * n);
    for img in &corpus {
        let blurred = apply_blur(&img.record, 4.0).unwrap();
        for _ in 0..per_image {
            if out.len() == 2 * n {
                break;
            }
            // Offsets keep the crop well inside the retinal disk.
            let y = rng.random_range(32..64);
            let x = rng.random_range(32..64);
            out.push((img.record.pixels.crop(y, x, 32, 32), QualityLabel::High));
            out.push((blurred.pixels.crop(y, x, 32, 32), QualityLabel::Low));
        }
    }
    out
}

pub fn accuracy(probs: &[f64], labeled: &[(Raster, fundus_enhance::quality::QualityLabel)]) -> f64 {
    use fundus_enhance::quality::QualityLabel;
    let ok = probs
        .iter()
        .zip(labeled)
        .filter(|(p, (_, l))| (**p >= 0.5) == (*l == QualityLabel::High))
        .count();
    ok as f64 / labeled.len() as f64
}

/// Identity encoders and generators; codes are ignored.
pub struct IdentityNets;

impl CycleNets for IdentityNets {
    fn content(&self, _: &mut Graph, _: EncoderRole, x: Var) -> Var {
        x
    }
    fn quality_code(&self, g: &mut Graph, x: Var) -> Var {
        g.global_avg_pool(x)
    }
    fn style_code(&self, g: &mut Graph, x: Var) -> Var {
        g.global_avg_pool(x)
    }
    fn gen_low(&self, _: &mut Graph, content: Var, _: Var) -> Var {
        content
    }
    fn gen_high_source(&self, _: &mut Graph, content: Var) -> Var {
        content
    }
    fn gen_high_target(&self, _: &mut Graph, content: Var, _: Var) -> Var {
        content
    }
}
