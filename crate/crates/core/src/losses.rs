//! Training objectives.
//!
//! Reconstruction terms are per-pixel mean L1. The feature-level adversarial
//! term is a three-way domain-confusion game: the content discriminator is
//! trained with cross-entropy against the true origin (L, S or T) of each
//! content map, while the encoders minimize cross-entropy against the
//! uniform distribution, pulling the three content distributions together.
//! Image-level adversarial terms use the non-saturating GAN loss with one
//! discriminator per image domain.

use std::collections::BTreeMap;

use fundus_nn::{clamp_prob, Graph, Tensor, Var, PROB_CLAMP};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ModelBundle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the feature-level adversarial term.
    pub lambda1: f64,
    /// Weight of the image-level adversarial term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_q: f64,
    pub l_t: f64,
    pub l_c: f64,
    pub l_adv_feat: f64,
    pub l_adv_img: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_q: f64,
    pub l_t: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_adv_feat: f64,
    pub l_adv_img: f64,
    pub total: f64,
    /// Discriminator-side losses of the same step.
    pub d_feat: f64,
    pub d_img: f64,
    /// Optional per-term gradient norms, keyed by term name.
    pub grad_norms: BTreeMap<String, f64>,
}

impl LossReport {
    pub const LOG_HEADER: &'static str =
        "iter\tl_q\tl_t\tl_c\tl_s\tl_adv_feat\tl_adv_img\ttotal\td_feat\td_img";

    /// One tab-separated log record. Values use round-trip formatting so
    /// logs from identical runs compare byte for byte.
    pub fn log_line(&self, iter: u64) -> String {
        format!(
            "{iter}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.l_q,
            self.l_t,
            self.l_c,
            self.l_s,
            self.l_adv_feat,
            self.l_adv_img,
            self.total,
            self.d_feat,
            self.d_img
        )
    }
}

/// `l_s = l_q + l_t + l_c`; `total = l_s + lambda1 * l_adv_feat + lambda2 * l_adv_img`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, v) in [
        ("l_q", parts.l_q),
        ("l_t", parts.l_t),
        ("l_c", parts.l_c),
        ("l_adv_feat", parts.l_adv_feat),
        ("l_adv_img", parts.l_adv_img),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let l_s = parts.l_q + parts.l_t + parts.l_c;
    Ok(LossReport {
        l_q: parts.l_q,
        l_t: parts.l_t,
        l_c: parts.l_c,
        l_s,
        l_adv_feat: parts.l_adv_feat,
        l_adv_img: parts.l_adv_img,
        total: l_s + weights.lambda1 * parts.l_adv_feat + weights.lambda2 * parts.l_adv_img,
        ..Default::default()
    })
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-element mean absolute difference.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("L1", a, b)?;
    if a.is_empty() {
        return Err(Error::Argument("L1 of empty tensors".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// `mean|x̂_L - x_L| + mean|x̂_H1^S - x_H^S|`.
pub fn quality_recon_loss(
    x_l: &Tensor,
    x_l_rec: &Tensor,
    x_hs: &Tensor,
    x_hs_rec: &Tensor,
) -> Result<f64> {
    Ok(mean_l1(x_l_rec, x_l)? + mean_l1(x_hs_rec, x_hs)?)
}

/// `mean|x̂_H^T - x_H^T| + mean|x̂_H'^S - x_H^S|`.
pub fn style_recon_loss(
    x_ht: &Tensor,
    x_ht_rec: &Tensor,
    x_hs: &Tensor,
    x_hs_rec: &Tensor,
) -> Result<f64> {
    Ok(mean_l1(x_ht_rec, x_ht)? + mean_l1(x_hs_rec, x_hs)?)
}

/// Agreement between the quality-cycle and style-cycle reconstructions of `x_H^S`.
pub fn cross_consistency_loss(x_hs_rec_q: &Tensor, x_hs_rec_s: &Tensor) -> Result<f64> {
    mean_l1(x_hs_rec_q, x_hs_rec_s)
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_CLAMP).ln()
}

/// Domain-confusion losses from content-discriminator probabilities.
///
/// `probs[r]` is an `[N, 3]` row-stochastic matrix for content maps whose
/// true origin is domain `r` (0 = L, 1 = S, 2 = T). Returns `(d_loss,
/// e_loss)`: the mean cross-entropy against the true origin and against the
/// uniform distribution, each averaged over the three roles.
pub fn feature_confusion_from_probs(probs: [&Tensor; 3]) -> Result<(f64, f64)> {
    let mut d = 0.0;
    let mut e = 0.0;
    for (role, p) in probs.iter().enumerate() {
        let (n, k) = match p.shape() {
            [n, 3] if *n > 0 => (*n, 3),
            s => {
                return Err(Error::Argument(format!(
                    "expected [N, 3] probabilities, got {s:?}"
                )))
            }
        };
        let mut dr = 0.0;
        let mut er = 0.0;
        for row in p.data().chunks(k) {
            dr += neg_log(row[role]);
            er += row.iter().map(|&q| neg_log(q)).sum::<f64>() / k as f64;
        }
        d += dr / n as f64;
        e += er / n as f64;
    }
    Ok((d / 3.0, e / 3.0))
}

/// Feature-level adversarial losses for three content maps under `D_C`.
pub fn adv_feature_loss(
    bundle: &ModelBundle,
    z_l: &Tensor,
    z_s: &Tensor,
    z_t: &Tensor,
) -> Result<(f64, f64)> {
    same_shape("feature adversarial", z_l, z_s)?;
    same_shape("feature adversarial", z_l, z_t)?;
    let p = [
        bundle.discriminate_content(z_l)?,
        bundle.discriminate_content(z_s)?,
        bundle.discriminate_content(z_t)?,
    ];
    feature_confusion_from_probs([&p[0], &p[1], &p[2]])
}

/// Non-saturating GAN losses from discriminator outputs, probabilities
/// clamped to `[1e-7, 1 - 1e-7]`. Returns `(d_loss, g_loss)`.
pub fn image_adv_from_scores(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Data(
            "adversarial loss needs non-empty real and fake batches".into(),
        ));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        v.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / v.len() as f64
    };
    let d = mean(real, &|p| -p.ln()) + mean(fake, &|p| -(1.0 - p).ln());
    let g = mean(fake, &|p| -p.ln());
    Ok((d, g))
}

/// Image-level adversarial losses of one domain discriminator.
pub fn adv_image_loss(
    bundle: &ModelBundle,
    reals: &Tensor,
    fakes: &Tensor,
    domain: crate::networks::ImageDomain,
) -> Result<(f64, f64)> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::Data(
            "adversarial loss needs non-empty real and fake batches".into(),
        ));
    }
    if reals.shape()[1..] != fakes.shape()[1..] {
        return Err(Error::Argument(
            "real and fake patches differ in shape".into(),
        ));
    }
    let r = bundle.discriminate_image(domain, reals)?;
    let f = bundle.discriminate_image(domain, fakes)?;
    image_adv_from_scores(&r, &f)
}

/// One-hot `[n, 3]` target for role `r`.
pub fn onehot_target(n: usize, role: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        t.data_mut()[i * 3 + role] = 1.0;
    }
    t
}

/// Graph form of the discriminator side of the confusion game.
pub fn feature_d_var(g: &mut Graph, logits: [Var; 3]) -> Var {
    let mut terms = Vec::new();
    for (role, &l) in logits.iter().enumerate() {
        let n = g.value(l).shape()[0];
        let ce = g.softmax_xent(l, onehot_target(n, role));
        terms.push((ce, 1.0 / 3.0));
    }
    g.weighted_sum(&terms)
}

/// Graph form of the encoder side: cross-entropy to the uniform distribution.
pub fn feature_e_var(g: &mut Graph, logits: [Var; 3]) -> Var {
    let mut terms = Vec::new();
    for &l in &logits {
        let n = g.value(l).shape()[0];
        let ce = g.softmax_xent(l, Tensor::full(&[n, 3], 1.0 / 3.0));
        terms.push((ce, 1.0 / 3.0));
    }
    g.weighted_sum(&terms)
}

/// `-E[log D(real)] - E[log(1 - D(fake))]` from logits.
pub fn image_d_var(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let r = g.bce_clamped(real_logits, 1.0);
    let f = g.bce_clamped(fake_logits, 0.0);
    g.add(r, f)
}

/// `-E[log D(fake)]` from logits.
pub fn image_g_var(g: &mut Graph, fake_logits: Var) -> Var {
    g.bce_clamped(fake_logits, 1.0)
}
