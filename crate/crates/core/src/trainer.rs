//! The adversarial training loop.
//!
//! Each iteration samples one batch from each of the three patch domains
//! (low quality, high-quality source style, high-quality target style),
//! runs the translation and re-feeding cycles, takes one discriminator step
//! on detached fakes and then one encoder/generator step against the
//! freshly updated, frozen discriminators.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fundus_nn::{Adam, AdamConfig, Bind, Graph, ParamStore, Tensor, Var};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{rasters_to_tensor, Raster};
use crate::losses::{self, total_loss, LossParts, LossReport, LossWeights};
use crate::networks::{Code, EncoderRole, GeneratorId, ImageDomain, ModelBundle, NetConfig};
use crate::paramfile;
use crate::stylecluster::{AeParams, StyleGate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub patch_size: usize,
    /// Record per-term gradient norms in each report (costs extra backward passes).
    pub grad_diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            max_iters: 300_000,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 10_000,
            patch_size: 128,
            grad_diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }
}

/// Training configuration file: `[train]` and `[net]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.net.validate()?;
        if self.train.patch_size != self.net.patch_size {
            return Err(Error::Config(format!(
                "train.patch_size {} differs from net.patch_size {}",
                self.train.patch_size, self.net.patch_size
            )));
        }
        Ok(())
    }
}

/// Network interface used by the cycle wiring; lets tests substitute stubs.
pub trait CycleNets {
    fn content(&self, g: &mut Graph, role: EncoderRole, x: Var) -> Var;
    fn quality_code(&self, g: &mut Graph, x: Var) -> Var;
    fn style_code(&self, g: &mut Graph, x: Var) -> Var;
    fn gen_low(&self, g: &mut Graph, content: Var, quality: Var) -> Var;
    fn gen_high_source(&self, g: &mut Graph, content: Var) -> Var;
    fn gen_high_target(&self, g: &mut Graph, content: Var, style: Var) -> Var;
}

/// A [`ModelBundle`] bound to a graph, with its encoder/generator store
/// either trainable or frozen.
pub struct BundleNets<'a> {
    pub bundle: &'a ModelBundle,
    pub params: Bind<'a>,
}

impl<'a> BundleNets<'a> {
    pub fn new(bundle: &'a ModelBundle, trainable: bool) -> Self {
        Self {
            bundle,
            params: bundle.gen.bind(trainable),
        }
    }
}

impl CycleNets for BundleNets<'_> {
    fn content(&self, g: &mut Graph, role: EncoderRole, x: Var) -> Var {
        debug_assert!(role.is_content());
        self.bundle.encode_var(g, self.params, role, x)
    }

    fn quality_code(&self, g: &mut Graph, x: Var) -> Var {
        self.bundle
            .encode_var(g, self.params, EncoderRole::Quality, x)
    }

    fn style_code(&self, g: &mut Graph, x: Var) -> Var {
        self.bundle
            .encode_var(g, self.params, EncoderRole::Style, x)
    }

    fn gen_low(&self, g: &mut Graph, content: Var, quality: Var) -> Var {
        self.bundle
            .generate_var(
                g,
                self.params,
                GeneratorId::Low,
                content,
                Some(Code::Quality(quality)),
            )
            .expect("quality code matches G_L")
    }

    fn gen_high_source(&self, g: &mut Graph, content: Var) -> Var {
        self.bundle
            .generate_var(g, self.params, GeneratorId::HighSource, content, None)
            .expect("G_H^S takes no code")
    }

    fn gen_high_target(&self, g: &mut Graph, content: Var, style: Var) -> Var {
        self.bundle
            .generate_var(
                g,
                self.params,
                GeneratorId::HighTarget,
                content,
                Some(Code::Style(style)),
            )
            .expect("style code matches G_H^T")
    }
}

/// Graph nodes of one forward pass through all translation cycles.
#[derive(Clone, Copy, Debug)]
pub struct CycleVars {
    pub x_l: Var,
    pub x_hs: Var,
    pub x_ht: Var,
    /// Content maps of the three inputs, fed to the content discriminator.
    pub z_l: Var,
    pub z_s: Var,
    pub z_t: Var,
    pub l_to_h: Var,
    pub h_to_l: Var,
    pub s_to_t: Var,
    pub t_to_s: Var,
    pub rec_l: Var,
    pub rec_hs_q: Var,
    pub rec_ht: Var,
    pub rec_hs_s: Var,
}

/// Translations and re-fed reconstructions. Translated images are re-encoded
/// by the content encoder of the domain they now belong to.
pub fn forward_cycles_graph(
    nets: &impl CycleNets,
    g: &mut Graph,
    x_l: Var,
    x_hs: Var,
    x_ht: Var,
) -> CycleVars {
    let z_l = nets.content(g, EncoderRole::ContentL, x_l);
    let z_s = nets.content(g, EncoderRole::ContentS, x_hs);
    let z_t = nets.content(g, EncoderRole::ContentT, x_ht);
    let q_l = nets.quality_code(g, x_l);
    let s_t = nets.style_code(g, x_ht);

    let l_to_h = nets.gen_high_source(g, z_l);
    let h_to_l = nets.gen_low(g, z_s, q_l);
    let s_to_t = nets.gen_high_target(g, z_s, s_t);
    let t_to_s = nets.gen_high_source(g, z_t);

    let z = nets.content(g, EncoderRole::ContentS, l_to_h);
    let rec_l = nets.gen_low(g, z, q_l);
    let z = nets.content(g, EncoderRole::ContentL, h_to_l);
    let rec_hs_q = nets.gen_high_source(g, z);
    let z = nets.content(g, EncoderRole::ContentT, s_to_t);
    let rec_hs_s = nets.gen_high_source(g, z);
    let z = nets.content(g, EncoderRole::ContentS, t_to_s);
    let rec_ht = nets.gen_high_target(g, z, s_t);

    CycleVars {
        x_l,
        x_hs,
        x_ht,
        z_l,
        z_s,
        z_t,
        l_to_h,
        h_to_l,
        s_to_t,
        t_to_s,
        rec_l,
        rec_hs_q,
        rec_ht,
        rec_hs_s,
    }
}

/// Values of every translated and reconstructed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationBatch {
    pub x_l: Tensor,
    pub x_hs: Tensor,
    pub x_ht: Tensor,
    pub l_to_h: Tensor,
    pub h_to_l: Tensor,
    pub s_to_t: Tensor,
    pub t_to_s: Tensor,
    pub rec_l: Tensor,
    pub rec_hs_q: Tensor,
    pub rec_ht: Tensor,
    pub rec_hs_s: Tensor,
}

impl TranslationBatch {
    /// The eight generated batches, in wiring order.
    pub fn intermediates(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("l_to_h", &self.l_to_h),
            ("h_to_l", &self.h_to_l),
            ("s_to_t", &self.s_to_t),
            ("t_to_s", &self.t_to_s),
            ("rec_l", &self.rec_l),
            ("rec_hs_q", &self.rec_hs_q),
            ("rec_ht", &self.rec_ht),
            ("rec_hs_s", &self.rec_hs_s),
        ]
    }
}

fn check_cycle_inputs(x_l: &Tensor, x_hs: &Tensor, x_ht: &Tensor) -> Result<()> {
    if x_l.shape() != x_hs.shape() || x_l.shape() != x_ht.shape() {
        return Err(Error::Argument(format!(
            "cycle inputs differ in shape: {:?}, {:?}, {:?}",
            x_l.shape(),
            x_hs.shape(),
            x_ht.shape()
        )));
    }
    if x_l.shape().len() != 4 || x_l.shape()[0] == 0 {
        return Err(Error::Argument(format!(
            "expected a non-empty [N, 3, P, P] batch, got {:?}",
            x_l.shape()
        )));
    }
    Ok(())
}

/// Runs the cycles on concrete batches with any network implementation.
pub fn forward_cycles_with(
    nets: &impl CycleNets,
    x_l: &Tensor,
    x_hs: &Tensor,
    x_ht: &Tensor,
) -> Result<TranslationBatch> {
    check_cycle_inputs(x_l, x_hs, x_ht)?;
    let mut g = Graph::new();
    let (a, b, c) = (
        g.constant(x_l.clone()),
        g.constant(x_hs.clone()),
        g.constant(x_ht.clone()),
    );
    let v = forward_cycles_graph(nets, &mut g, a, b, c);
    let val = |x: Var| g.value(x).clone();
    Ok(TranslationBatch {
        x_l: val(v.x_l),
        x_hs: val(v.x_hs),
        x_ht: val(v.x_ht),
        l_to_h: val(v.l_to_h),
        h_to_l: val(v.h_to_l),
        s_to_t: val(v.s_to_t),
        t_to_s: val(v.t_to_s),
        rec_l: val(v.rec_l),
        rec_hs_q: val(v.rec_hs_q),
        rec_ht: val(v.rec_ht),
        rec_hs_s: val(v.rec_hs_s),
    })
}

pub fn forward_cycles(
    bundle: &ModelBundle,
    x_l: &Tensor,
    x_hs: &Tensor,
    x_ht: &Tensor,
) -> Result<TranslationBatch> {
    let p = bundle.config.patch_size;
    if x_l.shape().len() != 4 || x_l.shape()[1..] != [3, p, p] {
        return Err(Error::Argument(format!(
            "expected [N, 3, {p}, {p}] batches, got {:?}",
            x_l.shape()
        )));
    }
    forward_cycles_with(&BundleNets::new(bundle, false), x_l, x_hs, x_ht)
}

/// Reconstruction terms `(l_q, l_t, l_c)` as graph nodes.
pub fn reconstruction_vars(g: &mut Graph, v: &CycleVars) -> (Var, Var, Var) {
    let a = g.mean_abs_diff(v.rec_l, v.x_l);
    let b = g.mean_abs_diff(v.rec_hs_q, v.x_hs);
    let l_q = g.weighted_sum(&[(a, 1.0), (b, 1.0)]);
    let a = g.mean_abs_diff(v.rec_ht, v.x_ht);
    let b = g.mean_abs_diff(v.rec_hs_s, v.x_hs);
    let l_t = g.weighted_sum(&[(a, 1.0), (b, 1.0)]);
    let l_c = g.mean_abs_diff(v.rec_hs_q, v.rec_hs_s);
    (l_q, l_t, l_c)
}

/// `(real, fake, discriminator)` pairings of the image-level adversarial term.
pub fn image_pairings(v: &CycleVars) -> [(Var, Var, ImageDomain); 4] {
    [
        (v.x_l, v.h_to_l, ImageDomain::Low),
        (v.x_hs, v.l_to_h, ImageDomain::High),
        (v.x_hs, v.t_to_s, ImageDomain::High),
        (v.x_ht, v.s_to_t, ImageDomain::Target),
    ]
}

/// Generator-side image adversarial loss: mean over the four pairings.
pub fn image_g_var(g: &mut Graph, bundle: &ModelBundle, disc: Bind<'_>, v: &CycleVars) -> Var {
    let mut terms = Vec::new();
    for (_, fake, d) in image_pairings(v) {
        let logits = bundle.image_logits_var(g, disc, d, fake);
        terms.push((losses::image_g_var(g, logits), 0.25));
    }
    g.weighted_sum(&terms)
}

/// Encoder-side feature adversarial loss under a given discriminator binding.
pub fn feature_e_var(g: &mut Graph, bundle: &ModelBundle, disc: Bind<'_>, v: &CycleVars) -> Var {
    let logits = [v.z_l, v.z_s, v.z_t].map(|z| bundle.content_logits_var(g, disc, z));
    losses::feature_e_var(g, logits)
}

/// Parameters and optimizer state of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub bundle: ModelBundle,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
}

impl TrainerState {
    pub fn new(bundle: ModelBundle, config: &TrainConfig) -> Self {
        Self {
            bundle,
            opt_g: Adam::new(config.adam()),
            opt_d: Adam::new(config.adam()),
            iteration: 0,
        }
    }
}

/// Patches of the three training domains.
#[derive(Clone, Debug, Default)]
pub struct Domains {
    pub low: Vec<Raster>,
    pub high_source: Vec<Raster>,
    pub high_target: Vec<Raster>,
}

impl Domains {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        for (name, set) in [
            ("low-quality", &self.low),
            ("high-quality source", &self.high_source),
            ("high-quality target", &self.high_target),
        ] {
            if set.is_empty() {
                return Err(Error::Data(format!("{name} domain is empty")));
            }
            if let Some(r) = set
                .iter()
                .find(|r| r.height() != patch_size || r.width() != patch_size)
            {
                return Err(Error::Data(format!(
                    "{name} domain holds a {}x{} patch, expected {patch_size}",
                    r.height(),
                    r.width()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform sampling with replacement, one stream per iteration, so a resumed
/// run draws the same batches as an uninterrupted one.
pub fn sample_batches(
    domains: &Domains,
    batch: usize,
    seed: u64,
    iteration: u64,
) -> Result<[Tensor; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let mut pick = |set: &[Raster]| {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..set.len())).collect();
        rasters_to_tensor(idx.iter().map(|&i| &set[i]))
    };
    Ok([
        pick(&domains.low)?,
        pick(&domains.high_source)?,
        pick(&domains.high_target)?,
    ])
}

fn grad_norm(grads: &fundus_nn::Gradients) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Detached inputs of one discriminator update: the three content maps
/// (origin L, S, T) and the real/fake batches of each image pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscInputs {
    pub contents: [Tensor; 3],
    pub pairs: [(Tensor, Tensor, ImageDomain); 4],
}

impl DiscInputs {
    fn from_graph(g: &Graph, v: &CycleVars) -> Self {
        Self {
            contents: [v.z_l, v.z_s, v.z_t].map(|z| g.value(z).clone()),
            pairs: image_pairings(v).map(|(r, f, d)| (g.value(r).clone(), g.value(f).clone(), d)),
        }
    }

    /// Runs the cycles with frozen encoders and generators.
    pub fn compute(bundle: &ModelBundle, batches: &[Tensor; 3]) -> Result<Self> {
        check_cycle_inputs(&batches[0], &batches[1], &batches[2])?;
        let mut g = Graph::new();
        let [xl, xs, xt] = batches.clone().map(|t| g.constant(t));
        let v = forward_cycles_graph(&BundleNets::new(bundle, false), &mut g, xl, xs, xt);
        Ok(Self::from_graph(&g, &v))
    }
}

/// Discriminator losses `(d_feat, d_img)` and their gradients.
fn discriminator_losses(
    bundle: &ModelBundle,
    inputs: &DiscInputs,
) -> Result<(f64, f64, fundus_nn::Gradients)> {
    let mut gd = Graph::new();
    let disc = bundle.disc.bind(true);
    let logits = [0, 1, 2].map(|r| {
        let z = gd.constant(inputs.contents[r].clone());
        bundle.content_logits_var(&mut gd, disc, z)
    });
    let d_feat = losses::feature_d_var(&mut gd, logits);
    let mut terms = Vec::new();
    for (real, fake, d) in &inputs.pairs {
        let r = gd.constant(real.clone());
        let f = gd.constant(fake.clone());
        let rl = bundle.image_logits_var(&mut gd, disc, *d, r);
        let fl = bundle.image_logits_var(&mut gd, disc, *d, f);
        terms.push((losses::image_d_var(&mut gd, rl, fl), 0.25));
    }
    let d_img = gd.weighted_sum(&terms);
    let d_total = gd.weighted_sum(&[(d_feat, 1.0), (d_img, 1.0)]);
    if !gd.value(d_total).item().is_finite() {
        return Err(Error::NonFinite {
            term: "discriminator".into(),
        });
    }
    let (f, i) = (gd.value(d_feat).item(), gd.value(d_img).item());
    Ok((f, i, gd.backward(d_total)))
}

/// Discriminator losses on fixed inputs, without updating anything.
pub fn discriminator_loss(bundle: &ModelBundle, inputs: &DiscInputs) -> Result<(f64, f64)> {
    discriminator_losses(bundle, inputs).map(|(f, i, _)| (f, i))
}

/// One Adam step on the content and image discriminators. Touches only
/// `state.bundle.disc` and `state.opt_d`. Returns the pre-update losses.
pub fn discriminator_update(
    state: &mut TrainerState,
    inputs: &DiscInputs,
) -> Result<(f64, f64, f64)> {
    let (f, i, grads) = discriminator_losses(&state.bundle, inputs)?;
    let mut new_disc = state.bundle.disc.clone();
    state.opt_d.step(&mut new_disc, &grads);
    state.bundle.disc = new_disc;
    Ok((f, i, grad_norm(&grads)))
}

/// One discriminator update followed by one encoder/generator update.
pub fn training_step(
    state: &mut TrainerState,
    batches: &[Tensor; 3],
    config: &TrainConfig,
) -> Result<LossReport> {
    check_cycle_inputs(&batches[0], &batches[1], &batches[2])?;
    let w = config.weights;
    let mut g = Graph::new();
    let [xl, xs, xt] = batches.clone().map(|t| g.constant(t));
    let v = forward_cycles_graph(&BundleNets::new(&state.bundle, true), &mut g, xl, xs, xt);

    // Discriminator phase on detached copies of the generated batches.
    let (d_feat_v, d_img_v, d_grad_norm) =
        discriminator_update(state, &DiscInputs::from_graph(&g, &v))?;

    // Encoder/generator phase against the updated, frozen discriminators.
    let bundle = &state.bundle;
    let disc = bundle.disc.bind(false);
    let (l_q, l_t, l_c) = reconstruction_vars(&mut g, &v);
    let feat = feature_e_var(&mut g, bundle, disc, &v);
    let img = image_g_var(&mut g, bundle, disc, &v);
    let parts = LossParts {
        l_q: g.value(l_q).item(),
        l_t: g.value(l_t).item(),
        l_c: g.value(l_c).item(),
        l_adv_feat: g.value(feat).item(),
        l_adv_img: g.value(img).item(),
    };
    let mut report = total_loss(&parts, &w)?;
    report.d_feat = d_feat_v;
    report.d_img = d_img_v;
    let total = g.weighted_sum(&[
        (l_q, 1.0),
        (l_t, 1.0),
        (l_c, 1.0),
        (feat, w.lambda1),
        (img, w.lambda2),
    ]);
    if config.grad_diagnostics {
        for (name, var) in [
            ("l_q", l_q),
            ("l_t", l_t),
            ("l_c", l_c),
            ("l_adv_feat", feat),
            ("l_adv_img", img),
        ] {
            report
                .grad_norms
                .insert(name.to_string(), grad_norm(&g.backward(var)));
        }
        report
            .grad_norms
            .insert("discriminator".into(), d_grad_norm);
    }
    let grads = g.backward(total);
    drop(g);
    let mut new_gen: ParamStore = state.bundle.gen.clone();
    state.opt_g.step(&mut new_gen, &grads);
    state.bundle.gen = new_gen;
    state.iteration += 1;
    Ok(report)
}

/// Where training writes its loss log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const LOSS_LOG: &str = "loss_log.tsv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Runs `training_step` until `config.max_iters`, starting from `state`.
/// Returns the per-iteration reports of this call.
pub fn train_from(
    state: &mut TrainerState,
    domains: &Domains,
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    domains.validate(state.bundle.config.patch_size)?;
    let mut log = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let fresh = state.iteration == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{}", LossReport::LOG_HEADER).map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.iteration < config.max_iters {
        let batches = sample_batches(domains, config.batch_size, config.seed, state.iteration)?;
        let report = training_step(state, &batches, config)?;
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", report.log_line(state.iteration))
                .map_err(|e| Error::io(&*path, e))?;
        }
        if state.iteration.is_multiple_of(100) || state.iteration == config.max_iters {
            info!(
                "iter {} l_s {:.4} feat {:.4} img {:.4} d_img {:.4}",
                state.iteration, report.l_s, report.l_adv_feat, report.l_adv_img, report.d_img
            );
        }
        if let Some(dir) = &output.dir {
            if config.checkpoint_every > 0
                && state.iteration.is_multiple_of(config.checkpoint_every)
            {
                save_checkpoint(
                    state,
                    &dir.join(format!("ckpt_{:08}.ckpt", state.iteration)),
                )?;
                save_checkpoint(state, &dir.join(LATEST_CHECKPOINT))?;
            }
        }
        reports.push(report);
    }
    if let Some(dir) = &output.dir {
        save_checkpoint(state, &dir.join(LATEST_CHECKPOINT))?;
    }
    Ok(reports)
}

/// Initializes a bundle and trains it for `config.max_iters` iterations.
pub fn train(
    domains: &Domains,
    net: &NetConfig,
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<TrainerState> {
    config.validate()?;
    domains.validate(net.patch_size)?;
    let bundle = crate::networks::init_model(net, config.seed)?;
    let mut state = TrainerState::new(bundle, config);
    train_from(&mut state, domains, config, output)?;
    Ok(state)
}

/// Per-dimension mean of equally sized codes. Each dimension is summed in
/// sorted order, so the result does not depend on the order of `codes`.
pub fn mean_code(codes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = codes
        .first()
        .ok_or_else(|| Error::Data("cannot average zero codes".into()))?
        .len();
    if codes.iter().any(|c| c.len() != dim) {
        return Err(Error::Argument("codes differ in length".into()));
    }
    Ok((0..dim)
        .map(|d| {
            let mut col: Vec<f64> = codes.iter().map(|c| c[d]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / codes.len() as f64
        })
        .collect())
}

/// Mean style code over the target-domain patches, stored in the bundle.
pub fn compute_target_style_code(
    bundle: &mut ModelBundle,
    patches: &[&Raster],
) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::Data("target style set is empty".into()));
    }
    let mut codes = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let code = bundle.encode(
            EncoderRole::Style,
            &rasters_to_tensor(chunk.iter().copied())?,
        )?;
        codes.extend(
            code.data()
                .chunks(bundle.config.style_dim)
                .map(<[f64]>::to_vec),
        );
    }
    let mean = mean_code(&codes)?;
    bundle.mean_target_style = Some(mean.clone());
    Ok(mean)
}

const CKPT_MAGIC: &str = "fundus-ckpt";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    net: NetConfig,
    iteration: u64,
    seed: u64,
    adam: AdamHeader,
    opt_g_steps: u64,
    opt_d_steps: u64,
    #[serde(default)]
    gate: Option<GateHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateHeader {
    patch_size: usize,
    width: usize,
    dim: usize,
    target_id: usize,
}

/// Writes bundle, optimizer moments and iteration atomically.
pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let a = state.opt_g.config;
    let header = CheckpointHeader {
        net: state.bundle.config.clone(),
        iteration: state.iteration,
        seed: state.bundle.seed,
        adam: AdamHeader {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        },
        opt_g_steps: state.opt_g.steps,
        opt_d_steps: state.opt_d.steps,
        gate: state.bundle.style_gate.as_ref().map(|g| GateHeader {
            patch_size: g.ae.patch_size,
            width: g.ae.width,
            dim: g.ae.dim,
            target_id: g.target_id,
        }),
    };
    let mut tensors = state.bundle.to_tensors();
    for (k, v) in state.opt_g.state_tensors() {
        tensors.insert(format!("opt_g/{k}"), v);
    }
    for (k, v) in state.opt_d.state_tensors() {
        tensors.insert(format!("opt_d/{k}"), v);
    }
    let header = serde_json::to_string(&header).expect("header serializes");
    paramfile::write(path, CKPT_MAGIC, CKPT_VERSION, &header, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    const WHAT: &str = "checkpoint";
    let blob = paramfile::read(path, WHAT, CKPT_MAGIC)?;
    if blob.version != CKPT_VERSION {
        return Err(Error::format(
            WHAT,
            format!("unsupported version {}", blob.version),
        ));
    }
    let h: CheckpointHeader =
        serde_json::from_str(&blob.header).map_err(|e| Error::format(WHAT, e.to_string()))?;
    let mut gen = ParamStore::new();
    let mut disc = ParamStore::new();
    let mut opt_g = std::collections::BTreeMap::new();
    let mut opt_d = std::collections::BTreeMap::new();
    let mut gate = ParamStore::new();
    let mut centroids = None;
    let mut style = None;
    for (k, v) in blob.tensors {
        let (ns, name) = k
            .split_once('/')
            .ok_or_else(|| Error::format(WHAT, format!("unscoped tensor `{k}`")))?;
        match ns {
            "gen" => gen.insert(name, v),
            "disc" => disc.insert(name, v),
            "opt_g" => {
                opt_g.insert(name.to_string(), v);
            }
            "opt_d" => {
                opt_d.insert(name.to_string(), v);
            }
            "style" => style = Some(v.into_data()),
            "gate" if name == "centroids" => centroids = Some(v),
            "gate" => gate.insert(name, v),
            _ => {
                return Err(Error::format(
                    WHAT,
                    format!("unknown tensor namespace in `{k}`"),
                ))
            }
        }
    }
    let reference = crate::networks::init_model(&h.net, 0)?;
    let layout = |s: &ParamStore| paramfile::layout_hash(s.iter());
    if layout(&reference.gen) != layout(&gen) || layout(&reference.disc) != layout(&disc) {
        return Err(Error::format(
            WHAT,
            "parameter layout does not match the stored network config",
        ));
    }
    let style_gate = match (h.gate, centroids) {
        (Some(gh), Some(c)) => {
            let (k, d) = c.dims2();
            let reference = AeParams::init(gh.patch_size, gh.width, gh.dim, 1.0, 0)?;
            if layout(&reference.store) != layout(&gate) || d != gh.dim || gh.target_id >= k {
                return Err(Error::format(
                    WHAT,
                    "style gate tensors do not match their header",
                ));
            }
            Some(StyleGate {
                ae: AeParams {
                    store: gate,
                    patch_size: gh.patch_size,
                    width: gh.width,
                    dim: gh.dim,
                },
                centroids: c.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
                target_id: gh.target_id,
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::format(
                WHAT,
                "style gate header and tensors disagree",
            ))
        }
    };
    let adam = AdamConfig {
        lr: h.adam.lr,
        beta1: h.adam.beta1,
        beta2: h.adam.beta2,
        eps: h.adam.eps,
    };
    Ok(TrainerState {
        bundle: ModelBundle {
            config: h.net,
            gen,
            disc,
            mean_target_style: style,
            style_gate,
            seed: h.seed,
        },
        opt_g: Adam::from_state(adam, h.opt_g_steps, opt_g),
        opt_d: Adam::from_state(adam, h.opt_d_steps, opt_d),
        iteration: h.iteration,
    })
}
