//! Encoders, generators and discriminators.
//!
//! All sub-networks live in two parameter stores: `gen` holds the five
//! encoders and three generators, `disc` holds the content discriminator and
//! the three image discriminators. Weights are never shared; each network
//! owns its own name prefix.

use std::collections::BTreeMap;

use fundus_nn::{softmax_rows, Bind, Conv2d, GaussianInit, Graph, Linear, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stylecluster::StyleGate;

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub patch_size: usize,
    pub content_channels: usize,
    pub quality_dim: usize,
    pub style_dim: usize,
    pub residual_blocks: usize,
    pub base_width: usize,
    pub init_std: f64,
    /// Instance normalization inside the content encoders.
    pub content_norm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            content_channels: 256,
            quality_dim: 8,
            style_dim: 8,
            residual_blocks: 4,
            base_width: 64,
            init_std: 0.02,
            content_norm: true,
        }
    }
}

impl NetConfig {
    /// A tiny configuration for tests: 8x8 patches, width 4.
    pub fn thumbnail() -> Self {
        Self {
            patch_size: 8,
            content_channels: 8,
            quality_dim: 2,
            style_dim: 2,
            residual_blocks: 1,
            base_width: 4,
            init_std: 0.3,
            content_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return bad("patch_size must be a positive multiple of 4");
        }
        if self.content_channels < 4 || !self.content_channels.is_multiple_of(4) {
            return bad("content_channels must be a positive multiple of 4");
        }
        if self.quality_dim == 0 || self.style_dim == 0 || self.base_width == 0 {
            return bad("code dimensions and base_width must be positive");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn content_side(&self) -> usize {
        self.patch_size / 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderRole {
    ContentL,
    ContentS,
    ContentT,
    Quality,
    Style,
}

impl EncoderRole {
    pub const ALL: [EncoderRole; 5] = [
        EncoderRole::ContentL,
        EncoderRole::ContentS,
        EncoderRole::ContentT,
        EncoderRole::Quality,
        EncoderRole::Style,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            EncoderRole::ContentL => "enc_content_l",
            EncoderRole::ContentS => "enc_content_s",
            EncoderRole::ContentT => "enc_content_t",
            EncoderRole::Quality => "enc_quality",
            EncoderRole::Style => "enc_style",
        }
    }

    pub fn is_content(self) -> bool {
        matches!(
            self,
            EncoderRole::ContentL | EncoderRole::ContentS | EncoderRole::ContentT
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "content_L" | "content_l" => Ok(EncoderRole::ContentL),
            "content_S" | "content_s" => Ok(EncoderRole::ContentS),
            "content_T" | "content_t" => Ok(EncoderRole::ContentT),
            "quality" => Ok(EncoderRole::Quality),
            "style" => Ok(EncoderRole::Style),
            other => Err(Error::Argument(format!("unknown encoder role `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorId {
    /// `G_L`: content plus quality code to a low-quality patch.
    Low,
    /// `G_H^S`: content only to a high-quality source-style patch.
    HighSource,
    /// `G_H^T`: content plus style code to a target-style patch.
    HighTarget,
}

impl GeneratorId {
    pub const ALL: [GeneratorId; 3] = [
        GeneratorId::Low,
        GeneratorId::HighSource,
        GeneratorId::HighTarget,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            GeneratorId::Low => "gen_low",
            GeneratorId::HighSource => "gen_high_source",
            GeneratorId::HighTarget => "gen_high_target",
        }
    }

    fn code_dim(self, cfg: &NetConfig) -> usize {
        match self {
            GeneratorId::Low => cfg.quality_dim,
            GeneratorId::HighSource => 0,
            GeneratorId::HighTarget => cfg.style_dim,
        }
    }
}

/// Image domains, one discriminator each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageDomain {
    Low,
    High,
    Target,
}

impl ImageDomain {
    pub const ALL: [ImageDomain; 3] = [ImageDomain::Low, ImageDomain::High, ImageDomain::Target];

    pub fn prefix(self) -> &'static str {
        match self {
            ImageDomain::Low => "disc_img_l",
            ImageDomain::High => "disc_img_h",
            ImageDomain::Target => "disc_img_t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(ImageDomain::Low),
            "H" | "h" => Ok(ImageDomain::High),
            "T" | "t" => Ok(ImageDomain::Target),
            other => Err(Error::Argument(format!("unknown image domain `{other}`"))),
        }
    }
}

pub const CONTENT_DISC: &str = "disc_content";

/// A latent code passed to a generator.
#[derive(Clone, Copy, Debug)]
pub enum Code {
    Quality(Var),
    Style(Var),
}

struct ResBlock {
    c0: Conv2d,
    c1: Conv2d,
    norm: bool,
}

impl ResBlock {
    fn new(prefix: &str, i: usize, ch: usize, norm: bool) -> Self {
        Self {
            c0: Conv2d::new(format!("{prefix}.res{i}.c0"), ch, ch, 3, 1, 1),
            c1: Conv2d::new(format!("{prefix}.res{i}.c1"), ch, ch, 3, 1, 1),
            norm,
        }
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Var {
        let mut h = self.c0.forward(g, p, x);
        if self.norm {
            h = g.instance_norm(h);
        }
        h = g.leaky_relu(h, SLOPE);
        h = self.c1.forward(g, p, h);
        if self.norm {
            h = g.instance_norm(h);
        }
        g.add(x, h)
    }
}

struct ContentEncoder {
    convs: [Conv2d; 3],
    res: Vec<ResBlock>,
    norm: bool,
}

impl ContentEncoder {
    fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let w = cfg.base_width;
        let cc = cfg.content_channels;
        Self {
            convs: [
                Conv2d::new(format!("{prefix}.c0"), 3, w, 5, 1, 2),
                Conv2d::new(format!("{prefix}.c1"), w, 2 * w, 4, 2, 1),
                Conv2d::new(format!("{prefix}.c2"), 2 * w, cc, 4, 2, 1),
            ],
            res: (0..cfg.residual_blocks)
                .map(|i| ResBlock::new(prefix, i, cc, cfg.content_norm))
                .collect(),
            norm: cfg.content_norm,
        }
    }

    fn init(&self, store: &mut ParamStore, init: GaussianInit, rng: &mut ChaCha8Rng) {
        for c in &self.convs {
            c.init(store, init, rng);
        }
        for r in &self.res {
            r.c0.init(store, init, rng);
            r.c1.init(store, init, rng);
        }
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            if self.norm {
                h = g.instance_norm(h);
            }
            h = g.leaky_relu(h, SLOPE);
        }
        for r in &self.res {
            h = r.forward(g, p, h);
        }
        h
    }
}

struct CodeEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl CodeEncoder {
    fn new(cfg: &NetConfig, prefix: &str, dim: usize) -> Self {
        let w = cfg.base_width;
        let widths = [w, 2 * w, 4 * w, 4 * w, 4 * w];
        let mut convs = vec![Conv2d::new(format!("{prefix}.c0"), 3, w, 5, 1, 2)];
        for i in 1..5 {
            convs.push(Conv2d::new(
                format!("{prefix}.c{i}"),
                widths[i - 1],
                widths[i],
                3,
                2,
                1,
            ));
        }
        Self {
            convs,
            head: Linear::new(format!("{prefix}.fc"), 4 * w, dim),
        }
    }

    fn init(&self, store: &mut ParamStore, init: GaussianInit, rng: &mut ChaCha8Rng) {
        for c in &self.convs {
            c.init(store, init, rng);
        }
        self.head.init(store, init, rng);
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, p, pooled)
    }
}

struct Generator {
    fuse: Conv2d,
    res: Vec<ResBlock>,
    up: [Conv2d; 2],
    out: Conv2d,
}

impl Generator {
    fn new(cfg: &NetConfig, prefix: &str, code_dim: usize) -> Self {
        let cc = cfg.content_channels;
        Self {
            fuse: Conv2d::new(format!("{prefix}.fuse"), cc + code_dim, cc, 3, 1, 1),
            // No normalization here: a per-instance norm would cancel the
            // spatially constant contribution of the concatenated code.
            res: (0..cfg.residual_blocks)
                .map(|i| ResBlock::new(prefix, i, cc, false))
                .collect(),
            up: [
                Conv2d::new(format!("{prefix}.up0"), cc, cc / 2, 3, 1, 1),
                Conv2d::new(format!("{prefix}.up1"), cc / 2, cc / 4, 3, 1, 1),
            ],
            out: Conv2d::new(format!("{prefix}.out"), cc / 4, 3, 5, 1, 2),
        }
    }

    fn init(&self, store: &mut ParamStore, init: GaussianInit, rng: &mut ChaCha8Rng) {
        self.fuse.init(store, init, rng);
        for r in &self.res {
            r.c0.init(store, init, rng);
            r.c1.init(store, init, rng);
        }
        for c in &self.up {
            c.init(store, init, rng);
        }
        self.out.init(store, init, rng);
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, content: Var, code: Option<Var>) -> Var {
        let mut h = content;
        if let Some(code) = code {
            let (_, _, hh, ww) = g.value(content).dims4();
            let tiled = g.broadcast_spatial(code, hh, ww);
            h = g.concat_channels(h, tiled);
        }
        h = self.fuse.forward(g, p, h);
        h = g.leaky_relu(h, SLOPE);
        for r in &self.res {
            h = r.forward(g, p, h);
        }
        for c in &self.up {
            h = g.upsample2x(h);
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, SLOPE);
        }
        h = self.out.forward(g, p, h);
        g.sigmoid(h)
    }
}

struct ContentDisc {
    convs: [Conv2d; 2],
    head: Linear,
}

impl ContentDisc {
    fn new(cfg: &NetConfig) -> Self {
        let w = cfg.base_width;
        Self {
            convs: [
                Conv2d::new(
                    format!("{CONTENT_DISC}.c0"),
                    cfg.content_channels,
                    2 * w,
                    3,
                    1,
                    1,
                ),
                Conv2d::new(format!("{CONTENT_DISC}.c1"), 2 * w, 2 * w, 3, 2, 1),
            ],
            head: Linear::new(format!("{CONTENT_DISC}.fc"), 2 * w, 3),
        }
    }
}

struct ImageDisc {
    convs: [Conv2d; 3],
}

impl ImageDisc {
    fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let w = cfg.base_width;
        Self {
            convs: [
                Conv2d::new(format!("{prefix}.c0"), 3, w, 4, 2, 1),
                Conv2d::new(format!("{prefix}.c1"), w, 2 * w, 4, 2, 1),
                Conv2d::new(format!("{prefix}.c2"), 2 * w, 1, 3, 1, 1),
            ],
        }
    }
}

/// All learnable parameters plus inference state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    /// Encoders and generators.
    pub gen: ParamStore,
    /// Content and image discriminators.
    pub disc: ParamStore,
    /// Mean target style code, set after training.
    pub mean_target_style: Option<Vec<f64>>,
    /// Decides at inference whether a HIGH patch already has the target style.
    pub style_gate: Option<StyleGate>,
    pub seed: u64,
}

/// Weights `N(0, std^2)`, biases zero, deterministic per seed.
pub fn init_model(config: &NetConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let init = GaussianInit {
        std: config.init_std,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = ParamStore::new();
    for role in EncoderRole::ALL {
        match role {
            EncoderRole::Quality => CodeEncoder::new(config, role.prefix(), config.quality_dim)
                .init(&mut gen, init, &mut rng),
            EncoderRole::Style => CodeEncoder::new(config, role.prefix(), config.style_dim)
                .init(&mut gen, init, &mut rng),
            _ => ContentEncoder::new(config, role.prefix()).init(&mut gen, init, &mut rng),
        }
    }
    for id in GeneratorId::ALL {
        Generator::new(config, id.prefix(), id.code_dim(config)).init(&mut gen, init, &mut rng);
    }
    let mut disc = ParamStore::new();
    let dc = ContentDisc::new(config);
    for c in &dc.convs {
        c.init(&mut disc, init, &mut rng);
    }
    dc.head.init(&mut disc, init, &mut rng);
    for d in ImageDomain::ALL {
        for c in &ImageDisc::new(config, d.prefix()).convs {
            c.init(&mut disc, init, &mut rng);
        }
    }
    Ok(ModelBundle {
        config: config.clone(),
        gen,
        disc,
        mean_target_style: None,
        style_gate: None,
        seed,
    })
}

impl ModelBundle {
    fn check_patch_batch(&self, t: &Tensor) -> Result<()> {
        let p = self.config.patch_size;
        if t.shape().len() != 4 || t.shape()[1] != 3 || t.shape()[2] != p || t.shape()[3] != p {
            return Err(Error::Argument(format!(
                "expected a [N, 3, {p}, {p}] patch batch, got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn check_content(&self, t: &Tensor) -> Result<()> {
        let s = self.config.content_side();
        let c = self.config.content_channels;
        if t.shape().len() != 4 || t.shape()[1] != c || t.shape()[2] != s || t.shape()[3] != s {
            return Err(Error::Argument(format!(
                "expected a [N, {c}, {s}, {s}] content map, got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Graph-level encoder. `gen` is the store to read from, usually `self.gen`.
    pub fn encode_var(&self, g: &mut Graph, p: Bind<'_>, role: EncoderRole, x: Var) -> Var {
        let cfg = &self.config;
        match role {
            EncoderRole::Quality => {
                CodeEncoder::new(cfg, role.prefix(), cfg.quality_dim).forward(g, p, x)
            }
            EncoderRole::Style => {
                CodeEncoder::new(cfg, role.prefix(), cfg.style_dim).forward(g, p, x)
            }
            _ => ContentEncoder::new(cfg, role.prefix()).forward(g, p, x),
        }
    }

    /// Graph-level generator; checks that the code kind matches the generator.
    pub fn generate_var(
        &self,
        g: &mut Graph,
        p: Bind<'_>,
        id: GeneratorId,
        content: Var,
        code: Option<Code>,
    ) -> Result<Var> {
        let code = match (id, code) {
            (GeneratorId::HighSource, None) => None,
            (GeneratorId::Low, Some(Code::Quality(v))) => Some(v),
            (GeneratorId::HighTarget, Some(Code::Style(v))) => Some(v),
            (id, code) => {
                return Err(Error::Argument(format!(
                    "generator {} cannot take code {:?}",
                    id.prefix(),
                    code.map(|c| match c {
                        Code::Quality(_) => "quality",
                        Code::Style(_) => "style",
                    })
                )))
            }
        };
        if let Some(v) = code {
            let want = id.code_dim(&self.config);
            let shape = g.value(v).shape();
            if shape.len() != 2 || shape[1] != want {
                return Err(Error::Argument(format!(
                    "code of shape {shape:?}, expected [N, {want}]"
                )));
            }
        }
        Ok(
            Generator::new(&self.config, id.prefix(), id.code_dim(&self.config))
                .forward(g, p, content, code),
        )
    }

    /// Content discriminator logits `[N, 3]` over (L, S, T).
    pub fn content_logits_var(&self, g: &mut Graph, p: Bind<'_>, content: Var) -> Var {
        let d = ContentDisc::new(&self.config);
        let mut h = content;
        for c in &d.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        d.head.forward(g, p, pooled)
    }

    /// Image discriminator logits `[N, 1]`.
    pub fn image_logits_var(&self, g: &mut Graph, p: Bind<'_>, domain: ImageDomain, x: Var) -> Var {
        let d = ImageDisc::new(&self.config, domain.prefix());
        let mut h = x;
        for (i, c) in d.convs.iter().enumerate() {
            h = c.forward(g, p, h);
            if i + 1 < d.convs.len() {
                h = g.leaky_relu(h, SLOPE);
            }
        }
        g.global_avg_pool(h)
    }

    /// Encodes a `[N, 3, P, P]` batch.
    pub fn encode(&self, role: EncoderRole, x: &Tensor) -> Result<Tensor> {
        self.check_patch_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.encode_var(&mut g, self.gen.bind(false), role, xv);
        Ok(g.value(out).clone())
    }

    /// Generates patches from a content map and an optional code.
    pub fn generate(
        &self,
        id: GeneratorId,
        content: &Tensor,
        code: Option<(CodeKind, &Tensor)>,
    ) -> Result<Tensor> {
        self.check_content(content)?;
        let mut g = Graph::new();
        let c = g.constant(content.clone());
        let code = code.map(|(kind, t)| {
            let v = g.constant(t.clone());
            match kind {
                CodeKind::Quality => Code::Quality(v),
                CodeKind::Style => Code::Style(v),
            }
        });
        let out = self.generate_var(&mut g, self.gen.bind(false), id, c, code)?;
        Ok(g.value(out).clone())
    }

    /// Per-row probabilities over (L, S, T).
    pub fn discriminate_content(&self, content: &Tensor) -> Result<Tensor> {
        self.check_content(content)?;
        let mut g = Graph::new();
        let c = g.constant(content.clone());
        let logits = self.content_logits_var(&mut g, self.disc.bind(false), c);
        Ok(softmax_rows(g.value(logits)))
    }

    /// Realness score in `(0, 1)` for each patch.
    pub fn discriminate_image(&self, domain: ImageDomain, x: &Tensor) -> Result<Vec<f64>> {
        self.check_patch_batch(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = self.image_logits_var(&mut g, self.disc.bind(false), domain, xv);
        Ok(g.value(logits)
            .data()
            .iter()
            .map(|&z| fundus_nn::sigmoid(z))
            .collect())
    }

    /// Parameter names that belong to one network prefix.
    pub fn names_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a String> + 'a {
        self.gen
            .names()
            .chain(self.disc.names())
            .filter(move |n| n.split('.').next() == Some(prefix))
    }

    /// Every tensor of the bundle, namespaced for serialization.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in self.gen.iter() {
            out.insert(format!("gen/{k}"), v.clone());
        }
        for (k, v) in self.disc.iter() {
            out.insert(format!("disc/{k}"), v.clone());
        }
        if let Some(s) = &self.mean_target_style {
            out.insert(
                "style/mean".into(),
                Tensor::from_vec(&[s.len()], s.clone()).expect("style shape"),
            );
        }
        if let Some(gate) = &self.style_gate {
            out.extend(gate.to_tensors("gate/"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeKind {
    Quality,
    Style,
}
