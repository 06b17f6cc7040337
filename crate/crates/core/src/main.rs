use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fundus_enhance::degrade::{
    degrade, read_pairs, write_pairs, DegradationSpec, PairEntry, PairedSample,
};
use fundus_enhance::enhance::{enhance_image, evaluate, EnhanceConfig};
use fundus_enhance::imagedata::{
    list_images, load_image, patchify, save_png, DatasetManifest, PatchRecord, Split,
};
use fundus_enhance::pipeline::{run_e2e, sweep, sweep_table, E2eConfig, Knob};
use fundus_enhance::quality::{
    partition, train_quality_classifier, ClassifierParams, QaTrainConfig,
};
use fundus_enhance::stylecluster::{
    cluster_styles, embed, nearest_centroid, train_style_autoencoder, AeParams, AeTrainConfig,
    StyleDomains, StyleGate,
};
use fundus_enhance::synth::{synth_corpus, SynthConfig};
use fundus_enhance::trainer::{
    compute_target_style_code, load_checkpoint, save_checkpoint, train_from, Domains, RunConfig,
    TrainOutput, TrainerState,
};

#[derive(Parser)]
#[command(
    name = "fundus-enhance",
    version,
    about = "Reference-free fundus image enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic fundus-like corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Degrade every image in a directory and write a pair listing.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
    /// Train the patch quality classifier from a labeled manifest.
    TrainQa {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        geom: Geometry,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
    },
    /// Embed high-quality patches and cluster them into style domains.
    Cluster {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        geom: Geometry,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train the translation networks.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        domains: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/latest.ckpt` if present.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Enhance every image in a directory.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[command(flatten)]
        opts: EnhanceOpts,
    },
    /// Score enhanced images against clean references.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        panels: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[command(flatten)]
        opts: EnhanceOpts,
    },
    /// Run the synthetic end-to-end experiment.
    E2e {
        #[command(flatten)]
        run: RunOpts,
    },
    /// Repeat the end-to-end experiment across values of one knob.
    Sweep {
        #[arg(long, value_enum)]
        knob: KnobArg,
        /// Comma-separated values, or a range `a..b` (inclusive).
        #[arg(long)]
        values: String,
        /// Where to write the metric table; printed to stdout as well.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
}

#[derive(Args, Clone, Copy)]
struct Geometry {
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 128)]
    patch: usize,
}

#[derive(Args, Clone, Copy)]
struct EnhanceOpts {
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Leave HIGH non-target patches untouched.
    #[arg(long)]
    no_style_align: bool,
    /// Re-style HIGH target-style patches too.
    #[arg(long)]
    no_pass_through: bool,
}

#[derive(Args, Clone)]
struct RunOpts {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    qa_epochs: Option<usize>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[command(flatten)]
    opts: EnhanceOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum KnobArg {
    K,
    Patch,
}

impl EnhanceOpts {
    fn config(&self, patch_size: usize) -> EnhanceConfig {
        EnhanceConfig {
            patch_size,
            quality_threshold: self.threshold,
            style_align_all: !self.no_style_align,
            pass_through_target: !self.no_pass_through,
        }
    }
}

impl RunOpts {
    fn config(&self) -> E2eConfig {
        let mut c = E2eConfig::desk(self.seed);
        c.n_images = self.images;
        c.n_test = self.test;
        c.synth.size = self.size;
        c.k = self.k;
        c.set_patch_size(self.patch);
        c.enhance = self.opts.config(self.patch);
        if let Some(i) = self.iters {
            c.train.max_iters = i;
        }
        if let Some(b) = self.batch {
            c.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(e) = self.qa_epochs {
            c.qa.epochs = e;
        }
        if let Some(e) = self.ae_epochs {
            c.ae.epochs = e;
        }
        c.out_dir = self.out.clone();
        c
    }
}

fn parse_values(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty range {s}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("bad value `{v}`"))
        })
        .collect()
}

fn load_patches(paths: &[PathBuf], size: usize, patch: usize) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for p in paths {
        let img = load_image(p, size)?;
        out.extend(patchify(&img, patch)?.patches);
    }
    Ok(out)
}

fn training_paths(manifest: &DatasetManifest) -> Vec<PathBuf> {
    let has_splits = manifest.entries.iter().any(|e| e.split.is_some());
    manifest
        .entries
        .iter()
        .filter(|e| !has_splits || e.split == Some(Split::Train))
        .map(|e| manifest.resolve(e))
        .collect()
}

fn domains_ae_path(domains_file: &Path, d: &StyleDomains) -> Result<PathBuf> {
    let rel = d
        .ae_params
        .as_ref()
        .context("domains file does not reference autoencoder parameters")?;
    Ok(domains_file.parent().unwrap_or(Path::new("")).join(rel))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                size,
                ..Default::default()
            };
            for img in synth_corpus(&cfg, count, seed) {
                save_png(&img.record.pixels, out.join(&img.record.source_path))?;
            }
            info!("wrote {count} images to {}", out.display());
        }
        Command::Degrade {
            input,
            out,
            spec,
            seed,
            size,
        } => {
            let spec = DegradationSpec::load(&spec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut entries = Vec::new();
            for (i, path) in list_images(&input)?.iter().enumerate() {
                let img = load_image(path, size)?;
                let s = seed.wrapping_add(i as u64);
                let pair = degrade(&img, &spec, s)?;
                let name = path
                    .file_stem()
                    .context("image without a file name")?
                    .to_string_lossy();
                let clean = out.join(format!("{name}_clean.png"));
                let degraded = out.join(format!("{name}_degraded.png"));
                save_png(&pair.clean.pixels, &clean)?;
                save_png(&pair.degraded.pixels, &degraded)?;
                entries.push(PairEntry {
                    clean: clean.file_name().unwrap().into(),
                    degraded: degraded.file_name().unwrap().into(),
                    seed: s,
                });
            }
            write_pairs(&out.join("pairs.tsv"), &entries)?;
            info!("degraded {} images", entries.len());
        }
        Command::TrainQa {
            manifest,
            out,
            seed,
            geom,
            epochs,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            m.check_paths()?;
            let mut labeled = Vec::new();
            for e in &m.entries {
                let Some(label) = e.label else { continue };
                let img = load_image(m.resolve(e), geom.size)?;
                for p in patchify(&img, geom.patch)?.patches {
                    labeled.push((p.pixels, label));
                }
            }
            let cfg = QaTrainConfig {
                seed,
                epochs,
                ..Default::default()
            };
            let report = train_quality_classifier(&labeled, &cfg)?;
            report.params.save(&out)?;
            println!("train_accuracy\t{:.4}", report.train_accuracy);
        }
        Command::Cluster {
            patches,
            qa,
            k,
            seed,
            out,
            geom,
            dim,
            epochs,
            threshold,
        } => {
            let qa = ClassifierParams::load(&qa)?;
            let all = load_patches(&list_images(&patches)?, geom.size, geom.patch)?;
            let part = partition(&all, &qa, threshold)?;
            let high: Vec<&PatchRecord> = part.high.iter().collect();
            let cfg = AeTrainConfig {
                dim,
                epochs,
                seed,
                ..Default::default()
            };
            let ae =
                train_style_autoencoder(&high.iter().map(|p| &p.pixels).collect::<Vec<_>>(), &cfg)?;
            let embeddings = high
                .iter()
                .map(|p| embed(p, &ae.params))
                .collect::<Result<Vec<_>, _>>()?;
            let mut domains = cluster_styles(&embeddings, k, seed)?;
            let ae_name = format!(
                "{}.ae",
                out.file_stem()
                    .context("output needs a file name")?
                    .to_string_lossy()
            );
            ae.params.save(out.with_file_name(&ae_name))?;
            domains.ae_params = Some(ae_name.into());
            domains.save(&out)?;
            println!(
                "sizes\t{:?}\ttarget\t{}",
                domains.sizes(),
                domains.target_id
            );
        }
        Command::Train {
            manifest,
            qa,
            domains,
            config,
            out,
            resume,
            size,
            threshold,
        } => {
            let run = RunConfig::load(&config)?;
            let qa = ClassifierParams::load(&qa)?;
            let doms = StyleDomains::load(&domains)?;
            let ae = AeParams::load(domains_ae_path(&domains, &doms)?)?;
            let m = DatasetManifest::load(&manifest)?;
            m.check_paths()?;
            let all = load_patches(&training_paths(&m), size, run.net.patch_size)?;
            let part = partition(&all, &qa, threshold)?;
            let mut sets = Domains {
                low: part.low.iter().map(|p| p.pixels.clone()).collect(),
                ..Default::default()
            };
            for p in &part.high {
                let cluster = match doms.assignments.get(&p.id()) {
                    Some(&c) => c,
                    None => nearest_centroid(&embed(p, &ae)?.vector, &doms.centroids),
                };
                if cluster == doms.target_id {
                    sets.high_target.push(p.pixels.clone());
                } else {
                    sets.high_source.push(p.pixels.clone());
                }
            }
            let latest = out.join(fundus_enhance::trainer::LATEST_CHECKPOINT);
            let mut state = if resume && latest.exists() {
                load_checkpoint(&latest)?
            } else {
                let bundle = fundus_enhance::networks::init_model(&run.net, run.train.seed)?;
                TrainerState::new(bundle, &run.train)
            };
            let output = TrainOutput {
                dir: Some(out.clone()),
            };
            train_from(&mut state, &sets, &run.train, &output)?;
            let target: Vec<_> = sets.high_target.iter().collect();
            compute_target_style_code(&mut state.bundle, &target)?;
            state.bundle.style_gate = Some(StyleGate {
                ae,
                centroids: doms.centroids.clone(),
                target_id: doms.target_id,
            });
            save_checkpoint(&state, &out.join("final.ckpt"))?;
            info!("trained to iteration {}", state.iteration);
        }
        Command::Enhance {
            input,
            ckpt,
            qa,
            out,
            size,
            opts,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let qa = ClassifierParams::load(&qa)?;
            let cfg = opts.config(state.bundle.config.patch_size);
            for path in list_images(&input)? {
                let img = load_image(&path, size)?;
                let e = enhance_image(&img, &state.bundle, &qa, &cfg)?;
                save_png(
                    &e.image.pixels,
                    out.join(path.file_name().unwrap()).with_extension("png"),
                )?;
            }
        }
        Command::Eval {
            pairs,
            ckpt,
            qa,
            report,
            panels,
            size,
            opts,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let qa = ClassifierParams::load(&qa)?;
            let cfg = opts.config(state.bundle.config.patch_size);
            let mut samples = Vec::new();
            for e in read_pairs(&pairs)? {
                samples.push(PairedSample {
                    clean: load_image(&e.clean, size)?,
                    degraded: load_image(&e.degraded, size)?,
                    spec: DegradationSpec::default(),
                    seed: e.seed,
                });
            }
            if let Some(dir) = &panels {
                fs::create_dir_all(dir)?;
            }
            let r = evaluate(&samples, &state.bundle, &qa, &cfg, panels.as_deref())?;
            r.save(&report)?;
            println!(
                "psnr\t{:.4}\t{:.4}\nssim\t{:.4}\t{:.4}",
                r.mean_psnr_input, r.mean_psnr, r.mean_ssim_input, r.mean_ssim
            );
        }
        Command::E2e { run } => {
            let r = run_e2e(&run.config())?;
            let rep = &r.report;
            if let Some(dir) = &run.out {
                rep.save(dir.join("report.tsv"))?;
            }
            println!(
                "psnr\t{:.4}\t{:.4}\nssim\t{:.4}\t{:.4}\ndomains\t{:?}",
                rep.mean_psnr_input,
                rep.mean_psnr,
                rep.mean_ssim_input,
                rep.mean_ssim,
                r.domain_sizes
            );
        }
        Command::Sweep {
            knob,
            values,
            table,
            run,
        } => {
            let knob = match knob {
                KnobArg::K => Knob::Clusters,
                KnobArg::Patch => Knob::PatchSize,
            };
            let rows = sweep(&run.config(), knob, &parse_values(&values)?)?;
            let text = sweep_table(knob, &rows);
            if let Some(path) = table {
                fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
