//! `scgn <command> --config <path> [overrides]`
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime abort.

mod config;
mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use scgn::arch::{reference_table, ArchConfig, CANONICAL_RESOLUTION};
use scgn::checkpoint::{self, Checkpoint};
use scgn::data::{self, PreprocessConfig, Split, ViewTriplet};
use scgn::layers::{validate_against_table, NetworkSpec};
use scgn::metrics;
use scgn::models::{ModelBundle, ModelConfig};
use scgn::params::InitConfig;
use scgn::trainer::{self, GradCheckConfig, TrainConfig};
use scgn::Image;

use config::RunConfig;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "scgn", version, about = "Train and evaluate middle-view synthesis networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration (flat keys, see README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run the alternating training loop.
    Train,
    /// Synthesize a middle view from a left and a right view.
    Synthesize,
    /// Decompose a middle view into left and right views.
    Decompose,
    /// Score checkpoints on a dataset split.
    Evaluate,
    /// Check network output sizes against the reference tables.
    ValidateArch,
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck,
}

#[derive(clap::Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    #[arg(long, global = true)]
    split: Option<String>,
    /// Use this many procedural triplets instead of a dataset.
    #[arg(long, global = true)]
    synthetic: Option<usize>,
    #[arg(long, global = true)]
    synthetic_seed: Option<u64>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Channel multiplier (1.0 = full widths).
    #[arg(long, global = true)]
    width: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr_generator: Option<f64>,
    #[arg(long, global = true)]
    lr_discriminator: Option<f64>,
    #[arg(long, global = true)]
    decay_at_iteration: Option<u64>,
    #[arg(long, global = true)]
    decay_factor: Option<f64>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    lambda3: Option<f64>,
    #[arg(long, global = true)]
    init_std: Option<f64>,
    #[arg(long, global = true)]
    checkpoint_interval: Option<u64>,
    #[arg(long, global = true)]
    log_every: Option<u64>,
    /// no-vdn, mvdn, no-adv, no-sharp or mvsn; repeatable.
    #[arg(long, global = true)]
    ablation: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue training from a checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Checkpoint file or directory of checkpoints; repeatable.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long = "out", global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    left: Option<PathBuf>,
    #[arg(long, global = true)]
    right: Option<PathBuf>,
    #[arg(long, global = true)]
    middle: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Also write a left | synthesized | right comparison image.
    #[arg(long, global = true)]
    grid: bool,
    /// Network definition JSON to validate instead of the built-in ones; repeatable.
    #[arg(long, global = true)]
    spec: Vec<PathBuf>,
    #[arg(long, global = true)]
    gradcheck_samples: Option<usize>,
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $(if self.$f.is_some() { c.$f = self.$f; })* };
        }
        set!(
            synthetic_seed, resolution, width, iterations, batch_size, lr_generator, lr_discriminator,
            decay_at_iteration, decay_factor, lambda1, lambda2, lambda3, init_std, checkpoint_interval,
            log_every, output_dir, gradcheck_samples
        );
        set_opt!(dataset_root, split, synthetic, seed, resume, left, right, middle, output);
        c.ablation.extend(self.ablation);
        if !self.checkpoint.is_empty() {
            c.checkpoint = self.checkpoint;
        }
        if !self.spec.is_empty() {
            c.spec = self.spec;
        }
        c.grid |= self.grid;
    }
}

/// A configuration or input problem detected before any work is done.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<Invalid>() || c.is::<serde_json::Error>()) {
        return 1;
    }
    match e.chain().find_map(|c| c.downcast_ref::<scgn::Error>()) {
        Some(scgn::Error::Io(_) | scgn::Error::Image(_) | scgn::Error::NonFinite(_)) | None => 2,
        Some(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| invalid(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    if cfg.resume.is_some() && cfg.seed.is_some() {
        return Err(invalid(
            "`resume` continues the checkpoint's random stream; remove the `seed` setting",
        ));
    }
    let seed = match cfg.seed {
        Some(s) => s,
        None => match std::env::var("SCGN_SEED") {
            Ok(v) => v.parse().map_err(|_| invalid(format!("SCGN_SEED=`{v}` is not an integer")))?,
            Err(_) => 0,
        },
    };
    match cli.command {
        Command::Train => train(&cfg, seed),
        Command::Synthesize => synthesize(&cfg),
        Command::Decompose => decompose(&cfg),
        Command::Evaluate => evaluate(&cfg),
        Command::ValidateArch => validate_arch(&cfg),
        Command::Gradcheck => gradcheck(&cfg, seed),
    }
}

fn load_dataset(cfg: &RunConfig, resolution: usize, default_split: Split) -> Result<Vec<ViewTriplet>> {
    if let Some(n) = cfg.synthetic {
        return Ok(data::synth_triplets(n, resolution, cfg.synthetic_seed)?);
    }
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| invalid("set `dataset_root` or `synthetic`"))?;
    let split = match &cfg.split {
        Some(s) => s.parse()?,
        None => default_split,
    };
    let manifest = data::load_manifest(root, split, resolution)?;
    Ok(manifest.load(cfg.resize)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Rejects a checkpoint whose architecture differs from the configuration.
fn check_matches(cfg: &RunConfig, bundle: &ModelBundle) -> Result<()> {
    let arch = &bundle.config.arch;
    if arch.resolution != cfg.resolution {
        return Err(invalid(format!(
            "checkpoint is for {0}x{0} inputs, configuration says {1}x{1}",
            arch.resolution, cfg.resolution
        )));
    }
    if arch.width != cfg.width {
        return Err(invalid(format!(
            "checkpoint has width {}, configuration says {}",
            arch.width, cfg.width
        )));
    }
    let want = cfg.ablation()?;
    if arch.ablation != want {
        return Err(invalid(format!(
            "checkpoint ablation {:?} differs from configured {:?}",
            arch.ablation.tags(),
            want.tags()
        )));
    }
    Ok(())
}

fn train(cfg: &RunConfig, seed: u64) -> Result<u8> {
    let (mut bundle, state, tcfg) = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            check_matches(cfg, &ck.bundle)?;
            let prev_seed = ck.train.as_ref().map_or(0, |t| t.seed);
            let tcfg = cfg.train_config(prev_seed)?;
            if ck.state.iteration >= tcfg.total_iterations {
                return Err(invalid(format!(
                    "checkpoint is already at iteration {}",
                    ck.state.iteration
                )));
            }
            (ck.bundle, Some(ck.state), tcfg)
        }
        None => {
            let tcfg = cfg.train_config(seed)?;
            let model = ModelConfig {
                arch: ArchConfig {
                    resolution: cfg.resolution,
                    width: cfg.width,
                    upsample: cfg.upsample,
                    ablation: tcfg.ablation,
                    ..Default::default()
                },
                init: InitConfig { std: cfg.init_std },
                seed,
            };
            (ModelBundle::build(model)?, None, tcfg)
        }
    };
    let dataset = load_dataset(cfg, cfg.resolution, Split::Train)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let effective = RunConfig {
        seed: cfg.resume.is_none().then_some(seed),
        ..cfg.clone()
    };
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(&effective)?)?;
    let log_every = cfg.log_every.max(1);
    let state = trainer::fit(&mut bundle, &dataset, &tcfg, state, Some(out), |t, r| {
        if t % log_every == 0 {
            eprintln!(
                "iter {t}: l_p {:.5} l_vc {:.5} l_adv {:.5} l_sharp {:.5} l_g {:.5} l_disc {:.5}",
                r.l_p, r.l_vc, r.l_adv, r.l_sharp, r.l_g_total, r.l_disc
            );
        }
    })?;
    println!(
        "trained to iteration {}; wrote {}",
        state.iteration,
        out.join(checkpoint::file_name(state.iteration)).display()
    );
    Ok(0)
}

fn bundle_from_checkpoint(cfg: &RunConfig) -> Result<ModelBundle> {
    let path = cfg
        .checkpoint
        .last()
        .ok_or_else(|| invalid("set `checkpoint`"))?;
    Ok(load_checkpoint(path)?.bundle)
}

/// Reads a view that must already be at the model resolution.
fn read_view(path: &Path, resolution: usize, what: &str) -> Result<Image> {
    let raw = Image::load_png(path).with_context(|| format!("reading {what} view {}", path.display()))?;
    if raw.height != resolution || raw.width != resolution {
        return Err(invalid(format!(
            "{what} view {} is {}x{}, expected {resolution}x{resolution}",
            path.display(),
            raw.width,
            raw.height
        )));
    }
    Ok(data::preprocess(
        &raw,
        &PreprocessConfig {
            resolution,
            interpolation: Default::default(),
        },
    )?)
}

fn write_view(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (raw, clamped) = data::denormalize(img);
    if clamped > 0 {
        eprintln!("warning: {clamped} values clamped when writing {}", path.display());
    }
    raw.save_png(path)?;
    Ok(())
}

fn synthesize(cfg: &RunConfig) -> Result<u8> {
    let bundle = bundle_from_checkpoint(cfg)?;
    let res = bundle.resolution();
    let left = read_view(cfg.require(&cfg.left, "left")?, res, "left")?;
    let right = read_view(cfg.require(&cfg.right, "right")?, res, "right")?;
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("synthesized.png"));
    let mid = bundle.synthesize(&left, &right)?;
    write_view(&mid, &out)?;
    println!("wrote {}", out.display());
    if cfg.grid {
        let grid_path = out.with_file_name(format!(
            "{}_grid.png",
            out.file_stem().map_or("synthesized".into(), |s| s.to_string_lossy())
        ));
        plot::grid(&[&left, &mid, &right])?.save(&grid_path)?;
        println!("wrote {}", grid_path.display());
    }
    Ok(0)
}

fn decompose(cfg: &RunConfig) -> Result<u8> {
    let bundle = bundle_from_checkpoint(cfg)?;
    let middle = read_view(cfg.require(&cfg.middle, "middle")?, bundle.resolution(), "middle")?;
    let (l, r) = bundle.decompose(&middle)?;
    for (img, name) in [(&l, "decomposed_left.png"), (&r, "decomposed_right.png")] {
        let p = cfg.output_dir.join(name);
        write_view(img, &p)?;
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn checkpoint_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in &cfg.checkpoint {
        if p.is_dir() {
            out.extend(checkpoint::list(p)?.into_iter().map(|(_, p)| p));
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(invalid("set `checkpoint` to a checkpoint file or directory"));
    }
    Ok(out)
}

fn evaluate(cfg: &RunConfig) -> Result<u8> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut curve = Vec::new();
    for path in checkpoint_paths(cfg)? {
        let ck = load_checkpoint(&path)?;
        if !cfg.ablation.is_empty() && ck.bundle.ablation() != cfg.ablation()? {
            return Err(invalid(format!(
                "{} was trained with ablation {:?}, not {:?}",
                path.display(),
                ck.bundle.ablation().tags(),
                cfg.ablation()?.tags()
            )));
        }
        let res = ck.bundle.resolution();
        let dataset = load_dataset(cfg, res, Split::Test)?;
        let sharp = RunConfig {
            resolution: res,
            ..cfg.clone()
        }
        .sharpness();
        let mut report = metrics::evaluate_dataset(&ck.bundle, &dataset, &sharp)?;
        let it = ck.state.iteration;
        report.iteration = Some(it);
        report.write_json(&out.join(format!("metrics_{it}.json")))?;
        report.write_csv(&out.join(format!("metrics_{it}.csv")))?;
        println!(
            "iteration {it}: psnr {} ms_ssim {:.4} mmse {:.3} l1 {:.5} q_s {:.5}/{:.5} ablation {:?}",
            report.psnr, report.ms_ssim, report.mmse, report.l1, report.q_s_pred, report.q_s_ref, report.ablation
        );
        curve.push((it, report.psnr));
    }
    if curve.len() > 1 {
        curve.sort_by_key(|(it, _)| *it);
        let mut csv = String::from("iteration,psnr\n");
        for (it, p) in &curve {
            csv.push_str(&format!("{it},{p}\n"));
        }
        fs::write(out.join("psnr_vs_iteration.csv"), csv)?;
        let points: Vec<(f64, f64)> = curve
            .iter()
            .filter_map(|(it, p)| p.finite().map(|v| (*it as f64, v)))
            .collect();
        plot::curve(&points).save(out.join("psnr_vs_iteration.png"))?;
        println!("wrote {}", out.join("psnr_vs_iteration.png").display());
    }
    Ok(0)
}

fn validate_arch(cfg: &RunConfig) -> Result<u8> {
    let networks: Vec<NetworkSpec> = if cfg.spec.is_empty() {
        let arch = ArchConfig {
            resolution: cfg.resolution,
            ..Default::default()
        };
        scgn::arch::check_resolution(cfg.resolution)?;
        vec![
            arch.vsn_encoder(),
            arch.vsn_decoder()?,
            arch.vdn_encoder(),
            arch.vdn_decoder("vdn_decoder_l")?,
            arch.vdn_decoder("vdn_decoder_r")?,
            arch.discriminator(),
        ]
    } else {
        cfg.spec
            .iter()
            .map(|p| -> Result<NetworkSpec> {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            })
            .collect::<Result<_>>()?
    };
    let mut ok = true;
    for net in &networks {
        net.validate()?;
        let res = net.inputs.first().map_or(0, |i| i.shape.height);
        let canonical = net.inputs.iter().all(|i| i.name != "image" || i.shape.height == CANONICAL_RESOLUTION)
            && cfg.resolution == CANONICAL_RESOLUTION;
        let table = reference_table(&net.name);
        match (canonical, table) {
            (true, Some(table)) => {
                let report = validate_against_table(net, &table)?;
                print!("{report}");
                if let Some(f) = report.first_failure() {
                    ok = false;
                    println!(
                        "  first failing layer: {} (expected {}, inferred {})",
                        f.layer, f.expected, f.inferred
                    );
                }
            }
            (true, None) => println!("[{}]\n  no reference table for this network", net.name),
            (false, _) => {
                println!("[{}] at {res}x{res} inputs", net.name);
                for (layer, shape) in net.infer_shapes()? {
                    println!("  {layer:<10} {shape}");
                }
                println!("  table comparison skipped (non-canonical resolution)");
            }
        }
    }
    Ok(if ok { 0 } else { 1 })
}

fn gradcheck(cfg: &RunConfig, seed: u64) -> Result<u8> {
    let ablation = cfg.ablation()?;
    let bundle = ModelBundle::build(ModelConfig::tiny(ablation, seed))?;
    let triplet = data::synth_triplets(1, bundle.resolution(), cfg.synthetic_seed)?.remove(0);
    let train = TrainConfig {
        ablation,
        ..Default::default()
    };
    let gc = GradCheckConfig {
        samples_per_objective: cfg.gradcheck_samples,
        seed,
        ..Default::default()
    };
    let report = trainer::gradient_check(&bundle, &triplet, &train, &gc)?;
    for p in scgn::params::Partition::ALL {
        println!("{p}: {} parameters", bundle.params.count(p));
    }
    println!(
        "checked {} entries, skipped {} at kinks, max relative error {:e}",
        report.samples.len(),
        report.skipped,
        report.max_rel_error
    );
    if !cfg.output_dir.as_os_str().is_empty() && cfg.output_dir != RunConfig::default().output_dir {
        fs::create_dir_all(&cfg.output_dir)?;
        fs::write(cfg.output_dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    }
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 1 })
}
