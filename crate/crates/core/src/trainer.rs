//! Alternating optimization: per iteration one discriminator step, one
//! synthesis-network step and one decomposition-network step.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Ablation;
use crate::checkpoint::{self, Checkpoint};
use crate::data::ViewTriplet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{self, grad, Components, LossReport, LossWeights, SampleLosses, SharpnessConfig};
use crate::models::{ModelBundle, VdnPass, VsnPass};
use crate::optim::{learning_rate, AdamState, OptimizerConfig, Which};
use crate::params::{GradSet, Partition};
use crate::tensor::Tensor;

/// What the decomposition network reads during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VdnInput {
    /// The synthesized middle view; view-consistency gradients reach the
    /// synthesis network.
    #[default]
    Synthesized,
    /// The ground-truth middle view.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub ablation: Ablation,
    /// Save `ckpt_<t>.scgn` every this many iterations (0: only at the end).
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Defaults to [`SharpnessConfig::for_resolution`].
    pub sharpness: Option<SharpnessConfig>,
    pub vdn_input: VdnInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 371_400,
            batch_size: 1,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            ablation: Ablation::default(),
            checkpoint_interval: 10_000,
            seed: 0,
            sharpness: None,
            vdn_input: VdnInput::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations < 1 {
            return Err(Error::Config("total_iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.sharpness {
            s.validate()?;
        }
        Ok(())
    }

    /// Copy with every optional default made explicit.
    pub fn resolved(&self, resolution: usize) -> TrainConfig {
        TrainConfig {
            sharpness: Some(self.sharpness_config(resolution)),
            ..self.clone()
        }
    }

    pub fn sharpness_config(&self, resolution: usize) -> SharpnessConfig {
        self.sharpness
            .unwrap_or_else(|| SharpnessConfig::for_resolution(resolution))
    }
}

/// Mutable training state besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub adam: AdamState,
    /// Drives mini-batch sampling.
    pub rng: ChaCha8Rng,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(bundle: &ModelBundle, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            iteration: 0,
            adam: AdamState::new(&bundle.params),
            rng,
            history: Vec::new(),
        }
    }
}

/// Update sub-steps, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Discriminator,
    Generator,
    Decomposition,
}

impl Phase {
    pub fn partition(self) -> Partition {
        match self {
            Phase::Discriminator => Partition::ThetaD,
            Phase::Generator => Partition::ThetaG,
            Phase::Decomposition => Partition::ThetaV,
        }
    }
}

/// Called after each sub-step with the updated parameters and optimizer.
pub type Observer<'a> = &'a mut dyn FnMut(Phase, &ModelBundle, &AdamState);

/// Stacked views of a mini-batch.
pub struct Batch {
    pub left: Tensor,
    pub middle: Tensor,
    pub right: Tensor,
}

impl Batch {
    pub fn new(triplets: &[&ViewTriplet]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for t in triplets {
            t.check()?;
        }
        let pick = |f: fn(&ViewTriplet) -> &Image| -> Result<Tensor> {
            Image::stack(&triplets.iter().map(|t| f(t)).collect::<Vec<_>>())
        };
        Ok(Self {
            left: pick(|t| &t.left)?,
            middle: pick(|t| &t.middle)?,
            right: pick(|t| &t.right)?,
        })
    }

    pub fn len(&self) -> usize {
        self.left.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Forward {
    vsn: VsnPass,
    vdn: Option<VdnPass>,
}

fn forward_all(bundle: &ModelBundle, batch: &Batch, cfg: &TrainConfig) -> Result<Forward> {
    let vsn = bundle.vsn_forward(&batch.left, &batch.right)?;
    let vdn = if cfg.ablation.use_vdn {
        Some(bundle.vdn_forward(match cfg.vdn_input {
            VdnInput::Synthesized => &vsn.output,
            VdnInput::GroundTruth => &batch.middle,
        })?)
    } else {
        None
    };
    Ok(Forward { vsn, vdn })
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

/// `L_disc` with the synthesized view held constant; accumulates its
/// `theta_D` gradient.
fn disc_grads(bundle: &ModelBundle, real: &Tensor, fake: &Tensor, grads: &mut GradSet) -> Result<f64> {
    let pr = bundle.disc_forward(real)?;
    let pf = bundle.disc_forward(fake)?;
    let (l, gr, gf) = grad::disc(&pr.probs, &pf.probs)?;
    check_finite("l_disc", l)?;
    bundle.disc_backward(&pr, &gr, grads, false)?;
    bundle.disc_backward(&pf, &gf, grads, false)?;
    Ok(l)
}

/// Generator-loss components; accumulates `d L_G / d theta_G` into `grads_g`
/// and `d L_vc / d theta_V` into `grads_v`.
fn gen_grads(
    bundle: &ModelBundle,
    batch: &Batch,
    fwd: &Forward,
    cfg: &TrainConfig,
    grads_g: &mut GradSet,
    grads_v: &mut GradSet,
) -> Result<Components> {
    let w = &cfg.weights;
    let synth = &fwd.vsn.output;
    let n = batch.len();
    let (l_p, mut d_synth) = grad::l1(synth, &batch.middle)?;
    let mut per: Vec<SampleLosses> = grad::l1_per_sample(synth, &batch.middle)?
        .into_iter()
        .map(|l_p| SampleLosses { l_p, ..Default::default() })
        .collect();
    let mut c = Components {
        l_p: check_finite("l_p", l_p)?,
        ..Default::default()
    };

    if cfg.ablation.use_sharp {
        let sharp = cfg.sharpness_config(bundle.resolution());
        let (l, per_s, mut g) = grad::sharpness(synth, &batch.middle, &sharp)?;
        c.l_sharp = check_finite("l_sharp", l)?;
        per.iter_mut().zip(per_s).for_each(|(s, v)| s.l_sharp = v);
        g.scale(w.lambda3);
        d_synth.add_assign(&g);
    }

    if cfg.ablation.use_adv {
        let pf = bundle.disc_forward(synth)?;
        let (l, mut g) = grad::adv(&pf.probs)?;
        c.l_adv = check_finite("l_adv", l)?;
        for (s, p) in per.iter_mut().zip(&pf.probs) {
            s.l_adv = -p.clamp(losses::PROB_EPS, 1.0 - losses::PROB_EPS).ln();
        }
        g.iter_mut().for_each(|v| *v *= w.lambda2);
        let mut discard = GradSet::new();
        let d_in = bundle.disc_backward(&pf, &g, &mut discard, true)?.expect("input gradient");
        d_synth.add_assign(&d_in);
    }

    if let Some(vdn) = &fwd.vdn {
        let (ll, gl) = grad::l1(&vdn.left, &batch.left)?;
        let (lr, gr) = grad::l1(&vdn.right, &batch.right)?;
        c.l_vc = check_finite("l_vc", ll + lr)?;
        let pl = grad::l1_per_sample(&vdn.left, &batch.left)?;
        let pr = grad::l1_per_sample(&vdn.right, &batch.right)?;
        for (i, s) in per.iter_mut().enumerate() {
            s.l_vc = pl[i] + pr[i];
        }
        let through = cfg.vdn_input == VdnInput::Synthesized;
        if let Some(mut d_in) = bundle.vdn_backward(vdn, &gl, &gr, grads_v, through)? {
            d_in.scale(w.lambda1);
            d_synth.add_assign(&d_in);
        }
    }

    debug_assert_eq!(per.len(), n);
    c.per_sample = per;
    bundle.vsn_backward(&fwd.vsn, &d_synth, grads_g)?;
    Ok(c)
}

/// One iteration on `triplets`: discriminator, synthesis and decomposition
/// updates in that order.
pub fn train_step(
    bundle: &mut ModelBundle,
    triplets: &[&ViewTriplet],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<LossReport> {
    if triplets.len() != cfg.batch_size {
        return Err(Error::Config(format!(
            "batch has {} triplets, batch_size is {}",
            triplets.len(),
            cfg.batch_size
        )));
    }
    check_compatible(bundle, cfg)?;
    state.adam.check(&bundle.params)?;
    let batch = Batch::new(triplets)?;
    let t = state.iteration + 1;
    let opt = &cfg.optimizer;
    let lr_g = learning_rate(t, opt, Which::Generator);
    let lr_d = learning_rate(t, opt, Which::Discriminator);

    let fwd = forward_all(bundle, &batch, cfg)?;

    let mut l_disc = 0.0;
    if cfg.ablation.use_adv {
        let mut gd = GradSet::new();
        l_disc = disc_grads(bundle, &batch.middle, &fwd.vsn.output, &mut gd)?;
        state.adam.step(&mut bundle.params, &gd, Partition::ThetaD, lr_d, opt)?;
        if let Some(o) = observer.as_mut() {
            o(Phase::Discriminator, bundle, &state.adam);
        }
    }

    let mut gg = GradSet::new();
    let mut gv = GradSet::new();
    let mut comps = gen_grads(bundle, &batch, &fwd, cfg, &mut gg, &mut gv)?;
    comps.l_disc = l_disc;
    let report = losses::generator_total(&comps, &cfg.weights, &cfg.ablation)?;
    check_finite("l_g_total", report.l_g_total)?;
    state.adam.step(&mut bundle.params, &gg, Partition::ThetaG, lr_g, opt)?;
    if let Some(o) = observer.as_mut() {
        o(Phase::Generator, bundle, &state.adam);
    }

    if cfg.ablation.use_vdn {
        state.adam.step(&mut bundle.params, &gv, Partition::ThetaV, lr_g, opt)?;
        if let Some(o) = observer.as_mut() {
            o(Phase::Decomposition, bundle, &state.adam);
        }
    }

    state.iteration = t;
    state.history.push(LossReport {
        per_sample: Vec::new(),
        ..report.clone()
    });
    Ok(report)
}

fn check_compatible(bundle: &ModelBundle, cfg: &TrainConfig) -> Result<()> {
    let a = bundle.ablation();
    if a != cfg.ablation {
        return Err(Error::Config(format!(
            "training ablation {:?} does not match the model's {:?}",
            cfg.ablation.tags(),
            a.tags()
        )));
    }
    Ok(())
}

/// Files written by [`fit`].
pub const LOSS_CSV: &str = "losses.csv";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub train: TrainConfig,
    pub model: crate::models::ModelConfig,
    pub dataset_ids: Vec<String>,
    pub resumed_from: Option<u64>,
    pub start_iteration: u64,
}

/// Runs iterations `state.iteration + 1 ..= total_iterations`.
///
/// With `out_dir`, writes the run manifest, the loss CSV (truncated to the
/// resumed iteration first) and checkpoints.
pub fn fit(
    bundle: &mut ModelBundle,
    dataset: &[ViewTriplet],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainState> {
    cfg.validate()?;
    check_compatible(bundle, cfg)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let res = bundle.resolution();
    if let Some(t) = dataset.iter().find(|t| t.resolution() != res || t.left.width != res) {
        return Err(Error::Dataset(format!(
            "triplet `{}` is {}x{}, model expects {res}x{res}",
            t.id, t.left.height, t.left.width
        )));
    }
    let resumed = state.is_some();
    let mut state = state.unwrap_or_else(|| TrainState::new(bundle, cfg.seed));
    state.adam.check(&bundle.params)?;
    let effective = cfg.resolved(res);

    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let manifest = RunManifest {
                train: effective.clone(),
                model: bundle.config.clone(),
                dataset_ids: dataset.iter().map(|t| t.id.clone()).collect(),
                resumed_from: resumed.then_some(state.iteration),
                start_iteration: state.iteration,
            };
            fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
            Some(open_loss_csv(&dir.join(LOSS_CSV), state.iteration)?)
        }
        None => None,
    };

    let mut indices = Vec::with_capacity(cfg.batch_size);
    while state.iteration < cfg.total_iterations {
        indices.clear();
        for _ in 0..cfg.batch_size {
            indices.push(state.rng.random_range(0..dataset.len()));
        }
        let batch: Vec<&ViewTriplet> = indices.iter().map(|&i| &dataset[i]).collect();
        let report = train_step(bundle, &batch, &mut state, &effective, None)?;
        let t = state.iteration;
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", report.csv_row(t))?;
        }
        on_step(t, &report);
        let due = cfg.checkpoint_interval > 0 && t % cfg.checkpoint_interval == 0;
        if let (Some(dir), true) = (out_dir, due || t == cfg.total_iterations) {
            if let Some(w) = csv.as_mut() {
                w.flush()?;
            }
            Checkpoint::capture(bundle, &state, Some(&effective)).save(&dir.join(checkpoint::file_name(t)))?;
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }
    Ok(state)
}

fn open_loss_csv(path: &PathBuf, keep_through: u64) -> Result<BufWriter<fs::File>> {
    let mut kept = Vec::new();
    if keep_through > 0 {
        if let Ok(f) = fs::File::open(path) {
            for line in BufReader::new(f).lines().skip(1) {
                let line = line?;
                let (it, _) = LossReport::parse_csv_row(&line)?;
                if it <= keep_through {
                    kept.push(line);
                }
            }
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", LossReport::CSV_HEADER)?;
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

/// Scalar objectives differentiated by [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    /// `L_G` with respect to `theta_G`.
    Generator,
    /// `L_vc` with respect to `theta_V`.
    ViewConsistency,
    /// `L_disc` with respect to `theta_D`.
    Discriminator,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Generator, Objective::ViewConsistency, Objective::Discriminator];

    pub fn partition(self) -> Partition {
        match self {
            Objective::Generator => Partition::ThetaG,
            Objective::ViewConsistency => Partition::ThetaV,
            Objective::Discriminator => Partition::ThetaD,
        }
    }
}

/// Values of all three objectives at the current parameters, plus a hash of
/// every non-differentiable decision taken on the way.
pub fn objectives(bundle: &ModelBundle, batch: &Batch, cfg: &TrainConfig) -> Result<(BTreeMap<Objective, f64>, u64)> {
    let mut h = DefaultHasher::new();
    let fwd = forward_all(bundle, batch, cfg)?;
    let synth = &fwd.vsn.output;
    let w = &cfg.weights;
    let mut c = Components {
        l_p: grad::l1(synth, &batch.middle)?.0,
        ..Default::default()
    };
    grad::l1_signature(synth, &batch.middle, &mut h);
    if cfg.ablation.use_sharp {
        let sharp = cfg.sharpness_config(bundle.resolution());
        c.l_sharp = grad::sharpness(synth, &batch.middle, &sharp)?.0;
        grad::sharpness_signature(synth, &batch.middle, &sharp, &mut h);
    }
    let mut discs = Vec::new();
    if cfg.ablation.use_adv {
        let pr = bundle.disc_forward(&batch.middle)?;
        let pf = bundle.disc_forward(synth)?;
        c.l_adv = grad::adv(&pf.probs)?.0;
        c.l_disc = grad::disc(&pr.probs, &pf.probs)?.0;
        grad::clamp_signature(&pr.probs, &mut h);
        grad::clamp_signature(&pf.probs, &mut h);
        discs.push(pr);
        discs.push(pf);
    }
    if let Some(vdn) = &fwd.vdn {
        c.l_vc = grad::l1(&vdn.left, &batch.left)?.0 + grad::l1(&vdn.right, &batch.right)?.0;
        grad::l1_signature(&vdn.left, &batch.left, &mut h);
        grad::l1_signature(&vdn.right, &batch.right, &mut h);
    }
    let disc_refs: Vec<_> = discs.iter().collect();
    bundle.signature_of(&fwd.vsn, fwd.vdn.as_ref(), &disc_refs, &mut h);
    let total = c.l_p + w.lambda1 * c.l_vc + w.lambda2 * c.l_adv + w.lambda3 * c.l_sharp;
    let out = [
        (Objective::Generator, total),
        (Objective::ViewConsistency, c.l_vc),
        (Objective::Discriminator, c.l_disc),
    ]
    .into();
    Ok((out, h.finish()))
}

/// Analytic gradients of every objective with respect to its own partition.
pub fn analytic_gradients(bundle: &ModelBundle, batch: &Batch, cfg: &TrainConfig) -> Result<BTreeMap<Objective, GradSet>> {
    let fwd = forward_all(bundle, batch, cfg)?;
    let mut gd = GradSet::new();
    if cfg.ablation.use_adv {
        disc_grads(bundle, &batch.middle, &fwd.vsn.output, &mut gd)?;
    }
    let mut gg = GradSet::new();
    let mut gv = GradSet::new();
    gen_grads(bundle, batch, &fwd, cfg, &mut gg, &mut gv)?;
    Ok([
        (Objective::Generator, gg),
        (Objective::ViewConsistency, gv),
        (Objective::Discriminator, gd),
    ]
    .into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Checked entries per objective (fewer if a partition is smaller).
    pub samples_per_objective: usize,
    pub step: f64,
    /// Lower bound of the relative-error denominator. Central differences at
    /// step 1e-4 carry roughly 1e-11 of rounding error, so gradients much
    /// smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples_per_objective: 25,
            step: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub objective: Objective,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
    /// Entries skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

/// Central difference of `objective` with respect to one parameter entry,
/// and whether the kink signature stayed constant across `theta +- step`.
pub fn numeric_derivative(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    objective: Objective,
    name: &str,
    index: usize,
    step: f64,
) -> Result<(f64, bool)> {
    let (_, sig0) = objectives(bundle, batch, cfg)?;
    let orig = bundle.params.data(name)?[index];
    bundle.params.data_mut(name)?[index] = orig + step;
    let plus = objectives(bundle, batch, cfg);
    bundle.params.data_mut(name)?[index] = orig - step;
    let minus = objectives(bundle, batch, cfg);
    bundle.params.data_mut(name)?[index] = orig;
    let (plus, sp) = plus?;
    let (minus, sm) = minus?;
    let d = (plus[&objective] - minus[&objective]) / (2.0 * step);
    Ok((d, sp == sig0 && sm == sig0))
}

/// Compares analytic and central-difference gradients on a random subset
/// of each partition.
pub fn gradient_check(
    bundle: &ModelBundle,
    triplet: &ViewTriplet,
    train: &TrainConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check_compatible(bundle, train)?;
    let batch = Batch::new(&[triplet])?;
    let analytic = analytic_gradients(bundle, &batch, train)?;
    for (obj, g) in &analytic {
        if let Some((n, _)) = g.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("analytic gradient of `{n}` for {obj:?}")));
        }
    }
    let mut work = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for obj in Objective::ALL {
        let active = match obj {
            Objective::Generator => true,
            Objective::ViewConsistency => train.ablation.use_vdn,
            Objective::Discriminator => train.ablation.use_adv,
        };
        if !active {
            continue;
        }
        let mut slots: Vec<(String, usize)> = bundle
            .params
            .names_in(obj.partition())
            .flat_map(|n| (0..bundle.params.data(n).map_or(0, |d| d.len())).map(move |i| (n.to_string(), i)))
            .collect();
        slots.shuffle(&mut rng);
        let mut checked = 0;
        for (name, index) in slots {
            if checked == cfg.samples_per_objective {
                break;
            }
            let (numeric, smooth) = numeric_derivative(&mut work, &batch, train, obj, &name, index, cfg.step)?;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let a = analytic[&obj].get(&name).map_or(0.0, |g| g[index]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.samples.push(GradSample {
                objective: obj,
                name,
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
            checked += 1;
        }
    }
    Ok(report)
}
