#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scgn::losses::{self, SharpnessConfig};
use scgn::metrics::{self, Psnr};
use scgn::{Image, PixelRange};

/// Random normalized RGB pairs; every other pair is a noisy copy so that
/// MS-SSIM is exercised away from zero.
pub fn random_pairs(n: usize, size: usize, seed: u64) -> Vec<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 3 * size * size;
    (0..n)
        .map(|i| {
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = if i % 2 == 0 {
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                a.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(-1.0, 1.0)).collect()
            };
            let img = |d| Image::new(size, size, 3, PixelRange::Normalized, d).unwrap();
            (img(a), img(b))
        })
        .collect()
}

fn planes(img: &Image) -> oracle::Planes {
    oracle::from_normalized(&img.data, img.channels, img.height, img.width)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Largest relative deviation of each library metric from its oracle.
#[derive(Debug, Default)]
pub struct OracleComparison {
    pub psnr: f64,
    pub ms_ssim: f64,
    pub mmse: f64,
    pub l1: f64,
    pub q_s: f64,
}

pub fn compare_with_oracles(pairs: &[(Image, Image)]) -> OracleComparison {
    let mut out = OracleComparison::default();
    let sharp = [
        SharpnessConfig::for_resolution(pairs[0].0.height),
        SharpnessConfig {
            block_size: 8,
            ..SharpnessConfig::default()
        },
    ];
    for (a, b) in pairs {
        let (pa, pb) = (planes(a), planes(b));
        let Psnr::Finite(p) = metrics::psnr(&metrics::to_raw(a), &metrics::to_raw(b), 255.0).unwrap() else {
            panic!("random pair has infinite psnr");
        };
        out.psnr = out.psnr.max(rel(p, oracle::psnr(&pa, &pb)));
        out.ms_ssim = out.ms_ssim.max(rel(metrics::ms_ssim(a, b).unwrap(), oracle::ms_ssim(&pa, &pb)));
        let one = |x: &Image| vec![x.clone()];
        out.mmse = out.mmse.max(rel(
            metrics::mmse(&one(a), &one(b)).unwrap(),
            oracle::mmse(&[pa.clone()], &[pb.clone()]),
        ));
        out.l1 = out.l1.max(rel(
            metrics::l1_error(&one(a), &one(b)).unwrap(),
            oracle::l1(&[pa.clone()], &[pb.clone()]),
        ));
        for cfg in &sharp {
            let want = oracle::sharpness(&pa, cfg.block_size, cfg.gaussian_kernel, cfg.gaussian_sigma);
            out.q_s = out.q_s.max(rel(losses::sharpness_q(a, cfg).unwrap(), want));
        }
    }
    let (pa, pb): (Vec<_>, Vec<_>) = pairs.iter().map(|(a, b)| (planes(a), planes(b))).unzip();
    let (ia, ib): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    out.mmse = out.mmse.max(rel(metrics::mmse(&ia, &ib).unwrap(), oracle::mmse(&pa, &pb)));
    out.l1 = out.l1.max(rel(metrics::l1_error(&ia, &ib).unwrap(), oracle::l1(&pa, &pb)));
    out
}

/// Closed-form loss values as `(name, computed, expected)`.
pub fn closed_form_losses() -> Vec<(&'static str, f64, f64)> {
    use scgn::arch::Ablation;
    use scgn::losses::{Components, LossWeights};
    let ln2 = std::f64::consts::LN_2;
    let pairs = random_pairs(2, 32, 11);
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let sharp = SharpnessConfig::for_resolution(32);
    let constant = Image::filled(32, 32, 3, PixelRange::Normalized, 0.3);
    let unit = Components {
        l_p: 1.0,
        l_vc: 1.0,
        l_adv: 1.0,
        l_sharp: 1.0,
        l_disc: 1.0,
        per_sample: Vec::new(),
    };
    vec![
        ("L_adv(0.5)", losses::adv_loss(&[0.5, 0.5]).unwrap(), ln2),
        ("L_disc(0.5, 0.5)", losses::disc_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 2.0 * ln2),
        ("L_p(x, x)", losses::pixel_loss(&a, &a).unwrap(), 0.0),
        ("L_vc(x, x)", losses::view_consistency_loss(&a, &b, &a, &b).unwrap(), 0.0),
        ("L_sharp(x, x)", losses::sharpness_loss(&a, &a, &sharp).unwrap(), 0.0),
        ("Q_S(constant)", losses::sharpness_q(&constant, &sharp).unwrap(), 0.0),
        (
            "L_G(unit components)",
            losses::generator_total(&unit, &LossWeights::default(), &Ablation::default())
                .unwrap()
                .l_g_total,
            1.021,
        ),
    ]
}

/// Runs `iterations` tiny training steps and returns a description of every
/// sub-step that touched parameters outside its own partition, plus the
/// number of sub-steps observed.
pub fn isolation_violations(iterations: usize, ablation: scgn::arch::Ablation, seed: u64) -> (Vec<String>, usize) {
    use scgn::models::{ModelBundle, ModelConfig};
    use scgn::params::Partition;
    use scgn::trainer::{self, Phase, TrainConfig, TrainState};

    let mut bundle = ModelBundle::build(ModelConfig::tiny(ablation, seed)).unwrap();
    let data = scgn::data::synth_triplets(4, 16, seed).unwrap();
    let mut cfg = TrainConfig {
        ablation,
        seed,
        ..Default::default()
    };
    cfg.optimizer.lr_generator = 1e-3;
    cfg.optimizer.lr_discriminator = 1e-3;
    let mut state = TrainState::new(&bundle, seed);
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut violations = Vec::new();
    let mut phases = 0;
    for it in 0..iterations {
        let t = &data[pick.random_range(0..data.len())];
        let mut prev = bundle.params.clone();
        let mut obs = |phase: Phase, b: &ModelBundle, _: &scgn::optim::AdamState| {
            phases += 1;
            for p in Partition::ALL {
                if p != phase.partition() && !b.params.partition_bitwise_eq(&prev, p) {
                    violations.push(format!("iteration {it}: {phase:?} step changed {p}"));
                }
            }
            prev = b.params.clone();
        };
        trainer::train_step(&mut bundle, &[t], &mut state, &cfg, Some(&mut obs)).unwrap();
    }
    (violations, phases)
}

/// Gradient-check reports on tiny bundles for the full model and each
/// ablation that changes the objectives.
pub fn gradient_checks(samples: usize) -> Vec<(String, usize, scgn::trainer::GradCheckReport)> {
    use scgn::arch::Ablation;
    use scgn::models::{ModelBundle, ModelConfig};
    use scgn::trainer::{self, GradCheckConfig, TrainConfig};

    let mut out = Vec::new();
    for (i, tag) in ["", "no-adv", "mvdn", "mvsn", "no-sharp"].into_iter().enumerate() {
        let mut ablation = Ablation::default();
        if !tag.is_empty() {
            ablation.apply(tag).unwrap();
        }
        let bundle = ModelBundle::build(ModelConfig::tiny(ablation, i as u64)).unwrap();
        let total = bundle.params.total();
        let triplet = scgn::data::synth_triplets(1, 16, i as u64).unwrap().remove(0);
        let train = TrainConfig {
            ablation,
            ..Default::default()
        };
        let cfg = GradCheckConfig {
            samples_per_objective: samples,
            seed: i as u64,
            ..Default::default()
        };
        let report = trainer::gradient_check(&bundle, &triplet, &train, &cfg).unwrap();
        out.push((if tag.is_empty() { "full".into() } else { tag.into() }, total, report));
    }
    out
}
