mod common;

use scgn::arch::Ablation;
use scgn::checkpoint::{self, Checkpoint};
use scgn::models::{ModelBundle, ModelConfig};
use scgn::optim::{learning_rate, OptimizerConfig, Which};
use scgn::params::Partition;
use scgn::trainer::{self, TrainConfig, TrainState, LOSS_CSV};

fn ablation(tag: &str) -> Ablation {
    let mut a = Ablation::default();
    if !tag.is_empty() {
        a.apply(tag).unwrap();
    }
    a
}

#[test]
fn sub_steps_only_touch_their_partition() {
    let (v, phases) = common::isolation_violations(100, Ablation::default(), 1);
    assert!(v.is_empty(), "{v:?}");
    assert_eq!(phases, 300);
    let (v, phases) = common::isolation_violations(10, ablation("no-adv"), 2);
    assert!(v.is_empty(), "{v:?}");
    assert_eq!(phases, 20);
    let (v, phases) = common::isolation_violations(10, ablation("no-vdn"), 3);
    assert!(v.is_empty(), "{v:?}");
    assert_eq!(phases, 20);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for (label, total, report) in common::gradient_checks(25) {
        assert!(total <= 500, "{label}: {total} parameters");
        assert!(report.samples.len() >= 50, "{label}: {} samples", report.samples.len());
        assert!(report.max_rel_error < 1e-4, "{label}: {}", report.max_rel_error);
    }
}

#[test]
fn tiny_bundle_is_small() {
    let b = ModelBundle::build(ModelConfig::tiny(Ablation::default(), 0)).unwrap();
    assert!(b.params.total() <= 500, "{}", b.params.total());
    assert!(Partition::ALL.iter().all(|&p| b.params.count(p) > 0));
    assert_eq!(b.resolution(), 16);
}

#[test]
fn schedule_is_exact() {
    let o = OptimizerConfig::default();
    assert_eq!(learning_rate(0, &o, Which::Generator), 1e-4);
    assert_eq!(learning_rate(185_699, &o, Which::Generator), 1e-4);
    assert_eq!(learning_rate(185_699, &o, Which::Discriminator), 1e-5);
    assert_eq!(learning_rate(185_700, &o, Which::Generator), 1e-5);
    assert_eq!(learning_rate(185_700, &o, Which::Discriminator), 1e-6);
    assert_eq!(learning_rate(371_400, &o, Which::Discriminator), 1e-6);
}

fn tiny_run(dir: &std::path::Path, total: u64, resume: Option<TrainState>, bundle: Option<ModelBundle>) -> (ModelBundle, TrainState) {
    let mut b = bundle.unwrap_or_else(|| ModelBundle::build(ModelConfig::tiny(Ablation::default(), 4)).unwrap());
    let data = scgn::data::synth_triplets(3, 16, 4).unwrap();
    let cfg = TrainConfig {
        total_iterations: total,
        checkpoint_interval: 5,
        seed: 4,
        ..Default::default()
    };
    let s = trainer::fit(&mut b, &data, &cfg, resume, Some(dir), |_, _| {}).unwrap();
    (b, s)
}

#[test]
fn seeded_runs_repeat_and_resume_bitwise() {
    let (d1, d2, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (b1, s1) = tiny_run(d1.path(), 12, None, None);
    let (b2, s2) = tiny_run(d2.path(), 12, None, None);
    assert_eq!(b1, b2);
    assert_eq!(s1, s2);
    let csv = |d: &std::path::Path| std::fs::read(d.join(LOSS_CSV)).unwrap();
    assert_eq!(csv(d1.path()), csv(d2.path()));

    let listed = checkpoint::list(d1.path()).unwrap();
    assert_eq!(listed.iter().map(|(i, _)| *i).collect::<Vec<_>>(), [5, 10, 12]);

    let mid = Checkpoint::load(&d1.path().join(checkpoint::file_name(5))).unwrap();
    assert_eq!(mid.state.iteration, 5);
    std::fs::copy(d1.path().join(LOSS_CSV), d3.path().join(LOSS_CSV)).unwrap();
    let (b3, s3) = tiny_run(d3.path(), 12, Some(mid.state), Some(mid.bundle));
    assert_eq!(b3, b1);
    assert_eq!(s3, s1);
    assert_eq!(csv(d3.path()), csv(d1.path()));
    let end = |d: &std::path::Path| std::fs::read(d.join(checkpoint::file_name(12))).unwrap();
    assert_eq!(end(d3.path()), end(d1.path()));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (b, s) = tiny_run(dir.path(), 3, None, None);
    let ck = Checkpoint::capture(&b, &s, None);
    let path = dir.path().join("x.scgn");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.state.adam.steps.get(&Partition::ThetaD), Some(&3));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn ablation_must_match_bundle() {
    let mut b = ModelBundle::build(ModelConfig::tiny(Ablation::default(), 0)).unwrap();
    let data = scgn::data::synth_triplets(1, 16, 0).unwrap();
    let mut state = TrainState::new(&b, 0);
    let cfg = TrainConfig {
        ablation: ablation("no-vdn"),
        ..Default::default()
    };
    assert!(trainer::train_step(&mut b, &[&data[0]], &mut state, &cfg, None).is_err());
}

mod schedule_props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rate_is_a_non_increasing_step(t1 in 0u64..400_000, dt in 0u64..400_000, at in 1u64..300_000) {
            let o = OptimizerConfig { decay_at_iteration: at, ..Default::default() };
            for w in [Which::Generator, Which::Discriminator] {
                let (a, b) = (learning_rate(t1, &o, w), learning_rate(t1 + dt, &o, w));
                prop_assert!(b <= a);
                prop_assert!(a > 0.0);
                prop_assert_eq!(a, learning_rate(t1, &o, w));
            }
        }
    }
}
