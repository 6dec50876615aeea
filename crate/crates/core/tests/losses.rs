mod common;

use proptest::prelude::*;
use scgn::arch::Ablation;
use scgn::losses::{self, Components, LossWeights, SharpnessConfig};
use scgn::{Image, PixelRange};

#[test]
fn closed_form_values() {
    for (name, got, want) in common::closed_form_losses() {
        assert!((got - want).abs() <= 1e-9, "{name}: {got} vs {want}");
    }
}

#[test]
fn sharpness_loss_of_two_pairs_is_mean_abs_difference() {
    let pairs = common::random_pairs(4, 16, 5);
    let cfg = SharpnessConfig::for_resolution(16);
    let p = [pairs[0].0.clone(), pairs[1].0.clone()];
    let t = [pairs[2].1.clone(), pairs[3].1.clone()];
    let q = |i: &Image| losses::sharpness_q(i, &cfg).unwrap();
    let want = ((q(&t[0]) - q(&p[0])).abs() + (q(&t[1]) - q(&p[1])).abs()) / 2.0;
    assert!((losses::sharpness_loss(&p, &t, &cfg).unwrap() - want).abs() < 1e-15);

    let flat = Image::filled(16, 16, 3, PixelRange::Normalized, 0.0);
    let got = losses::sharpness_loss(&[flat], &[t[0].clone()], &cfg).unwrap();
    assert!((got - q(&t[0])).abs() < 1e-15);
}

#[test]
fn ablation_zeroes_terms() {
    let c = Components {
        l_p: 0.5,
        l_vc: 2.0,
        l_adv: 3.0,
        l_sharp: 4.0,
        l_disc: 5.0,
        per_sample: Vec::new(),
    };
    let w = LossWeights::default();
    let mut a = Ablation::default();
    a.apply("no-vdn").unwrap();
    a.apply("no-adv").unwrap();
    let r = losses::generator_total(&c, &w, &a).unwrap();
    assert!((r.l_g_total - (0.5 + 0.01 * 4.0)).abs() < 1e-15);
    assert_eq!((r.l_vc, r.l_adv, r.l_disc), (0.0, 0.0, 0.0));
    let bad = Components { l_adv: f64::NAN, ..c };
    assert!(losses::generator_total(&bad, &w, &Ablation::default()).is_err());
}

fn image(size: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f64..1.0, size * size * 3)
        .prop_map(move |d| Image::new(size, size, 3, PixelRange::Normalized, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_loss_is_a_metric(a in image(6), b in image(6), c in image(6)) {
        let d = |x: &Image, y: &Image| losses::pixel_loss(&[x.clone()], &[y.clone()]).unwrap();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn sharpness_shift_and_scale(img in image(16), shift in -0.5f64..0.5, alpha in 0.0f64..3.0) {
        let cfg = SharpnessConfig::for_resolution(16);
        let q = losses::sharpness_q(&img, &cfg).unwrap();
        prop_assert!(q >= 0.0);
        let shifted = img.map(PixelRange::Normalized, |v| v + shift);
        prop_assert!((losses::sharpness_q(&shifted, &cfg).unwrap() - q).abs() <= 1e-9);
        let scaled = img.map(PixelRange::Normalized, |v| alpha * v);
        prop_assert!((losses::sharpness_q(&scaled, &cfg).unwrap() - alpha * q).abs() <= 1e-9);
    }

    #[test]
    fn probability_losses_are_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        prop_assert!(losses::adv_loss(&p).unwrap() >= 0.0);
        prop_assert!(losses::disc_loss(&p, &p).unwrap() >= 0.0);
    }

    #[test]
    fn adv_loss_decreases_with_fooling(p in 0.01f64..0.98, dp in 0.001f64..0.01) {
        prop_assert!(losses::adv_loss(&[p + dp]).unwrap() < losses::adv_loss(&[p]).unwrap());
    }
}
