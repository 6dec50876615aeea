use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scgn::data::{self, PreprocessConfig, Split, SynthConfig};
use scgn::{Error, Image, PixelRange};

#[test]
fn synthetic_triplets_are_deterministic() {
    let a = data::synth_triplets(3, 32, 42).unwrap();
    let b = data::synth_triplets(3, 32, 42).unwrap();
    assert_eq!(a, b);
    let c = data::synth_triplets(3, 32, 43).unwrap();
    assert_ne!(a, c);
    for t in &a {
        t.check().unwrap();
        assert_ne!(t.left, t.middle);
        assert_ne!(t.right, t.middle);
    }
    assert!(data::synth_triplets(0, 32, 0).is_err());
    assert!(data::synth_triplets(1, 30, 0).is_err());
}

#[test]
fn zero_disparity_gives_identical_views() {
    let cfg = SynthConfig {
        disparity: 0,
        ..SynthConfig::new(2, 32, 5)
    };
    for t in data::synth_triplets_with(&cfg).unwrap() {
        assert_eq!(t.left, t.middle);
        assert_eq!(t.right, t.middle);
    }
}

#[test]
fn foreground_shifts_opposite_ways() {
    for seed in 0..6 {
        let cfg = SynthConfig::new(1, 64, seed);
        let d = cfg.disparity;
        let t = data::synth_triplets_with(&cfg).unwrap().remove(0);
        let bg = data::synth_triplets_with(&SynthConfig { shapes: 0, ..cfg }).unwrap().remove(0);
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let fg = (0..3).any(|c| t.middle.get(c, y, x) != bg.middle.get(c, y, x));
                if !fg {
                    continue;
                }
                for c in 0..3 {
                    let m = t.middle.get(c, y, x);
                    if x + d < 64 {
                        assert_eq!(t.left.get(c, y, x + d), m, "left seed {seed} at ({y}, {x})");
                    }
                    if x >= d {
                        assert_eq!(t.right.get(c, y, x - d), m, "right seed {seed} at ({y}, {x})");
                    }
                }
                checked += 1;
            }
        }
        assert!(checked > 50, "seed {seed}: only {checked} foreground pixels");
    }
}

#[test]
fn denormalize_round_trip_within_one_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..20 * 20 * 3).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let img = Image::new(20, 20, 3, PixelRange::Normalized, vals).unwrap();
    let cfg = PreprocessConfig {
        resolution: 20,
        ..Default::default()
    };
    let (raw, clamped) = data::denormalize(&img);
    assert_eq!(clamped, 0);
    let back = data::preprocess(&raw, &cfg).unwrap();
    let err = back.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    raw.save_png(&path).unwrap();
    let loaded = data::preprocess(&Image::load_png(&path).unwrap(), &cfg).unwrap();
    let err = loaded.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 255.0 + 1e-12, "{err}");
}

#[test]
fn manifest_lists_triplets_in_id_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut ts = data::synth_triplets(3, 16, 1).unwrap();
    for (t, id) in ts.iter_mut().zip(["c", "a", "b"]) {
        t.id = id.into();
    }
    data::write_dataset(dir.path(), Split::Train, &ts).unwrap();
    std::fs::write(
        dir.path().join("train/b/angles.json"),
        r#"{"left": -30.0, "middle": 0.0, "right": 15.0}"#,
    )
    .unwrap();
    let m = data::load_manifest(dir.path(), Split::Train, 16).unwrap();
    let ids: Vec<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(m.entries[1].angles.unwrap().right, 15.0);
    assert!(m.entries[0].angles.is_none());
    let loaded = m.load(Default::default()).unwrap();
    for t in &loaded {
        let orig = ts.iter().find(|o| o.id == t.id).unwrap();
        assert_eq!(t, orig);
    }
    assert_eq!(data::load_manifest(dir.path(), Split::Train, 16).unwrap(), m);
    assert!(data::load_manifest(dir.path(), Split::Test, 16).is_err());
}

#[test]
fn missing_view_names_the_triplet() {
    let dir = tempfile::tempdir().unwrap();
    let ts = data::synth_triplets(2, 16, 1).unwrap();
    data::write_dataset(dir.path(), Split::Test, &ts).unwrap();
    std::fs::remove_file(dir.path().join("test/synth_0001/right.png")).unwrap();
    match data::load_manifest(dir.path(), Split::Test, 16) {
        Err(e @ Error::MissingFile { .. }) => assert!(e.to_string().contains("synth_0001"), "{e}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn frame_sequences() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..10 {
        Image::filled(12, 16, 3, PixelRange::Raw, (i * 20) as f64)
            .save_png(&dir.path().join(format!("frame_{i:03}.png")))
            .unwrap();
    }
    let cfg = PreprocessConfig {
        resolution: 8,
        ..Default::default()
    };
    let ts = data::load_frame_sequence(dir.path(), 2, &cfg).unwrap();
    assert_eq!(ts.len(), 6);
    assert_eq!(ts[0].id, "frame_002_k2");
    let level = |img: &Image| (img.data[0] + 1.0) * 127.5;
    assert!((level(&ts[0].left) - 0.0).abs() < 1e-9);
    assert!((level(&ts[0].middle) - 40.0).abs() < 1e-9);
    assert!((level(&ts[0].right) - 80.0).abs() < 1e-9);
    assert!(data::load_frame_sequence(dir.path(), 8, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn preprocess_is_idempotent_on_sized_inputs(vals in prop::collection::vec(0u8..=255, 8 * 8 * 3)) {
        let raw = Image::new(8, 8, 3, PixelRange::Raw, vals.iter().map(|&v| v as f64).collect()).unwrap();
        let cfg = PreprocessConfig { resolution: 8, ..Default::default() };
        let once = data::preprocess(&raw, &cfg).unwrap();
        let twice = data::preprocess(&data::denormalize(&once).0, &cfg).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(once.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
