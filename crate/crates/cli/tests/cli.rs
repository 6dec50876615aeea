use std::path::Path;
use std::process::{Command, Output};

fn scgn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scgn"))
        .current_dir(dir)
        .env_remove("SCGN_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL: &[&str] = &["--synthetic", "2", "--resolution", "32", "--width", "0.125"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--iterations", "4", "--checkpoint-interval", "2", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    scgn(dir, &args)
}

#[test]
fn validate_arch_reports_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = scgn(dir.path(), &["validate-arch"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let t = text(&o);
    for row in ["ec1", "ep2", "ec6", "up1", "dc5", "dec1", "dec5", "ddc1", "ddc5", "disc1", "fc5"] {
        assert!(t.contains(&format!("  {row} ")), "missing {row}:\n{t}");
    }
    assert!(!t.contains("FAIL"));

    let o = scgn(dir.path(), &["validate-arch", "--resolution", "64"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("table comparison skipped (non-canonical resolution)"));

    let o = scgn(dir.path(), &["validate-arch", "--resolution", "100"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn validate_arch_names_first_bad_layer() {
    let dir = tempfile::tempdir().unwrap();
    let specs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/specs/vsn_encoder.json");
    let mut net: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(specs).unwrap()).unwrap();
    let layers = net["layers"].as_array_mut().unwrap();
    let ec2 = layers.iter_mut().find(|l| l["name"] == "ec2").unwrap();
    ec2["out_channels"] = 32.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, net.to_string()).unwrap();
    let o = scgn(dir.path(), &["validate-arch", "--spec", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("first failing layer: ec2 (expected 112x112x64"), "{}", text(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = scgn(dir.path(), &["gradcheck", "--gradcheck-samples", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("PASS"));
}

#[test]
fn train_evaluate_synthesize_decompose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = train(d, "run", &["--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    for f in ["ckpt_2.scgn", "ckpt_4.scgn", "losses.csv", "run.json", "run_config.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("iteration,l_p,l_vc,l_adv,l_sharp,l_g_total,l_disc"));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 5);

    let o = scgn(d, &["evaluate", "--synthetic", "2", "--checkpoint", "run", "--out", "eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    for f in ["metrics_2.json", "metrics_4.csv", "psnr_vs_iteration.csv", "psnr_vs_iteration.png"] {
        assert!(d.join("eval").join(f).is_file(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval/metrics_4.json")).unwrap()).unwrap();
    assert!(m["mmse_definition"].as_str().unwrap().contains("this toolkit's definition"));

    let o = scgn(d, &["evaluate", "--synthetic", "2", "--checkpoint", "run/ckpt_4.scgn", "--ablation", "no-adv", "--out", "eval2"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));

    let views = scgn::data::synth_triplets(1, 32, 0).unwrap().remove(0);
    for (img, name) in [(&views.left, "l.png"), (&views.right, "r.png")] {
        scgn::data::denormalize(img).0.save_png(&d.join(name)).unwrap();
    }
    let o = scgn(d, &["synthesize", "--checkpoint", "run/ckpt_4.scgn", "--left", "l.png", "--right", "r.png", "--output", "mid.png", "--grid"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let mid = scgn::Image::load_png(&d.join("mid.png")).unwrap();
    assert_eq!(mid.shape(), (32, 32, 3));
    assert!(d.join("mid_grid.png").is_file());

    let o = scgn(d, &["decompose", "--checkpoint", "run/ckpt_4.scgn", "--middle", "mid.png", "--out", "dec"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(d.join("dec/decomposed_left.png").is_file());
    assert!(d.join("dec/decomposed_right.png").is_file());

    scgn::Image::filled(40, 40, 3, scgn::PixelRange::Raw, 9.0).save_png(&d.join("big.png")).unwrap();
    let o = scgn(d, &["synthesize", "--checkpoint", "run/ckpt_4.scgn", "--left", "big.png", "--right", "r.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("expected 32x32"), "{}", text(&o));
}

#[test]
fn resume_continues_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(train(d, "a", &[]).status.success());
    let o = train(d, "b", &["--resume", "a/ckpt_2.scgn"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::read(d.join("a/ckpt_4.scgn")).unwrap(), std::fs::read(d.join("b/ckpt_4.scgn")).unwrap());

    let o = train(d, "c", &["--resume", "a/ckpt_2.scgn", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("seed"));
    let o = train(d, "c", &["--resume", "a/ckpt_2.scgn", "--ablation", "no-vdn"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn seed_comes_from_environment_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--iterations", "1", "--out", "env"];
    args.extend_from_slice(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_scgn"))
        .current_dir(d)
        .env("SCGN_SEED", "17")
        .args(&args)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("env/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 17);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"synthetic": 2, "resolution": 32, "width": 0.125, "iterations": 2, "seed": 3, "output_dir": "fromfile"}"#,
    )
    .unwrap();
    let o = scgn(d, &["train", "--config", "cfg.json", "--iterations", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fromfile/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["iterations"], 1);
    assert_eq!(cfg["seed"], 3);

    std::fs::write(d.join("bad.json"), r#"{"iteratons": 2}"#).unwrap();
    let o = scgn(d, &["train", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("iteratons"), "{}", text(&o));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(scgn(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(scgn(d, &["--help"]).status.code(), Some(0));
    assert_eq!(scgn(d, &["train", "--dataset-root", "nowhere"]).status.code(), Some(1));
    assert_eq!(scgn(d, &["train", "--synthetic", "2", "--lambda1", "-1"]).status.code(), Some(1));
    assert_eq!(scgn(d, &["synthesize", "--checkpoint", "missing.scgn", "--left", "a", "--right", "b"]).status.code(), Some(2));

    std::fs::write(d.join("blocker"), "").unwrap();
    let mut args = vec!["train", "--iterations", "1", "--out", "blocker/sub"];
    args.extend_from_slice(SMALL);
    let o = scgn(d, &args);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}
