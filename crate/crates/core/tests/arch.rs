use std::path::Path;

use scgn::arch::{reference_table, ArchConfig};
use scgn::layers::{count_params, validate_against_table, NetworkSpec};

fn shipped(name: &str) -> NetworkSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(format!("{name}.json"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_specs_match_builders() {
    let a = ArchConfig::default();
    let built = [
        a.vsn_encoder(),
        a.vsn_decoder().unwrap(),
        a.vdn_encoder(),
        a.vdn_decoder("vdn_decoder").unwrap(),
        a.discriminator(),
    ];
    for net in built {
        let file = shipped(&net.name);
        assert_eq!(file, net, "{}", net.name);
        let report = validate_against_table(&file, &reference_table(&file.name).unwrap()).unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn discriminator_head_size() {
    let d = shipped("discriminator");
    assert_eq!(d.shape_of("disc4").unwrap().numel(), 14 * 14 * 256);
    let fc = d.layer("fc5").unwrap();
    assert_eq!(fc.out_channels, Some(1));
    assert!(count_params(&d).unwrap() > 50_177);
}
