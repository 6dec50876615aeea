//! Canonical network definitions for the synthesis network (VSN), the
//! decomposition network (VDN) and the discriminator, plus the reference
//! output-size tables they must reproduce at 224x224.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, NamedShape, NetworkSpec, ShapeTriple};
use crate::ops::{Activation, Interpolation};

use Activation::{LeakyRelu, Relu, Sigmoid, Tanh};

pub const CANONICAL_RESOLUTION: usize = 224;

/// Ablation toggles reproducing the studied model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Build and train the decomposition network (self-consistency).
    pub use_vdn: bool,
    /// One weight-shared VDN decoder for both side views instead of two.
    pub shared_vdn_decoder: bool,
    /// Adversarial term and discriminator updates.
    pub use_adv: bool,
    /// Sharpness term in the generator loss.
    pub use_sharp: bool,
    /// VSN without max-pooling and upsampling layers.
    pub mvsn: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_vdn: true,
            shared_vdn_decoder: false,
            use_adv: true,
            use_sharp: true,
            mvsn: false,
        }
    }
}

impl Ablation {
    /// Applies a named variant: `no-vdn`, `mvdn`, `no-adv`, `no-sharp`, `mvsn`.
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "no-vdn" => self.use_vdn = false,
            "mvdn" | "shared-vdn-decoder" => self.shared_vdn_decoder = true,
            "no-adv" => self.use_adv = false,
            "no-sharp" => self.use_sharp = false,
            "mvsn" => self.mvsn = true,
            "" | "none" => {}
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn tags(&self) -> Vec<&'static str> {
        let mut t = Vec::new();
        if !self.use_vdn {
            t.push("no-vdn");
        }
        if self.shared_vdn_decoder {
            t.push("mvdn");
        }
        if !self.use_adv {
            t.push("no-adv");
        }
        if !self.use_sharp {
            t.push("no-sharp");
        }
        if self.mvsn {
            t.push("mvsn");
        }
        t
    }
}

/// Shape-level knobs for building the networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub resolution: usize,
    /// Channel multiplier applied to every hidden layer (1.0 = full widths).
    pub width: f64,
    /// Caps every kernel size; used only to shrink gradient-check models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kernel: Option<usize>,
    /// Channel count of the skip projections (defaults to their input width).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_channels: Option<usize>,
    pub leaky_slope: f64,
    pub upsample: Interpolation,
    pub ablation: Ablation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            resolution: CANONICAL_RESOLUTION,
            width: 1.0,
            max_kernel: None,
            projection_channels: None,
            leaky_slope: 0.2,
            upsample: Interpolation::Nearest,
            ablation: Ablation::default(),
        }
    }
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || resolution % 16 != 0 {
        return Err(Error::Resolution(resolution));
    }
    Ok(())
}

impl ArchConfig {
    fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(1)
    }

    fn k(&self, k: usize) -> usize {
        self.max_kernel.map_or(k, |m| k.min(m))
    }

    fn proj(&self) -> Option<usize> {
        self.projection_channels
    }

    fn net(&self, name: &str, inputs: Vec<(&str, ShapeTriple)>, layers: Vec<LayerSpec>, outputs: &[&str]) -> NetworkSpec {
        NetworkSpec {
            name: name.to_string(),
            inputs: inputs
                .into_iter()
                .map(|(n, shape)| NamedShape {
                    name: n.to_string(),
                    shape,
                })
                .collect(),
            layers,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            leaky_slope: self.leaky_slope,
        }
    }

    fn image(&self) -> ShapeTriple {
        ShapeTriple::new(self.resolution, self.resolution, 3)
    }

    fn upsample(&self, name: &str, input: &str, scale: usize) -> LayerSpec {
        let mut l = LayerSpec::upsample(name, input, scale);
        if self.upsample != Interpolation::Nearest {
            l.interpolation = Some(self.upsample);
        }
        l
    }

    /// Weight-shared VSN encoder, applied to each side view.
    pub fn vsn_encoder(&self) -> NetworkSpec {
        let pool = !self.ablation.mvsn;
        let mut l = vec![LayerSpec::conv("ec1", "image", self.k(7), 1, self.ch(32), LeakyRelu)];
        let mut prev = "ec1";
        if pool {
            l.push(LayerSpec::maxpool("ep1", "ec1", 3, 2));
            prev = "ep1";
        }
        l.push(LayerSpec::residual("er1", prev));
        l.push(LayerSpec::conv("ec2", "er1", self.k(5), 1, self.ch(64), LeakyRelu));
        prev = "ec2";
        if pool {
            l.push(LayerSpec::maxpool("ep2", "ec2", 3, 2));
            prev = "ep2";
        }
        l.push(LayerSpec::residual("er2", prev));
        l.push(LayerSpec::conv("ec3", "er2", self.k(3), 1, self.ch(128), LeakyRelu));
        l.push(LayerSpec::dilated("ec4", "ec3", self.k(3), 2, self.ch(128), LeakyRelu));
        l.push(LayerSpec::dilated("ec5", "ec4", self.k(3), 2, self.ch(128), LeakyRelu));
        l.push(LayerSpec::dilated("ec6", "ec5", self.k(3), 2, self.ch(128), LeakyRelu));
        l.push(LayerSpec::residual("er3", "ec6"));
        l.push(LayerSpec::residual("er4", "er3"));
        l.push(LayerSpec::residual("er5", "er4"));
        l.push(LayerSpec::residual("er6", "er5"));
        for (feat, src) in [("ecfeat1", "ec1"), ("ecfeat2", "ec2"), ("ecfeat3", "ec3")] {
            l.push(LayerSpec::projection(feat, src, self.proj(), LeakyRelu));
        }
        self.net(
            "vsn_encoder",
            vec![("image", self.image())],
            l,
            &["er6", "ecfeat1", "ecfeat2", "ecfeat3"],
        )
    }

    /// VSN decoder consuming both encodings plus the per-view skip features.
    pub fn vsn_decoder(&self) -> Result<NetworkSpec> {
        let enc = self.vsn_encoder();
        let shapes = enc.infer_shapes()?;
        let shape = |n: &str| shapes.iter().find(|(k, _)| k == n).map(|(_, s)| *s).expect("encoder output");
        let inputs = vec![
            ("ec6_l", shape("er6")),
            ("ec6_r", shape("er6")),
            ("ecfeat3_l", shape("ecfeat3")),
            ("ecfeat3_r", shape("ecfeat3")),
            ("ecfeat2_l", shape("ecfeat2")),
            ("ecfeat2_r", shape("ecfeat2")),
            ("ecfeat1_l", shape("ecfeat1")),
            ("ecfeat1_r", shape("ecfeat1")),
        ];
        let up = !self.ablation.mvsn;
        let mut l = vec![
            LayerSpec::concat("dcat0", &["ec6_l", "ec6_r"]),
            LayerSpec::conv("dc1", "dcat0", self.k(3), 1, self.ch(128), Relu),
        ];
        let stages = [
            ("up1", 1, "dc1", "dcat1", "ecfeat3", "dc2", 3, 64),
            ("up2", 2, "dc2", "dcat2", "ecfeat2", "dc3", 5, 32),
            ("up3", 2, "dc3", "dcat3", "ecfeat1", "dc4", 7, 32),
        ];
        for (up_name, scale, src, cat, feat, conv, k, c) in stages {
            let mut from = src;
            if up {
                l.push(self.upsample(up_name, src, scale));
                from = up_name;
            }
            let fl = format!("{feat}_l");
            let fr = format!("{feat}_r");
            l.push(LayerSpec::concat(cat, &[from, &fl, &fr]));
            l.push(LayerSpec::conv(conv, cat, self.k(k), 1, self.ch(c), Relu));
        }
        l.push(LayerSpec::conv("dc5", "dc4", self.k(3), 1, 3, Tanh));
        Ok(self.net("vsn_decoder", inputs, l, &["dc5"]))
    }

    pub fn vdn_encoder(&self) -> NetworkSpec {
        let l = vec![
            LayerSpec::conv("dec1", "image", self.k(7), 2, self.ch(16), LeakyRelu),
            LayerSpec::conv("dec2", "dec1", self.k(5), 2, self.ch(32), LeakyRelu),
            LayerSpec::conv("dec3", "dec2", self.k(3), 2, self.ch(64), LeakyRelu),
            LayerSpec::conv("dec4", "dec3", self.k(3), 2, self.ch(128), LeakyRelu),
            LayerSpec::conv("dec5", "dec4", self.k(3), 1, self.ch(256), LeakyRelu),
            LayerSpec::residual("vr1", "dec5"),
            LayerSpec::projection("dec5_l", "vr1", self.proj(), LeakyRelu),
            LayerSpec::projection("dec5_r", "vr1", self.proj(), LeakyRelu),
        ];
        self.net(
            "vdn_encoder",
            vec![("image", self.image())],
            l,
            &["dec5_l", "dec5_r", "dec3", "dec2", "dec1"],
        )
    }

    /// One VDN side decoder. Skip inputs come from the VDN encoder.
    pub fn vdn_decoder(&self, name: &str) -> Result<NetworkSpec> {
        let enc = self.vdn_encoder();
        let shapes = enc.infer_shapes()?;
        let shape = |n: &str| shapes.iter().find(|(k, _)| k == n).map(|(_, s)| *s).expect("encoder output");
        let inputs = vec![
            ("code", shape("dec5_l")),
            ("skip3", shape("dec3")),
            ("skip2", shape("dec2")),
            ("skip1", shape("dec1")),
        ];
        let l = vec![
            LayerSpec::deconv("ddc1", "code", self.k(3), 2, self.ch(128), LeakyRelu),
            LayerSpec::concat("dcat1", &["ddc1", "skip3"]),
            LayerSpec::deconv("ddc2", "dcat1", self.k(3), 2, self.ch(64), LeakyRelu),
            LayerSpec::concat("dcat2", &["ddc2", "skip2"]),
            LayerSpec::deconv("ddc3", "dcat2", self.k(5), 2, self.ch(32), LeakyRelu),
            LayerSpec::concat("dcat3", &["ddc3", "skip1"]),
            LayerSpec::deconv("ddc4", "dcat3", self.k(7), 2, self.ch(16), LeakyRelu),
            LayerSpec::deconv("ddc5", "ddc4", self.k(3), 1, 3, Tanh),
        ];
        Ok(self.net(name, inputs, l, &["ddc5"]))
    }

    pub fn discriminator(&self) -> NetworkSpec {
        let l = vec![
            LayerSpec::conv("disc1", "image", self.k(5), 2, self.ch(32), LeakyRelu),
            LayerSpec::conv("disc2", "disc1", self.k(5), 2, self.ch(64), LeakyRelu),
            LayerSpec::conv("disc3", "disc2", self.k(5), 2, self.ch(128), LeakyRelu),
            LayerSpec::conv("disc4", "disc3", self.k(5), 2, self.ch(256), LeakyRelu),
            LayerSpec::fully_connected("fc5", "disc4", 1, Sigmoid),
        ];
        self.net("discriminator", vec![("image", self.image())], l, &["fc5"])
    }
}

fn rows(r: &[(&str, usize, usize)]) -> Vec<(String, ShapeTriple)> {
    r.iter()
        .map(|&(n, s, c)| (n.to_string(), ShapeTriple::new(s, s, c)))
        .collect()
}

/// Published output sizes at 224x224, keyed by network name.
pub fn reference_tables() -> Vec<(&'static str, Vec<(String, ShapeTriple)>)> {
    vec![
        (
            "vsn_encoder",
            rows(&[
                ("ec1", 224, 32),
                ("ep1", 112, 32),
                ("ec2", 112, 64),
                ("ep2", 56, 64),
                ("ec3", 56, 128),
                ("ec4", 56, 128),
                ("ec5", 56, 128),
                ("ec6", 56, 128),
            ]),
        ),
        (
            "vsn_decoder",
            rows(&[
                ("dc1", 56, 128),
                ("up1", 56, 128),
                ("dc2", 56, 64),
                ("up2", 112, 64),
                ("dc3", 112, 32),
                ("up3", 224, 32),
                ("dc4", 224, 32),
                ("dc5", 224, 3),
            ]),
        ),
        (
            "vdn_encoder",
            rows(&[
                ("dec1", 112, 16),
                ("dec2", 56, 32),
                ("dec3", 28, 64),
                ("dec4", 14, 128),
                ("dec5", 14, 256),
            ]),
        ),
        (
            "vdn_decoder",
            rows(&[
                ("ddc1", 28, 128),
                ("ddc2", 56, 64),
                ("ddc3", 112, 32),
                ("ddc4", 224, 16),
                ("ddc5", 224, 3),
            ]),
        ),
        (
            "discriminator",
            rows(&[
                ("disc1", 112, 32),
                ("disc2", 56, 64),
                ("disc3", 28, 128),
                ("disc4", 14, 256),
                ("fc5", 1, 1),
            ]),
        ),
    ]
}

/// Reference table for a network, matching decoder names to the shared decoder table.
pub fn reference_table(network: &str) -> Option<Vec<(String, ShapeTriple)>> {
    let key = if network.starts_with("vdn_decoder") {
        "vdn_decoder"
    } else {
        network
    };
    reference_tables()
        .into_iter()
        .find(|(n, _)| *n == key)
        .map(|(_, t)| t)
}
