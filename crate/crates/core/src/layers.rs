//! Declarative layer and network specifications with a shape/parameter calculus.
//!
//! Spatial rules: convolutions use "same" zero padding (stride 1 preserves the
//! size, stride 2 gives `ceil(n / 2)`), max pooling uses the same ceil rule,
//! upsampling multiplies by its scale factor (2 unless stated), a deconvolution
//! multiplies by its stride.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{same_out, Activation, Interpolation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DilatedConv,
    Deconv,
    Maxpool,
    Upsample,
    ResidualBlock,
    FullyConnected,
    Concat,
    #[serde(rename = "projection_1x1")]
    Projection1x1,
}

impl LayerKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, LayerKind::Maxpool | LayerKind::Upsample | LayerKind::Concat)
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub inputs: Vec<String>,
    /// Spatial factor of an upsample layer (default 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolation: Option<Interpolation>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel: None,
            stride: 1,
            dilation: None,
            out_channels: None,
            activation: Activation::None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            scale: None,
            interpolation: None,
        }
    }

    pub fn conv(name: &str, input: &str, kernel: usize, stride: usize, out: usize, act: Activation) -> Self {
        Self {
            kernel: Some(kernel),
            stride,
            out_channels: Some(out),
            activation: act,
            ..Self::base(name, LayerKind::Conv, &[input])
        }
    }

    pub fn dilated(name: &str, input: &str, kernel: usize, dilation: usize, out: usize, act: Activation) -> Self {
        Self {
            kernel: Some(kernel),
            dilation: Some(dilation),
            out_channels: Some(out),
            activation: act,
            ..Self::base(name, LayerKind::DilatedConv, &[input])
        }
    }

    pub fn deconv(name: &str, input: &str, kernel: usize, stride: usize, out: usize, act: Activation) -> Self {
        Self {
            kernel: Some(kernel),
            stride,
            out_channels: Some(out),
            activation: act,
            ..Self::base(name, LayerKind::Deconv, &[input])
        }
    }

    pub fn maxpool(name: &str, input: &str, kernel: usize, stride: usize) -> Self {
        Self {
            kernel: Some(kernel),
            stride,
            ..Self::base(name, LayerKind::Maxpool, &[input])
        }
    }

    pub fn upsample(name: &str, input: &str, scale: usize) -> Self {
        Self {
            scale: Some(scale),
            ..Self::base(name, LayerKind::Upsample, &[input])
        }
    }

    pub fn residual(name: &str, input: &str) -> Self {
        Self {
            kernel: Some(3),
            ..Self::base(name, LayerKind::ResidualBlock, &[input])
        }
    }

    pub fn fully_connected(name: &str, input: &str, out: usize, act: Activation) -> Self {
        Self {
            out_channels: Some(out),
            activation: act,
            ..Self::base(name, LayerKind::FullyConnected, &[input])
        }
    }

    pub fn concat(name: &str, inputs: &[&str]) -> Self {
        Self::base(name, LayerKind::Concat, inputs)
    }

    pub fn projection(name: &str, input: &str, out: Option<usize>, act: Activation) -> Self {
        Self {
            kernel: Some(1),
            out_channels: out,
            activation: act,
            ..Self::base(name, LayerKind::Projection1x1, &[input])
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidLayer {
            layer: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Kernel size, defaulted where the kind implies one.
    pub fn kernel_size(&self) -> Result<usize> {
        match (self.kind, self.kernel) {
            (LayerKind::Projection1x1, None) => Ok(1),
            (LayerKind::ResidualBlock, None) => Ok(3),
            (_, Some(k)) if k > 0 => Ok(k),
            (_, Some(_)) => Err(self.invalid("kernel must be positive")),
            (_, None) => Err(self.invalid("missing kernel size")),
        }
    }

    pub fn dilation_rate(&self) -> usize {
        self.dilation.unwrap_or(1)
    }

    pub fn upsample_scale(&self) -> usize {
        self.scale.unwrap_or(2)
    }

    /// Checks the per-layer invariants that do not depend on input shapes.
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(self.invalid("stride must be positive"));
        }
        if self.out_channels == Some(0) {
            return Err(self.invalid("out_channels must be positive"));
        }
        match self.kind {
            LayerKind::DilatedConv => {
                if self.dilation_rate() < 2 {
                    return Err(self.invalid("dilated_conv requires dilation >= 2"));
                }
            }
            _ if self.dilation.is_some_and(|d| d != 1) => {
                return Err(self.invalid("only dilated_conv may carry a dilation rate"));
            }
            _ => {}
        }
        match self.kind {
            LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Deconv => {
                self.kernel_size()?;
                if self.out_channels.is_none() {
                    return Err(self.invalid("missing out_channels"));
                }
            }
            LayerKind::FullyConnected => {
                if self.out_channels.is_none() {
                    return Err(self.invalid("missing out_channels"));
                }
            }
            LayerKind::Maxpool => {
                self.kernel_size()?;
            }
            LayerKind::Projection1x1 => {
                if self.kernel_size()? != 1 {
                    return Err(self.invalid("projection_1x1 must use a 1x1 kernel"));
                }
                if self.stride != 1 {
                    return Err(self.invalid("projection_1x1 must use stride 1"));
                }
            }
            LayerKind::ResidualBlock => {
                self.kernel_size()?;
                if self.stride != 1 {
                    return Err(self.invalid("residual blocks are stride 1"));
                }
            }
            LayerKind::Upsample => {
                if self.upsample_scale() == 0 {
                    return Err(self.invalid("upsample scale must be positive"));
                }
            }
            LayerKind::Concat => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeTriple {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ShapeTriple {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.height > 0 && self.width > 0 && self.channels > 0
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for ShapeTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Output shape of `spec` applied to `in_shapes` (one per entry of `spec.inputs`).
pub fn infer_shape(spec: &LayerSpec, in_shapes: &[ShapeTriple]) -> Result<ShapeTriple> {
    spec.validate()?;
    if in_shapes.len() != spec.inputs.len() {
        return Err(Error::Arity {
            layer: spec.name.clone(),
            expected: spec.inputs.len().to_string(),
            got: in_shapes.len(),
        });
    }
    if let Some(bad) = in_shapes.iter().find(|s| !s.is_positive()) {
        return Err(Error::Shape(format!("layer `{}` got input {bad}", spec.name)));
    }
    let single = || -> Result<ShapeTriple> {
        match in_shapes {
            [s] => Ok(*s),
            _ => Err(Error::Arity {
                layer: spec.name.clone(),
                expected: "1".into(),
                got: in_shapes.len(),
            }),
        }
    };
    let out = match spec.kind {
        LayerKind::Conv | LayerKind::DilatedConv => {
            let s = single()?;
            ShapeTriple::new(
                same_out(s.height, spec.stride),
                same_out(s.width, spec.stride),
                spec.out_channels.unwrap_or(0),
            )
        }
        LayerKind::Projection1x1 => {
            let s = single()?;
            ShapeTriple::new(s.height, s.width, spec.out_channels.unwrap_or(s.channels))
        }
        LayerKind::ResidualBlock => single()?,
        LayerKind::Maxpool => {
            let s = single()?;
            ShapeTriple::new(same_out(s.height, spec.stride), same_out(s.width, spec.stride), s.channels)
        }
        LayerKind::Deconv => {
            let s = single()?;
            ShapeTriple::new(
                s.height * spec.stride,
                s.width * spec.stride,
                spec.out_channels.unwrap_or(0),
            )
        }
        LayerKind::Upsample => {
            let s = single()?;
            let f = spec.upsample_scale();
            ShapeTriple::new(s.height * f, s.width * f, s.channels)
        }
        LayerKind::FullyConnected => {
            single()?;
            ShapeTriple::new(1, 1, spec.out_channels.unwrap_or(0))
        }
        LayerKind::Concat => {
            let first = in_shapes.first().ok_or_else(|| Error::Arity {
                layer: spec.name.clone(),
                expected: ">= 1".into(),
                got: 0,
            })?;
            if let Some(s) = in_shapes
                .iter()
                .find(|s| (s.height, s.width) != (first.height, first.width))
            {
                return Err(Error::Shape(format!(
                    "concat `{}` mixes spatial sizes {first} and {s}",
                    spec.name
                )));
            }
            ShapeTriple::new(first.height, first.width, in_shapes.iter().map(|s| s.channels).sum())
        }
    };
    if !out.is_positive() {
        return Err(Error::Shape(format!("layer `{}` produces {out}", spec.name)));
    }
    Ok(out)
}

/// Trainable parameter count of one layer given its input shapes.
pub fn layer_params(spec: &LayerSpec, in_shapes: &[ShapeTriple]) -> Result<u64> {
    let out = infer_shape(spec, in_shapes)?;
    let cin = in_shapes.first().map(|s| s.channels as u64).unwrap_or(0);
    let cout = out.channels as u64;
    Ok(match spec.kind {
        LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Deconv | LayerKind::Projection1x1 => {
            let k = spec.kernel_size()? as u64;
            k * k * cin * cout + cout
        }
        LayerKind::ResidualBlock => {
            let k = spec.kernel_size()? as u64;
            2 * (k * k * cin * cin + cin)
        }
        LayerKind::FullyConnected => in_shapes[0].numel() as u64 * cout + cout,
        LayerKind::Maxpool | LayerKind::Upsample | LayerKind::Concat => 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedShape {
    pub name: String,
    pub shape: ShapeTriple,
}

fn default_slope() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub inputs: Vec<NamedShape>,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
    /// Negative slope shared by every leaky-ReLU in the network.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl NetworkSpec {
    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidNetwork {
            network: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Checks naming, ordering (every input declared earlier, hence acyclic) and outputs.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for i in &self.inputs {
            if !seen.insert(i.name.as_str()) {
                return Err(self.invalid(format!("duplicate name `{}`", i.name)));
            }
            if !i.shape.is_positive() {
                return Err(self.invalid(format!("input `{}` has shape {}", i.name, i.shape)));
            }
        }
        for l in &self.layers {
            l.validate()?;
            if l.inputs.is_empty() {
                return Err(l.invalid("layer has no inputs"));
            }
            for src in &l.inputs {
                if !seen.contains(src.as_str()) {
                    return Err(l.invalid(format!("input `{src}` is not declared before this layer")));
                }
            }
            if !seen.insert(l.name.as_str()) {
                return Err(self.invalid(format!("duplicate name `{}`", l.name)));
            }
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                return Err(self.invalid(format!("output `{o}` is not declared")));
            }
        }
        Ok(())
    }

    /// Shapes of every input and layer, in declaration order.
    pub fn infer_shapes(&self) -> Result<Vec<(String, ShapeTriple)>> {
        self.validate()?;
        let mut shapes: HashMap<&str, ShapeTriple> = HashMap::new();
        let mut ordered = Vec::with_capacity(self.inputs.len() + self.layers.len());
        for i in &self.inputs {
            shapes.insert(&i.name, i.shape);
            ordered.push((i.name.clone(), i.shape));
        }
        for l in &self.layers {
            let ins: Vec<ShapeTriple> = l.inputs.iter().map(|n| shapes[n.as_str()]).collect();
            let out = infer_shape(l, &ins)?;
            shapes.insert(&l.name, out);
            ordered.push((l.name.clone(), out));
        }
        Ok(ordered)
    }

    pub fn shape_of(&self, name: &str) -> Result<ShapeTriple> {
        self.infer_shapes()?
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Input shapes of each layer, in declaration order.
    pub fn layer_inputs(&self) -> Result<Vec<Vec<ShapeTriple>>> {
        let shapes: HashMap<String, ShapeTriple> = self.infer_shapes()?.into_iter().collect();
        Ok(self
            .layers
            .iter()
            .map(|l| l.inputs.iter().map(|n| shapes[n]).collect())
            .collect())
    }
}

pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    let inputs = spec.layer_inputs()?;
    spec.layers
        .iter()
        .zip(&inputs)
        .map(|(l, ins)| layer_params(l, ins))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub layer: String,
    pub expected: ShapeTriple,
    pub inferred: ShapeTriple,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub network: String,
    pub rows: Vec<TableRow>,
}

impl TableReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn first_failure(&self) -> Option<&TableRow> {
        self.rows.iter().find(|r| !r.pass)
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.network)?;
        for r in &self.rows {
            writeln!(
                f,
                "  {:<10} expected {:<14} inferred {:<14} {}",
                r.layer,
                r.expected.to_string(),
                r.inferred.to_string(),
                if r.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares inferred layer shapes against a table of expected output sizes.
pub fn validate_against_table(spec: &NetworkSpec, expected: &[(String, ShapeTriple)]) -> Result<TableReport> {
    let mut report = TableReport {
        network: spec.name.clone(),
        rows: Vec::with_capacity(expected.len()),
    };
    if expected.is_empty() {
        return Ok(report);
    }
    let shapes: HashMap<String, ShapeTriple> = spec.infer_shapes()?.into_iter().collect();
    for (name, want) in expected {
        let got = *shapes
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        report.rows.push(TableRow {
            layer: name.clone(),
            expected: *want,
            inferred: got,
            pass: got == *want,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(h: usize, w: usize, c: usize) -> ShapeTriple {
        ShapeTriple::new(h, w, c)
    }

    #[test]
    fn table_one_rows() {
        let ec1 = LayerSpec::conv("ec1", "x", 7, 1, 32, Activation::LeakyRelu);
        assert_eq!(infer_shape(&ec1, &[s(224, 224, 3)]).unwrap(), s(224, 224, 32));
        let ep1 = LayerSpec::maxpool("ep1", "ec1", 3, 2);
        assert_eq!(infer_shape(&ep1, &[s(224, 224, 32)]).unwrap(), s(112, 112, 32));
        let up2 = LayerSpec::upsample("up2", "dc2", 2);
        assert_eq!(infer_shape(&up2, &[s(56, 56, 64)]).unwrap(), s(112, 112, 64));
        let ddc1 = LayerSpec::deconv("ddc1", "dec5_l", 3, 2, 128, Activation::LeakyRelu);
        assert_eq!(infer_shape(&ddc1, &[s(14, 14, 256)]).unwrap(), s(28, 28, 128));
        let cat = LayerSpec::concat("cat", &["a", "b"]);
        assert_eq!(infer_shape(&cat, &[s(56, 56, 128), s(56, 56, 128)]).unwrap(), s(56, 56, 256));
    }

    #[test]
    fn shape_errors() {
        let cat = LayerSpec::concat("cat", &["a", "b"]);
        assert!(matches!(infer_shape(&cat, &[s(56, 56, 1), s(28, 28, 1)]), Err(Error::Shape(_))));
        assert!(matches!(infer_shape(&cat, &[s(56, 56, 1)]), Err(Error::Arity { .. })));
        let bad = LayerSpec::dilated("ec4", "x", 3, 1, 8, Activation::None);
        assert!(matches!(bad.validate(), Err(Error::InvalidLayer { .. })));
        let zero = LayerSpec::conv("c", "x", 3, 1, 0, Activation::None);
        assert!(infer_shape(&zero, &[s(4, 4, 1)]).is_err());
    }

    fn single(layer: LayerSpec, input: ShapeTriple) -> NetworkSpec {
        NetworkSpec {
            name: "t".into(),
            inputs: vec![NamedShape {
                name: "x".into(),
                shape: input,
            }],
            outputs: vec![layer.name.clone()],
            layers: vec![layer],
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn parameter_counts() {
        let conv = single(LayerSpec::conv("c", "x", 3, 1, 8, Activation::None), s(5, 5, 3));
        assert_eq!(count_params(&conv).unwrap(), 224);
        let pool = single(LayerSpec::maxpool("p", "x", 3, 2), s(8, 8, 3));
        assert_eq!(count_params(&pool).unwrap(), 0);
        let fc = single(
            LayerSpec::fully_connected("fc5", "x", 1, Activation::Sigmoid),
            s(14, 14, 256),
        );
        assert_eq!(count_params(&fc).unwrap(), 50177);
        let res = single(LayerSpec::residual("r", "x"), s(8, 8, 4));
        assert_eq!(count_params(&res).unwrap(), 2 * (9 * 16 + 4));
    }

    #[test]
    fn empty_table_passes() {
        let conv = single(LayerSpec::conv("c", "x", 3, 1, 8, Activation::None), s(5, 5, 3));
        let r = validate_against_table(&conv, &[]).unwrap();
        assert!(r.passed() && r.rows.is_empty());
        assert!(matches!(
            validate_against_table(&conv, &[("nope".into(), s(1, 1, 1))]),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn undeclared_input_rejected() {
        let mut net = single(LayerSpec::conv("c", "x", 3, 1, 8, Activation::None), s(5, 5, 3));
        net.layers[0].inputs = vec!["later".into()];
        assert!(net.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let net = single(LayerSpec::dilated("d", "x", 3, 2, 8, Activation::LeakyRelu), s(5, 5, 3));
        let text = serde_json::to_string(&net).unwrap();
        assert!(text.contains("dilated_conv"));
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
    }

    proptest! {
        #[test]
        fn same_conv_preserves_size(h in 1usize..80, w in 1usize..80, c in 1usize..9,
                                    k in prop::sample::select(vec![1usize, 3, 5, 7]), r in 2usize..4) {
            let conv = LayerSpec::conv("c", "x", k, 1, 4, Activation::None);
            prop_assert_eq!(infer_shape(&conv, &[s(h, w, c)]).unwrap(), s(h, w, 4));
            let dil = LayerSpec::dilated("d", "x", k, r, 4, Activation::None);
            let first = infer_shape(&dil, &[s(h, w, c)]).unwrap();
            prop_assert_eq!(first, s(h, w, 4));
            // deterministic
            prop_assert_eq!(infer_shape(&dil, &[s(h, w, c)]).unwrap(), first);
        }

        #[test]
        fn pool_then_upsample_is_identity_on_even(h in 1usize..60, w in 1usize..60, c in 1usize..9) {
            let (h, w) = (2 * h, 2 * w);
            let pooled = infer_shape(&LayerSpec::maxpool("p", "x", 3, 2), &[s(h, w, c)]).unwrap();
            prop_assert_eq!(pooled, s(h / 2, w / 2, c));
            let up = infer_shape(&LayerSpec::upsample("u", "p", 2), &[pooled]).unwrap();
            prop_assert_eq!(up, s(h, w, c));
        }

        #[test]
        fn params_are_additive(c1 in 1usize..6, c2 in 1usize..6, k in 1usize..4) {
            let a = LayerSpec::conv("a", "x", k, 1, c1, Activation::None);
            let b = LayerSpec::conv("b", "a", k, 2, c2, Activation::None);
            let both = NetworkSpec {
                name: "t".into(),
                inputs: vec![NamedShape { name: "x".into(), shape: s(8, 8, 3) }],
                layers: vec![a.clone(), b.clone()],
                outputs: vec!["b".into()],
                leaky_slope: 0.2,
            };
            let pa = count_params(&single(a, s(8, 8, 3))).unwrap();
            let mut b_alone = b.clone();
            b_alone.inputs = vec!["x".into()];
            let pb = count_params(&single(b_alone, s(8, 8, c1))).unwrap();
            prop_assert_eq!(count_params(&both).unwrap(), pa + pb);
        }
    }
}
