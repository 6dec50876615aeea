//! Executes a [`NetworkSpec`] against a [`ParameterSet`]: forward passes that
//! keep what backward needs, and reverse-mode gradients for parameters and
//! network inputs.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec, NetworkSpec};
use crate::ops::{self, Activation, ConvGeometry};
use crate::params::{GradSet, ParameterSet};
use crate::tensor::Tensor;

enum Aux {
    None,
    Pool(Vec<u32>),
    /// Post-activation hidden map of a residual block.
    Residual(Tensor),
}

/// Values recorded by a forward pass, indexed inputs first, then layers.
pub struct Trace {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    n_inputs: usize,
    index: HashMap<String, usize>,
}

impl Trace {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Hash of every piecewise-linear branch taken (activation signs and
    /// pooling winners). Two parameter settings with equal signatures lie in
    /// the same smooth region of the network function.
    pub fn kink_signature(&self, spec: &NetworkSpec, hasher: &mut DefaultHasher) {
        for (li, layer) in spec.layers.iter().enumerate() {
            let node = self.n_inputs + li;
            if layer.activation.has_kink() {
                hash_signs(&self.values[node], hasher);
            }
            match &self.aux[node] {
                Aux::Pool(arg) => arg.hash(hasher),
                Aux::Residual(hidden) => hash_signs(hidden, hasher),
                Aux::None => {}
            }
        }
    }
}

fn hash_signs(t: &Tensor, hasher: &mut DefaultHasher) {
    for chunk in t.data.chunks(64) {
        let mut bits = 0u64;
        for (i, v) in chunk.iter().enumerate() {
            if *v > 0.0 {
                bits |= 1 << i;
            }
        }
        bits.hash(hasher);
    }
}

fn pname(prefix: &str, layer: &str, tail: &str) -> String {
    format!("{prefix}/{layer}/{tail}")
}

fn conv_geometry(layer: &LayerSpec, input: &Tensor) -> Result<ConvGeometry> {
    let (h, w) = input.spatial();
    Ok(ConvGeometry::same(h, w, layer.kernel_size()?, layer.stride, layer.dilation_rate()))
}

/// Geometry of the forward convolution whose transpose is this deconvolution.
fn deconv_geometry(layer: &LayerSpec, input: &Tensor) -> Result<ConvGeometry> {
    let (h, w) = input.spatial();
    Ok(ConvGeometry::same(h * layer.stride, w * layer.stride, layer.kernel_size()?, layer.stride, 1))
}

fn cout(layer: &LayerSpec, input: &Tensor) -> usize {
    layer.out_channels.unwrap_or(input.channels())
}

fn check_inputs(spec: &NetworkSpec, inputs: &[(&str, &Tensor)]) -> Result<()> {
    if inputs.len() != spec.inputs.len() {
        return Err(Error::Shape(format!(
            "network `{}` takes {} inputs, got {}",
            spec.name,
            spec.inputs.len(),
            inputs.len()
        )));
    }
    for (decl, (name, t)) in spec.inputs.iter().zip(inputs) {
        let s = decl.shape;
        if decl.name != *name || t.shape[1..] != [s.channels, s.height, s.width] {
            return Err(Error::Shape(format!(
                "network `{}` input `{}` expects {}, got `{name}` with CHW {:?}",
                spec.name,
                decl.name,
                s,
                &t.shape[1..]
            )));
        }
    }
    Ok(())
}

/// Runs the network. Inputs are given in declaration order.
pub fn forward(spec: &NetworkSpec, prefix: &str, params: &ParameterSet, inputs: &[(&str, &Tensor)]) -> Result<Trace> {
    check_inputs(spec, inputs)?;
    let n_nodes = spec.inputs.len() + spec.layers.len();
    let mut trace = Trace {
        values: Vec::with_capacity(n_nodes),
        aux: Vec::with_capacity(n_nodes),
        n_inputs: spec.inputs.len(),
        index: HashMap::with_capacity(n_nodes),
    };
    for (i, (_, t)) in inputs.iter().enumerate() {
        trace.values.push((*t).clone());
        trace.aux.push(Aux::None);
        trace.index.insert(spec.inputs[i].name.clone(), i);
    }
    let slope = spec.leaky_slope;
    for layer in &spec.layers {
        let srcs: Vec<&Tensor> = layer.inputs.iter().map(|n| &trace.values[trace.index[n]]).collect();
        let x = srcs[0];
        let (mut out, aux) = match layer.kind {
            LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Projection1x1 => {
                let g = conv_geometry(layer, x)?;
                let w = params.data(&pname(prefix, &layer.name, "weight"))?;
                let b = params.data(&pname(prefix, &layer.name, "bias"))?;
                (ops::conv2d_forward(x, w, b, cout(layer, x), &g), Aux::None)
            }
            LayerKind::Deconv => {
                let g = deconv_geometry(layer, x)?;
                let w = params.data(&pname(prefix, &layer.name, "weight"))?;
                let b = params.data(&pname(prefix, &layer.name, "bias"))?;
                (ops::deconv2d_forward(x, w, b, cout(layer, x), &g), Aux::None)
            }
            LayerKind::Maxpool => {
                let g = conv_geometry(layer, x)?;
                let (out, arg) = ops::maxpool_forward(x, &g);
                (out, Aux::Pool(arg))
            }
            LayerKind::Upsample => (
                ops::upsample_forward(x, layer.upsample_scale(), layer.interpolation.unwrap_or_default()),
                Aux::None,
            ),
            LayerKind::Concat => (Tensor::cat_channels(&srcs)?, Aux::None),
            LayerKind::FullyConnected => {
                let w = params.data(&pname(prefix, &layer.name, "weight"))?;
                let b = params.data(&pname(prefix, &layer.name, "bias"))?;
                (ops::linear_forward(x, w, b, cout(layer, x)), Aux::None)
            }
            LayerKind::ResidualBlock => {
                let g = conv_geometry(layer, x)?;
                let c = x.channels();
                let w1 = params.data(&pname(prefix, &layer.name, "conv1/weight"))?;
                let b1 = params.data(&pname(prefix, &layer.name, "conv1/bias"))?;
                let w2 = params.data(&pname(prefix, &layer.name, "conv2/weight"))?;
                let b2 = params.data(&pname(prefix, &layer.name, "conv2/bias"))?;
                let mut hidden = ops::conv2d_forward(x, w1, b1, c, &g);
                Activation::LeakyRelu.apply(&mut hidden, slope);
                let mut out = ops::conv2d_forward(&hidden, w2, b2, c, &g);
                out.add_assign(x);
                (out, Aux::Residual(hidden))
            }
        };
        layer.activation.apply(&mut out, slope);
        trace.index.insert(layer.name.clone(), trace.values.len());
        trace.values.push(out);
        trace.aux.push(aux);
    }
    Ok(trace)
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Removes the accumulator for `name` (zeros if absent); the caller puts it back.
fn take_buf(grads: &mut GradSet, params: &ParameterSet, name: &str) -> Result<Vec<f64>> {
    match grads.remove(name) {
        Some(buf) => Ok(buf),
        None => Ok(vec![0.0; params.data(name)?.len()]),
    }
}

/// Reverse pass. `out_grads` seeds gradients on named nodes (usually the
/// outputs). Parameter gradients are accumulated into `grads` under their
/// full names; gradients for the network inputs are returned when requested.
pub fn backward(
    spec: &NetworkSpec,
    prefix: &str,
    params: &ParameterSet,
    trace: &Trace,
    out_grads: &[(&str, Tensor)],
    grads: &mut GradSet,
    want_input_grads: bool,
) -> Result<HashMap<String, Tensor>> {
    let n_in = trace.n_inputs;
    let n_nodes = trace.values.len();
    let mut node_grad: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
    for (name, g) in out_grads {
        let &i = trace
            .index
            .get(*name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        if g.shape != trace.values[i].shape {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, value has {:?}",
                g.shape, trace.values[i].shape
            )));
        }
        add_grad(&mut node_grad[i], g.clone());
    }
    // Does the input-gradient of a node ever need to be propagated?
    let mut needs = vec![want_input_grads; n_in];
    for layer in &spec.layers {
        let upstream = layer.inputs.iter().any(|n| needs[trace.index[n]]);
        needs.push(upstream || layer.kind.is_trainable());
    }
    let slope = spec.leaky_slope;
    for (li, layer) in spec.layers.iter().enumerate().rev() {
        let node = n_in + li;
        let Some(mut g) = node_grad[node].take() else {
            continue;
        };
        layer.activation.backward(&trace.values[node], &mut g, slope);
        let src_idx: Vec<usize> = layer.inputs.iter().map(|n| trace.index[n]).collect();
        let x = &trace.values[src_idx[0]];
        let want_dx = src_idx.iter().any(|&i| needs[i]);
        let dx: Option<Tensor> = match layer.kind {
            LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Projection1x1 => {
                let geo = conv_geometry(layer, x)?;
                let wname = pname(prefix, &layer.name, "weight");
                let bname = pname(prefix, &layer.name, "bias");
                let w = params.data(&wname)?;
                let mut dw = take_buf(grads, params, &wname)?;
                let mut db = take_buf(grads, params, &bname)?;
                let dx = ops::conv2d_backward(x, w, &g, &geo, &mut dw, &mut db, want_dx);
                grads.insert(wname, dw);
                grads.insert(bname, db);
                dx
            }
            LayerKind::Deconv => {
                let geo = deconv_geometry(layer, x)?;
                let wname = pname(prefix, &layer.name, "weight");
                let bname = pname(prefix, &layer.name, "bias");
                let w = params.data(&wname)?;
                let mut dw = take_buf(grads, params, &wname)?;
                let mut db = take_buf(grads, params, &bname)?;
                let dx = ops::deconv2d_backward(x, w, &g, &geo, &mut dw, &mut db, want_dx);
                grads.insert(wname, dw);
                grads.insert(bname, db);
                dx
            }
            LayerKind::FullyConnected => {
                let wname = pname(prefix, &layer.name, "weight");
                let bname = pname(prefix, &layer.name, "bias");
                let w = params.data(&wname)?;
                let mut dw = take_buf(grads, params, &wname)?;
                let mut db = take_buf(grads, params, &bname)?;
                let dx = ops::linear_backward(x, w, &g, &mut dw, &mut db, want_dx);
                grads.insert(wname, dw);
                grads.insert(bname, db);
                dx
            }
            LayerKind::Maxpool => match &trace.aux[node] {
                Aux::Pool(arg) => want_dx.then(|| ops::maxpool_backward(x.shape, arg, &g)),
                _ => unreachable!("maxpool without argmax"),
            },
            LayerKind::Upsample => want_dx.then(|| {
                ops::upsample_backward(x.shape, layer.upsample_scale(), layer.interpolation.unwrap_or_default(), &g)
            }),
            LayerKind::Concat => {
                let sizes: Vec<usize> = src_idx.iter().map(|&i| trace.values[i].channels()).collect();
                for (part, &i) in g.split_channels(&sizes).into_iter().zip(&src_idx) {
                    if needs[i] {
                        add_grad(&mut node_grad[i], part);
                    }
                }
                None
            }
            LayerKind::ResidualBlock => {
                let Aux::Residual(hidden) = &trace.aux[node] else {
                    unreachable!("residual block without hidden state")
                };
                let geo = conv_geometry(layer, x)?;
                let names: Vec<String> = ["conv1/weight", "conv1/bias", "conv2/weight", "conv2/bias"]
                    .iter()
                    .map(|t| pname(prefix, &layer.name, t))
                    .collect();
                let mut bufs: Vec<Vec<f64>> = names
                    .iter()
                    .map(|n| take_buf(grads, params, n))
                    .collect::<Result<_>>()?;
                let (b01, b23) = bufs.split_at_mut(2);
                let (dw1, db1) = b01.split_at_mut(1);
                let (dw2, db2) = b23.split_at_mut(1);
                let w1 = params.data(&names[0])?;
                let w2 = params.data(&names[2])?;
                let mut dh = ops::conv2d_backward(hidden, w2, &g, &geo, &mut dw2[0], &mut db2[0], true)
                    .expect("requested");
                Activation::LeakyRelu.backward(hidden, &mut dh, slope);
                let dx_inner = ops::conv2d_backward(x, w1, &dh, &geo, &mut dw1[0], &mut db1[0], want_dx);
                for (n, b) in names.into_iter().zip(bufs) {
                    grads.insert(n, b);
                }
                dx_inner.map(|mut d| {
                    d.add_assign(&g);
                    d
                })
            }
        };
        if let Some(dx) = dx {
            if needs[src_idx[0]] {
                add_grad(&mut node_grad[src_idx[0]], dx);
            }
        }
    }
    let mut out = HashMap::new();
    if want_input_grads {
        for (i, decl) in spec.inputs.iter().enumerate() {
            let g = node_grad[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(trace.values[i].shape));
            out.insert(decl.name.clone(), g);
        }
    }
    Ok(out)
}
