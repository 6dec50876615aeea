//! Named, partitioned trainable parameters.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, NetworkSpec};

/// Which optimizer update owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Synthesis network (generator).
    ThetaG,
    /// Decomposition network.
    ThetaV,
    /// Discriminator.
    ThetaD,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::ThetaG, Partition::ThetaV, Partition::ThetaD];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::ThetaG => "theta_G",
            Partition::ThetaV => "theta_V",
            Partition::ThetaD => "theta_D",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradients keyed like [`ParameterSet`] entries.
pub type GradSet = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub entries: BTreeMap<String, Param>,
}

/// Weight/bias initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of the truncated normal (cut at two deviations).
    pub std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { std: 0.02 }
    }
}

/// `(name, shape, is_bias)` for every parameter tensor the network needs.
pub fn param_layout(spec: &NetworkSpec, prefix: &str) -> Result<Vec<(String, Vec<usize>, bool)>> {
    let inputs = spec.layer_inputs()?;
    let mut out = Vec::new();
    for (layer, ins) in spec.layers.iter().zip(&inputs) {
        if !layer.kind.is_trainable() {
            continue;
        }
        let shape = crate::layers::infer_shape(layer, ins)?;
        let cin = ins[0].channels;
        let cout = shape.channels;
        let base = format!("{prefix}/{}", layer.name);
        let k = layer.kernel_size().unwrap_or(1);
        match layer.kind {
            LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Projection1x1 => {
                out.push((format!("{base}/weight"), vec![cout, cin, k, k], false));
                out.push((format!("{base}/bias"), vec![cout], true));
            }
            LayerKind::Deconv => {
                out.push((format!("{base}/weight"), vec![cin, cout, k, k], false));
                out.push((format!("{base}/bias"), vec![cout], true));
            }
            LayerKind::FullyConnected => {
                out.push((format!("{base}/weight"), vec![cout, ins[0].numel()], false));
                out.push((format!("{base}/bias"), vec![cout], true));
            }
            LayerKind::ResidualBlock => {
                for inner in ["conv1", "conv2"] {
                    out.push((format!("{base}/{inner}/weight"), vec![cin, cin, k, k], false));
                    out.push((format!("{base}/{inner}/bias"), vec![cin], true));
                }
            }
            LayerKind::Maxpool | LayerKind::Upsample | LayerKind::Concat => unreachable!(),
        }
    }
    Ok(out)
}

impl ParameterSet {
    /// Adds freshly initialized parameters for `spec` under `prefix`.
    pub fn init_network<R: Rng>(
        &mut self,
        spec: &NetworkSpec,
        prefix: &str,
        partition: Partition,
        init: InitConfig,
        rng: &mut R,
    ) -> Result<()> {
        let normal = Normal::new(0.0, init.std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("init std: {e}")))?;
        for (name, shape, is_bias) in param_layout(spec, prefix)? {
            let len = shape.iter().product();
            let data = if is_bias || init.std == 0.0 {
                vec![0.0; len]
            } else {
                (0..len)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * init.std {
                            break v;
                        }
                    })
                    .collect()
            };
            if self.entries.contains_key(&name) {
                return Err(Error::Params(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(
                name,
                Param {
                    partition,
                    shape,
                    data,
                },
            );
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Params(format!("missing parameter `{name}`")))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.data)
            .ok_or_else(|| Error::Params(format!("missing parameter `{name}`")))
    }

    pub fn names_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, p)| p.partition == partition)
            .map(|(n, _)| n.as_str())
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.entries
            .values()
            .filter(|p| p.partition == partition)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// True when every entry of `partition` is bitwise equal in both sets.
    pub fn partition_bitwise_eq(&self, other: &ParameterSet, partition: Partition) -> bool {
        let pick = |s: &ParameterSet| -> Vec<(String, Vec<u64>)> {
            s.entries
                .iter()
                .filter(|(_, p)| p.partition == partition)
                .map(|(n, p)| (n.clone(), p.data.iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        pick(self) == pick(other)
    }

    /// Verifies the entries match the layout expected for `spec` exactly.
    pub fn check_layout(&self, spec: &NetworkSpec, prefix: &str, partition: Partition) -> Result<()> {
        for (name, shape, _) in param_layout(spec, prefix)? {
            let p = self.get(&name)?;
            if p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Params(format!(
                    "`{name}` has shape {:?}, layout requires {shape:?}",
                    p.shape
                )));
            }
            if p.partition != partition {
                return Err(Error::Params(format!(
                    "`{name}` tagged {}, expected {partition}",
                    p.partition
                )));
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst`, creating entries as needed.
pub fn accumulate(dst: &mut GradSet, name: &str, src: &[f64]) {
    match dst.get_mut(name) {
        Some(g) => g.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => {
            dst.insert(name.to_string(), src.to_vec());
        }
    }
}
