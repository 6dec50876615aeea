//! Adam with a one-shot step decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParameterSet, Partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub decay_factor: f64,
    pub decay_at_iteration: u64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            lr_generator: 1e-4,
            lr_discriminator: 1e-5,
            decay_factor: 0.1,
            decay_at_iteration: 185_700,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{n} must lie in (0, 1), got {b}"));
            }
        }
        if self.decay_at_iteration < 1 {
            return bad("decay_at_iteration must be >= 1".into());
        }
        if !(self.decay_factor > 0.0 && self.epsilon > 0.0) {
            return bad("decay_factor and epsilon must be > 0".into());
        }
        Ok(())
    }
}

/// Base rate before `decay_at_iteration`, scaled by `decay_factor` from then on.
///
/// The decayed rate is the decimal product of the two settings (rounded to 15
/// significant digits), so `1e-5 * 0.1` is exactly `1e-6` rather than the
/// binary product `1.0000000000000002e-6`.
pub fn learning_rate(t: u64, cfg: &OptimizerConfig, which: Which) -> f64 {
    let base = match which {
        Which::Generator => cfg.lr_generator,
        Which::Discriminator => cfg.lr_discriminator,
    };
    if t >= cfg.decay_at_iteration {
        format!("{:.14e}", base * cfg.decay_factor)
            .parse()
            .expect("formatted float parses")
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam moments and step counters, one counter per partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
    pub steps: BTreeMap<Partition, u64>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let moments = params
            .entries
            .iter()
            .map(|(n, p)| {
                (
                    n.clone(),
                    Moments {
                        m: vec![0.0; p.data.len()],
                        v: vec![0.0; p.data.len()],
                    },
                )
            })
            .collect();
        let steps = Partition::ALL.iter().map(|&p| (p, 0)).collect();
        Self { moments, steps }
    }

    /// Moment shapes mirror parameter shapes.
    pub fn check(&self, params: &ParameterSet) -> Result<()> {
        if self.moments.len() != params.entries.len() {
            return Err(Error::Params(format!(
                "{} moment entries for {} parameters",
                self.moments.len(),
                params.entries.len()
            )));
        }
        for (name, p) in &params.entries {
            let m = self
                .moments
                .get(name)
                .ok_or_else(|| Error::Params(format!("no moments for `{name}`")))?;
            if m.m.len() != p.data.len() || m.v.len() != p.data.len() {
                return Err(Error::Params(format!("moment size mismatch for `{name}`")));
            }
        }
        Ok(())
    }

    /// One Adam step on every parameter of `partition`. Missing gradients
    /// count as zero.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &GradSet,
        partition: Partition,
        lr: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.partition != partition {
                return Err(Error::Params(format!(
                    "gradient for `{name}` ({}) passed to the {partition} update",
                    p.partition
                )));
            }
            if g.len() != p.data.len() {
                return Err(Error::Params(format!("gradient size mismatch for `{name}`")));
            }
            if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` contains {v}")));
            }
        }
        let t = self.steps.entry(partition).or_insert(0);
        *t += 1;
        let t = *t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.entries.iter_mut().filter(|(_, p)| p.partition == partition) {
            let mo = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Params(format!("no moments for `{name}`")))?;
            let g = grads.get(name);
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * gi;
                mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}
