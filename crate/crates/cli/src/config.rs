use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scgn::arch::Ablation;
use scgn::losses::{LossWeights, SharpnessConfig};
use scgn::ops::Interpolation;
use scgn::optim::OptimizerConfig;
use scgn::trainer::{TrainConfig, VdnInput};

/// Flat run configuration. Every key is optional in the file; command-line
/// flags take precedence over file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub split: Option<String>,
    /// Train or evaluate on this many procedural triplets instead of a dataset.
    pub synthetic: Option<usize>,
    pub synthetic_seed: u64,
    pub resolution: usize,
    pub width: f64,
    pub upsample: Interpolation,
    pub resize: Interpolation,
    pub iterations: u64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_factor: f64,
    pub decay_at_iteration: u64,
    pub init_std: f64,
    pub sharpness_block: Option<usize>,
    pub sharpness_kernel: usize,
    pub sharpness_sigma: f64,
    pub vdn_input: VdnInput,
    pub checkpoint_interval: u64,
    pub log_every: u64,
    pub ablation: Vec<String>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub checkpoint: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub left: Option<PathBuf>,
    pub right: Option<PathBuf>,
    pub middle: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub grid: bool,
    pub spec: Vec<PathBuf>,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let w = LossWeights::default();
        let t = TrainConfig::default();
        let s = SharpnessConfig::default();
        Self {
            dataset_root: None,
            split: None,
            synthetic: None,
            synthetic_seed: 0,
            resolution: scgn::arch::CANONICAL_RESOLUTION,
            width: 1.0,
            upsample: Interpolation::Nearest,
            resize: Interpolation::Bilinear,
            iterations: t.total_iterations,
            batch_size: t.batch_size,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lr_generator: opt.lr_generator,
            lr_discriminator: opt.lr_discriminator,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            decay_factor: opt.decay_factor,
            decay_at_iteration: opt.decay_at_iteration,
            init_std: scgn::params::InitConfig::default().std,
            sharpness_block: None,
            sharpness_kernel: s.gaussian_kernel,
            sharpness_sigma: s.gaussian_sigma,
            vdn_input: VdnInput::default(),
            checkpoint_interval: t.checkpoint_interval,
            log_every: 100,
            ablation: Vec::new(),
            seed: None,
            resume: None,
            checkpoint: Vec::new(),
            output_dir: PathBuf::from("runs/scgn"),
            left: None,
            right: None,
            middle: None,
            output: None,
            grid: false,
            spec: Vec::new(),
            gradcheck_samples: 25,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn ablation(&self) -> Result<Ablation> {
        let mut a = Ablation::default();
        for name in &self.ablation {
            for part in name.split(',') {
                a.apply(part)?;
            }
        }
        Ok(a)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            total_iterations: self.iterations,
            batch_size: self.batch_size,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
            },
            optimizer: OptimizerConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                lr_generator: self.lr_generator,
                lr_discriminator: self.lr_discriminator,
                decay_factor: self.decay_factor,
                decay_at_iteration: self.decay_at_iteration,
                epsilon: self.epsilon,
                ..Default::default()
            },
            ablation: self.ablation()?,
            checkpoint_interval: self.checkpoint_interval,
            seed,
            sharpness: Some(self.sharpness()),
            vdn_input: self.vdn_input,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sharpness(&self) -> SharpnessConfig {
        SharpnessConfig {
            block_size: self
                .sharpness_block
                .unwrap_or_else(|| SharpnessConfig::for_resolution(self.resolution).block_size),
            gaussian_kernel: self.sharpness_kernel,
            gaussian_sigma: self.sharpness_sigma,
        }
    }

    pub fn require<'a, T>(&self, v: &'a Option<T>, key: &str) -> Result<&'a T> {
        match v {
            Some(v) => Ok(v),
            None => bail!("missing required setting `{key}`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        let t = c.train_config(0).unwrap();
        assert_eq!(t.weights, LossWeights::default());
        assert_eq!((t.optimizer.lr_generator, t.optimizer.lr_discriminator), (1e-4, 1e-5));
        assert_eq!(t.optimizer.decay_at_iteration, 185_700);
        assert_eq!(t.batch_size, 1);
        assert_eq!(t.sharpness.unwrap().block_size, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"iteratons": 3}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"iterations": 3, "ablation": ["no-vdn"]}"#).unwrap();
        assert_eq!(c.iterations, 3);
        assert!(!c.ablation().unwrap().use_vdn);
    }
}
