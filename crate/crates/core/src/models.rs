//! The three SCGN networks bound to one parameter set.
//!
//! * VSN: a weight-shared encoder runs on the left and right views (as one
//!   batch, left half first); the decoder fuses both encodings with skip
//!   features and ends in `tanh`.
//! * VDN: an encoder on the middle view, two 1x1 projections, and one decoder
//!   per side view (or one weight-shared decoder for the `mvdn` ablation).
//! * Discriminator: four stride-2 convolutions and a sigmoid unit.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{check_resolution, Ablation, ArchConfig};
use crate::error::{Error, Result};
use crate::image::{Image, PixelRange};
use crate::layers::{count_params, NetworkSpec};
use crate::network::{self, Trace};
use crate::params::{GradSet, InitConfig, ParameterSet, Partition};
use crate::tensor::Tensor;

pub const VSN_ENCODER: &str = "vsn/encoder";
pub const VSN_DECODER: &str = "vsn/decoder";
pub const VDN_ENCODER: &str = "vdn/encoder";
pub const DISC: &str = "disc";

/// Network definitions of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub vsn_encoder: NetworkSpec,
    pub vsn_decoder: NetworkSpec,
    pub vdn_encoder: Option<NetworkSpec>,
    /// Two side decoders, or a single shared one.
    pub vdn_decoders: Vec<NetworkSpec>,
    pub discriminator: NetworkSpec,
}

impl Architecture {
    pub fn build(cfg: &ArchConfig) -> Result<Self> {
        check_resolution(cfg.resolution)?;
        let (vdn_encoder, vdn_decoders) = if cfg.ablation.use_vdn {
            let decoders = if cfg.ablation.shared_vdn_decoder {
                vec![cfg.vdn_decoder("vdn_decoder")?]
            } else {
                vec![cfg.vdn_decoder("vdn_decoder_l")?, cfg.vdn_decoder("vdn_decoder_r")?]
            };
            (Some(cfg.vdn_encoder()), decoders)
        } else {
            (None, Vec::new())
        };
        let arch = Self {
            vsn_encoder: cfg.vsn_encoder(),
            vsn_decoder: cfg.vsn_decoder()?,
            vdn_encoder,
            vdn_decoders,
            discriminator: cfg.discriminator(),
        };
        for (_, _, spec) in arch.networks() {
            spec.validate()?;
        }
        Ok(arch)
    }

    /// `(parameter prefix, partition, spec)` for every network.
    pub fn networks(&self) -> Vec<(String, Partition, &NetworkSpec)> {
        let mut out = vec![
            (VSN_ENCODER.to_string(), Partition::ThetaG, &self.vsn_encoder),
            (VSN_DECODER.to_string(), Partition::ThetaG, &self.vsn_decoder),
        ];
        if let Some(enc) = &self.vdn_encoder {
            out.push((VDN_ENCODER.to_string(), Partition::ThetaV, enc));
        }
        for d in &self.vdn_decoders {
            out.push((decoder_prefix(&d.name), Partition::ThetaV, d));
        }
        out.push((DISC.to_string(), Partition::ThetaD, &self.discriminator));
        out
    }

    pub fn count_params(&self, partition: Partition) -> Result<u64> {
        self.networks()
            .into_iter()
            .filter(|(_, p, _)| *p == partition)
            .map(|(_, _, s)| count_params(s))
            .sum()
    }
}

fn decoder_prefix(name: &str) -> String {
    format!("vdn/{}", name.trim_start_matches("vdn_"))
}

/// Everything that determines a bundle's networks and initial weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub init: InitConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// 16x16 inputs, one channel per hidden layer and kernels of at most 2:
    /// a few hundred parameters in total, for finite-difference checks.
    /// The larger init keeps signals from vanishing through one-channel layers.
    pub fn tiny(ablation: Ablation, seed: u64) -> Self {
        Self {
            arch: ArchConfig {
                resolution: 16,
                width: 1.0 / 256.0,
                max_kernel: Some(2),
                ablation,
                ..Default::default()
            },
            init: InitConfig { std: 0.5 },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParameterSet,
}

/// Forward state of the synthesis network kept for backpropagation.
pub struct VsnPass {
    encoder: Trace,
    decoder: Trace,
    batch: usize,
    pub output: Tensor,
}

/// Forward state of the decomposition network.
pub struct VdnPass {
    encoder: Trace,
    decoders: Vec<Trace>,
    batch: usize,
    pub left: Tensor,
    pub right: Tensor,
}

pub struct DiscPass {
    trace: Trace,
    pub probs: Vec<f64>,
}

const ENC_OUTPUTS: [&str; 4] = ["er6", "ecfeat3", "ecfeat2", "ecfeat1"];
const DEC_INPUTS: [&str; 4] = ["ec6", "ecfeat3", "ecfeat2", "ecfeat1"];

impl ModelBundle {
    pub fn build(config: ModelConfig) -> Result<Self> {
        let arch = Architecture::build(&config.arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::default();
        for (prefix, partition, spec) in arch.networks() {
            params.init_network(spec, &prefix, partition, config.init, &mut rng)?;
        }
        Ok(Self { config, arch, params })
    }

    /// Published-width networks at `resolution`.
    pub fn build_canonical(resolution: usize, ablation: Ablation, seed: u64) -> Result<Self> {
        Self::build(ModelConfig {
            arch: ArchConfig {
                resolution,
                ablation,
                ..Default::default()
            },
            init: InitConfig::default(),
            seed,
        })
    }

    pub fn resolution(&self) -> usize {
        self.config.arch.resolution
    }

    pub fn ablation(&self) -> Ablation {
        self.config.arch.ablation
    }

    /// Checks that the parameter set matches every network layout exactly.
    pub fn check_params(&self) -> Result<()> {
        let mut expected = 0;
        for (prefix, partition, spec) in self.arch.networks() {
            self.params.check_layout(spec, &prefix, partition)?;
            expected += crate::params::param_layout(spec, &prefix)?.len();
        }
        if expected != self.params.entries.len() {
            return Err(Error::Params(format!(
                "parameter set has {} entries, networks need {expected}",
                self.params.entries.len()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, t: &Tensor, what: &str) -> Result<()> {
        let r = self.resolution();
        if t.shape[1..] != [3, r, r] {
            return Err(Error::Shape(format!(
                "{what}: expected {r}x{r}x3 input, got {}x{}x{}",
                t.shape[2], t.shape[3], t.shape[1]
            )));
        }
        if t.batch() == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(v) = t.data.iter().find(|v| !(v.abs() <= 1.0 + 1e-9)) {
            return Err(Error::Range(*v));
        }
        Ok(())
    }

    pub fn vsn_forward(&self, left: &Tensor, right: &Tensor) -> Result<VsnPass> {
        self.check_batch(left, "left view")?;
        self.check_batch(right, "right view")?;
        if left.batch() != right.batch() {
            return Err(Error::Shape("left and right batches differ in size".into()));
        }
        let m = left.batch();
        let both = Tensor::cat_batch(&[left, right])?;
        let encoder = network::forward(&self.arch.vsn_encoder, VSN_ENCODER, &self.params, &[("image", &both)])?;
        let mut halves = Vec::with_capacity(8);
        for name in ENC_OUTPUTS {
            let t = encoder.get(name)?;
            halves.push(t.slice_batch(0, m));
            halves.push(t.slice_batch(m, m));
        }
        let names = decoder_input_names();
        let inputs: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(halves.iter()).collect();
        let decoder = network::forward(&self.arch.vsn_decoder, VSN_DECODER, &self.params, &inputs)?;
        let output = decoder.get("dc5")?.clone();
        Ok(VsnPass {
            encoder,
            decoder,
            batch: m,
            output,
        })
    }

    /// Accumulates `d(loss)/d(theta_G)` given `d(loss)/d(output)`.
    pub fn vsn_backward(&self, pass: &VsnPass, d_output: &Tensor, grads: &mut GradSet) -> Result<()> {
        let dec_in = network::backward(
            &self.arch.vsn_decoder,
            VSN_DECODER,
            &self.params,
            &pass.decoder,
            &[("dc5", d_output.clone())],
            grads,
            true,
        )?;
        let names = decoder_input_names();
        let mut seeds = Vec::with_capacity(4);
        for (i, enc_name) in ENC_OUTPUTS.iter().enumerate() {
            let l = &dec_in[&names[2 * i]];
            let r = &dec_in[&names[2 * i + 1]];
            seeds.push((*enc_name, Tensor::cat_batch(&[l, r])?));
        }
        debug_assert_eq!(seeds[0].1.batch(), 2 * pass.batch);
        network::backward(
            &self.arch.vsn_encoder,
            VSN_ENCODER,
            &self.params,
            &pass.encoder,
            &seeds,
            grads,
            false,
        )?;
        Ok(())
    }

    pub fn vdn_forward(&self, middle: &Tensor) -> Result<VdnPass> {
        let enc_spec = self.arch.vdn_encoder.as_ref().ok_or(Error::Ablated("use_vdn"))?;
        self.check_batch(middle, "middle view")?;
        let m = middle.batch();
        let encoder = network::forward(enc_spec, VDN_ENCODER, &self.params, &[("image", middle)])?;
        let (code_l, code_r) = (encoder.get("dec5_l")?, encoder.get("dec5_r")?);
        let skips = [encoder.get("dec3")?, encoder.get("dec2")?, encoder.get("dec1")?];
        let mut decoders = Vec::new();
        let (left, right) = if let [shared] = self.arch.vdn_decoders.as_slice() {
            let code = Tensor::cat_batch(&[code_l, code_r])?;
            let sk: Vec<Tensor> = skips
                .iter()
                .map(|s| Tensor::cat_batch(&[s, s]))
                .collect::<Result<_>>()?;
            let tr = network::forward(
                shared,
                &decoder_prefix(&shared.name),
                &self.params,
                &[("code", &code), ("skip3", &sk[0]), ("skip2", &sk[1]), ("skip1", &sk[2])],
            )?;
            let out = tr.get("ddc5")?;
            let lr = (out.slice_batch(0, m), out.slice_batch(m, m));
            decoders.push(tr);
            lr
        } else {
            let mut outs = Vec::new();
            for (spec, code) in self.arch.vdn_decoders.iter().zip([code_l, code_r]) {
                let tr = network::forward(
                    spec,
                    &decoder_prefix(&spec.name),
                    &self.params,
                    &[("code", code), ("skip3", skips[0]), ("skip2", skips[1]), ("skip1", skips[2])],
                )?;
                outs.push(tr.get("ddc5")?.clone());
                decoders.push(tr);
            }
            let r = outs.pop().expect("two decoders");
            (outs.pop().expect("two decoders"), r)
        };
        Ok(VdnPass {
            encoder,
            decoders,
            batch: m,
            left,
            right,
        })
    }

    /// Accumulates `d(loss)/d(theta_V)`; returns `d(loss)/d(middle)` when asked.
    pub fn vdn_backward(
        &self,
        pass: &VdnPass,
        d_left: &Tensor,
        d_right: &Tensor,
        grads: &mut GradSet,
        want_input: bool,
    ) -> Result<Option<Tensor>> {
        let enc_spec = self.arch.vdn_encoder.as_ref().ok_or(Error::Ablated("use_vdn"))?;
        let m = pass.batch;
        let mut d_code = Vec::new();
        let mut d_skip: [Option<Tensor>; 3] = [None, None, None];
        let mut add_skip = |i: usize, t: Tensor| match &mut d_skip[i] {
            Some(acc) => acc.add_assign(&t),
            None => d_skip[i] = Some(t),
        };
        if let [shared] = self.arch.vdn_decoders.as_slice() {
            let d_out = Tensor::cat_batch(&[d_left, d_right])?;
            let g = network::backward(
                shared,
                &decoder_prefix(&shared.name),
                &self.params,
                &pass.decoders[0],
                &[("ddc5", d_out)],
                grads,
                true,
            )?;
            d_code.push(g["code"].slice_batch(0, m));
            d_code.push(g["code"].slice_batch(m, m));
            for (i, name) in ["skip3", "skip2", "skip1"].iter().enumerate() {
                let s = &g[*name];
                let mut half = s.slice_batch(0, m);
                half.add_assign(&s.slice_batch(m, m));
                add_skip(i, half);
            }
        } else {
            for ((spec, trace), d_out) in self.arch.vdn_decoders.iter().zip(&pass.decoders).zip([d_left, d_right]) {
                let mut g = network::backward(
                    spec,
                    &decoder_prefix(&spec.name),
                    &self.params,
                    trace,
                    &[("ddc5", d_out.clone())],
                    grads,
                    true,
                )?;
                d_code.push(g.remove("code").expect("declared input"));
                for (i, name) in ["skip3", "skip2", "skip1"].iter().enumerate() {
                    add_skip(i, g.remove(*name).expect("declared input"));
                }
            }
        }
        let [s3, s2, s1] = d_skip.map(|s| s.expect("skip gradients"));
        let r = d_code.pop().expect("two codes");
        let l = d_code.pop().expect("two codes");
        let seeds = [("dec5_l", l), ("dec5_r", r), ("dec3", s3), ("dec2", s2), ("dec1", s1)];
        let mut din = network::backward(enc_spec, VDN_ENCODER, &self.params, &pass.encoder, &seeds, grads, want_input)?;
        Ok(if want_input { din.remove("image") } else { None })
    }

    pub fn disc_forward(&self, x: &Tensor) -> Result<DiscPass> {
        self.check_batch(x, "discriminator input")?;
        let trace = network::forward(&self.arch.discriminator, DISC, &self.params, &[("image", x)])?;
        let probs = trace.get("fc5")?.data.clone();
        Ok(DiscPass { trace, probs })
    }

    /// Accumulates `d(loss)/d(theta_D)` given `d(loss)/d(probability)`; returns
    /// the input gradient when asked.
    pub fn disc_backward(
        &self,
        pass: &DiscPass,
        d_probs: &[f64],
        grads: &mut GradSet,
        want_input: bool,
    ) -> Result<Option<Tensor>> {
        let seed = Tensor::from_vec([d_probs.len(), 1, 1, 1], d_probs.to_vec())?;
        let mut g = network::backward(
            &self.arch.discriminator,
            DISC,
            &self.params,
            &pass.trace,
            &[("fc5", seed)],
            grads,
            want_input,
        )?;
        Ok(if want_input { g.remove("image") } else { None })
    }

    /// Middle view `G^D(G^E(left), G^E(right))`.
    pub fn synthesize(&self, left: &Image, right: &Image) -> Result<Image> {
        let pass = self.vsn_forward(&Image::stack(&[left])?, &Image::stack(&[right])?)?;
        Ok(Image::unstack(&pass.output, PixelRange::Normalized).remove(0))
    }

    /// Decomposed side views of a middle view.
    pub fn decompose(&self, middle: &Image) -> Result<(Image, Image)> {
        let pass = self.vdn_forward(&Image::stack(&[middle])?)?;
        let l = Image::unstack(&pass.left, PixelRange::Normalized).remove(0);
        let r = Image::unstack(&pass.right, PixelRange::Normalized).remove(0);
        Ok((l, r))
    }

    /// Probability that `middle` is a real view.
    pub fn discriminate(&self, middle: &Image) -> Result<f64> {
        Ok(self.discriminate_batch(&[middle])?[0])
    }

    pub fn discriminate_batch(&self, images: &[&Image]) -> Result<Vec<f64>> {
        Ok(self.disc_forward(&Image::stack(images)?)?.probs)
    }

    /// Kink signature of a full forward pass, see [`Trace::kink_signature`].
    pub(crate) fn signature_of(
        &self,
        vsn: &VsnPass,
        vdn: Option<&VdnPass>,
        disc: &[&DiscPass],
        hasher: &mut std::hash::DefaultHasher,
    ) {
        vsn.encoder.kink_signature(&self.arch.vsn_encoder, hasher);
        vsn.decoder.kink_signature(&self.arch.vsn_decoder, hasher);
        if let (Some(v), Some(enc)) = (vdn, &self.arch.vdn_encoder) {
            v.encoder.kink_signature(enc, hasher);
            for (t, spec) in v.decoders.iter().zip(&self.arch.vdn_decoders) {
                t.kink_signature(spec, hasher);
            }
        }
        for d in disc {
            d.trace.kink_signature(&self.arch.discriminator, hasher);
        }
    }

    /// Number of values per partition (`theta_G`, `theta_V`, `theta_D`).
    pub fn partition_sizes(&self) -> HashMap<Partition, usize> {
        Partition::ALL.iter().map(|&p| (p, self.params.count(p))).collect()
    }
}

fn decoder_input_names() -> Vec<String> {
    DEC_INPUTS
        .iter()
        .flat_map(|n| [format!("{n}_l"), format!("{n}_r")])
        .collect()
}
