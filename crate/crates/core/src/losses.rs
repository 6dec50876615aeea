//! Loss terms and their gradients.
//!
//! Pixel-wise terms are per-image mean absolute errors averaged over the
//! batch. Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before
//! taking logs; a clamped entry has zero gradient.

use std::hash::{DefaultHasher, Hash};

use serde::{Deserialize, Serialize};

use crate::arch::Ablation;
use crate::error::{Error, Result};
use crate::image::{Image, PixelRange};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// View consistency.
    pub lambda1: f64,
    /// Adversarial.
    pub lambda2: f64,
    /// Sharpness.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.001,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Block statistics used by the sharpness measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    pub block_size: usize,
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            gaussian_kernel: 7,
            gaussian_sigma: 1.5,
        }
    }
}

impl SharpnessConfig {
    /// Block size 16 at 224 pixels, scaled down proportionally (at least 2).
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            block_size: (16 * resolution / 224).max(2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(Error::Config(format!("block_size must be >= 2, got {}", self.block_size)));
        }
        if self.gaussian_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "gaussian_kernel must be odd, got {}",
                self.gaussian_kernel
            )));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config(format!("gaussian_sigma must be > 0, got {}", self.gaussian_sigma)));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.gaussian_kernel / 2) as f64;
        let raw: Vec<f64> = (0..self.gaussian_kernel)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub l_p: f64,
    pub l_vc: f64,
    pub l_adv: f64,
    pub l_sharp: f64,
}

/// Batch-level loss components before weighting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub l_p: f64,
    pub l_vc: f64,
    pub l_adv: f64,
    pub l_sharp: f64,
    pub l_disc: f64,
    pub per_sample: Vec<SampleLosses>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_sharp: f64,
    pub l_adv: f64,
    pub l_vc: f64,
    pub l_g_total: f64,
    pub l_disc: f64,
    pub per_sample: Vec<SampleLosses>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,l_p,l_vc,l_adv,l_sharp,l_g_total,l_disc";

    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{}",
            self.l_p, self.l_vc, self.l_adv, self.l_sharp, self.l_g_total, self.l_disc
        )
    }

    /// Parses a row written by [`LossReport::csv_row`].
    pub fn parse_csv_row(line: &str) -> Result<(u64, LossReport)> {
        let bad = || Error::Config(format!("malformed loss row `{line}`"));
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(bad());
        }
        let it = fields[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok((
            it,
            LossReport {
                l_p: v[0],
                l_vc: v[1],
                l_adv: v[2],
                l_sharp: v[3],
                l_g_total: v[4],
                l_disc: v[5],
                per_sample: Vec::new(),
            },
        ))
    }
}

/// `L_G = L_p + lambda1 L_vc + lambda2 L_adv + lambda3 L_sharp`, with ablated
/// terms zeroed first.
pub fn generator_total(c: &Components, w: &LossWeights, ablation: &Ablation) -> Result<LossReport> {
    for (name, v) in [
        ("l_p", c.l_p),
        ("l_vc", c.l_vc),
        ("l_adv", c.l_adv),
        ("l_sharp", c.l_sharp),
        ("l_disc", c.l_disc),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let l_vc = if ablation.use_vdn { c.l_vc } else { 0.0 };
    let l_adv = if ablation.use_adv { c.l_adv } else { 0.0 };
    let l_disc = if ablation.use_adv { c.l_disc } else { 0.0 };
    let l_sharp = if ablation.use_sharp { c.l_sharp } else { 0.0 };
    let per_sample = c
        .per_sample
        .iter()
        .map(|s| SampleLosses {
            l_p: s.l_p,
            l_vc: if ablation.use_vdn { s.l_vc } else { 0.0 },
            l_adv: if ablation.use_adv { s.l_adv } else { 0.0 },
            l_sharp: if ablation.use_sharp { s.l_sharp } else { 0.0 },
        })
        .collect();
    Ok(LossReport {
        l_p: c.l_p,
        l_sharp,
        l_adv,
        l_vc,
        l_g_total: c.l_p + w.lambda1 * l_vc + w.lambda2 * l_adv + w.lambda3 * l_sharp,
        l_disc,
        per_sample,
    })
}

fn check_pair(a: &[Image], b: &[Image]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("batch sizes {} and {} differ", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if !x.same_shape(y) {
            let (h1, w1, c1) = x.shape();
            let (h2, w2, c2) = y.shape();
            return Err(Error::Shape(format!("{h1}x{w1}x{c1} vs {h2}x{w2}x{c2}")));
        }
    }
    Ok(())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn pixel_loss(pred: &[Image], target: &[Image]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| mean_abs_diff(&p.data, &t.data))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn view_consistency_loss(dec_left: &[Image], dec_right: &[Image], left: &[Image], right: &[Image]) -> Result<f64> {
    check_pair(dec_left, left)?;
    check_pair(dec_right, right)?;
    check_pair(dec_left, dec_right)?;
    Ok(pixel_loss(dec_left, left)? + pixel_loss(dec_right, right)?)
}

/// Block-wise sharpness of one image.
pub fn sharpness_q(image: &Image, cfg: &SharpnessConfig) -> Result<f64> {
    cfg.validate()?;
    let (h, w, c) = image.shape();
    let unit = unit_scale(image.range);
    let plane = Plane::new(h, w, cfg)?;
    let taps = cfg.taps();
    let mut total = 0.0;
    for ch in 0..c {
        let u: Vec<f64> = image.plane(ch).iter().map(|v| unit.0 * v + unit.1).collect();
        total += plane.q(&u, &taps).0;
    }
    Ok(total / c as f64)
}

pub fn sharpness_loss(pred: &[Image], target: &[Image], cfg: &SharpnessConfig) -> Result<f64> {
    check_pair(pred, target)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        total += (sharpness_q(t, cfg)? - sharpness_q(p, cfg)?).abs();
    }
    Ok(total / pred.len() as f64)
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyBatch);
    }
    match p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Probability(*v)),
        None => Ok(()),
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// `(1/n) sum(-log d_real - log(1 - d_fake))`.
pub fn disc_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(grad::disc(d_real, d_fake)?.0)
}

/// `(1/n) sum(-log d_fake)`.
pub fn adv_loss(d_fake: &[f64]) -> Result<f64> {
    Ok(grad::adv(d_fake)?.0)
}

/// Affine map of a pixel range onto `[0, 1]`.
fn unit_scale(range: PixelRange) -> (f64, f64) {
    match range {
        PixelRange::Normalized => (0.5, 0.5),
        PixelRange::Raw => (1.0 / 255.0, 0.0),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Geometry of one channel plane for the sharpness measure.
struct Plane {
    h: usize,
    w: usize,
    k: usize,
}

impl Plane {
    fn new(h: usize, w: usize, cfg: &SharpnessConfig) -> Result<Self> {
        if h < cfg.block_size || w < cfg.block_size {
            return Err(Error::TooSmall(format!(
                "{h}x{w} image is smaller than one {0}x{0} block",
                cfg.block_size
            )));
        }
        Ok(Self { h, w, k: cfg.block_size })
    }

    fn blocks(&self) -> usize {
        (self.h / self.k) * (self.w / self.k)
    }

    /// Separable reflect-padded blur.
    fn blur(&self, src: &[f64], taps: &[f64]) -> Vec<f64> {
        let r = (taps.len() / 2) as isize;
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, g)| g * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, g)| g * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    }

    fn blur_adjoint(&self, grad: &[f64], taps: &[f64]) -> Vec<f64> {
        let r = (taps.len() / 2) as isize;
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let g = grad[y * w + x];
                for (t, k) in taps.iter().enumerate() {
                    tmp[reflect(y as isize + t as isize - r, h) * w + x] += k * g;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let g = tmp[y * w + x];
                for (t, k) in taps.iter().enumerate() {
                    out[y * w + reflect(x as isize + t as isize - r, w)] += k * g;
                }
            }
        }
        out
    }

    fn block_var(&self, v: &[f64], by: usize, bx: usize) -> (f64, f64) {
        let k = self.k;
        let n = (k * k) as f64;
        let mut sum = 0.0;
        for y in by * k..(by + 1) * k {
            sum += v[y * self.w + bx * k..y * self.w + (bx + 1) * k].iter().sum::<f64>();
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for y in by * k..(by + 1) * k {
            ss += v[y * self.w + bx * k..y * self.w + (bx + 1) * k]
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>();
        }
        (ss / n, mean)
    }

    /// Returns the plane's measure and, per block, `var_orig - var_blur`.
    fn q(&self, u: &[f64], taps: &[f64]) -> (f64, Vec<f64>) {
        let b = self.blur(u, taps);
        let mut diffs = Vec::with_capacity(self.blocks());
        for by in 0..self.h / self.k {
            for bx in 0..self.w / self.k {
                diffs.push(self.block_var(u, by, bx).0 - self.block_var(&b, by, bx).0);
            }
        }
        let q = diffs.iter().map(|d| d.abs().sqrt()).sum::<f64>() / diffs.len() as f64;
        (q, diffs)
    }

    /// Gradient of the plane's measure with respect to `u`, scaled by `scale`.
    fn q_grad(&self, u: &[f64], taps: &[f64], scale: f64) -> Vec<f64> {
        let b = self.blur(u, taps);
        let k = self.k;
        let n = (k * k) as f64;
        let z = self.blocks() as f64;
        let mut gu = vec![0.0; u.len()];
        let mut gb = vec![0.0; u.len()];
        for by in 0..self.h / k {
            for bx in 0..self.w / k {
                let (v1, m1) = self.block_var(u, by, bx);
                let (v2, m2) = self.block_var(&b, by, bx);
                let d = v1 - v2;
                if d == 0.0 {
                    continue;
                }
                let dq = scale * d.signum() / (2.0 * d.abs().sqrt()) / z;
                for y in by * k..(by + 1) * k {
                    for x in bx * k..(bx + 1) * k {
                        let i = y * self.w + x;
                        gu[i] += dq * 2.0 * (u[i] - m1) / n;
                        gb[i] -= dq * 2.0 * (b[i] - m2) / n;
                    }
                }
            }
        }
        let back = self.blur_adjoint(&gb, taps);
        gu.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        gu
    }
}

/// Tensor-level losses with gradients, on normalized `[N, C, H, W]` batches.
pub mod grad {
    use super::*;

    fn check(a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        if a.batch() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Per-image mean absolute error, batch averaged, and its gradient with
    /// respect to `pred`.
    pub fn l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        check(pred, target)?;
        let n = pred.data.len() as f64;
        let mut g = Tensor::zeros(pred.shape);
        let mut total = 0.0;
        for ((gi, p), t) in g.data.iter_mut().zip(&pred.data).zip(&target.data) {
            let d = p - t;
            total += d.abs();
            *gi = if d == 0.0 { 0.0 } else { d.signum() / n };
        }
        Ok((total / n, g))
    }

    /// Per-sample mean absolute error.
    pub fn l1_per_sample(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
        check(pred, target)?;
        Ok((0..pred.batch())
            .map(|i| mean_abs_diff(pred.sample(i), target.sample(i)))
            .collect())
    }

    /// Sharpness of each sample.
    pub fn sharpness_q(x: &Tensor, cfg: &SharpnessConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        let [n, c, h, w] = x.shape;
        let plane = Plane::new(h, w, cfg)?;
        let taps = cfg.taps();
        Ok((0..n)
            .map(|i| {
                let s = x.sample(i);
                (0..c)
                    .map(|ch| {
                        let u: Vec<f64> = s[ch * h * w..(ch + 1) * h * w].iter().map(|v| 0.5 * v + 0.5).collect();
                        plane.q(&u, &taps).0
                    })
                    .sum::<f64>()
                    / c as f64
            })
            .collect())
    }

    /// Sharpness loss, its per-sample terms, and its gradient with respect
    /// to `pred`.
    pub fn sharpness(pred: &Tensor, target: &Tensor, cfg: &SharpnessConfig) -> Result<(f64, Vec<f64>, Tensor)> {
        check(pred, target)?;
        let qp = sharpness_q(pred, cfg)?;
        let qt = sharpness_q(target, cfg)?;
        let [n, c, h, w] = pred.shape;
        let plane = Plane::new(h, w, cfg)?;
        let taps = cfg.taps();
        let mut g = Tensor::zeros(pred.shape);
        let per: Vec<f64> = qp.iter().zip(&qt).map(|(p, t)| (t - p).abs()).collect();
        for i in 0..n {
            let d = qt[i] - qp[i];
            if d == 0.0 {
                continue;
            }
            // d|qt - qp|/dqp = -sign(d); dq/dx = dq/du * 0.5; plane mean over c
            let scale = -d.signum() / n as f64 * 0.5 / c as f64;
            let s = pred.sample(i).to_vec();
            let gs = g.sample_mut(i);
            for ch in 0..c {
                let u: Vec<f64> = s[ch * h * w..(ch + 1) * h * w].iter().map(|v| 0.5 * v + 0.5).collect();
                let gp = plane.q_grad(&u, &taps, scale);
                gs[ch * h * w..(ch + 1) * h * w].copy_from_slice(&gp);
            }
        }
        Ok((per.iter().sum::<f64>() / n as f64, per, g))
    }

    /// Discriminator loss and its gradients with respect to both
    /// probability vectors.
    pub fn disc(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_probs(d_real)?;
        check_probs(d_fake)?;
        if d_real.len() != d_fake.len() {
            return Err(Error::Shape(format!(
                "{} real vs {} fake probabilities",
                d_real.len(),
                d_fake.len()
            )));
        }
        let n = d_real.len() as f64;
        let mut total = 0.0;
        let mut gr = Vec::with_capacity(d_real.len());
        let mut gf = Vec::with_capacity(d_fake.len());
        for (&r, &f) in d_real.iter().zip(d_fake) {
            let (r, rc) = clamp_prob(r);
            let (f, fc) = clamp_prob(f);
            total += -r.ln() - (1.0 - f).ln();
            gr.push(if rc { 0.0 } else { -1.0 / (n * r) });
            gf.push(if fc { 0.0 } else { 1.0 / (n * (1.0 - f)) });
        }
        Ok((total / n, gr, gf))
    }

    /// Non-saturating adversarial loss and its gradient.
    pub fn adv(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_probs(d_fake)?;
        let n = d_fake.len() as f64;
        let mut total = 0.0;
        let mut g = Vec::with_capacity(d_fake.len());
        for &f in d_fake {
            let (f, fc) = clamp_prob(f);
            total += -f.ln();
            g.push(if fc { 0.0 } else { -1.0 / (n * f) });
        }
        Ok((total / n, g))
    }

    /// Hashes the sign of every difference so that finite differences can
    /// detect crossing an absolute-value kink.
    pub fn l1_signature(pred: &Tensor, target: &Tensor, hasher: &mut DefaultHasher) {
        for (p, t) in pred.data.iter().zip(&target.data) {
            (p - t).partial_cmp(&0.0).hash(hasher);
        }
    }

    pub fn sharpness_signature(pred: &Tensor, target: &Tensor, cfg: &SharpnessConfig, hasher: &mut DefaultHasher) {
        let [n, c, h, w] = pred.shape;
        let Ok(plane) = Plane::new(h, w, cfg) else { return };
        let taps = cfg.taps();
        let (Ok(qp), Ok(qt)) = (sharpness_q(pred, cfg), sharpness_q(target, cfg)) else {
            return;
        };
        for i in 0..n {
            (qt[i] - qp[i]).partial_cmp(&0.0).hash(hasher);
            let s = pred.sample(i);
            for ch in 0..c {
                let u: Vec<f64> = s[ch * h * w..(ch + 1) * h * w].iter().map(|v| 0.5 * v + 0.5).collect();
                for d in plane.q(&u, &taps).1 {
                    d.partial_cmp(&0.0).hash(hasher);
                }
            }
        }
    }

    pub fn clamp_signature(probs: &[f64], hasher: &mut DefaultHasher) {
        for p in probs {
            clamp_prob(*p).1.hash(hasher);
        }
    }
}
