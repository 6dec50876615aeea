//! Image quality metrics: PSNR, MS-SSIM, mMSE, L1 error and sharpness.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::ViewTriplet;
use crate::error::{Error, Result};
use crate::image::{Image, PixelRange};
use crate::losses::{self, SharpnessConfig};
use crate::models::ModelBundle;

/// PSNR in dB; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    /// Orders `Infinite` above every finite value.
    pub fn at_least(self, db: f64) -> bool {
        self.finite().is_none_or(|v| v >= db)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr::Finite(v)),
            Repr::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid PSNR `{s}`"))),
        }
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        let (h1, w1, c1) = a.shape();
        let (h2, w2, c2) = b.shape();
        return Err(Error::Shape(format!("{h1}x{w1}x{c1} vs {h2}x{w2}x{c2}")));
    }
    Ok(())
}

fn check_batches(a: &[Image], b: &[Image]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("batch sizes {} and {} differ", a.len(), b.len())));
    }
    a.iter().zip(b).try_for_each(|(x, y)| check_shapes(x, y))
}

/// Values on the 0-255 scale.
pub fn to_raw(img: &Image) -> Image {
    match img.range {
        PixelRange::Raw => img.clone(),
        PixelRange::Normalized => img.map(PixelRange::Raw, |v| (v + 1.0) * 127.5),
    }
}

/// Values on the normalized scale.
pub fn to_normalized(img: &Image) -> Image {
    match img.range {
        PixelRange::Normalized => img.clone(),
        PixelRange::Raw => img.map(PixelRange::Normalized, |v| v / 127.5 - 1.0),
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(peak^2 / MSE)` on the values as given.
pub fn psnr(pred: &Image, reference: &Image, peak: f64) -> Result<Psnr> {
    check_shapes(pred, reference)?;
    if !(peak > 0.0) {
        return Err(Error::Config(format!("peak must be > 0, got {peak}")));
    }
    let e = mse(&pred.data, &reference.data);
    Ok(if e == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (peak * peak / e).log10())
    })
}

/// Mean over images of the per-image MSE on the 0-255 scale.
pub fn mmse(pred: &[Image], reference: &[Image]) -> Result<f64> {
    check_batches(pred, reference)?;
    Ok(pred
        .iter()
        .zip(reference)
        .map(|(p, r)| mse(&to_raw(p).data, &to_raw(r).data))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean over images of the per-image mean absolute error on the normalized
/// scale; the same quantity as [`losses::pixel_loss`].
pub fn l1_error(pred: &[Image], reference: &[Image]) -> Result<f64> {
    check_batches(pred, reference)?;
    let norm = |v: &[Image]| v.iter().map(to_normalized).collect::<Vec<_>>();
    losses::pixel_loss(&norm(pred), &norm(reference))
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Number of MS-SSIM scales for a side length: at most five, and the
/// coarsest (repeatedly halved, rounding up) side must fit the window.
pub fn ms_ssim_scales(size: usize) -> usize {
    let mut s = size;
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && s >= SSIM_WINDOW {
        n += 1;
        s = s.div_ceil(2);
    }
    n
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for o in 0..ow {
            tmp[y * ow + o] = taps.iter().enumerate().map(|(t, g)| g * x[y * w + o + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for o in 0..oh {
        for xx in 0..ow {
            out[o * ow + xx] = taps.iter().enumerate().map(|(t, g)| g * tmp[(o + t) * ow + xx]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64, taps: &[f64]) -> (f64, f64) {
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let f = |v: &[f64]| filter_valid(v, h, w, taps);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu1 = f(a);
    let mu2 = f(b);
    let s11 = f(&prod(a, a));
    let s22 = f(&prod(b, b));
    let s12 = f(&prod(a, b));
    let n = mu1.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1[i], mu2[i]);
        let v1 = s11[i] - m1 * m1;
        let v2 = s22[i] - m2 * m2;
        let cov = s12[i] - m1 * m2;
        let csv = (2.0 * cov + c2) / (v1 + v2 + c2);
        cs += csv;
        ssim += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * csv;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling; odd sides are first padded by mirroring the last
/// row/column.
fn downsample(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let at = |y: usize, xx: usize| x[y.min(h - 1) * w + xx.min(w - 1)];
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] =
                (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1)) / 4.0;
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM on the 0-255 scale, computed per channel and averaged.
pub fn ms_ssim(pred: &Image, reference: &Image) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (h, w, c) = pred.shape();
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::TooSmall(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / total).collect();
    let (p, r) = (to_raw(pred), to_raw(reference));
    let taps = gaussian_taps();
    let mut acc = 0.0;
    for ch in 0..c {
        let (mut a, mut b) = (p.plane(ch).to_vec(), r.plane(ch).to_vec());
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for (s, wt) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_plane(&a, &b, hh, ww, 255.0, &taps);
            let term = if s + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(*wt);
            if s + 1 < scales {
                let (na, nh, nw) = downsample(&a, hh, ww);
                b = downsample(&b, hh, ww).0;
                a = na;
                (hh, ww) = (nh, nw);
            }
        }
        acc += value;
    }
    Ok((acc / c as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: Psnr,
    pub ms_ssim: f64,
    pub mmse: f64,
    pub l1: f64,
    pub q_s_pred: f64,
    pub q_s_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over images with a finite PSNR; `Infinite` when there are none.
    pub psnr: Psnr,
    pub psnr_infinite_excluded: usize,
    pub ms_ssim: f64,
    pub mmse: f64,
    pub mmse_definition: String,
    pub l1: f64,
    pub q_s_pred: f64,
    pub q_s_ref: f64,
    pub ablation: Vec<String>,
    pub iteration: Option<u64>,
    pub per_image: Vec<ImageMetrics>,
}

pub const MMSE_DEFINITION: &str = "mMSE (this toolkit's definition): mean over images of per-image MSE on the 0-255 scale";

impl MetricReport {
    pub const CSV_HEADER: &'static str = "id,psnr,ms_ssim,mmse,l1,q_s_pred,q_s_ref";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        for m in &self.per_image {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                m.id, m.psnr, m.ms_ssim, m.mmse, m.l1, m.q_s_pred, m.q_s_ref
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Metrics of predicted middle views against references.
pub fn evaluate_pairs(
    ids: &[String],
    preds: &[Image],
    refs: &[Image],
    sharpness: &SharpnessConfig,
) -> Result<MetricReport> {
    check_batches(preds, refs)?;
    if ids.len() != preds.len() {
        return Err(Error::Shape(format!("{} ids for {} images", ids.len(), preds.len())));
    }
    let mut per_image = Vec::with_capacity(preds.len());
    for ((id, p), r) in ids.iter().zip(preds).zip(refs) {
        let (pr, rr) = (to_raw(p), to_raw(r));
        per_image.push(ImageMetrics {
            id: id.clone(),
            psnr: psnr(&pr, &rr, 255.0)?,
            ms_ssim: ms_ssim(&pr, &rr)?,
            mmse: mse(&pr.data, &rr.data),
            l1: l1_error(std::slice::from_ref(p), std::slice::from_ref(r))?,
            q_s_pred: losses::sharpness_q(p, sharpness)?,
            q_s_ref: losses::sharpness_q(r, sharpness)?,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let finite: Vec<f64> = per_image.iter().filter_map(|m| m.psnr.finite()).collect();
    let psnr_mean = if finite.is_empty() {
        Psnr::Infinite
    } else {
        Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Ok(MetricReport {
        psnr: psnr_mean,
        psnr_infinite_excluded: per_image.len() - finite.len(),
        ms_ssim: mean(|m| m.ms_ssim),
        mmse: mean(|m| m.mmse),
        mmse_definition: MMSE_DEFINITION.to_string(),
        l1: mean(|m| m.l1),
        q_s_pred: mean(|m| m.q_s_pred),
        q_s_ref: mean(|m| m.q_s_ref),
        ablation: Vec::new(),
        iteration: None,
        per_image,
    })
}

/// Synthesizes every middle view and scores it against the ground truth.
pub fn evaluate_dataset(bundle: &ModelBundle, dataset: &[ViewTriplet], sharpness: &SharpnessConfig) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut preds = Vec::with_capacity(dataset.len());
    for t in dataset {
        preds.push(bundle.synthesize(&t.left, &t.right)?);
    }
    let refs: Vec<Image> = dataset.iter().map(|t| t.middle.clone()).collect();
    let ids: Vec<String> = dataset.iter().map(|t| t.id.clone()).collect();
    let mut report = evaluate_pairs(&ids, &preds, &refs, sharpness)?;
    report.ablation = bundle.ablation().tags().iter().map(|s| s.to_string()).collect();
    Ok(report)
}
