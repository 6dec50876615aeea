//! Triplet datasets: preprocessing, on-disk layout, frame-interval sampling
//! and procedural scenes.
//!
//! On-disk layout: `<root>/<split>/<id>/{left,middle,right}.png`, 8-bit RGB.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, PixelRange};
use crate::ops::Interpolation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTriplet {
    pub id: String,
    pub left: Image,
    pub middle: Image,
    pub right: Image,
}

impl ViewTriplet {
    pub fn new(id: impl Into<String>, left: Image, middle: Image, right: Image) -> Result<Self> {
        let t = Self {
            id: id.into(),
            left,
            middle,
            right,
        };
        t.check()?;
        Ok(t)
    }

    /// All views share shape and pixel range.
    pub fn check(&self) -> Result<()> {
        for v in [&self.middle, &self.right] {
            if !self.left.same_shape(v) || self.left.range != v.range {
                return Err(Error::Dataset(format!(
                    "triplet `{}` has views of different shape or range",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.left.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

/// Optional capture angles in degrees, for asymmetric baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAngles {
    pub left: f64,
    pub middle: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub left: PathBuf,
    pub middle: PathBuf,
    pub right: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<ViewAngles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub resolution: usize,
}

/// Settings of [`preprocess`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub resolution: usize,
    pub interpolation: Interpolation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resolution: crate::arch::CANONICAL_RESOLUTION,
            interpolation: Interpolation::Bilinear,
        }
    }
}

/// Center square crop, resize, then `x / 127.5 - 1`.
pub fn preprocess(raw: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let (h, w, c) = raw.shape();
    if h == 0 || w == 0 || cfg.resolution == 0 {
        return Err(Error::Dataset("zero-size image".into()));
    }
    if c != 3 {
        return Err(Error::Dataset(format!("expected 3 channels, got {c}")));
    }
    if raw.range != PixelRange::Raw {
        return Err(Error::Dataset("preprocess expects raw 0-255 pixels".into()));
    }
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let r = cfg.resolution;
    let mut out = Image::filled(r, r, 3, PixelRange::Normalized, 0.0);
    if s == r {
        for ch in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    out.set(ch, y, x, raw.get(ch, y0 + y, x0 + x) / 127.5 - 1.0);
                }
            }
        }
        return Ok(out);
    }
    let scale = s as f64 / r as f64;
    let src = |o: usize| -> (usize, usize, f64) {
        match cfg.interpolation {
            Interpolation::Nearest => {
                let i = (((o as f64 + 0.5) * scale).floor() as usize).min(s - 1);
                (i, i, 0.0)
            }
            Interpolation::Bilinear => {
                let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = p.floor() as usize;
                (i0, (i0 + 1).min(s - 1), p - i0 as f64)
            }
        }
    };
    let ys: Vec<_> = (0..r).map(src).collect();
    let xs: Vec<_> = (0..r).map(src).collect();
    for ch in 0..3 {
        for (y, &(ya, yb, fy)) in ys.iter().enumerate() {
            for (x, &(xa, xb, fx)) in xs.iter().enumerate() {
                let g = |yy: usize, xx: usize| raw.get(ch, y0 + yy, x0 + xx);
                let top = g(ya, xa) * (1.0 - fx) + g(ya, xb) * fx;
                let bot = g(yb, xa) * (1.0 - fx) + g(yb, xb) * fx;
                out.set(ch, y, x, (top * (1.0 - fy) + bot * fy) / 127.5 - 1.0);
            }
        }
    }
    Ok(out)
}

/// `(x + 1) * 127.5` clamped to `[0, 255]`; also returns how many values
/// needed clamping.
pub fn denormalize(img: &Image) -> (Image, usize) {
    let mut clamped = 0;
    let out = img.map(PixelRange::Raw, |v| {
        let y = (v + 1.0) * 127.5;
        if !(0.0..=255.0).contains(&y) {
            clamped += 1;
        }
        y.clamp(0.0, 255.0)
    });
    (out, clamped)
}

const VIEWS: [&str; 3] = ["left", "middle", "right"];

/// Lists the triplets of `<root>/<split>`, sorted by id.
pub fn load_manifest(root: &Path, split: Split, resolution: usize) -> Result<DatasetManifest> {
    let dir = root.join(split.to_string());
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut entries = Vec::new();
    for e in fs::read_dir(&dir)? {
        let e = e?;
        if !e.file_type()?.is_dir() {
            return Err(Error::Dataset(format!(
                "unexpected file {} (expected one directory per triplet)",
                e.path().display()
            )));
        }
        let id = e.file_name().to_string_lossy().into_owned();
        let paths: Vec<PathBuf> = VIEWS.iter().map(|v| e.path().join(format!("{v}.png"))).collect();
        for p in &paths {
            if !p.is_file() {
                return Err(Error::MissingFile { id, path: p.clone() });
            }
        }
        let angles = match fs::read_to_string(e.path().join("angles.json")) {
            Ok(s) => Some(serde_json::from_str(&s)?),
            Err(_) => None,
        };
        let [left, middle, right]: [PathBuf; 3] = paths.try_into().expect("three views");
        entries.push(ManifestEntry {
            id,
            left,
            middle,
            right,
            angles,
        });
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", dir.display())));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        resolution,
    })
}

impl DatasetManifest {
    /// Reads and preprocesses every triplet.
    pub fn load(&self, interpolation: Interpolation) -> Result<Vec<ViewTriplet>> {
        let cfg = PreprocessConfig {
            resolution: self.resolution,
            interpolation,
        };
        self.entries
            .iter()
            .map(|e| {
                let read = |p: &Path| -> Result<Image> {
                    let img = Image::load_png(p).map_err(|err| match err {
                        Error::Io(_) => Error::MissingFile {
                            id: e.id.clone(),
                            path: p.to_path_buf(),
                        },
                        other => other,
                    })?;
                    preprocess(&img, &cfg)
                };
                ViewTriplet::new(e.id.clone(), read(&e.left)?, read(&e.middle)?, read(&e.right)?)
            })
            .collect()
    }
}

/// Writes triplets in the on-disk layout.
pub fn write_dataset(root: &Path, split: Split, triplets: &[ViewTriplet]) -> Result<()> {
    for t in triplets {
        let dir = root.join(split.to_string()).join(&t.id);
        fs::create_dir_all(&dir)?;
        for (name, img) in VIEWS.iter().zip([&t.left, &t.middle, &t.right]) {
            denormalize(img).0.save_png(&dir.join(format!("{name}.png")))?;
        }
    }
    Ok(())
}

/// Frame indices `(t - k, t, t + k)` for every valid center frame.
pub fn frame_interval_triplets(frames: usize, k: usize) -> Result<Vec<(usize, usize, usize)>> {
    if !(1..=7).contains(&k) {
        return Err(Error::Config(format!("frame offset must be in 1..=7, got {k}")));
    }
    Ok((k..frames.saturating_sub(k)).map(|t| (t - k, t, t + k)).collect())
}

/// Builds triplets from a directory of sequentially named PNG frames.
pub fn load_frame_sequence(dir: &Path, k: usize, cfg: &PreprocessConfig) -> Result<Vec<ViewTriplet>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    let idx = frame_interval_triplets(frames.len(), k)?;
    if idx.is_empty() {
        return Err(Error::Dataset(format!(
            "{} frames are too few for offset {k}",
            frames.len()
        )));
    }
    let load = |i: usize| preprocess(&Image::load_png(&frames[i])?, cfg);
    idx.into_iter()
        .map(|(a, b, c)| {
            let id = frames[b]
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            ViewTriplet::new(format!("{id}_k{k}"), load(a)?, load(b)?, load(c)?)
        })
        .collect()
}

/// Procedural scene settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Horizontal shift of foreground shapes between the middle view and
    /// each side view, in pixels.
    pub disparity: usize,
    pub shapes: usize,
}

impl SynthConfig {
    pub fn new(count: usize, resolution: usize, seed: u64) -> Self {
        Self {
            count,
            resolution,
            seed,
            disparity: (resolution / 16).max(1),
            shapes: 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

/// Colored shapes over a gradient. Shapes sit in front of a background at
/// infinity: the left view shows them shifted right by `disparity`, the right
/// view shifted left, and later shapes occlude earlier ones.
pub fn synth_triplets_with(cfg: &SynthConfig) -> Result<Vec<ViewTriplet>> {
    if cfg.count == 0 {
        return Err(Error::Config("synthetic count must be >= 1".into()));
    }
    crate::arch::check_resolution(cfg.resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.resolution;
    let nf = n as f64;
    let d = cfg.disparity as f64;
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
        let vertical = rng.random_bool(0.5);
        let mut shapes = Vec::with_capacity(cfg.shapes);
        for _ in 0..cfg.shapes {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0f64..256.0).floor());
            let shape = if rng.random_bool(0.5) {
                let (w, h) = (rng.random_range(0.15..0.4) * nf, rng.random_range(0.15..0.4) * nf);
                let (x0, y0) = (rng.random_range(0.0..nf - w), rng.random_range(0.0..nf - h));
                Shape::Rect {
                    x0: x0.floor(),
                    y0: y0.floor(),
                    x1: (x0 + w).floor(),
                    y1: (y0 + h).floor(),
                }
            } else {
                let r = rng.random_range(0.08..0.2) * nf;
                Shape::Disk {
                    cx: rng.random_range(r..nf - r),
                    cy: rng.random_range(r..nf - r),
                    r,
                }
            };
            shapes.push((shape, color));
        }
        let render = |shift: f64| -> Image {
            let mut img = Image::filled(n, n, 3, PixelRange::Normalized, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let t = if vertical { y } else { x } as f64 / (nf - 1.0);
                    let mut px: [f64; 3] = std::array::from_fn(|c| (c0[c] * (1.0 - t) + c1[c] * t).round());
                    let (sx, sy) = (x as f64 + 0.5 - shift, y as f64 + 0.5);
                    for (shape, color) in &shapes {
                        if shape.contains(sx, sy) {
                            px = *color;
                        }
                    }
                    for (c, v) in px.iter().enumerate() {
                        img.set(c, y, x, v / 127.5 - 1.0);
                    }
                }
            }
            img
        };
        out.push(ViewTriplet::new(format!("synth_{i:04}"), render(d), render(0.0), render(-d))?);
    }
    Ok(out)
}

pub fn synth_triplets(count: usize, resolution: usize, seed: u64) -> Result<Vec<ViewTriplet>> {
    synth_triplets_with(&SynthConfig::new(count, resolution, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut img = Image::filled(h, w, 3, PixelRange::Raw, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    #[test]
    fn preprocess_crop_resize_and_endpoints() {
        let img = raw(480, 640, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f64);
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.shape(), (224, 224, 3));
        assert_eq!(out.range, PixelRange::Normalized);
        let ends = raw(4, 4, |_, y, _| if y < 2 { 255.0 } else { 0.0 });
        let cfg = PreprocessConfig {
            resolution: 4,
            ..Default::default()
        };
        let p = preprocess(&ends, &cfg).unwrap();
        assert_eq!(p.get(0, 0, 0), 1.0);
        assert_eq!(p.get(0, 3, 0), -1.0);
    }

    #[test]
    fn preprocess_square_is_crop_free() {
        let img = raw(8, 8, |c, y, x| (c + y * 8 + x) as f64);
        let cfg = PreprocessConfig {
            resolution: 8,
            ..Default::default()
        };
        let p = preprocess(&img, &cfg).unwrap();
        for (a, b) in p.data.iter().zip(&img.data) {
            assert_eq!(*a, b / 127.5 - 1.0);
        }
        let wide = raw(8, 12, |c, y, x| (c + y * 8 + x) as f64 - 2.0);
        let q = preprocess(&wide, &cfg).unwrap();
        assert_eq!(q.get(1, 3, 0), wide.get(1, 3, 2) / 127.5 - 1.0);
        // bilinear downscale of an exact 2x block image reproduces it
        let blocks = raw(8, 8, |_, y, x| ((y / 2) * 4 + x / 2) as f64 * 10.0);
        let half = preprocess(
            &blocks,
            &PreprocessConfig {
                resolution: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((half.get(0, 1, 2) - (60.0 / 127.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn preprocess_errors() {
        let cfg = PreprocessConfig::default();
        let empty = Image::filled(0, 4, 3, PixelRange::Raw, 0.0);
        assert!(preprocess(&empty, &cfg).is_err());
        let gray = Image::filled(4, 4, 1, PixelRange::Raw, 0.0);
        assert!(preprocess(&gray, &cfg).is_err());
    }

    #[test]
    fn denormalize_endpoints_and_clamp() {
        let img = Image::new(1, 4, 1, PixelRange::Normalized, vec![-1.0, 0.0, 1.0, 1.5]).unwrap();
        let (d, clamped) = denormalize(&img);
        assert_eq!(d.data, vec![0.0, 127.5, 255.0, 255.0]);
        assert_eq!(clamped, 1);
        assert_eq!(d.range, PixelRange::Raw);
    }

    #[test]
    fn frame_intervals() {
        assert_eq!(frame_interval_triplets(5, 2).unwrap(), vec![(0, 2, 4)]);
        assert_eq!(frame_interval_triplets(4, 1).unwrap(), vec![(0, 1, 2), (1, 2, 3)]);
        assert!(frame_interval_triplets(3, 2).unwrap().is_empty());
        assert!(frame_interval_triplets(30, 0).is_err());
        assert!(frame_interval_triplets(30, 8).is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("val".parse::<Split>().is_err());
    }
}
