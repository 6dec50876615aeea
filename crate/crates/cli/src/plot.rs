use image::{Rgb, RgbImage};

use scgn::data::denormalize;
use scgn::Image;

/// Images side by side with a 4-pixel white gutter.
pub fn grid(panels: &[&Image]) -> anyhow::Result<RgbImage> {
    const GAP: u32 = 4;
    let rgb: Vec<RgbImage> = panels
        .iter()
        .map(|p| denormalize(p).0.to_rgb8())
        .collect::<Result<_, _>>()?;
    let h = rgb.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = rgb.iter().map(|i| i.width()).sum::<u32>() + GAP * rgb.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in &rgb {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + GAP;
    }
    Ok(out)
}

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Line chart of `(x, y)` points with axes and tick marks; no text.
pub fn curve(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN as f64, (W - MARGIN) as f64, MARGIN as f64, (H - MARGIN) as f64);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    for i in 0..=10 {
        let x = left + (right - left) * i as f64 / 10.0;
        let y = bottom - (bottom - top) * i as f64 / 10.0;
        line(&mut img, (x, bottom), (x, bottom + 5.0), axis);
        line(&mut img, (left - 5.0, y), (left, y), axis);
    }
    if points.is_empty() {
        return img;
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x_lo, x_hi) = fold(|p| p.0);
    let (y_lo, y_hi) = fold(|p| p.1);
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        (
            left + (x - x_lo) / span(x_lo, x_hi) * (right - left),
            bottom - (y - y_lo) / span(y_lo, y_hi) * (bottom - top),
        )
    };
    let blue = Rgb([31, 119, 180]);
    for w in points.windows(2) {
        line(&mut img, to_px(w[0]), to_px(w[1]), blue);
    }
    for p in points {
        let (x, y) = to_px(*p);
        for dy in -2..=2 {
            line(&mut img, (x - 2.0, y + dy as f64), (x + 2.0, y + dy as f64), blue);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use scgn::PixelRange;

    #[test]
    fn grid_layout() {
        let a = Image::filled(8, 8, 3, PixelRange::Normalized, -1.0);
        let g = grid(&[&a, &a, &a]).unwrap();
        assert_eq!((g.width(), g.height()), (8 * 3 + 8, 8));
        assert_eq!(g.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(g.get_pixel(9, 0), &Rgb([255, 255, 255]));
    }

    #[test]
    fn curve_draws_points() {
        let img = curve(&[(1000.0, 20.0), (2000.0, 25.0)]);
        assert_eq!(img.dimensions(), (W, H));
        let blue = img.pixels().filter(|p| **p == Rgb([31, 119, 180])).count();
        assert!(blue > 100);
    }
}
