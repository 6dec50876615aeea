//! Brute-force reference metrics over plain `[c][y][x]` arrays on the 0-255
//! scale. Deliberately naive: direct 2-D windows, no separability, no reuse
//! of library code.

#![allow(dead_code)]

pub type Planes = Vec<Vec<Vec<f64>>>;

pub fn from_normalized(data: &[f64], c: usize, h: usize, w: usize) -> Planes {
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|y| (0..w).map(|x| (data[(ch * h + y) * w + x] + 1.0) * 127.5).collect())
                .collect()
        })
        .collect()
}

fn squared_error_mean(a: &Planes, b: &Planes) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.iter().zip(b) {
        for (ra, rb) in pa.iter().zip(pb) {
            for (x, y) in ra.iter().zip(rb) {
                sum += (x - y).powi(2);
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn psnr(a: &Planes, b: &Planes) -> f64 {
    let mse = squared_error_mean(a, b);
    10.0 * (255.0f64.powi(2) / mse).log10()
}

pub fn mmse(a: &[Planes], b: &[Planes]) -> f64 {
    a.iter().zip(b).map(|(x, y)| squared_error_mean(x, y)).sum::<f64>() / a.len() as f64
}

/// Mean absolute error on the normalized scale, averaged over images.
pub fn l1(a: &[Planes], b: &[Planes]) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (qa, qb) in pa.iter().zip(pb) {
            for (ra, rb) in qa.iter().zip(qb) {
                for (x, y) in ra.iter().zip(rb) {
                    sum += ((x - y) / 127.5).abs();
                    n += 1;
                }
            }
        }
        total += sum / n as f64;
    }
    total / a.len() as f64
}

fn gaussian_2d(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let mut k = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    k
}

/// Mean SSIM map and mean contrast-structure map over all valid window
/// positions, each window evaluated from scratch.
fn ssim_at_scale(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let win = gaussian_2d(11, 1.5);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (h, w) = (a.len(), a[0].len());
    let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += win[i][j] * a[y0 + i][x0 + j];
                    mb += win[i][j] * b[y0 + i][x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (da, db) = (a[y0 + i][x0 + j] - ma, b[y0 + i][x0 + j] - mb);
                    va += win[i][j] * da * da;
                    vb += win[i][j] * db * db;
                    cov += win[i][j] * da * db;
                }
            }
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            ssim_sum += lum * cs;
            cs_sum += cs;
            count += 1.0;
        }
    }
    (ssim_sum / count, cs_sum / count)
}

fn halve(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (p.len(), p[0].len());
    let px = |y: usize, x: usize| p[y.min(h - 1)][x.min(w - 1)];
    (0..h.div_ceil(2))
        .map(|y| {
            (0..w.div_ceil(2))
                .map(|x| 0.25 * (px(2 * y, 2 * x) + px(2 * y + 1, 2 * x) + px(2 * y, 2 * x + 1) + px(2 * y + 1, 2 * x + 1)))
                .collect()
        })
        .collect()
}

pub fn ms_ssim(a: &Planes, b: &Planes) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut scales = 0;
    let mut side = a[0].len().min(a[0][0].len());
    while scales < 5 && side >= 11 {
        scales += 1;
        side = side.div_ceil(2);
    }
    let norm: f64 = weights[..scales].iter().sum();
    let mut mean = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let (mut x, mut y) = (pa.clone(), pb.clone());
        let mut prod = 1.0;
        for s in 0..scales {
            let (ssim, cs) = ssim_at_scale(&x, &y);
            let term = if s == scales - 1 { ssim } else { cs };
            prod *= term.max(0.0).powf(weights[s] / norm);
            x = halve(&x);
            y = halve(&y);
        }
        mean += prod;
    }
    mean / a.len() as f64
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Block sharpness of one plane already mapped to `[0, 1]`.
pub fn sharpness_plane(u: &[Vec<f64>], block: usize, kernel: usize, sigma: f64) -> f64 {
    let k = gaussian_2d(kernel, sigma);
    let r = (kernel / 2) as isize;
    let (h, w) = (u.len(), u[0].len());
    let mut blurred = vec![vec![0.0; w]; h];
    for (y, row) in blurred.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            for i in 0..kernel {
                for j in 0..kernel {
                    let yy = mirror(y as isize + i as isize - r, h);
                    let xx = mirror(x as isize + j as isize - r, w);
                    *v += k[i][j] * u[yy][xx];
                }
            }
        }
    }
    let variance = |p: &[Vec<f64>], by: usize, bx: usize| {
        let vals: Vec<f64> = (0..block)
            .flat_map(|i| (0..block).map(move |j| (by * block + i, bx * block + j)))
            .map(|(y, x)| p[y][x])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
    };
    let (bh, bw) = (h / block, w / block);
    let mut total = 0.0;
    for by in 0..bh {
        for bx in 0..bw {
            total += (variance(u, by, bx) - variance(&blurred, by, bx)).abs().sqrt();
        }
    }
    total / (bh * bw) as f64
}

/// Channel-averaged sharpness of an image on the 0-255 scale.
pub fn sharpness(img: &Planes, block: usize, kernel: usize, sigma: f64) -> f64 {
    img.iter()
        .map(|p| {
            let unit: Vec<Vec<f64>> = p.iter().map(|r| r.iter().map(|v| v / 255.0).collect()).collect();
            sharpness_plane(&unit, block, kernel, sigma)
        })
        .sum::<f64>()
        / img.len() as f64
}
