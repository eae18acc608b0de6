//! Image quality metrics: PSNR, multi-scale SSIM, and bpp accounting.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};

/// Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB for
/// identical inputs.
pub fn psnr(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch("psnr inputs".into()));
    }
    let mse: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

pub fn mse(x: &Array3<f32>, y: &Array3<f32>) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

/// Squared L2 distance between two images (the detail-intensity metric
/// used by the guidance-scale sweep).
pub fn sq_distance(x: &Array3<f32>, y: &Array3<f32>) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum()
}

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let sigma = 1.5f64;
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// One scale of SSIM on a single channel: returns (mean ssim, mean cs).
fn ssim_channel(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
    let h = x.len();
    let w = x[0].len();
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;

    // separable Gaussian filtering, valid region only
    let filt = |img: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut tmp = vec![vec![0.0; w - WINDOW + 1]; h];
        for r in 0..h {
            for cx in 0..=(w - WINDOW) {
                let mut acc = 0.0;
                for k in 0..WINDOW {
                    acc += img[r][cx + k] * win[k];
                }
                tmp[r][cx] = acc;
            }
        }
        let mut out = vec![vec![0.0; w - WINDOW + 1]; h - WINDOW + 1];
        for r in 0..=(h - WINDOW) {
            for cx in 0..(w - WINDOW + 1) {
                let mut acc = 0.0;
                for k in 0..WINDOW {
                    acc += tmp[r + k][cx] * win[k];
                }
                out[r][cx] = acc;
            }
        }
        out
    };

    let sq = |img: &[Vec<f64>]| -> Vec<Vec<f64>> {
        img.iter()
            .map(|row| row.iter().map(|v| v * v).collect())
            .collect()
    };
    let prod = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b.iter())
            .map(|(ra, rb)| ra.iter().zip(rb.iter()).map(|(x, y)| x * y).collect())
            .collect()
    };

    let mu_x = filt(x);
    let mu_y = filt(y);
    let xx = filt(&sq(x));
    let yy = filt(&sq(y));
    let xy = filt(&prod(x, y));

    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut count = 0.0;
    for r in 0..mu_x.len() {
        for cidx in 0..mu_x[0].len() {
            let mx = mu_x[r][cidx];
            let my = mu_y[r][cidx];
            let vx = xx[r][cidx] - mx * mx;
            let vy = yy[r][cidx] - my * my;
            let cov = xy[r][cidx] - mx * my;
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            ssim_sum += l * cs;
            cs_sum += cs;
            count += 1.0;
        }
    }
    (ssim_sum / count, cs_sum / count)
}

fn downsample2(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = img.len() / 2;
    let w = img[0].len() / 2;
    let mut out = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            out[r][c] = 0.25
                * (img[2 * r][2 * c]
                    + img[2 * r][2 * c + 1]
                    + img[2 * r + 1][2 * c]
                    + img[2 * r + 1][2 * c + 1]);
        }
    }
    out
}

/// Multi-scale SSIM with the standard 5-scale weights, computed per
/// channel and averaged. When the image is too small for five scales the
/// scale count is reduced (with a warning on stderr) and the weights are
/// renormalized.
pub fn ms_ssim(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch("ms_ssim inputs".into()));
    }
    let (c, h, w) = x.dim();
    let min_dim = h.min(w);
    let mut scales = 0usize;
    while scales < 5 && (min_dim >> scales) >= WINDOW {
        scales += 1;
    }
    if scales == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {WINDOW}x{WINDOW} analysis window"
        )));
    }
    if scales < 5 {
        eprintln!(
            "ms_ssim: {h}x{w} supports only {scales} of 5 scales; weights renormalized"
        );
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();

    let mut total = 0.0;
    for ci in 0..c {
        let mut xs: Vec<Vec<f64>> = (0..h)
            .map(|r| (0..w).map(|cc| x[(ci, r, cc)] as f64).collect())
            .collect();
        let mut ys: Vec<Vec<f64>> = (0..h)
            .map(|r| (0..w).map(|cc| y[(ci, r, cc)] as f64).collect())
            .collect();
        let mut value = 1.0f64;
        for s in 0..scales {
            let (ssim, cs) = ssim_channel(&xs, &ys);
            let wgt = MSSSIM_WEIGHTS[s] / wsum;
            if s + 1 < scales {
                value *= cs.max(0.0).powf(wgt);
                xs = downsample2(&xs);
                ys = downsample2(&ys);
            } else {
                value *= ssim.max(0.0).powf(wgt);
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

/// Per-image evaluation record emitted by the eval tool.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub image: String,
    pub lambda_r: f64,
    pub steps: usize,
    pub lambda_s: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub denoise_seconds: f64,
    pub per_step_seconds: Vec<f64>,
    /// Squared distance to the lambda_s = 0 reconstruction.
    pub d_metric: Option<f64>,
}

pub fn bpp(total_bits: usize, width: usize, height: usize) -> f64 {
    total_bits as f64 / (width * height) as f64
}
