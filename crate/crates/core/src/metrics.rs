//! PSNR and SSIM.
//!
//! Images are `(C, H, W)` tensors with values in `[0, peak]`. SSIM converts
//! three-channel images to luma first (0.299, 0.587, 0.114) and averages the
//! local index over the positions where the 11×11 window fits entirely.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricResult {
    pub name: String,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

impl MetricResult {
    pub fn new(name: &str, per_sample: Vec<f64>) -> Self {
        let mean = if per_sample.is_empty() {
            f64::NAN
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        MetricResult {
            name: name.to_string(),
            per_sample,
            mean,
        }
    }
}

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Range(format!("peak {peak} must be positive")));
    }
    if a.numel() == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Single-plane view used by SSIM: luma for 3 channels, the channel itself for 1.
pub fn luma(img: &Tensor<f64>) -> Result<(usize, usize, Vec<f64>)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected (C, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let plane = match c {
        1 => d.to_vec(),
        3 => (0..h * w)
            .map(|i| LUMA[0] * d[i] + LUMA[1] * d[h * w + i] + LUMA[2] * d[2 * h * w + i])
            .collect(),
        _ => return Err(Error::Shape(format!("SSIM needs 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, plane))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filter: output is `(h − 10) × (w − 10)`.
fn filter_valid(h: usize, w: usize, x: &[f64], k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|j| k[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, x) = luma(a)?;
    let (_, _, y) = luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, mxx, myy, mxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(h, w, p, &k));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
