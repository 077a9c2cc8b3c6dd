use std::fmt;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("psnr: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Channel mean of a `[C, H, W]` image.
fn gray(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return dim_err(format!("ssim: expected [C, H, W], got {:?}", x.shape())),
    };
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in 0..c {
        for (acc, &v) in g.iter_mut().zip(&x.data()[ch * plane..(ch + 1) * plane]) {
            *acc += v as f64 / c as f64;
        }
    }
    Ok((g, h, w))
}

/// Separable Gaussian filter keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| kernel[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| kernel[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM on the channel-mean images, data range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("ssim: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (x, h, w) = gray(a)?;
    let (y, _, _) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return dim_err(format!("ssim: {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"));
    }
    let half = (SSIM_WINDOW / 2) as f64;
    let mut kernel: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &kernel);
    let mu_y = filter_valid(&y, h, w, &kernel);
    let xx = filter_valid(&prod(&x, &x), h, w, &kernel);
    let yy = filter_valid(&prod(&y, &y), h, w, &kernel);
    let xy = filter_valid(&prod(&x, &y), h, w, &kernel);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageScore {
    pub fn measure(test: &Tensor, reference: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(test, reference, 1.0)?,
            ssim: ssim(test, reference)?,
        })
    }
}

/// Per-image scores and their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageScore>,
}

impl MetricsReport {
    pub fn push(&mut self, s: ImageScore) {
        self.images.push(s);
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr).sum::<f64>() / self.images.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len().max(1) as f64
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.images.iter().enumerate() {
            writeln!(f, "image {i:>3}  psnr {:>7.3} dB  ssim {:>6.4}", s.psnr, s.ssim)?;
        }
        write!(
            f,
            "mean       psnr {:>7.3} dB  ssim {:>6.4}",
            self.mean_psnr(),
            self.mean_ssim()
        )
    }
}
