use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{MetricReport, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_SATURATED: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected an H×W or H×W×C image".into(),
        }),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
            context: "image metrics",
        });
    }
    hwc(a)
}

fn clamp01(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (x, y) = (clamp01(a), clamp01(b));
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len().max(1) as f64)
}

/// `10·log10(1/mse)` for unit dynamic range; [`PSNR_SATURATED`] when `mse < 1e-10`.
pub fn psnr(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_SATURATED
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean SSIM over every `8×8` window position (smaller images use one window
/// spanning the shorter side) and channel, with uniform weights.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = same_shape(a, b)?;
    let (x, y) = (clamp01(a), clamp01(b));
    let win = SSIM_WINDOW.min(h).min(w);
    if win == 0 {
        return Err(Error::Empty("ssim image"));
    }
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let at = |v: &[f64], i: usize, j: usize| v[(i * w + j) * c + ch];
        for i0 in 0..=h - win {
            for j0 in 0..=w - win {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + win {
                    for j in j0..j0 + win {
                        let (p, q) = (at(&x, i, j), at(&y, i, j));
                        sx += p;
                        sy += q;
                        sxx += p * p;
                        syy += q * q;
                        sxy += p * q;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cxy = sxy / n - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Magnitudes of the per-channel 2-D DFT, channel-major.
fn magnitude_spectrum(v: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> = (0..h * w).map(|k| Complex::new(v[k * c + ch], 0.0)).collect();
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        out.extend(buf.iter().map(|z| z.norm()));
    }
    out
}

/// `1 − cos(|F(a)|, |F(b)|)` over 2-D magnitude spectra: 0 for identical images,
/// larger for more different ones.
pub fn fft2d_cos(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = same_shape(a, b)?;
    let fa = magnitude_spectrum(&clamp01(a), h, w, c);
    let fb = magnitude_spectrum(&clamp01(b), h, w, c);
    let dot: f64 = fa.iter().zip(&fb).map(|(p, q)| p * q).sum();
    let na: f64 = fa.iter().map(|p| p * p).sum();
    let nb: f64 = fb.iter().map(|q| q * q).sum();
    let cos = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(1.0 - cos)
}

/// mse, psnr, ssim and fft2d_cos of `recovered` against `truth` (both clamped to `[0, 1]`).
/// LPIPS is reported absent.
pub fn image_metrics(recovered: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    let m = mse(recovered, truth)?;
    let mut r = MetricReport::new(Modality::Image);
    r.set("mse", m);
    r.set("psnr", psnr(m));
    if m < 1e-10 {
        r.saturated.push("psnr".into());
    }
    r.set("ssim", ssim(recovered, truth)?);
    r.set("fft2d_cos", fft2d_cos(recovered, truth)?);
    r.absent.push("lpips".into());
    Ok(r)
}
