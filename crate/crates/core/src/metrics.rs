//! PSNR, SSIM and the center-crop evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{list_images, load_image, requantize};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "image shapes differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all elements, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filter of an `h`×`w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &wt)| wt * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(t, &wt)| wt * rows[(y + t) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(a, a), h, w, taps);
    let bb = filter_valid(&prod(b, b), h, w, taps);
    let ab = filter_valid(&prod(a, b), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM with an 11×11 Gaussian window (sigma 1.5), dynamic range 1,
/// valid windows only, computed per channel and averaged.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = s.plane();
    let to_f64 = |t: &Tensor<T>, p: usize| -> Vec<f64> {
        t.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };
    let per_plane: Vec<f64> = (0..s.n * s.c)
        .into_par_iter()
        .map(|p| ssim_plane(&to_f64(a, p), &to_f64(b, p), s.h, s.w, &taps))
        .collect();
    Ok(per_plane.iter().sum::<f64>() / per_plane.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Side of the centered square crop. Images smaller than the crop along
    /// an axis are scored over that whole axis.
    pub crop: Option<usize>,
    /// Quantize the super-resolved image to 8 bits before scoring.
    pub on_quantized: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            crop: Some(1000),
            on_quantized: false,
        }
    }
}

/// Centered crop of side `size`, clamped to the image extent.
pub fn center_crop<T: Scalar>(img: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    let (ch, cw) = (size.min(s.h), size.min(s.w));
    img.crop((s.h - ch) / 2, (s.w - cw) / 2, ch, cw)
}

/// PSNR and SSIM of one pair under `protocol`.
pub fn score_pair<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, protocol: &EvalProtocol) -> Result<(f64, f64)> {
    same_shape(sr, hr)?;
    let sr = if protocol.on_quantized {
        requantize(sr)?
    } else {
        sr.clone()
    };
    let (sr, hr) = match protocol.crop {
        Some(c) => (center_crop(&sr, c)?, center_crop(hr, c)?),
        None => (sr, hr.clone()),
    };
    Ok((psnr(&sr, &hr)?, ssim(&sr, &hr)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub filename: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,psnr_db,ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6}", r.filename, r.psnr_db, r.ssim).unwrap();
        }
        writeln!(out, "mean,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim).unwrap();
        out
    }
}

/// Scores every PNG in `sr_dir` against the file with the same relative path
/// in `hr_dir`. Both directories must hold the same set of files.
pub fn evaluate(sr_dir: &Path, hr_dir: &Path, protocol: &EvalProtocol) -> Result<EvalTable> {
    let sr_files = list_images(sr_dir)?;
    let hr_files = list_images(hr_dir)?;
    if let Some(f) = sr_files.iter().find(|f| !hr_files.contains(f)) {
        return Err(Error::MissingCounterpart(hr_dir.join(f).display().to_string()));
    }
    if let Some(f) = hr_files.iter().find(|f| !sr_files.contains(f)) {
        return Err(Error::MissingCounterpart(sr_dir.join(f).display().to_string()));
    }
    if sr_files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG images under {}",
            sr_dir.display()
        )));
    }
    let rows = sr_files
        .par_iter()
        .map(|rel| {
            let sr = load_image::<f64>(sr_dir.join(rel))?;
            let hr = load_image::<f64>(hr_dir.join(rel))?;
            let (p, s) = score_pair(&sr, &hr, protocol)?;
            Ok(EvalRow {
                filename: rel.to_string_lossy().replace('\\', "/"),
                psnr_db: p,
                ssim: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalTable {
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}
