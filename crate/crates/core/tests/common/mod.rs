//! Reference implementations written from the definitions, sharing no code
//! with the library kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfbsr::{ConvSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(lo..hi))
}

/// Nested-loop cross-correlation with zero padding.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let out_dim = |len: usize, k: usize, pad: usize, dil: usize| (len + 2 * pad - dil * (k - 1) - 1) / spec.stride + 1;
    let oh = out_dim(xs.h, ws.h, spec.pad.0, spec.dilation.0);
    let ow = out_dim(xs.w, ws.w, spec.pad.1, spec.dilation.1);
    Tensor::from_fn([xs.n, ws.n, oh, ow], |n, co, oy, ox| {
        let mut acc = bias.map_or(0.0, |b| b[co]);
        for ci in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * spec.stride + ky * spec.dilation.0) as i64 - spec.pad.0 as i64;
                    let ix = (ox * spec.stride + kx * spec.dilation.1) as i64 - spec.pad.1 as i64;
                    if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                        continue;
                    }
                    acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

/// Keys cubic kernel with `a = -0.5`, written piecewise from its definition.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Unnormalised weight of 1-based source sample `p` for the output sample
/// centred at input coordinate `u`, with antialiasing when shrinking.
fn tap(u: f64, p: i64, scale: f64) -> f64 {
    if scale < 1.0 {
        scale * cubic(scale * (u - p as f64))
    } else {
        cubic(u - p as f64)
    }
}

/// Bicubic resize evaluated as one 2-D weighted sum per output pixel over
/// every source position in its support, with replicated edges.
pub fn bicubic_oracle(img: &Tensor<f64>, scale: f64, oh: usize, ow: usize) -> Tensor<f64> {
    let s = img.shape();
    let support = if scale < 1.0 { 2.0 / scale } else { 2.0 } + 1.0;
    Tensor::from_fn([s.n, s.c, oh, ow], |n, c, i, j| {
        let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let v = (j + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let rows = ((u - support).floor() as i64)..=((u + support).ceil() as i64);
        let cols = ((v - support).floor() as i64)..=((v + support).ceil() as i64);
        let (mut num, mut den) = (0.0, 0.0);
        for p in rows {
            for q in cols.clone() {
                let wt = tap(u, p, scale) * tap(v, q, scale);
                let y = (p - 1).clamp(0, s.h as i64 - 1) as usize;
                let x = (q - 1).clamp(0, s.w as i64 - 1) as usize;
                num += wt * img.at(n, c, y, x);
                den += wt;
            }
        }
        num / den
    })
}

/// Mean SSIM from explicit per-window weighted statistics: 11×11 Gaussian
/// window with sigma 1.5, dynamic range 1, valid windows only, averaged over
/// planes.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let k = 11;
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (y, row) in g.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut planes = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = 0.0;
            let windows = (s.h - k + 1) * (s.w - k + 1);
            for y0 in 0..=s.h - k {
                for x0 in 0..=s.w - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (y, row) in g.iter().enumerate() {
                        for (x, gw) in row.iter().enumerate() {
                            let wt = gw / total;
                            let (p, q) = (a.at(n, c, y0 + y, x0 + x), b.at(n, c, y0 + y, x0 + x));
                            ma += wt * p;
                            mb += wt * q;
                            saa += wt * p * p;
                            sbb += wt * q * q;
                            sab += wt * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            planes += acc / windows as f64;
        }
    }
    planes / (s.n * s.c) as f64
}

/// Distance in representable values, valid across zero.
pub fn ulps_f32(a: f32, b: f32) -> u64 {
    let key = |v: f32| {
        let bits = v.to_bits() as i64;
        if bits & 0x8000_0000 != 0 {
            -(bits & 0x7fff_ffff)
        } else {
            bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

pub fn ulps_f64(a: f64, b: f64) -> u64 {
    let key = |v: f64| {
        let bits = v.to_bits() as i128;
        if bits & (1 << 63) != 0 {
            -(bits & 0x7fff_ffff_ffff_ffff)
        } else {
            bits
        }
    };
    (key(a) - key(b)).unsigned_abs() as u64
}
