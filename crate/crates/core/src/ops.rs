//! Forward and backward kernels on plain tensors.
//!
//! These are the primitives behind both graph flavours in [`crate::autograd`].
//! Every kernel returns fresh tensors and never mutates its inputs. Reductions
//! run in a fixed order so results are bitwise reproducible; convolution work
//! is split into shape-determined chunks, so the chunking (and therefore the
//! summation order) does not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Lower clamp applied to the argument of [`log`].
pub const LOG_EPS: f64 = 1e-12;

/// Target element count of one im2col buffer chunk.
const COL_CHUNK_ELEMS: usize = 1 << 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            pad: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl ConvSpec {
    /// Stride 1 with "same" padding for a `kh x kw` kernel: `pad = dilation * (k - 1) / 2`.
    pub fn same(kh: usize, kw: usize, dilation: (usize, usize)) -> Self {
        ConvSpec {
            stride: 1,
            pad: (dilation.0 * (kh - 1) / 2, dilation.1 * (kw - 1) / 2),
            dilation,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

fn conv_out_dim(len: usize, k: usize, pad: usize, dil: usize, stride: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output shape of `conv2d` or an error describing the violated precondition.
pub fn conv2d_out_shape(x: Shape, w: Shape, spec: &ConvSpec) -> Result<Shape> {
    if x.c != w.c {
        return Err(Error::ChannelMismatch {
            expected: w.c,
            got: x.c,
        });
    }
    if spec.stride == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
        return Err(Error::InvalidArgument("conv2d stride and dilation must be >= 1".into()));
    }
    let oh = conv_out_dim(x.h, w.h, spec.pad.0, spec.dilation.0, spec.stride);
    let ow = conv_out_dim(x.w, w.w, spec.pad.1, spec.dilation.1, spec.stride);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(x.n, w.n, oh, ow)),
        _ => Err(Error::shape(format!(
            "conv2d output dimension < 1 for input {x}, kernel {}x{}, spec {spec:?}",
            w.h, w.w
        ))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == (0, 0)
    }

    /// Output-row ranges covering `0..oh`, sized from the shape alone.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per_row = self.k() * self.ow;
        let rows = (COL_CHUNK_ELEMS / per_row.max(1)).clamp(1, self.oh);
        (0..self.oh)
            .step_by(rows)
            .map(|r0| (r0, (r0 + rows).min(self.oh)))
            .collect()
    }

    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let nc = (r1 - r0) * self.ow;
        let s = self.spec.stride as isize;
        let (ph, pw) = (self.spec.pad.0 as isize, self.spec.pad.1 as isize);
        let (dh, dw) = (self.spec.dilation.0 as isize, self.spec.dilation.1 as isize);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * nc..(row + 1) * nc];
                    for (ri, r) in (r0..r1).enumerate() {
                        let out = &mut dst[ri * self.ow..(ri + 1) * self.ow];
                        let iy = r as isize * s - ph + ky as isize * dh;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let x0 = kx as isize * dw - pw;
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * s + x0;
                            *o = if ix >= 0 && ix < self.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let nc = (r1 - r0) * self.ow;
        let s = self.spec.stride as isize;
        let (ph, pw) = (self.spec.pad.0 as isize, self.spec.pad.1 as isize);
        let (dh, dw) = (self.spec.dilation.0 as isize, self.spec.dilation.1 as isize);
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * nc..(row + 1) * nc];
                    for (ri, r) in (r0..r1).enumerate() {
                        let iy = r as isize * s - ph + ky as isize * dh;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let x0 = kx as isize * dw - pw;
                        for (ox, &g) in src[ri * self.ow..(ri + 1) * self.ow].iter().enumerate() {
                            let ix = ox as isize * s + x0;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(self) -> *mut T {
        self.0
    }
}

/// 2-D cross-correlation with zero padding. `bias` has `c_out` entries.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = conv2d_out_shape(xs, ws, spec)?;
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::shape(format!(
                "bias has {} entries, expected {}",
                b.numel(),
                ws.n
            )));
        }
    }
    let g = ConvGeom {
        c_in: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: os.h,
        ow: os.w,
        spec: *spec,
    };
    let c_out = ws.n;
    let k = g.k();
    let p = os.h * os.w;
    let in_item = xs.c * xs.h * xs.w;
    let mut out = vec![T::zero(); os.numel()];
    let out_ptr = SendPtr(out.as_mut_ptr());
    let tasks: Vec<(usize, usize, usize)> = (0..xs.n)
        .flat_map(|n| g.chunks().into_iter().map(move |(r0, r1)| (n, r0, r1)))
        .collect();
    let xd = x.data();
    let wd = weight.data();
    tasks.par_iter().for_each(|&(n, r0, r1)| {
        let nc = (r1 - r0) * g.ow;
        let xi = &xd[n * in_item..(n + 1) * in_item];
        // SAFETY: each task writes the disjoint column range [r0*ow, r1*ow) of
        // every output channel row of batch item n.
        let c = unsafe { out_ptr.get().add(n * c_out * p + r0 * g.ow) };
        if g.pointwise() {
            unsafe {
                T::gemm(
                    c_out,
                    k,
                    nc,
                    T::one(),
                    wd.as_ptr(),
                    k as isize,
                    1,
                    xi.as_ptr().add(r0 * g.ow),
                    p as isize,
                    1,
                    T::zero(),
                    c,
                    p as isize,
                    1,
                )
            }
        } else {
            let mut cols = vec![T::zero(); k * nc];
            g.im2col(xi, r0, r1, &mut cols);
            unsafe {
                T::gemm(
                    c_out,
                    k,
                    nc,
                    T::one(),
                    wd.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    nc as isize,
                    1,
                    T::zero(),
                    c,
                    p as isize,
                    1,
                )
            }
        }
    });
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bv = b.data()[i % c_out];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Per-task weight and input gradient contributions.
type PartialGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of `conv2d` given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = conv2d_out_shape(xs, ws, spec)?;
    if dy.shape() != os {
        return Err(Error::shape(format!("conv2d upstream {} vs output {os}", dy.shape())));
    }
    let g = ConvGeom {
        c_in: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: os.h,
        ow: os.w,
        spec: *spec,
    };
    let c_out = ws.n;
    let k = g.k();
    let p = os.h * os.w;
    let in_item = xs.c * xs.h * xs.w;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); c_out];
        for n in 0..os.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (n * c_out + co) * p;
                let s = dyd[off..off + p].iter().fold(0.0f64, |a, v| a + v.as_f64());
                *acc = *acc + T::of_f64(s);
            }
        }
        db
    });

    let tasks: Vec<(usize, usize, usize)> = (0..xs.n)
        .flat_map(|n| g.chunks().into_iter().map(move |(r0, r1)| (n, r0, r1)))
        .collect();
    let mut dw = need_dw.then(|| vec![T::zero(); c_out * k]);
    let mut dx = need_dx.then(|| vec![T::zero(); xs.numel()]);
    let group = rayon::current_num_threads().max(1) * 2;

    for batch in tasks.chunks(group) {
        let partials: Vec<PartialGrads<T>> = batch
            .par_iter()
            .map(|&(n, r0, r1)| {
                let nc = (r1 - r0) * g.ow;
                let xi = &xd[n * in_item..(n + 1) * in_item];
                let dyp = unsafe { dyd.as_ptr().add(n * c_out * p + r0 * g.ow) };
                let cols_owned;
                let (bptr, rsb, csb): (*const T, isize, isize) = if g.pointwise() {
                    (unsafe { xi.as_ptr().add(r0 * g.ow) }, p as isize, 1)
                } else {
                    cols_owned = if need_dw {
                        let mut cols = vec![T::zero(); k * nc];
                        g.im2col(xi, r0, r1, &mut cols);
                        cols
                    } else {
                        Vec::new()
                    };
                    (cols_owned.as_ptr(), nc as isize, 1)
                };
                let dw_part = need_dw.then(|| {
                    let mut part = vec![T::zero(); c_out * k];
                    unsafe {
                        T::gemm(
                            c_out,
                            nc,
                            k,
                            T::one(),
                            dyp,
                            p as isize,
                            1,
                            bptr,
                            csb,
                            rsb,
                            T::zero(),
                            part.as_mut_ptr(),
                            k as isize,
                            1,
                        )
                    }
                    part
                });
                let dcols = need_dx.then(|| {
                    let mut dc = vec![T::zero(); k * nc];
                    unsafe {
                        T::gemm(
                            k,
                            c_out,
                            nc,
                            T::one(),
                            wd.as_ptr(),
                            1,
                            k as isize,
                            dyp,
                            p as isize,
                            1,
                            T::zero(),
                            dc.as_mut_ptr(),
                            nc as isize,
                            1,
                        )
                    }
                    dc
                });
                (dw_part, dcols)
            })
            .collect();
        for (&(n, r0, r1), (dw_part, dcols)) in batch.iter().zip(partials) {
            if let (Some(acc), Some(part)) = (dw.as_mut(), dw_part) {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a = *a + v;
                }
            }
            if let (Some(acc), Some(dc)) = (dx.as_mut(), dcols) {
                let dxi = &mut acc[n * in_item..(n + 1) * in_item];
                if g.pointwise() {
                    let nc = (r1 - r0) * g.ow;
                    for ci in 0..g.c_in {
                        let dst = &mut dxi[ci * p + r0 * g.ow..ci * p + r0 * g.ow + nc];
                        for (d, v) in dst.iter_mut().zip(&dc[ci * nc..(ci + 1) * nc]) {
                            *d = *d + *v;
                        }
                    }
                } else {
                    g.col2im(&dc, r0, r1, dxi);
                }
            }
        }
    }

    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(xs, d)).transpose()?,
        dw: dw.map(|d| Tensor::from_vec(ws, d)).transpose()?,
        db: db
            .map(|d| Tensor::from_vec(Shape::new(c_out, 1, 1, 1), d))
            .transpose()?,
    })
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `max(x, 0) + alpha * min(x, 0)`. `alpha = 0` gives ReLU.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * alpha })
}

/// Subgradient at exactly zero is taken from the negative branch.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, alpha: T) -> Tensor<T> {
    zip_map(x, dy, |v, g| if v > T::zero() { g } else { g * alpha })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |s, g| g * s * (T::one() - s))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(zip_map(a, b, |x, y| x + y))
}

/// `x - s` where `s` is a single-element tensor.
pub fn sub_scalar<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.numel() != 1 {
        return Err(Error::shape(format!("sub_scalar expects a scalar, got {}", s.shape())));
    }
    let sv = s.item();
    Ok(x.map(|v| v - sv))
}

/// `a * x + b` elementwise.
pub fn affine<T: Scalar>(x: &Tensor<T>, a: T, b: T) -> Tensor<T> {
    x.map(|v| a * v + b)
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of empty list".into()))?;
    let s0 = first.shape();
    let mut c = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::shape(format!("concat_channels: {s} vs {s0}")));
        }
        c += s.c;
    }
    let out_shape = Shape::new(s0.n, c, s0.h, s0.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s0.n {
        for t in xs {
            let per = t.shape().c * s0.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits `dy` along channels into pieces of the given widths.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = dy.shape();
    if widths.iter().sum::<usize>() != s.c {
        return Err(Error::shape("split widths do not sum to channel count"));
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(s.n * c * plane)).collect();
    for n in 0..s.n {
        let mut off = n * s.c * plane;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&dy.data()[off..off + c * plane]);
            off += c * plane;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}

fn sum_f64<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().fold(0.0f64, |a, v| a + v.as_f64())
}

/// Mean of every element, as a `(1, 1, 1, 1)` tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::of_f64(sum_f64(x.data()) / x.numel() as f64))
}

/// Mean over `h, w` giving `(n, c, 1, 1)`.
pub fn mean_spatial<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let data = x
        .data()
        .chunks(plane)
        .map(|c| T::of_f64(sum_f64(c) / plane as f64))
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("valid")
}

pub fn mean_spatial_backward<T: Scalar>(shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::of_f64(1.0 / shape.plane() as f64);
    let mut data = Vec::with_capacity(shape.numel());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, shape.plane()));
    }
    Tensor::from_vec(shape, data).expect("valid")
}

/// Mean absolute difference over all elements.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("l1", a, b)?;
    let s = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |acc, (&x, &y)| acc + (x - y).abs().as_f64());
    Ok(Tensor::scalar(T::of_f64(s / a.numel() as f64)))
}

/// Gradient of `l1` w.r.t. `a`; the gradient w.r.t. `b` is its negation.
/// The subgradient at `a == b` is zero.
pub fn l1_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dy: T) -> Tensor<T> {
    let scale = dy / T::of_f64(a.numel() as f64);
    zip_map(a, b, |x, y| {
        let d = x - y;
        if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        }
    })
}

/// Natural log with the argument clamped to at least [`LOG_EPS`].
pub fn log<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let eps = T::of_f64(LOG_EPS);
    x.map(|v| v.max(eps).ln())
}

/// Zero gradient inside the clamped region.
pub fn log_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let eps = T::of_f64(LOG_EPS);
    zip_map(x, dy, |v, g| if v >= eps { g / v } else { T::zero() })
}

pub fn nearest_upsample<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!("upsample factor must be >= 2, got {r}")));
    }
    let s = x.shape();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h * r, s.w * r), |n, c, i, j| {
        x.at(n, c, i / r, j / r)
    }))
}

/// Block-sum pooling: the adjoint of nearest upsampling.
pub fn nearest_upsample_backward<T: Scalar>(dy: &Tensor<T>, r: usize) -> Tensor<T> {
    let s = dy.shape();
    let (h, w) = (s.h / r, s.w / r);
    let mut out = vec![T::zero(); s.n * s.c * h * w];
    for nc in 0..s.n * s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let o = (nc * h + i / r) * w + j / r;
                out[o] = out[o] + dy.data()[(nc * s.h + i) * s.w + j];
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, h, w), out).expect("valid")
}

/// Periodic shuffle `(n, c*r*r, h, w) -> (n, c, h*r, w*r)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "pixel_shuffle: {} channels not divisible by {r}^2",
            s.c
        )));
    }
    let c = s.c / (r * r);
    Ok(Tensor::from_fn(Shape::new(s.n, c, s.h * r, s.w * r), |n, ch, i, j| {
        x.at(n, ch * r * r + (i % r) * r + (j % r), i / r, j / r)
    }))
}

/// Inverse of [`pixel_shuffle`]: `(n, c, h*r, w*r) -> (n, c*r*r, h, w)`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "pixel_unshuffle: spatial {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c * r * r, s.h / r, s.w / r),
        |n, ch, i, j| {
            let (c, rem) = (ch / (r * r), ch % (r * r));
            x.at(n, c, i * r + rem / r, j * r + rem % r)
        },
    ))
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// Returns the pooled tensor and the flat input index of each maximum;
/// ties resolve to the first element in row-major window order.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(format!("max_pool2 needs at least 2x2 input, got {s}")));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut vals = Vec::with_capacity(out_shape.numel());
    let mut idx = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..out_shape.h {
                for j in 0..out_shape.w {
                    let mut best = x.index(n, c, 2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = x.index(n, c, 2 * i + di, 2 * j + dj);
                        if x.data()[k] > x.data()[best] {
                            best = k;
                        }
                    }
                    vals.push(x.data()[best]);
                    idx.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, vals)?, idx))
}

pub fn max_pool2_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); input.numel()];
    for (&k, &g) in argmax.iter().zip(dy.data()) {
        out[k] = out[k] + g;
    }
    Tensor::from_vec(input, out).expect("valid")
}
