//! Image IO, bicubic resampling, patch sampling and augmentation.

use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Keys cubic convolution parameter used by the bicubic resize.
pub const KEYS_A: f64 = -0.5;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn read_rgb8(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    match reader.decode().map_err(|e| image_err(path, e))? {
        image::DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?}", other.color()),
        )),
    }
}

fn rgb8_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    let w = w as usize;
    Tensor::from_fn([1, 3, h as usize, w], |_, c, y, x| {
        T::of_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0)
    })
}

/// Loads an 8-bit RGB image as `(1, 3, h, w)` with level `k` mapped to `k/255`.
/// Other pixel formats are rejected.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(rgb8_to_tensor(&read_rgb8(path.as_ref())?))
}

/// Quantizes to 8 bits (clamp to `[0, 1]`, round to nearest) row-major RGB.
pub fn quantize<T: Scalar>(img: &Tensor<T>) -> Result<RgbImage> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("expected a (1,3,h,w) image, got {s}")));
    }
    let mut buf = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = img.at(0, c, y, x).as_f64();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage::from_raw(s.w as u32, s.h as u32, buf).expect("buffer sized to image"))
}

/// Saves as 8-bit RGB PNG.
pub fn save_image<T: Scalar>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    quantize(img)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Round trip through 8-bit quantization.
pub fn requantize<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(rgb8_to_tensor(&quantize(img)?))
}

/// Keys cubic convolution kernel.
pub fn keys_cubic(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// How source indices outside the image are mapped back inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Clamp to the nearest edge pixel.
    #[default]
    Replicate,
    /// Mirror including the edge pixel.
    Symmetric,
}

impl EdgeMode {
    pub fn map(self, i: i64, len: usize) -> usize {
        let n = len as i64;
        match self {
            EdgeMode::Replicate => i.clamp(0, n - 1) as usize,
            EdgeMode::Symmetric => {
                let m = i.rem_euclid(2 * n);
                (if m < n { m } else { 2 * n - 1 - m }) as usize
            }
        }
    }
}

/// Output length for resizing `len` by `scale`.
pub fn resized_len(len: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "resize scale must be positive, got {scale}"
        )));
    }
    // Guard against 0.1 * 30 = 3.0000000000000004 style overshoot.
    let exact = len as f64 * scale;
    let out = if (exact - exact.round()).abs() < 1e-9 {
        exact.round()
    } else {
        exact.ceil()
    } as usize;
    if out == 0 {
        return Err(Error::InvalidArgument(format!(
            "resizing {len} by {scale} gives an empty image"
        )));
    }
    Ok(out)
}

/// Source indices and normalized weights for every output position along
/// one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Per-output-pixel bicubic taps. Downscaling stretches the kernel by
/// `1/scale` (antialiasing).
pub fn contributions(in_len: usize, out_len: usize, scale: f64, edge: EdgeMode) -> Contributions {
    let antialias = scale < 1.0;
    let width = if antialias { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as i64 + 2;
    let mut indices = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for j in 1..=out_len {
        // Centre of output pixel j in 1-based input coordinates.
        let u = j as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let mut idx = Vec::with_capacity(taps as usize);
        let mut w = Vec::with_capacity(taps as usize);
        for p in 0..taps {
            let i = left + p;
            let d = u - i as f64;
            let k = if antialias {
                scale * keys_cubic(scale * d, KEYS_A)
            } else {
                keys_cubic(d, KEYS_A)
            };
            if k != 0.0 {
                idx.push(edge.map(i - 1, in_len));
                w.push(k);
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        indices.push(idx);
        weights.push(w);
    }
    Contributions { indices, weights }
}

fn resize_axis(src: &[f64], rows: usize, cols: usize, c: &Contributions, along_rows: bool) -> Vec<f64> {
    if along_rows {
        let out_rows = c.indices.len();
        let mut out = vec![0.0; out_rows * cols];
        for (j, (idx, w)) in c.indices.iter().zip(&c.weights).enumerate() {
            let dst = &mut out[j * cols..(j + 1) * cols];
            for (&i, &wt) in idx.iter().zip(w) {
                let row = &src[i * cols..(i + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += wt * s;
                }
            }
        }
        out
    } else {
        let out_cols = c.indices.len();
        let mut out = vec![0.0; rows * out_cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let dst = &mut out[r * out_cols..(r + 1) * out_cols];
            for (j, (idx, w)) in c.indices.iter().zip(&c.weights).enumerate() {
                dst[j] = idx.iter().zip(w).map(|(&i, &wt)| wt * row[i]).sum();
            }
        }
        out
    }
}

/// Separable bicubic resize by `scale` (rows first, then columns), computed
/// in f64. Output size is `ceil(len * scale)` per axis.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: f64, edge: EdgeMode) -> Result<Tensor<T>> {
    let s = img.shape();
    let (oh, ow) = (resized_len(s.h, scale)?, resized_len(s.w, scale)?);
    let ch = contributions(s.h, oh, scale, edge);
    let cw = contributions(s.w, ow, scale, edge);
    let planes: Vec<Vec<f64>> = (0..s.n * s.c)
        .into_par_iter()
        .map(|p| {
            let src: Vec<f64> = img.data()[p * s.plane()..(p + 1) * s.plane()]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let tmp = resize_axis(&src, s.h, s.w, &ch, true);
            resize_axis(&tmp, oh, s.w, &cw, false)
        })
        .collect();
    let data = planes.into_iter().flatten().map(T::of_f64).collect();
    Tensor::from_vec([s.n, s.c, oh, ow], data)
}

/// Horizontal flip followed by `rot90_k` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub rot90_k: u8,
}

impl AugmentFlags {
    pub const IDENTITY: AugmentFlags = AugmentFlags {
        hflip: false,
        rot90_k: 0,
    };

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        AugmentFlags {
            hflip: rng.random(),
            rot90_k: rng.random_range(0..4),
        }
    }

    /// Flags that undo `self`.
    pub fn inverse(self) -> Self {
        let k = self.rot90_k % 4;
        if self.hflip {
            // (R^k F)^-1 = F R^-k = R^k F
            AugmentFlags {
                hflip: true,
                rot90_k: k,
            }
        } else {
            AugmentFlags {
                hflip: false,
                rot90_k: (4 - k) % 4,
            }
        }
    }
}

fn hflip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, h, w| x.at(n, c, h, s.w - 1 - w))
}

fn rot90_ccw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn([s.n, s.c, s.w, s.h], |n, c, i, j| x.at(n, c, j, s.w - 1 - i))
}

pub fn augment<T: Scalar>(x: &Tensor<T>, flags: AugmentFlags) -> Tensor<T> {
    let mut out = if flags.hflip { hflip(x) } else { x.clone() };
    for _ in 0..flags.rot90_k % 4 {
        out = rot90_ccw(&out);
    }
    out
}

/// Aligned low/high resolution patches.
#[derive(Debug, Clone)]
pub struct ImagePair<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub source: String,
    /// Top-left corner of the crop in high-resolution pixels.
    pub offset: (usize, usize),
    pub flags: AugmentFlags,
}

impl<T: Scalar> ImagePair<T> {
    pub fn augmented(&self, flags: AugmentFlags) -> Self {
        ImagePair {
            lr: augment(&self.lr, flags),
            hr: augment(&self.hr, flags),
            flags,
            ..self.clone()
        }
    }
}

/// Crops a `patch`×`patch` window at a random offset that is a multiple of
/// `scale`, then degrades it by `1/scale`.
#[allow(clippy::too_many_arguments)]
pub fn sample_pair<T: Scalar, R: Rng>(
    hr_image: &Tensor<T>,
    source: &str,
    patch: usize,
    scale: usize,
    edge: EdgeMode,
    augment_pair: bool,
    rng: &mut R,
) -> Result<ImagePair<T>> {
    let s = hr_image.shape();
    if scale == 0 || patch == 0 || !patch.is_multiple_of(scale) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} must be a positive multiple of scale {scale}"
        )));
    }
    if s.h < patch || s.w < patch {
        return Err(Error::InvalidArgument(format!(
            "{source}: image {}x{} smaller than patch {patch}",
            s.h, s.w
        )));
    }
    let top = rng.random_range(0..=(s.h - patch) / scale) * scale;
    let left = rng.random_range(0..=(s.w - patch) / scale) * scale;
    let flags = if augment_pair {
        AugmentFlags::random(rng)
    } else {
        AugmentFlags::IDENTITY
    };
    let hr = hr_image.crop(top, left, patch, patch)?;
    let lr = bicubic_resize(&hr, 1.0 / scale as f64, edge)?;
    let pair = ImagePair {
        lr,
        hr,
        source: source.to_string(),
        offset: (top, left),
        flags: AugmentFlags::IDENTITY,
    };
    Ok(pair.augmented(flags))
}

/// Sorted list of PNG files under `dir`, relative to it.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        let is_png = entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if entry.file_type().is_file() && is_png {
            out.push(
                entry
                    .path()
                    .strip_prefix(dir)
                    .expect("walk stays under root")
                    .to_path_buf(),
            );
        }
    }
    Ok(out)
}

/// Bicubic-downscales every PNG under `input` by `1/scale` into the same
/// relative path under `output`. Returns the number of images written.
pub fn degrade_tree(input: &Path, output: &Path, scale: usize, edge: EdgeMode) -> Result<usize> {
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let files = list_images(input)?;
    files.par_iter().try_for_each(|rel| {
        let img = load_image::<f64>(input.join(rel))?;
        let lr = bicubic_resize(&img, 1.0 / scale as f64, edge)?;
        save_image(&lr, output.join(rel))
    })?;
    Ok(files.len())
}

/// Supplies training batches as `(lr, hr)` tensors.
pub trait PairSource<T: Scalar> {
    fn next_batch<R: Rng>(&mut self, rng: &mut R, batch: usize) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Repeats one pair every step.
#[derive(Debug, Clone)]
pub struct FixedPair<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

impl<T: Scalar> PairSource<T> for FixedPair<T> {
    fn next_batch<R: Rng>(&mut self, _rng: &mut R, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let lr = Tensor::stack(&vec![self.lr.clone(); batch])?;
        let hr = Tensor::stack(&vec![self.hr.clone(); batch])?;
        Ok((lr, hr))
    }
}

/// Random aligned patches from a directory of HR images. Images are decoded
/// on demand; a batch's random draws are made before any decoding so the
/// result does not depend on the thread count.
#[derive(Debug, Clone)]
pub struct RandomPatches {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
    pub patch: usize,
    pub scale: usize,
    pub augment: bool,
    pub edge: EdgeMode,
}

impl RandomPatches {
    pub fn new(root: impl Into<PathBuf>, patch: usize, scale: usize, augment: bool) -> Result<Self> {
        let root = root.into();
        let files = list_images(&root)?;
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no PNG images under {}",
                root.display()
            )));
        }
        Ok(RandomPatches {
            root,
            files,
            patch,
            scale,
            augment,
            edge: EdgeMode::default(),
        })
    }
}

impl<T: Scalar> PairSource<T> for RandomPatches {
    fn next_batch<R: Rng>(&mut self, rng: &mut R, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let seeds: Vec<(usize, u64)> = (0..batch)
            .map(|_| (rng.random_range(0..self.files.len()), rng.random()))
            .collect();
        let pairs = seeds
            .par_iter()
            .map(|&(i, seed)| {
                use rand::SeedableRng;
                let rel = &self.files[i];
                let img = load_image::<T>(self.root.join(rel))?;
                let mut local = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                sample_pair(
                    &img,
                    &rel.to_string_lossy(),
                    self.patch,
                    self.scale,
                    self.edge,
                    self.augment,
                    &mut local,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let lr: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
        let hr: Vec<_> = pairs.iter().map(|p| p.hr.clone()).collect();
        Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
    }
}
