//! Random view generation for grayscale images: random-resized crop,
//! horizontal flip, brightness/contrast jitter and Gaussian blur.
//!
//! Resizing is bilinear with half-pixel centers: output pixel `i` samples
//! source coordinate `(i + 0.5) * crop / side - 0.5`, clamped to the crop.
//! Blur is separable with radius `ceil(3 sigma)` and symmetric (edge
//! repeating) reflection at the borders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CROP_AREA: (f64, f64) = (0.2, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const BRIGHTNESS_DELTA: f64 = 0.4;
pub const CONTRAST_FACTOR: (f64, f64) = (0.6, 1.4);
pub const FLIP_PROB: f64 = 0.5;
pub const BLUR_PROB: f64 = 0.5;
pub const BLUR_SIGMA: (f64, f64) = (0.1, 1.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub crop: CropBox,
    pub hflip: bool,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    /// Zero disables the blur.
    pub blur_sigma: f64,
    pub target_side: usize,
}

impl TransformParams {
    /// Full-image crop, no flip, no jitter, no blur.
    pub fn identity(height: usize, width: usize, target_side: usize) -> Self {
        TransformParams {
            crop: CropBox {
                x: 0,
                y: 0,
                w: width,
                h: height,
            },
            hflip: false,
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            blur_sigma: 0.0,
            target_side,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub v1: Tensor,
    pub v2: Tensor,
}

fn crop_is_valid(w: usize, h: usize, width: usize, height: usize) -> bool {
    if w == 0 || h == 0 || w > width || h > height {
        return false;
    }
    let ratio = w as f64 / h as f64;
    let area = (w * h) as f64 / (width * height) as f64;
    ratio >= CROP_RATIO.0 - 1e-12
        && ratio <= CROP_RATIO.1 + 1e-12
        && area >= CROP_AREA.0 - 1e-12
        && area <= CROP_AREA.1 + 1e-12
}

fn sample_crop<R: Rng>(rng: &mut R, height: usize, width: usize) -> CropBox {
    let total = (height * width) as f64;
    let (log_lo, log_hi) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let area = total * rng.random_range(CROP_AREA.0..=CROP_AREA.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (area * ratio).sqrt().round() as usize;
        let h = (area / ratio).sqrt().round() as usize;
        if crop_is_valid(w, h, width, height) {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return CropBox { x, y, w, h };
        }
    }
    // Fallback: the largest centered crop whose aspect ratio is in range.
    let (mut w, mut h) = (width, height);
    if (w as f64) > (h as f64) * CROP_RATIO.1 {
        w = ((h as f64) * CROP_RATIO.1).floor() as usize;
    } else if (h as f64) > (w as f64) / CROP_RATIO.0 {
        h = ((w as f64) / CROP_RATIO.0).floor() as usize;
    }
    CropBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

/// Draws one transformation for a `height x width` source.
pub fn sample_params<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    target_side: usize,
) -> TransformParams {
    let crop = sample_crop(rng, height, width);
    let hflip = rng.random_bool(FLIP_PROB);
    let brightness_delta = rng.random_range(-BRIGHTNESS_DELTA..=BRIGHTNESS_DELTA);
    let contrast_factor = rng.random_range(CONTRAST_FACTOR.0..=CONTRAST_FACTOR.1);
    let blur_sigma = if rng.random_bool(BLUR_PROB) {
        rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1)
    } else {
        0.0
    };
    TransformParams {
        crop,
        hflip,
        brightness_delta,
        contrast_factor,
        blur_sigma,
        target_side,
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[1, h, w] => Ok((h, w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a [1, H, W] grayscale image".into(),
        }),
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn reflect(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(pixels: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let n = side as isize;
    let mut tmp = vec![0.0; pixels.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * pixels[y * side + reflect(x as isize + k as isize - r, n)])
                .sum();
        }
    }
    let mut out = vec![0.0; pixels.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - r, n) * side + x])
                .sum();
        }
    }
    out
}

/// Applies crop -> resize -> flip -> jitter -> blur.
pub fn apply(image: &Tensor, p: &TransformParams) -> Result<Tensor> {
    let (height, width) = image_dims(image)?;
    let c = p.crop;
    if c.w == 0 || c.h == 0 || c.x + c.w > width || c.y + c.h > height {
        return Err(Error::Config(format!(
            "crop box {c:?} lies outside the {height}x{width} image"
        )));
    }
    let s = p.target_side;
    if s == 0 {
        return Err(Error::Config("target side must be positive".into()));
    }
    let src = image.data();
    let sample_axis = |i: usize, len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * len as f64 / s as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        let (y0, y1, fy) = sample_axis(i, c.h);
        for j in 0..s {
            let (x0, x1, fx) = sample_axis(j, c.w);
            let px = |y: usize, x: usize| src[(c.y + y) * width + c.x + x];
            let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
            let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
            let dst = if p.hflip { s - 1 - j } else { j };
            out[i * s + dst] = top * (1.0 - fy) + bottom * fy;
        }
    }
    for v in &mut out {
        *v = (p.contrast_factor * (*v - 0.5) + 0.5 + p.brightness_delta).clamp(0.0, 1.0);
    }
    if p.blur_sigma > 0.0 {
        // Taps sum to one only up to rounding; keep saturated pixels in range.
        out = blur(&out, s, p.blur_sigma).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    }
    Tensor::new(vec![1, s, s], out)
}

/// Two independent transformations of the same image.
pub fn make_view_pair<R: Rng>(image: &Tensor, target_side: usize, rng: &mut R) -> Result<ViewPair> {
    let (h, w) = image_dims(image)?;
    let p1 = sample_params(rng, h, w, target_side);
    let p2 = sample_params(rng, h, w, target_side);
    Ok(ViewPair {
        v1: apply(image, &p1)?,
        v2: apply(image, &p2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(side: usize) -> Tensor {
        let data = (0..side * side)
            .map(|i| ((i * 37) % 101) as f64 / 100.0)
            .collect();
        Tensor::new(vec![1, side, side], data).unwrap()
    }

    #[test]
    fn identity_params_reproduce_input() {
        let img = ramp(12);
        let out = apply(&img, &TransformParams::identity(12, 12, 12)).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(10);
        let mut p = TransformParams::identity(10, 10, 10);
        p.hflip = true;
        let once = apply(&img, &p).unwrap();
        assert!(once.max_abs_diff(&img) > 0.0);
        let twice = apply(&once, &p).unwrap();
        assert!(twice.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor::full(&[1, 9, 9], 0.37);
        let mut p = TransformParams::identity(9, 9, 9);
        p.blur_sigma = 1.0;
        let out = apply(&img, &p).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.1, 0.35, 0.5, 0.99, 1.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_outside_image_is_rejected() {
        let img = ramp(8);
        let mut p = TransformParams::identity(8, 8, 4);
        p.crop.x = 1;
        assert!(apply(&img, &p).is_err());
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let mut r = rng::stream(3, "augment", &[]);
        for _ in 0..2000 {
            let p = sample_params(&mut r, 16, 16, 8);
            let c = p.crop;
            assert!(c.x + c.w <= 16 && c.y + c.h <= 16);
            let area = (c.w * c.h) as f64 / 256.0;
            assert!((0.2 - 1e-12..=1.0).contains(&area), "{c:?}");
            let ratio = c.w as f64 / c.h as f64;
            assert!((0.75 - 1e-12..=4.0 / 3.0 + 1e-12).contains(&ratio), "{c:?}");
            assert!(p.brightness_delta.abs() <= 0.4);
            assert!((0.6..=1.4).contains(&p.contrast_factor));
            assert!(p.blur_sigma == 0.0 || (0.1..=1.0).contains(&p.blur_sigma));
        }
    }

    #[test]
    fn flip_frequency_is_one_half() {
        let mut r = rng::stream(42, "augment", &[]);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| sample_params(&mut r, 16, 16, 8).hflip)
            .count();
        let freq = flips as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn view_pairs_are_seeded_and_distinct() {
        let img = ramp(16);
        let a = make_view_pair(&img, 8, &mut rng::stream(1, "augment", &[0])).unwrap();
        let b = make_view_pair(&img, 8, &mut rng::stream(1, "augment", &[0])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v1.shape(), &[1, 8, 8]);
        assert_ne!(a.v1, a.v2);
        for v in a.v1.data().iter().chain(a.v2.data()) {
            assert!((0.0..=1.0).contains(v));
        }
    }
}
