use std::f64::consts::PI;

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{clamp_u8, luma, resize_bilinear, sample_bilinear};
use crate::seed;

/// One degradation transform with its sampling ranges and the probability
/// that it fires. Ranges are inclusive `[low, high]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum TransformSpec {
    RandomResizedCrop {
        probability: f64,
        /// Fraction of the image area kept.
        area: [f64; 2],
        /// Width/height ratio, sampled log-uniformly.
        aspect: [f64; 2],
    },
    HorizontalFlip {
        probability: f64,
    },
    ColorJitter {
        probability: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    RandomGreyscale {
        probability: f64,
    },
    GaussianBlur {
        probability: f64,
        sigma: [f64; 2],
    },
    RandomRotation {
        probability: f64,
        /// Maximum absolute angle in degrees.
        degrees: f64,
    },
    SaltAndPepper {
        probability: f64,
        density: [f64; 2],
    },
    ElasticDistortion {
        probability: f64,
        /// Displacement magnitude in pixels.
        alpha: [f64; 2],
        /// Smoothing of the displacement field in pixels.
        sigma: [f64; 2],
    },
    Fade {
        probability: f64,
        strength: [f64; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    RandomResizedCrop,
    HorizontalFlip,
    ColorJitter,
    RandomGreyscale,
    GaussianBlur,
    RandomRotation,
    SaltAndPepper,
    ElasticDistortion,
    Fade,
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::RandomResizedCrop { .. } => TransformKind::RandomResizedCrop,
            TransformSpec::HorizontalFlip { .. } => TransformKind::HorizontalFlip,
            TransformSpec::ColorJitter { .. } => TransformKind::ColorJitter,
            TransformSpec::RandomGreyscale { .. } => TransformKind::RandomGreyscale,
            TransformSpec::GaussianBlur { .. } => TransformKind::GaussianBlur,
            TransformSpec::RandomRotation { .. } => TransformKind::RandomRotation,
            TransformSpec::SaltAndPepper { .. } => TransformKind::SaltAndPepper,
            TransformSpec::ElasticDistortion { .. } => TransformKind::ElasticDistortion,
            TransformSpec::Fade { .. } => TransformKind::Fade,
        }
    }

    pub fn probability(&self) -> f64 {
        match *self {
            TransformSpec::RandomResizedCrop { probability, .. }
            | TransformSpec::HorizontalFlip { probability }
            | TransformSpec::ColorJitter { probability, .. }
            | TransformSpec::RandomGreyscale { probability }
            | TransformSpec::GaussianBlur { probability, .. }
            | TransformSpec::RandomRotation { probability, .. }
            | TransformSpec::SaltAndPepper { probability, .. }
            | TransformSpec::ElasticDistortion { probability, .. }
            | TransformSpec::Fade { probability, .. } => probability,
        }
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        match &mut self {
            TransformSpec::RandomResizedCrop { probability, .. }
            | TransformSpec::HorizontalFlip { probability }
            | TransformSpec::ColorJitter { probability, .. }
            | TransformSpec::RandomGreyscale { probability }
            | TransformSpec::GaussianBlur { probability, .. }
            | TransformSpec::RandomRotation { probability, .. }
            | TransformSpec::SaltAndPepper { probability, .. }
            | TransformSpec::ElasticDistortion { probability, .. }
            | TransformSpec::Fade { probability, .. } => *probability = p,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        let fail = |what: String| Err(Error::validation(format!("{kind:?}: {what}")));
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return fail(format!("probability {p} outside [0, 1]"));
        }
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| -> Result<()> {
            if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
                return Err(Error::validation(format!(
                    "{kind:?}: {name} range {r:?} must satisfy {lo} ≤ low ≤ high ≤ {hi}"
                )));
            }
            Ok(())
        };
        match *self {
            TransformSpec::RandomResizedCrop { area, aspect, .. } => {
                range("area", area, f64::MIN_POSITIVE, 1.0)?;
                range("aspect", aspect, f64::MIN_POSITIVE, f64::MAX)
            }
            TransformSpec::ColorJitter {
                brightness,
                contrast,
                saturation,
                ..
            } => {
                for (name, v) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
                    if !(0.0..=1.0).contains(&v) {
                        return fail(format!("{name} jitter {v} outside [0, 1]"));
                    }
                }
                Ok(())
            }
            TransformSpec::GaussianBlur { sigma, .. } => range("sigma", sigma, 0.0, 32.0),
            TransformSpec::RandomRotation { degrees, .. } => {
                if !(0.0..=180.0).contains(&degrees) {
                    return fail(format!("rotation bound {degrees} outside [0, 180]"));
                }
                Ok(())
            }
            TransformSpec::SaltAndPepper { density, .. } => range("density", density, 0.0, 1.0),
            TransformSpec::ElasticDistortion { alpha, sigma, .. } => {
                range("alpha", alpha, 0.0, 64.0)?;
                range("sigma", sigma, f64::MIN_POSITIVE, 32.0)
            }
            TransformSpec::Fade { strength, .. } => range("strength", strength, 0.0, 1.0),
            TransformSpec::HorizontalFlip { .. } | TransformSpec::RandomGreyscale { .. } => Ok(()),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Applies one transform. The output is a pure function of
/// `(image, spec, seed)`; with probability `1 − spec.probability()` it is an
/// unchanged copy of the input.
///
/// `spec` is assumed valid; pipelines validate their transforms when built.
pub fn apply_transform(image: &RgbImage, spec: &TransformSpec, seed: u64) -> RgbImage {
    let mut rng = seed::rng(seed);
    if rng.random::<f64>() >= spec.probability() {
        return image.clone();
    }
    match *spec {
        TransformSpec::RandomResizedCrop { area, aspect, .. } => random_resized_crop(image, area, aspect, &mut rng),
        TransformSpec::HorizontalFlip { .. } => imageops::flip_horizontal(image),
        TransformSpec::ColorJitter {
            brightness,
            contrast,
            saturation,
            ..
        } => {
            let b = uniform(&mut rng, [1.0 - brightness, 1.0 + brightness]);
            let c = uniform(&mut rng, [1.0 - contrast, 1.0 + contrast]);
            let s = uniform(&mut rng, [1.0 - saturation, 1.0 + saturation]);
            color_jitter(image, b, c, s)
        }
        TransformSpec::RandomGreyscale { .. } => greyscale(image),
        TransformSpec::GaussianBlur { sigma, .. } => gaussian_blur(image, uniform(&mut rng, sigma)),
        TransformSpec::RandomRotation { degrees, .. } => rotate(image, uniform(&mut rng, [-degrees, degrees])),
        TransformSpec::SaltAndPepper { density, .. } => {
            let d = uniform(&mut rng, density);
            salt_and_pepper(image, d, &mut rng)
        }
        TransformSpec::ElasticDistortion { alpha, sigma, .. } => {
            let a = uniform(&mut rng, alpha);
            let s = uniform(&mut rng, sigma);
            elastic(image, a, s, &mut rng)
        }
        TransformSpec::Fade { strength, .. } => fade(image, uniform(&mut rng, strength)),
    }
}

fn random_resized_crop(image: &RgbImage, area: [f64; 2], aspect: [f64; 2], rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = image.dimensions();
    let total = f64::from(w * h);
    let log_aspect = [aspect[0].ln(), aspect[1].ln()];
    for _ in 0..10 {
        let target = total * uniform(rng, area);
        let ratio = uniform(rng, log_aspect).exp();
        let cw = (target * ratio).sqrt().round() as u32;
        let ch = (target / ratio).sqrt().round() as u32;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            let sub = imageops::crop_imm(image, x, y, cw, ch).to_image();
            return resize_bilinear(&sub, w, h);
        }
    }
    image.clone()
}

pub(crate) fn color_jitter(image: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let n = f64::from(image.width() * image.height());
    let mut pixels: Vec<[f64; 3]> = image
        .pixels()
        .map(|p| [0, 1, 2].map(|c| (f64::from(p[c]) * brightness).clamp(0.0, 255.0)))
        .collect();
    let luma_of = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mean = pixels.iter().map(luma_of).sum::<f64>() / n;
    for p in &mut pixels {
        for v in p.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 255.0);
        }
        let l = luma_of(p);
        for v in p.iter_mut() {
            *v = (l + (*v - l) * saturation).clamp(0.0, 255.0);
        }
    }
    let mut out = image.clone();
    for (dst, p) in out.pixels_mut().zip(pixels) {
        *dst = Rgb(p.map(clamp_u8));
    }
    out
}

fn greyscale(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let v = clamp_u8(luma(p));
        *p = Rgb([v, v, v]);
    }
    out
}

/// Separable Gaussian smoothing of a row-major plane with edge replication.
pub(crate) fn blur_plane(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = image.clone();
    for c in 0..3 {
        let plane: Vec<f64> = image.pixels().map(|p| f64::from(p[c])).collect();
        let blurred = blur_plane(&plane, w, h, sigma);
        for (p, v) in out.pixels_mut().zip(blurred) {
            p[c] = clamp_u8(v);
        }
    }
    out
}

fn rotate(image: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let (sin, cos) = (degrees * PI / 180.0).sin_cos();
    let cx = (f64::from(w) - 1.0) / 2.0;
    let cy = (f64::from(h) - 1.0) / 2.0;
    RgbImage::from_fn(w, h, |x, y| {
        let dx = f64::from(x) - cx;
        let dy = f64::from(y) - cy;
        // Inverse mapping: rotate the output coordinate back by −θ.
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        Rgb([0, 1, 2].map(|c| clamp_u8(sample_bilinear(image, sx, sy, c))))
    })
}

fn salt_and_pepper(image: &RgbImage, density: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let u = rng.random::<f64>();
        if u < density / 2.0 {
            *p = Rgb([0, 0, 0]);
        } else if u < density {
            *p = Rgb([255, 255, 255]);
        }
    }
    out
}

fn elastic(image: &RgbImage, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut field = || {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        blur_plane(&raw, w, h, sigma)
    };
    let dx = field();
    let dy = field();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let sx = f64::from(x) + alpha * dx[i];
        let sy = f64::from(y) + alpha * dy[i];
        Rgb([0, 1, 2].map(|c| clamp_u8(sample_bilinear(image, sx, sy, c))))
    })
}

/// Per-channel median, taken as the parchment colour of a crop.
fn background(image: &RgbImage) -> [f64; 3] {
    [0, 1, 2].map(|c| {
        let mut hist = [0usize; 256];
        for p in image.pixels() {
            hist[usize::from(p[c])] += 1;
        }
        let half = (image.width() * image.height()) as usize / 2;
        let mut acc = 0;
        hist.iter()
            .position(|&n| {
                acc += n;
                acc > half
            })
            .unwrap_or(255) as f64
    })
}

fn fade(image: &RgbImage, strength: f64) -> RgbImage {
    let bg = background(image);
    let mut out = image.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let v = f64::from(p[c]);
            p[c] = clamp_u8(v + strength * (bg[c] - v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn textured(seed: u64) -> RgbImage {
        let mut rng = seed::rng(seed);
        RgbImage::from_fn(64, 64, |x, y| {
            let ink = ((x as i32 - 32).pow(2) + (y as i32 - 30).pow(2)) < 200 || (x / 7) % 3 == 0;
            let base = if ink { 40 } else { 210 };
            let v = (base + rng.random_range(-20i32..20)) as u8;
            Rgb([v, v.saturating_add(5), v.saturating_sub(10)])
        })
    }

    pub(crate) fn all_kinds(p: f64) -> Vec<TransformSpec> {
        vec![
            TransformSpec::RandomResizedCrop { probability: p, area: [0.6, 1.0], aspect: [0.75, 1.33] },
            TransformSpec::HorizontalFlip { probability: p },
            TransformSpec::ColorJitter { probability: p, brightness: 0.4, contrast: 0.4, saturation: 0.2 },
            TransformSpec::RandomGreyscale { probability: p },
            TransformSpec::GaussianBlur { probability: p, sigma: [0.1, 2.0] },
            TransformSpec::RandomRotation { probability: p, degrees: 10.0 },
            TransformSpec::SaltAndPepper { probability: p, density: [0.01, 0.05] },
            TransformSpec::ElasticDistortion { probability: p, alpha: [8.0, 16.0], sigma: [3.0, 5.0] },
            TransformSpec::Fade { probability: p, strength: [0.1, 0.5] },
        ]
    }

    #[test]
    fn zero_density_is_identity() {
        let img = textured(1);
        let spec = TransformSpec::SaltAndPepper { probability: 1.0, density: [0.0, 0.0] };
        assert_eq!(apply_transform(&img, &spec, 5), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = textured(2);
        let spec = TransformSpec::HorizontalFlip { probability: 1.0 };
        let once = apply_transform(&img, &spec, 0);
        assert_ne!(once, img);
        assert_eq!(apply_transform(&once, &spec, 0), img);
    }

    #[test]
    fn salt_and_pepper_density_matches_binomial_expectation() {
        let img = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        let spec = TransformSpec::SaltAndPepper { probability: 1.0, density: [0.1, 0.1] };
        for s in 0..100 {
            let out = apply_transform(&img, &spec, s);
            let changed = out.pixels().filter(|p| p[0] != 128).count() as f64 / 4096.0;
            // 4096 Bernoulli(0.1) draws: σ ≈ 0.0047, so [0.07, 0.13] is > 6σ.
            assert!((0.07..=0.13).contains(&changed), "seed {s}: {changed}");
        }
    }

    #[test]
    fn identity_limits() {
        let img = textured(3);
        let limits = [
            TransformSpec::RandomResizedCrop { probability: 1.0, area: [1.0, 1.0], aspect: [1.0, 1.0] },
            TransformSpec::ColorJitter { probability: 1.0, brightness: 0.0, contrast: 0.0, saturation: 0.0 },
            TransformSpec::GaussianBlur { probability: 1.0, sigma: [0.0, 0.0] },
            TransformSpec::RandomRotation { probability: 1.0, degrees: 0.0 },
            TransformSpec::SaltAndPepper { probability: 1.0, density: [0.0, 0.0] },
            TransformSpec::ElasticDistortion { probability: 1.0, alpha: [0.0, 0.0], sigma: [4.0, 4.0] },
            TransformSpec::Fade { probability: 1.0, strength: [0.0, 0.0] },
        ];
        for spec in &limits {
            spec.validate().unwrap();
            for s in 0..5 {
                assert_eq!(&apply_transform(&img, spec, s), &img, "{spec:?}");
            }
        }
        for spec in all_kinds(0.0) {
            assert_eq!(apply_transform(&img, &spec, 11), img, "{spec:?}");
        }
    }

    #[test]
    fn every_kind_changes_a_textured_crop() {
        let img = textured(4);
        for spec in all_kinds(1.0) {
            spec.validate().unwrap();
            let changed = (0..10).any(|s| apply_transform(&img, &spec, s) != img);
            assert!(changed, "{spec:?}");
        }
    }

    #[test]
    fn greyscale_equalises_channels() {
        let out = apply_transform(&textured(5), &TransformSpec::RandomGreyscale { probability: 1.0 }, 0);
        assert!(out.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn full_fade_reaches_background() {
        let img = textured(6);
        let bg = background(&img);
        let out = apply_transform(&img, &TransformSpec::Fade { probability: 1.0, strength: [1.0, 1.0] }, 0);
        assert!(out.pixels().all(|p| (0..3).all(|c| f64::from(p[c]) == bg[c])));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::from_pixel(64, 64, Rgb([90, 100, 110]));
        let out = apply_transform(&img, &TransformSpec::GaussianBlur { probability: 1.0, sigma: [2.0, 2.0] }, 0);
        assert_eq!(out, img);
    }

    #[test]
    fn invalid_specs_fail_validation() {
        let bad = [
            TransformSpec::SaltAndPepper { probability: 1.0, density: [0.2, 0.1] },
            TransformSpec::SaltAndPepper { probability: 1.5, density: [0.0, 0.1] },
            TransformSpec::Fade { probability: 1.0, strength: [0.0, 1.5] },
            TransformSpec::GaussianBlur { probability: 1.0, sigma: [-1.0, 1.0] },
            TransformSpec::ElasticDistortion { probability: 1.0, alpha: [1.0, 2.0], sigma: [0.0, 1.0] },
            TransformSpec::ColorJitter { probability: 1.0, brightness: 2.0, contrast: 0.0, saturation: 0.0 },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn transforms_are_deterministic_and_shape_preserving(img_seed in any::<u64>(), seed in any::<u64>()) {
            let img = textured(img_seed);
            for spec in all_kinds(0.7) {
                let a = apply_transform(&img, &spec, seed);
                prop_assert_eq!(a.dimensions(), (64, 64));
                prop_assert_eq!(&a, &apply_transform(&img, &spec, seed));
            }
        }
    }
}
