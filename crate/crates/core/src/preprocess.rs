//! Page preprocessing: Sauvola binarisation, window entropy and
//! sliding-window crop extraction.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::luma_plane;

/// A full manuscript page.
#[derive(Debug, Clone)]
pub struct ManuscriptPage {
    pub page_id: String,
    pub image: RgbImage,
    pub source_path: String,
}

impl ManuscriptPage {
    pub fn new(page_id: impl Into<String>, image: RgbImage, source_path: impl Into<String>) -> Result<Self> {
        let (w, h) = image.dimensions();
        if w < 64 || h < 64 {
            return Err(Error::validation(format!("page is {w}×{h}; pages must be at least 64×64")));
        }
        Ok(Self {
            page_id: page_id.into(),
            image,
            source_path: source_path.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizationParams {
    pub window_size: u32,
    pub k: f64,
    /// Dynamic range of the standard deviation.
    pub r: f64,
}

impl Default for BinarizationParams {
    fn default() -> Self {
        Self {
            window_size: 25,
            k: 0.2,
            r: 128.0,
        }
    }
}

impl BinarizationParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::validation(format!(
                "Sauvola window must be odd and ≥ 3, got {}",
                self.window_size
            )));
        }
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(Error::validation(format!("Sauvola k must lie in (0, 1), got {}", self.k)));
        }
        if !(self.r > 0.0) {
            return Err(Error::validation(format!("Sauvola R must be positive, got {}", self.r)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropScanParams {
    pub window: u32,
    pub stride: u32,
    pub entropy_threshold: f64,
}

impl Default for CropScanParams {
    fn default() -> Self {
        Self {
            window: 64,
            stride: 32,
            entropy_threshold: 0.8,
        }
    }
}

impl CropScanParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::validation(format!(
                "scan needs 1 ≤ stride ≤ window, got stride {} and window {}",
                self.stride, self.window
            )));
        }
        if !(0.0..=1.0).contains(&self.entropy_threshold) {
            return Err(Error::validation(format!(
                "entropy threshold must lie in [0, 1], got {}",
                self.entropy_threshold
            )));
        }
        Ok(())
    }
}

/// Ink mask: `1` for foreground (ink), `0` for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl BinaryImage {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ink: usize = self.data.iter().map(|&v| usize::from(v)).sum();
        ink as f64 / self.data.len() as f64
    }

    pub fn view(&self, x0: u32, y0: u32, w: u32, h: u32) -> BinaryImage {
        let mut data = Vec::with_capacity((w * h) as usize);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) as usize;
            data.extend_from_slice(&self.data[start..start + w as usize]);
        }
        BinaryImage { width: w, height: h, data }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateCrop {
    pub crop: RgbImage,
    pub origin: (u32, u32),
    pub entropy: f64,
}

/// Sauvola binarisation of a colour or grey page (colour is reduced to luma).
pub fn sauvola_binarize(image: &RgbImage, params: &BinarizationParams) -> Result<BinaryImage> {
    let (w, h) = image.dimensions();
    sauvola_binarize_luma(&luma_plane(image), w, h, params)
}

/// Sauvola binarisation of a row-major intensity plane.
///
/// Each pixel is ink iff its intensity is strictly below
/// `m·(1 + k·(s/R − 1))`, where `m` and `s` are the mean and standard
/// deviation of the surrounding window. Borders are handled by replicating
/// edge pixels.
pub fn sauvola_binarize_luma(plane: &[f64], width: u32, height: u32, params: &BinarizationParams) -> Result<BinaryImage> {
    params.validate()?;
    if params.window_size > width || params.window_size > height {
        return Err(Error::validation(format!(
            "Sauvola window {} exceeds image size {width}×{height}",
            params.window_size
        )));
    }
    let (w, h) = (width as usize, height as usize);
    assert_eq!(plane.len(), w * h);
    let r = (params.window_size / 2) as usize;
    let pw = w + 2 * r;
    let ph = h + 2 * r;

    // Summed-area tables over the edge-replicated image, with a zero
    // leading row and column.
    let mut sum = vec![0.0f64; (pw + 1) * (ph + 1)];
    let mut sq = vec![0.0f64; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let sy = py.saturating_sub(r).min(h - 1);
        let mut row_sum = 0.0;
        let mut row_sq = 0.0;
        for px in 0..pw {
            let sx = px.saturating_sub(r).min(w - 1);
            let v = plane[sy * w + sx];
            row_sum += v;
            row_sq += v * v;
            let idx = (py + 1) * (pw + 1) + px + 1;
            sum[idx] = sum[idx - (pw + 1)] + row_sum;
            sq[idx] = sq[idx - (pw + 1)] + row_sq;
        }
    }

    let n = (params.window_size * params.window_size) as f64;
    let side = params.window_size as usize;
    let rect = |table: &[f64], x: usize, y: usize| {
        let (x1, y1) = (x + side, y + side);
        table[y1 * (pw + 1) + x1] - table[y * (pw + 1) + x1] - table[y1 * (pw + 1) + x] + table[y * (pw + 1) + x]
    };
    let mut data = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mean = rect(&sum, x, y) / n;
            let var = (rect(&sq, x, y) / n - mean * mean).max(0.0);
            let threshold = mean * (1.0 + params.k * (var.sqrt() / params.r - 1.0));
            data[y * w + x] = u8::from(plane[y * w + x] < threshold);
        }
    }
    Ok(BinaryImage {
        width,
        height,
        data,
    })
}

/// Binary Shannon entropy (bits) of the ink fraction of a window.
pub fn crop_entropy(binary: &BinaryImage) -> f64 {
    binary_entropy(binary.foreground_fraction())
}

pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Top-left corners of every window that fits entirely inside the page.
pub fn window_origins(width: u32, height: u32, scan: &CropScanParams) -> Vec<(u32, u32)> {
    if width < scan.window || height < scan.window {
        return Vec::new();
    }
    let nx = (width - scan.window) / scan.stride + 1;
    let ny = (height - scan.window) / scan.stride + 1;
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i * scan.stride, j * scan.stride)))
        .collect()
}

/// Scans `page` with overlapping windows and keeps those whose ink entropy
/// reaches the threshold.
///
/// The page is binarised once; each window's entropy is measured on its
/// part of the page-level mask. Emitted crops carry the original pixels.
pub fn extract_crops(
    page: &ManuscriptPage,
    bin_params: &BinarizationParams,
    scan: &CropScanParams,
) -> Result<Vec<CandidateCrop>> {
    scan.validate()?;
    let (w, h) = page.image.dimensions();
    if w < scan.window || h < scan.window {
        return Err(Error::validation(format!(
            "page {} is {w}×{h}, smaller than the {} px window",
            page.page_id, scan.window
        )));
    }
    let mask = sauvola_binarize(&page.image, bin_params)?;
    let crops = window_origins(w, h, scan)
        .into_iter()
        .filter_map(|(x, y)| {
            let entropy = crop_entropy(&mask.view(x, y, scan.window, scan.window));
            (entropy >= scan.entropy_threshold).then(|| CandidateCrop {
                crop: image::imageops::crop_imm(&page.image, x, y, scan.window, scan.window).to_image(),
                origin: (x, y),
                entropy,
            })
        })
        .collect();
    Ok(crops)
}
