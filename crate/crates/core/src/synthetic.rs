//! Synthetic toy corpora: stroke-drawn shape glyphs with mild noise, and
//! pages tiled with them. Used by tests, benches and demos in place of real
//! manuscript scans.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::corpus::{write_manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::imaging::{Crop, CROP_SIZE};
use crate::seed;

/// Number of distinct shapes available.
pub const SHAPE_COUNT: usize = 8;

const INK: i32 = 35;
const PAPER: i32 = 215;

fn on_stroke(shape: usize, dx: f64, dy: f64, scale: f64) -> bool {
    let (dx, dy) = (dx / scale, dy / scale);
    let w = 4.0;
    let r = (dx * dx + dy * dy).sqrt();
    match shape % SHAPE_COUNT {
        0 => (r - 15.0).abs() < w,
        1 => dx.abs() < 20.0 && (dy.abs() < w || (dy.abs() - 12.0).abs() < w),
        2 => dy.abs() < 20.0 && (dx.abs() < w || (dx.abs() - 12.0).abs() < w),
        3 => r < 21.0 && ((dx - dy).abs() < w * 1.4 || (dx + dy).abs() < w * 1.4),
        4 => (dx.abs() < w && dy.abs() < 20.0) || (dy.abs() < w && dx.abs() < 20.0),
        5 => {
            let m = dx.abs().max(dy.abs());
            (m - 15.0).abs() < w
        }
        6 => {
            // Triangle outline, apex up.
            let base = (dy - 14.0).abs() < w && dx.abs() < 18.0;
            let side = dy > -18.0 && dy < 14.0 && ((dx.abs() - (dy + 18.0) * 18.0 / 32.0).abs() < w);
            base || side
        }
        _ => {
            // Note head with stem.
            let head = ((dx + 6.0).powi(2) / 1.6 + (dy - 10.0).powi(2)) < 64.0;
            let stem = (dx - 4.0).abs() < w * 0.6 && dy > -22.0 && dy < 10.0;
            head || stem
        }
    }
}

/// One 64×64 glyph of `shape`, jittered in position and scale, with pixel
/// noise. `variant` seeds the jitter.
pub fn shape_glyph(shape: usize, variant: u64) -> Crop {
    let mut rng = seed::rng(seed::derive(variant, &[shape as u64]));
    let ox = rng.random_range(-3.0..3.0);
    let oy = rng.random_range(-3.0..3.0);
    let scale = rng.random_range(0.9..1.1);
    let half = CROP_SIZE as f64 / 2.0;
    RgbImage::from_fn(CROP_SIZE, CROP_SIZE, |x, y| {
        let ink = on_stroke(shape, x as f64 - half - ox, y as f64 - half - oy, scale);
        let base = if ink { INK } else { PAPER };
        let v = (base + rng.random_range(-12..=12)).clamp(0, 255) as u8;
        Rgb([v, v, v])
    })
}

/// A page tiled with glyphs on a `spacing` grid, over a textured background.
pub fn synthetic_page(width: u32, height: u32, shapes: usize, spacing: u32, seed_value: u64) -> RgbImage {
    let mut rng = seed::rng(seed_value);
    let mut page = RgbImage::from_fn(width, height, |_, _| {
        let v = (PAPER + rng.random_range(-10..=10)) as u8;
        Rgb([v, v.saturating_sub(8), v.saturating_sub(25)])
    });
    let mut cell = 0u64;
    let mut cy = spacing / 2;
    while cy < height {
        let mut cx = spacing / 2;
        while cx < width {
            let shape = rng.random_range(0..shapes.max(1));
            let glyph = shape_glyph(shape, seed::derive(seed_value, &[cell]));
            for (gx, gy, px) in glyph.enumerate_pixels() {
                if px[0] as i32 >= PAPER - 20 {
                    continue;
                }
                let x = cx as i64 + gx as i64 - 32;
                let y = cy as i64 + gy as i64 - 32;
                if (0..width as i64).contains(&x) && (0..height as i64).contains(&y) {
                    page.put_pixel(x as u32, y as u32, Rgb([px[0], px[0], px[0]]));
                }
            }
            cell += 1;
            cx += spacing;
        }
        cy += spacing;
    }
    page
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Writes `count` pages as `page_XXX.png` into `dir`.
pub fn write_pages(dir: &Path, count: usize, width: u32, height: u32, shapes: usize, seed_value: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("page_{i:03}.png"));
            save(&synthetic_page(width, height, shapes, 40, seed::derive(seed_value, &[i as u64])), &path)?;
            Ok(path)
        })
        .collect()
}

/// Writes a labelled corpus of `classes × per_class` glyphs (labels
/// `shape0`, `shape1`, ...) and returns the manifest path.
pub fn write_labeled_corpus(dir: &Path, classes: usize, per_class: usize, seed_value: u64) -> Result<PathBuf> {
    if classes == 0 || classes > SHAPE_COUNT {
        return Err(Error::validation(format!("synthetic corpora have 1..={SHAPE_COUNT} classes")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for c in 0..classes {
            let id = format!("s{c}_{i:04}");
            let file = format!("{id}.png");
            save(&shape_glyph(c, seed::derive(seed_value, &[c as u64, i as u64])), &dir.join(&file))?;
            rows.push(ManifestRow {
                glyph_id: id,
                image_path: file,
                label: format!("shape{c}"),
                page_id: "synthetic".into(),
                x: 0,
                y: 0,
                w: CROP_SIZE,
                h: CROP_SIZE,
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows, None)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{extract_crops, BinarizationParams, CropScanParams, ManuscriptPage};

    #[test]
    fn shapes_are_distinct_and_deterministic() {
        let glyphs: Vec<Crop> = (0..SHAPE_COUNT).map(|s| shape_glyph(s, 1)).collect();
        for i in 0..SHAPE_COUNT {
            assert_eq!(glyphs[i], shape_glyph(i, 1));
            for j in 0..i {
                let diff: u64 = glyphs[i]
                    .pixels()
                    .zip(glyphs[j].pixels())
                    .map(|(a, b)| (a[0] as i64 - b[0] as i64).unsigned_abs())
                    .sum();
                assert!(diff > 64 * 64 * 10, "shapes {i} and {j} too similar");
            }
        }
    }

    #[test]
    fn pages_yield_crops() {
        let page = ManuscriptPage::new("p", synthetic_page(256, 256, 8, 40, 3), "p.png").unwrap();
        let crops = extract_crops(&page, &BinarizationParams::default(), &CropScanParams::default()).unwrap();
        assert!(crops.len() >= 20, "{}", crops.len());
    }
}
