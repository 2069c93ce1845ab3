//! Small pixel-level helpers shared by the preprocessing and augmentation code.

use image::{imageops, Rgb, RgbImage};

/// Side length of every glyph crop.
pub const CROP_SIZE: u32 = 64;

/// A 64×64 crop; grayscale sources are stored with three equal channels.
pub type Crop = RgbImage;

/// ITU-R BT.601 luma of an RGB pixel, in [0, 255].
#[inline]
pub fn luma(px: &Rgb<u8>) -> f64 {
    0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2])
}

/// Row-major luma plane of `img`.
pub fn luma_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(luma).collect()
}

#[inline]
pub fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Samples channel `c` at fractional coordinates with bilinear weights,
/// replicating edge pixels outside the image.
#[inline]
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = img.dimensions();
    let max_x = f64::from(w - 1);
    let max_y = f64::from(h - 1);
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as u32;
    let y0 = y0 as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let p = |xx: u32, yy: u32| f64::from(img.get_pixel(xx, yy)[c]);
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize; returns an exact copy when the size is unchanged.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, imageops::FilterType::Triangle)
}

/// Brings an arbitrary glyph image to `CROP_SIZE`×`CROP_SIZE`.
///
/// The image is zero-padded symmetrically to a square of side
/// `max(w, h, CROP_SIZE)` and the square is then resized bilinearly, so the
/// aspect ratio of the glyph is preserved and small glyphs keep their scale.
pub fn normalize_crop(img: &RgbImage) -> Crop {
    let (w, h) = img.dimensions();
    if (w, h) == (CROP_SIZE, CROP_SIZE) {
        return img.clone();
    }
    let side = w.max(h).max(CROP_SIZE);
    let mut canvas = RgbImage::new(side, side);
    let ox = (side - w) / 2;
    let oy = (side - h) / 2;
    imageops::replace(&mut canvas, img, i64::from(ox), i64::from(oy));
    resize_bilinear(&canvas, CROP_SIZE, CROP_SIZE)
}

/// Promotes a grayscale buffer to three equal channels.
pub fn gray_to_rgb(gray: &image::GrayImage) -> RgbImage {
    RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}
