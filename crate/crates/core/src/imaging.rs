//! Small image helpers shared by the stereo, segmentation and evaluation stages.

pub use image::{GrayImage, Luma, Rgb, RgbImage};

/// BT.601 luma, rounded to the nearest 8-bit level.
#[inline]
pub fn luma_of(rgb: [u8; 3]) -> u8 {
    let y = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_luma(img: &RgbImage) -> GrayImage {
    let mut out = GrayImage::new(img.width(), img.height());
    for (dst, src) in out.pixels_mut().zip(img.pixels()) {
        dst.0[0] = luma_of(src.0);
    }
    out
}

/// Intensities scaled to `[0, 1]`, row-major.
pub fn to_unit_f32(img: &GrayImage) -> Vec<f32> {
    img.as_raw().iter().map(|&p| p as f32 / 255.0).collect()
}

pub(crate) fn dims(img: &GrayImage) -> (usize, usize) {
    (img.width() as usize, img.height() as usize)
}
