//! Fixed per-pixel descriptor standing in for a learned stereo backbone.
//!
//! Channel layout (`FEATURE_CHANNELS = 11`):
//!
//! | channel | content                                                    |
//! |---------|------------------------------------------------------------|
//! | 0       | intensity, scaled by [`INTENSITY_WEIGHT`]                  |
//! | 1       | horizontal central-difference gradient                     |
//! | 2       | vertical central-difference gradient                       |
//! | 3..11   | 3×3 box means at the eight ring offsets (±2 px) minus the  |
//! |         | 7×7 patch mean (zero-mean patch statistics)                |
//!
//! Borders replicate the edge pixel.

use crate::imaging::{dims, to_unit_f32, GrayImage};

pub const FEATURE_CHANNELS: usize = 11;
pub const INTENSITY_WEIGHT: f32 = 0.1;

const RING: [(i64, i64); 8] = [
    (-2, -2),
    (0, -2),
    (2, -2),
    (-2, 0),
    (2, 0),
    (-2, 2),
    (0, 2),
    (2, 2),
];
const PAD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `FEATURE_CHANNELS` values per pixel.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub const CHANNELS: usize = FEATURE_CHANNELS;

    pub fn descriptor(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * FEATURE_CHANNELS;
        &self.data[i..i + FEATURE_CHANNELS]
    }

    pub fn row(&self, v: usize) -> &[f32] {
        let stride = self.width * FEATURE_CHANNELS;
        &self.data[v * stride..(v + 1) * stride]
    }
}

/// Summed-area table over an edge-replicated copy of the image.
struct PaddedIntegral {
    stride: usize,
    sums: Vec<f64>,
}

impl PaddedIntegral {
    fn new(pixels: &[f32], width: usize, height: usize) -> Self {
        let pw = width + 2 * PAD;
        let ph = height + 2 * PAD;
        let stride = pw + 1;
        let mut sums = vec![0.0f64; stride * (ph + 1)];
        for y in 0..ph {
            let sy = (y as i64 - PAD as i64).clamp(0, height as i64 - 1) as usize;
            let mut row = 0.0;
            for x in 0..pw {
                let sx = (x as i64 - PAD as i64).clamp(0, width as i64 - 1) as usize;
                row += pixels[sy * width + sx] as f64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    /// Mean over the square of half-size `r` centered on image pixel `(u, v)`.
    fn box_mean(&self, u: i64, v: i64, r: i64) -> f64 {
        let x0 = (u - r + PAD as i64) as usize;
        let y0 = (v - r + PAD as i64) as usize;
        let x1 = (u + r + 1 + PAD as i64) as usize;
        let y1 = (v + r + 1 + PAD as i64) as usize;
        let s = self.sums[y1 * self.stride + x1] - self.sums[y0 * self.stride + x1]
            - self.sums[y1 * self.stride + x0]
            + self.sums[y0 * self.stride + x0];
        let n = (2 * r + 1) * (2 * r + 1);
        s / n as f64
    }
}

pub fn extract_features(img: &GrayImage) -> FeatureMap {
    let (width, height) = dims(img);
    let pixels = to_unit_f32(img);
    let integral = PaddedIntegral::new(&pixels, width, height);
    let at = |u: i64, v: i64| -> f32 {
        let u = u.clamp(0, width as i64 - 1) as usize;
        let v = v.clamp(0, height as i64 - 1) as usize;
        pixels[v * width + u]
    };

    let mut data = vec![0.0f32; width * height * FEATURE_CHANNELS];
    for v in 0..height {
        for u in 0..width {
            let (ui, vi) = (u as i64, v as i64);
            let d = &mut data[(v * width + u) * FEATURE_CHANNELS..][..FEATURE_CHANNELS];
            d[0] = INTENSITY_WEIGHT * pixels[v * width + u];
            d[1] = 0.5 * (at(ui + 1, vi) - at(ui - 1, vi));
            d[2] = 0.5 * (at(ui, vi + 1) - at(ui, vi - 1));
            let mean7 = integral.box_mean(ui, vi, 3);
            for (c, (dx, dy)) in RING.iter().enumerate() {
                d[3 + c] = (integral.box_mean(ui + dx, vi + dy, 1) - mean7) as f32;
            }
        }
    }
    FeatureMap {
        width,
        height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn constant_image_has_flat_descriptors() {
        let img = GrayImage::from_pixel(20, 15, Luma([90]));
        let f = extract_features(&img);
        let first = f.descriptor(0, 0).to_vec();
        for v in 0..15 {
            for u in 0..20 {
                let d = f.descriptor(u, v);
                assert_eq!(d[1], 0.0);
                assert_eq!(d[2], 0.0);
                for (a, b) in d.iter().zip(&first) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn intensity_shift_leaves_zero_mean_channels() {
        let img = GrayImage::from_fn(24, 24, |x, y| Luma([((x * 37 + y * 91) % 150) as u8]));
        let shifted = GrayImage::from_fn(24, 24, |x, y| Luma([img.get_pixel(x, y).0[0] + 50]));
        let (a, b) = (extract_features(&img), extract_features(&shifted));
        for v in 0..24 {
            for u in 0..24 {
                let (da, db) = (a.descriptor(u, v), b.descriptor(u, v));
                for c in 1..FEATURE_CHANNELS {
                    assert!((da[c] - db[c]).abs() < 1e-5, "channel {c} at ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn step_edge_peaks_horizontal_gradient_at_edge() {
        // Left half 40, right half 200; edge between columns 9 and 10.
        let img = GrayImage::from_fn(20, 9, |x, _| Luma([if x < 10 { 40 } else { 200 }]));
        let f = extract_features(&img);
        // Direct convolution with [-1/2, 0, 1/2] over the replicated row.
        let row: Vec<f32> = (0..20).map(|x| if x < 10 { 40.0 } else { 200.0 } ).map(|p: f32| p / 255.0).collect();
        let oracle: Vec<f32> = (0..20)
            .map(|x: usize| 0.5 * (row[(x + 1).min(19)] - row[x.saturating_sub(1)]))
            .collect();
        for u in 0..20 {
            assert!((f.descriptor(u, 4)[1] - oracle[u]).abs() < 1e-6);
            assert_eq!(f.descriptor(u, 4)[2], 0.0);
        }
        let peak = (0..20)
            .max_by(|&a, &b| f.descriptor(a, 4)[1].total_cmp(&f.descriptor(b, 4)[1]))
            .unwrap();
        assert!(peak == 9 || peak == 10);
    }
}
