//! Zero-mean normalized cross-correlation block matcher used to cross-check
//! the attention matcher.

use crate::imaging::{dims, GrayImage};

const HALF: usize = 4;
const MIN_VARIANCE: f64 = 1e-6;

struct Integral {
    stride: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(width: usize, height: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += value(x, y);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    /// Sum over the inclusive window `[x0, x1] × [y0, y1]`.
    fn window(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = &self.sums;
        s[(y1 + 1) * self.stride + x1 + 1] - s[y0 * self.stride + x1 + 1] - s[(y1 + 1) * self.stride + x0]
            + s[y0 * self.stride + x0]
    }
}

/// Integer winner-take-all disparity from 9×9 ZNCC, ties toward the smaller
/// disparity. `None` where the window leaves the image or is textureless.
pub fn block_match_oracle(left: &GrayImage, right: &GrayImage, max_disp: usize) -> Vec<Option<usize>> {
    let (w, h) = dims(left);
    assert_eq!(dims(right), (w, h), "images must be the same size");
    let mut out = vec![None; w * h];
    if w <= 2 * HALF || h <= 2 * HALF {
        return out;
    }
    let l = |x: usize, y: usize| left.get_pixel(x as u32, y as u32).0[0] as f64;
    let r = |x: usize, y: usize| right.get_pixel(x as u32, y as u32).0[0] as f64;
    let il = Integral::new(w, h, l);
    let il2 = Integral::new(w, h, |x, y| l(x, y).powi(2));
    let ir = Integral::new(w, h, r);
    let ir2 = Integral::new(w, h, |x, y| r(x, y).powi(2));
    let n = ((2 * HALF + 1) * (2 * HALF + 1)) as f64;

    let mut best = vec![(f64::NEG_INFINITY, usize::MAX); w * h];
    for d in 0..=max_disp {
        if d + 2 * HALF >= w {
            break;
        }
        let cross = Integral::new(w, h, |x, y| if x >= d { l(x, y) * r(x - d, y) } else { 0.0 });
        for y in HALF..h - HALF {
            for x in (HALF + d)..w - HALF {
                let (x0, y0, x1, y1) = (x - HALF, y - HALF, x + HALF, y + HALF);
                let sl = il.window(x0, y0, x1, y1);
                let var_l = il2.window(x0, y0, x1, y1) - sl * sl / n;
                if var_l < MIN_VARIANCE * n {
                    continue;
                }
                let sr = ir.window(x0 - d, y0, x1 - d, y1);
                let var_r = ir2.window(x0 - d, y0, x1 - d, y1) - sr * sr / n;
                if var_r < MIN_VARIANCE * n {
                    continue;
                }
                let cov = cross.window(x0, y0, x1, y1) - sl * sr / n;
                let score = cov / (var_l * var_r).sqrt();
                let slot = &mut best[y * w + x];
                if score > slot.0 {
                    *slot = (score, d);
                }
            }
        }
    }
    for (o, (score, d)) in out.iter_mut().zip(best) {
        if score.is_finite() {
            *o = Some(d);
        }
    }
    out
}
