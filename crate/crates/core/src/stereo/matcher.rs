//! Epipolar attention matching along rectified image rows.
//!
//! Each row runs `N_attn` attention applications, alternating self attention
//! (index 0, 2, ...) and cross attention (index 1, 3, ...) between the left
//! and right rows. Every application feeds back through a residual connection
//! followed by L2 normalization: `p <- normalize(p + p_out)`.
//!
//! Attention is restricted to bands: cross attention from a left pixel `u`
//! sees right pixels `u - max_disp ..= u` (non-negative disparities), from a
//! right pixel `u` it sees left pixels `u ..= u + max_disp`; self attention
//! sees a window of `max_disp + 1` pixels centered on the query.
//!
//! After the last application, the cross similarity `α / sqrt(C_attn)` between
//! the final left and right descriptors is kept per `(u, d)` as the matching
//! logit; its row softmax is the disparity likelihood.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{random_orthogonal, AttentionConfig};

const EMBED_SEED_SALT: u64 = 0x5EED_0F_E4B3D;

/// Precomputed single-precision weights for banded row attention.
#[derive(Debug, Clone)]
pub struct RowMatcher {
    c: usize,
    c_feat: usize,
    n_layers: usize,
    max_disp: usize,
    inv_temp: f32,
    embed: Vec<f32>,
    w_q: Vec<f32>,
    w_k: Vec<f32>,
    w_v: Vec<f32>,
}

/// Column-major `f32` copy (nalgebra's own storage order).
fn to_f32_cols(m: &DMatrix<f64>) -> Vec<f32> {
    m.as_slice().iter().map(|&v| v as f32).collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = m x` for a column-major `out.len() × x.len()` matrix, accumulated
/// column by column so the inner loop runs over contiguous output lanes.
#[inline]
fn mat_vec(m: &[f32], x: &[f32], out: &mut [f32]) {
    let rows = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (col, &xc) in m.chunks_exact(rows).zip(x) {
        for (o, &mv) in out.iter_mut().zip(col) {
            *o += mv * xc;
        }
    }
}

const LANES: usize = 8;

/// Dot product with independent per-lane accumulators.
#[inline]
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let (ac, ar) = a.as_chunks::<LANES>();
    let (bc, br) = b.as_chunks::<LANES>();
    let mut acc = [0.0f32; LANES];
    for (x, y) in ac.iter().zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + dot(ar, br)
}

#[inline]
fn lane_sum(a: &[f32]) -> f32 {
    let (ac, ar) = a.as_chunks::<LANES>();
    let mut acc = [0.0f32; LANES];
    for x in ac {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().sum::<f32>() + ar.iter().sum::<f32>()
}

#[inline]
fn lane_max(a: &[f32]) -> f32 {
    let (ac, ar) = a.as_chunks::<LANES>();
    let mut acc = [f32::NEG_INFINITY; LANES];
    for x in ac {
        for l in 0..LANES {
            acc[l] = acc[l].max(x[l]);
        }
    }
    acc.iter().chain(ar).copied().fold(f32::NEG_INFINITY, f32::max)
}

/// `e^x` for `x <= 0` via a degree-6 polynomial for `2^f`, `|f| <= 0.5`.
/// Relative error stays below 1e-5 (dominated by rounding of `x·log2(e)`).
/// Inputs below [`FLUSH_BELOW`] return exactly 0 so that downstream products
/// never go subnormal (subnormal arithmetic is very slow on x86). Branch-free
/// so that loops over it vectorize.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0; // 1.5 · 2^23: adding it rounds to an integer
    let t = x.max(FLUSH_BELOW) * std::f32::consts::LOG2_E;
    let r = t + SHIFT;
    let n = r - SHIFT;
    let f = t - n;
    let p = 1.0
        + f * (std::f32::consts::LN_2
            + f * (0.240_226_49
                + f * (0.055_503_42 + f * (0.009_618_365 + f * (0.001_339_472 + f * 0.000_153_633_5)))));
    let k = r.to_bits().wrapping_sub(SHIFT.to_bits());
    let e = p * f32::from_bits(k.wrapping_add(127) << 23);
    if x < FLUSH_BELOW {
        0.0
    } else {
        e
    }
}

/// `e^-64 ≈ 1.6e-28`; anything smaller is treated as zero.
pub(crate) const FLUSH_BELOW: f32 = -64.0;

fn normalize(x: &mut [f32]) {
    let n = lane_dot(x, x).sqrt();
    if n > 1e-12 {
        let inv = 1.0 / n;
        x.iter_mut().for_each(|v| *v *= inv);
    }
}

impl RowMatcher {
    pub fn new(cfg: &AttentionConfig, c_feat: usize, max_disp: usize) -> Self {
        let c = cfg.c_attn;
        let embed = if c >= c_feat {
            DMatrix::from_fn(c, c_feat, |r, k| if r == k { 1.0 } else { 0.0 })
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EMBED_SEED_SALT);
            random_orthogonal(c_feat, &mut rng).rows(0, c).into_owned()
        };
        Self {
            c,
            c_feat,
            n_layers: cfg.n_attn,
            max_disp,
            inv_temp: (1.0 / cfg.temperature()) as f32,
            embed: to_f32_cols(&embed),
            w_q: to_f32_cols(&cfg.w_q),
            w_k: to_f32_cols(&cfg.w_k),
            w_v: to_f32_cols(&cfg.w_v),
        }
    }

    pub fn max_disp(&self) -> usize {
        self.max_disp
    }

    fn embed_row(&self, feats: &[f32]) -> Vec<f32> {
        let w = feats.len() / self.c_feat;
        let mut out = vec![0.0f32; w * self.c];
        for (src, dst) in feats.chunks_exact(self.c_feat).zip(out.chunks_exact_mut(self.c)) {
            mat_vec(&self.embed, src, dst);
            normalize(dst);
        }
        out
    }

    fn project(&self, m: &[f32], feats: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; feats.len()];
        for (src, dst) in feats.chunks_exact(self.c).zip(out.chunks_exact_mut(self.c)) {
            mat_vec(m, src, dst);
        }
        out
    }

    /// `m · x_i` for every pixel `i`, stored channel-major (`C × width`).
    fn project_transposed(&self, m: &[f32], feats: &[f32]) -> Vec<f32> {
        let c = self.c;
        let w = feats.len() / c;
        let mut out = vec![0.0f32; feats.len()];
        let mut tmp = vec![0.0f32; c];
        for (i, src) in feats.chunks_exact(c).enumerate() {
            mat_vec(m, src, &mut tmp);
            for (ch, t) in tmp.iter().enumerate() {
                out[ch * w + i] = *t;
            }
        }
        out
    }

    /// One residual attention application of `src` over `tgt` restricted to
    /// `band(i) = (lo, hi)` inclusive target indices.
    fn attend(&self, src: &[f32], tgt: &[f32], band: impl Fn(usize) -> (usize, usize)) -> Vec<f32> {
        let c = self.c;
        let width = tgt.len() / c;
        let q = self.project(&self.w_q, src);
        let kt = self.project_transposed(&self.w_k, tgt);
        let vt = self.project_transposed(&self.w_v, tgt);
        let mut out = src.to_vec();
        let mut weights = vec![0.0f32; width];
        for (i, (dst, qi)) in out.chunks_exact_mut(c).zip(q.chunks_exact(c)).enumerate() {
            let (lo, hi) = band(i);
            let wts = &mut weights[..hi + 1 - lo];
            wts.iter_mut().for_each(|w| *w = 0.0);
            for (ch, &qc) in qi.iter().enumerate() {
                let s = qc * self.inv_temp;
                let row = &kt[ch * width + lo..=ch * width + hi];
                for (w, k) in wts.iter_mut().zip(row) {
                    *w += s * k;
                }
            }
            let max = lane_max(wts);
            for w in wts.iter_mut() {
                *w = fast_exp(*w - max);
            }
            let inv_z = 1.0 / lane_sum(wts);
            for (ch, d) in dst.iter_mut().enumerate() {
                *d += lane_dot(wts, &vt[ch * width + lo..=ch * width + hi]) * inv_z;
            }
            normalize(dst);
        }
        out
    }

    /// Matches one rectified row pair given per-pixel descriptors
    /// (`width × c_feat` values each).
    pub fn match_row(&self, left: &[f32], right: &[f32]) -> RowLikelihood {
        assert_eq!(left.len(), right.len(), "rows must have equal width");
        let width = left.len() / self.c_feat;
        let dmax = self.max_disp;
        let mut l = self.embed_row(left);
        let mut r = self.embed_row(right);

        let half = dmax / 2;
        let self_band = |i: usize| (i.saturating_sub(half), (i + (dmax - half)).min(width - 1));
        let left_band = |i: usize| (i.saturating_sub(dmax), i);
        let right_band = |i: usize| (i, (i + dmax).min(width - 1));
        for layer in 0..self.n_layers {
            if layer % 2 == 0 {
                l = self.attend(&l, &l, self_band);
                r = self.attend(&r, &r, self_band);
            } else {
                let nl = self.attend(&l, &r, left_band);
                let nr = self.attend(&r, &l, right_band);
                l = nl;
                r = nr;
            }
        }

        let c = self.c;
        let q = self.project(&self.w_q, &l);
        let k = self.project(&self.w_k, &r);
        let stride = dmax + 1;
        let mut logits = vec![f32::NEG_INFINITY; width * stride];
        for u in 0..width {
            let qu = &q[u * c..(u + 1) * c];
            for d in 0..=dmax.min(u) {
                let j = u - d;
                logits[u * stride + d] = lane_dot(qu, &k[j * c..(j + 1) * c]) * self.inv_temp;
            }
        }
        RowLikelihood {
            width,
            max_disp: dmax,
            logits,
        }
    }
}

/// Winner-take-all result for one left pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeftMatch {
    pub disparity: usize,
    /// Parabola-refined disparity.
    pub refined: f64,
    /// Shannon entropy (nats) of the likelihood.
    pub entropy: f64,
    pub candidates: usize,
}

/// Per-pixel disparity likelihoods of one row, stored as logits.
#[derive(Debug, Clone)]
pub struct RowLikelihood {
    pub width: usize,
    pub max_disp: usize,
    logits: Vec<f32>,
}

impl RowLikelihood {
    pub fn candidates(&self, u: usize) -> usize {
        self.max_disp.min(u) + 1
    }

    /// Logit of matching left pixel `u` with right pixel `u - d`.
    pub fn logit(&self, u: usize, d: usize) -> Option<f32> {
        (d <= self.max_disp && d <= u).then(|| self.logits[u * (self.max_disp + 1) + d])
    }

    fn row(&self, u: usize) -> &[f32] {
        let s = self.max_disp + 1;
        &self.logits[u * s..u * s + self.candidates(u)]
    }

    /// Likelihood over disparities `0 ..= min(u, max_disp)`.
    pub fn distribution(&self, u: usize) -> Vec<f64> {
        let row = self.row(u);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = row.iter().map(|&l| (l as f64 - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn entropy(&self, u: usize) -> f64 {
        let row = self.row(u);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        let mut weighted = 0.0f64;
        for &l in row {
            let s = l - max;
            let e = fast_exp(s) as f64;
            z += e;
            weighted += e * s as f64;
        }
        z.ln() - weighted / z
    }

    /// Winner-take-all with ties broken toward the smaller disparity and a
    /// three-point parabola fitted to the log-likelihood around the winner.
    pub fn best_left(&self, u: usize) -> LeftMatch {
        let row = self.row(u);
        let mut best = 0;
        for (d, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = d;
            }
        }
        let mut refined = best as f64;
        if best > 0 && best + 1 < row.len() {
            let (a, b, c) = (row[best - 1] as f64, row[best] as f64, row[best + 1] as f64);
            let denom = a - 2.0 * b + c;
            if denom < 0.0 {
                refined += (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
            }
        }
        LeftMatch {
            disparity: best,
            refined,
            entropy: self.entropy(u),
            candidates: row.len(),
        }
    }

    /// Winner-take-all disparity for right pixel `ur`, scoring left pixels
    /// `ur + d` with the same similarities.
    pub fn best_right(&self, ur: usize) -> usize {
        let s = self.max_disp + 1;
        let n = self.max_disp.min(self.width - 1 - ur);
        let mut best = 0;
        let mut best_l = self.logits[ur * s];
        for d in 1..=n {
            let l = self.logits[(ur + d) * s + d];
            if l > best_l {
                best = d;
                best_l = l;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::attention::attention_update;
    use crate::stereo::features::{extract_features, FEATURE_CHANNELS};
    use image::{GrayImage, Luma};
    use rand::Rng;

    fn noise_image(w: u32, h: u32, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..=255)).collect();
        // Light smoothing so the texture is not pure white noise.
        GrayImage::from_fn(w, h, |x, y| {
            let at = |x: i64, y: i64| base[(y.clamp(0, h as i64 - 1) * w as i64 + x.clamp(0, w as i64 - 1)) as usize] as u32;
            let (x, y) = (x as i64, y as i64);
            Luma([((2 * at(x, y) + at(x - 1, y) + at(x + 1, y)) / 4) as u8])
        })
    }

    fn shifted(img: &GrayImage, shift: u32) -> GrayImage {
        GrayImage::from_fn(img.width(), img.height(), |x, y| *img.get_pixel((x + shift).min(img.width() - 1), y))
    }

    fn matcher(n: usize) -> RowMatcher {
        RowMatcher::new(&AttentionConfig::seeded(12, n, 1).unwrap(), FEATURE_CHANNELS, 16)
    }

    #[test]
    fn fast_exp_tracks_std_exp() {
        for i in 0..=20_000 {
            let x = -(i as f32) * 0.004;
            let (a, b) = (fast_exp(x), x.exp());
            assert!((a - b).abs() <= 1e-5 * b + 2e-28, "x = {x}: {a} vs {b}");
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-100.0), 0.0);
        assert_eq!(fast_exp(FLUSH_BELOW - 0.5), 0.0);
    }

    #[test]
    fn self_match_has_zero_disparity() {
        let img = noise_image(96, 9, 3);
        let f = extract_features(&img);
        let lik = matcher(2).match_row(f.row(4), f.row(4));
        for u in 4..92 {
            assert_eq!(lik.best_left(u).disparity, 0, "pixel {u}");
        }
    }

    #[test]
    fn shifted_row_matches_shift() {
        let left = noise_image(96, 9, 4);
        let right = shifted(&left, 5);
        let (fl, fr) = (extract_features(&left), extract_features(&right));
        for n in [1, 2, 4] {
            let lik = matcher(n).match_row(fl.row(4), fr.row(4));
            for u in 8..88 {
                let m = lik.best_left(u);
                assert_eq!(m.disparity, 5, "N={n} pixel {u}");
                assert!((m.refined - 5.0).abs() <= 0.5);
                assert_eq!(lik.best_right(u - 5), 5);
            }
        }
    }

    #[test]
    fn textureless_row_has_maximal_entropy() {
        let img = GrayImage::from_pixel(64, 9, Luma([128]));
        let f = extract_features(&img);
        let lik = matcher(2).match_row(f.row(4), f.row(4));
        for u in 0..64 {
            let n = lik.candidates(u) as f64;
            assert!((lik.entropy(u) - n.ln()).abs() < 1e-6, "pixel {u}");
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let left = noise_image(80, 9, 5);
        let right = shifted(&left, 3);
        let (fl, fr) = (extract_features(&left), extract_features(&right));
        let lik = matcher(2).match_row(fl.row(4), fr.row(4));
        for u in 0..80 {
            let p = lik.distribution(u);
            assert_eq!(p.len(), lik.candidates(u));
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_band_attention_equals_dense_update() {
        let cfg = AttentionConfig::seeded(6, 1, 8).unwrap();
        let m = RowMatcher::new(&cfg, 6, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ns, nt) = (5, 7);
        let src: Vec<f32> = (0..ns * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tgt: Vec<f32> = (0..nt * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let banded = m.attend(&src, &tgt, |_| (0, nt - 1));
        let s = DMatrix::from_fn(6, ns, |r, c| src[c * 6 + r] as f64);
        let t = DMatrix::from_fn(6, nt, |r, c| tgt[c * 6 + r] as f64);
        let dense = attention_update(&s, &t, &cfg).unwrap();
        for i in 0..ns {
            let mut expect: Vec<f64> = (0..6).map(|r| s[(r, i)] + dense.updated[(r, i)]).collect();
            let n = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
            expect.iter_mut().for_each(|x| *x /= n);
            for r in 0..6 {
                assert!((banded[i * 6 + r] as f64 - expect[r]).abs() < 1e-4);
            }
        }
    }
}
