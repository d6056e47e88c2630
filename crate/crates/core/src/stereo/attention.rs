//! Dot-product attention between descriptor sequences.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Logit scale applied to cosine similarity by [`AttentionConfig::seeded`].
pub const DEFAULT_MATCH_GAIN: f64 = 160.0;

/// Projection weights and sizes of the attention stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    /// Embedding dimension `C_attn`.
    pub c_attn: usize,
    /// Number of attention applications `N_attn`.
    pub n_attn: usize,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    /// Seed the weights were drawn from (0 for explicitly supplied weights).
    pub seed: u64,
    /// Logit scale the seeded weights encode; kept so derived configs match.
    pub gain: f64,
}

impl AttentionConfig {
    pub fn new(
        c_attn: usize,
        n_attn: usize,
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        w_v: DMatrix<f64>,
    ) -> Result<Self> {
        if c_attn == 0 || n_attn == 0 {
            return Err(Error::InvalidInput("C_attn and N_attn must be >= 1".into()));
        }
        for (name, w) in [("W_q", &w_q), ("W_k", &w_k), ("W_v", &w_v)] {
            if w.nrows() != c_attn || w.ncols() != c_attn {
                return Err(Error::InvalidInput(format!(
                    "{name} is {}x{}, expected {c_attn}x{c_attn}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self {
            c_attn,
            n_attn,
            w_q,
            w_k,
            w_v,
            seed: 0,
            gain: 1.0 / (c_attn as f64).sqrt(),
        })
    }

    /// All three projections set to the identity.
    pub fn identity(c_attn: usize, n_attn: usize) -> Result<Self> {
        let i = DMatrix::identity(c_attn, c_attn);
        Self::new(c_attn, n_attn, i.clone(), i.clone(), i)
    }

    /// Deterministic weights drawn from `seed` with [`DEFAULT_MATCH_GAIN`].
    pub fn seeded(c_attn: usize, n_attn: usize, seed: u64) -> Result<Self> {
        Self::seeded_with_gain(c_attn, n_attn, seed, DEFAULT_MATCH_GAIN)
    }

    /// `W_q = W_k = s·Q` with `Q` a random orthogonal matrix, so `W_qᵀW_k = s²I`
    /// and the scaled logits equal `gain · <src, tgt>`; `W_v` is a random
    /// rotation close to the identity (Cayley transform of a small skew matrix).
    pub fn seeded_with_gain(c_attn: usize, n_attn: usize, seed: u64, gain: f64) -> Result<Self> {
        if c_attn == 0 || n_attn == 0 {
            return Err(Error::InvalidInput("C_attn and N_attn must be >= 1".into()));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::InvalidInput(format!("attention gain must be positive, got {gain}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(c_attn, &mut rng);
        let scale = (gain * (c_attn as f64).sqrt()).sqrt();
        let w_qk = q * scale;

        let g: DMatrix<f64> = DMatrix::from_fn(c_attn, c_attn, |_, _| StandardNormal.sample(&mut rng));
        let skew = (&g - g.transpose()) * (0.25 / (c_attn as f64).sqrt());
        let eye = DMatrix::<f64>::identity(c_attn, c_attn);
        let w_v = (&eye - &skew)
            .try_inverse()
            .map(|inv| inv * (&eye + &skew))
            .unwrap_or(eye);

        Ok(Self {
            c_attn,
            n_attn,
            w_q: w_qk.clone(),
            w_k: w_qk,
            w_v,
            seed,
            gain,
        })
    }

    /// Softmax temperature `sqrt(C_attn)`.
    pub fn temperature(&self) -> f64 {
        (self.c_attn as f64).sqrt()
    }
}

pub(crate) fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Fix the sign ambiguity so the draw is Haar-distributed and reproducible.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Result of one attention application.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Updated descriptors, one column per source element (`C_attn × N_src`).
    pub updated: DMatrix<f64>,
    /// Raw similarities `α` (`N_src × N_tgt`).
    pub alpha: DMatrix<f64>,
    /// Row-wise `softmax(α / sqrt(C_attn))`.
    pub weights: DMatrix<f64>,
}

/// One attention application.
///
/// `src` and `tgt` hold one descriptor per column. Computes
/// `α = srcᵀ W_qᵀ W_k tgt` and `p_out = W_v tgt softmax(α/√C)ᵀ`, with the
/// softmax taken per source element across the targets.
pub fn attention_update(
    src: &DMatrix<f64>,
    tgt: &DMatrix<f64>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let c = cfg.c_attn;
    if src.nrows() != c || tgt.nrows() != c {
        return Err(Error::InvalidInput(format!(
            "descriptor dimension mismatch: src {} / tgt {} vs C_attn {c}",
            src.nrows(),
            tgt.nrows()
        )));
    }
    if tgt.ncols() == 0 {
        return Err(Error::InvalidInput("empty target sequence".into()));
    }
    let queries = &cfg.w_q * src;
    let keys = &cfg.w_k * tgt;
    let values = &cfg.w_v * tgt;
    let alpha = queries.transpose() * keys;
    let mut weights = &alpha / cfg.temperature();
    for mut row in weights.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|x| *x = (*x - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    let updated = values * weights.transpose();
    Ok(AttentionOutput {
        updated,
        alpha,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Straight-line loops, no matrix algebra.
    fn dense_oracle(src: &DMatrix<f64>, tgt: &DMatrix<f64>, cfg: &AttentionConfig) -> (DMatrix<f64>, DMatrix<f64>) {
        let c = cfg.c_attn;
        let (ns, nt) = (src.ncols(), tgt.ncols());
        let mut alpha = DMatrix::zeros(ns, nt);
        for i in 0..ns {
            for j in 0..nt {
                let mut acc = 0.0;
                for a in 0..c {
                    for b in 0..c {
                        for m in 0..c {
                            acc += src[(m, i)] * cfg.w_q[(a, m)] * cfg.w_k[(a, b)] * tgt[(b, j)];
                        }
                    }
                }
                alpha[(i, j)] = acc;
            }
        }
        let mut out = DMatrix::zeros(c, ns);
        for i in 0..ns {
            let logits: Vec<f64> = (0..nt).map(|j| alpha[(i, j)] / (c as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nt {
                for a in 0..c {
                    let mut v = 0.0;
                    for b in 0..c {
                        v += cfg.w_v[(a, b)] * tgt[(b, j)];
                    }
                    out[(a, i)] += e[j] / z * v;
                }
            }
        }
        (out, alpha)
    }

    #[test]
    fn single_target_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig::new(
            4,
            1,
            random_matrix(4, 4, &mut rng),
            random_matrix(4, 4, &mut rng),
            random_matrix(4, 4, &mut rng),
        )
        .unwrap();
        let src = random_matrix(4, 3, &mut rng);
        let tgt = random_matrix(4, 1, &mut rng);
        let out = attention_update(&src, &tgt, &cfg).unwrap();
        let expected = &cfg.w_v * &tgt;
        for i in 0..3 {
            assert_eq!(out.weights[(i, 0)], 1.0);
            assert_eq!(out.updated.column(i), expected.column(0));
        }
    }

    #[test]
    fn identical_targets_under_identity_weights() {
        let cfg = AttentionConfig::identity(5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_matrix(5, 4, &mut rng);
        let t = random_matrix(5, 1, &mut rng);
        let tgt = DMatrix::from_fn(5, 6, |r, _| t[(r, 0)]);
        let out = attention_update(&src, &tgt, &cfg).unwrap();
        for i in 0..4 {
            assert!((out.updated.column(i) - t.column(0)).amax() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_oracle_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(
            8,
            1,
            random_matrix(8, 8, &mut rng),
            random_matrix(8, 8, &mut rng),
            random_matrix(8, 8, &mut rng),
        )
        .unwrap();
        let src = random_matrix(8, 3, &mut rng);
        let tgt = random_matrix(8, 4, &mut rng);
        let out = attention_update(&src, &tgt, &cfg).unwrap();
        let (want_out, want_alpha) = dense_oracle(&src, &tgt, &cfg);
        assert!((out.alpha - want_alpha).amax() < 1e-9);
        assert!((out.updated - want_out).amax() < 1e-9);
    }

    #[test]
    fn rows_of_weights_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AttentionConfig::seeded(6, 1, 9).unwrap();
        let out = attention_update(&random_matrix(6, 7, &mut rng), &random_matrix(6, 11, &mut rng), &cfg).unwrap();
        for row in out.weights.row_iter() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_targets_permutes_alpha_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::seeded(4, 1, 2).unwrap();
        let src = random_matrix(4, 3, &mut rng);
        let tgt = random_matrix(4, 5, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = DMatrix::from_fn(4, 5, |r, c| tgt[(r, perm[c])]);
        let a = attention_update(&src, &tgt, &cfg).unwrap();
        let b = attention_update(&src, &permuted, &cfg).unwrap();
        for i in 0..3 {
            for (c, &p) in perm.iter().enumerate() {
                assert!((b.alpha[(i, c)] - a.alpha[(i, p)]).abs() < 1e-12);
            }
        }
        assert!((a.updated - b.updated).amax() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = AttentionConfig::identity(4, 1).unwrap();
        let src = DMatrix::zeros(3, 2);
        let tgt = DMatrix::zeros(4, 2);
        assert!(matches!(attention_update(&src, &tgt, &cfg), Err(Error::InvalidInput(_))));
        assert!(AttentionConfig::new(4, 1, DMatrix::zeros(3, 3), DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)).is_err());
        assert!(AttentionConfig::identity(0, 1).is_err());
    }

    #[test]
    fn seeded_weights_are_deterministic_and_scaled() {
        let a = AttentionConfig::seeded(12, 4, 7).unwrap();
        let b = AttentionConfig::seeded(12, 4, 7).unwrap();
        assert_eq!(a, b);
        let qk = a.w_q.transpose() * &a.w_k;
        let s2 = DEFAULT_MATCH_GAIN * 12f64.sqrt();
        assert!((qk - DMatrix::identity(12, 12) * s2).amax() < 1e-9);
        let vtv = a.w_v.transpose() * &a.w_v;
        assert!((vtv - DMatrix::identity(12, 12)).amax() < 1e-9);
    }
}
