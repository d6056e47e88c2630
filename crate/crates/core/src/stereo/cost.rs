//! Parameter/FLOP accounting of the attention stack and the light-weight variant.

use serde::Serialize;

use super::attention::AttentionConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostEstimate {
    /// Three `C_attn × C_attn` projections per attention application.
    pub param_count: u64,
    /// `H · W² · N_attn` with unit constant.
    pub flops_count: u64,
}

pub fn cost_model(height: usize, width: usize, cfg: &AttentionConfig) -> Result<CostEstimate> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput("image dimensions must be >= 1".into()));
    }
    let (c, n) = (cfg.c_attn as u64, cfg.n_attn as u64);
    let (h, w) = (height as u64, width as u64);
    Ok(CostEstimate {
        param_count: 3 * c * c * n,
        flops_count: h * w * w * n,
    })
}

/// Quarter the number of attention applications and double the embedding
/// width, which keeps `C_attn² · N_attn` (the parameter count) unchanged.
/// Weights are redrawn from the base seed.
pub fn lightweight_config(base: &AttentionConfig) -> Result<AttentionConfig> {
    if base.n_attn % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "N_attn = {} is not divisible by 4",
            base.n_attn
        )));
    }
    AttentionConfig::seeded_with_gain(2 * base.c_attn, base.n_attn / 4, base.seed, base.gain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_for_base_config() {
        let cfg = AttentionConfig::seeded(128, 24, 0).unwrap();
        let c = cost_model(512, 640, &cfg).unwrap();
        // 512 * 640^2 * 24
        assert_eq!(c.flops_count, 5_033_164_800);
        assert_eq!(c.param_count, 3 * 393_216);
    }

    #[test]
    fn unit_config() {
        let cfg = AttentionConfig::identity(1, 1).unwrap();
        let c = cost_model(7, 9, &cfg).unwrap();
        assert_eq!(c.param_count, 3);
        assert_eq!(c.flops_count, 7 * 81);
    }

    #[test]
    fn lightweight_preserves_params_and_quarters_flops() {
        let base = AttentionConfig::seeded(128, 24, 3).unwrap();
        let light = lightweight_config(&base).unwrap();
        assert_eq!((light.c_attn, light.n_attn), (256, 6));
        assert_eq!(128 * 128 * 24, 393_216);
        assert_eq!(light.c_attn * light.c_attn * light.n_attn, 393_216);
        for (h, w) in [(512, 640), (1, 1), (33, 17)] {
            let (a, b) = (cost_model(h, w, &base).unwrap(), cost_model(h, w, &light).unwrap());
            assert_eq!(a.param_count, b.param_count);
            assert_eq!(a.flops_count, 4 * b.flops_count);
        }
    }

    #[test]
    fn smallest_lightweight_case() {
        let light = lightweight_config(&AttentionConfig::seeded(1, 4, 0).unwrap()).unwrap();
        assert_eq!((light.c_attn, light.n_attn), (2, 1));
    }

    #[test]
    fn rejects_indivisible_attention_count() {
        let base = AttentionConfig::seeded(8, 6, 0).unwrap();
        assert!(matches!(lightweight_config(&base), Err(Error::InvalidInput(_))));
    }
}
