use diffcore::AttentionScale;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FULL: &str = "full";
pub const LOCAL_CONCAT: &str = "local_concat";
pub const GLOBAL_ONLY: &str = "global_only";
pub const REGRESSION: &str = "regression";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input in pixels.
    pub input_size: usize,
    /// Number of stride-2 stages; the token grid is `input_size / 2^k` wide.
    pub k: usize,
    pub d_enc: usize,
    pub d_t: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Scale channels in the output heatmap.
    pub c: usize,
    /// Hidden width of the transformer feed-forward block, as a multiple of `d_t`.
    pub ffn_mult: usize,
    pub variant: String,
    pub attn_scale: AttentionScale,
    /// Hidden width of the regression MLP.
    pub regression_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            k: 3,
            d_enc: 64,
            d_t: 128,
            n_layers: 2,
            n_heads: 4,
            c: 16,
            ffn_mult: 2,
            variant: FULL.into(),
            attn_scale: AttentionScale::InvSqrtD,
            regression_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 || self.k > 8 {
            return bad(format!("model.k = {} out of range 1..=8", self.k));
        }
        if self.input_size < 8 || self.input_size % (1 << self.k) != 0 {
            return bad(format!("input_size {} must be >= 8 and divisible by 2^{}", self.input_size, self.k));
        }
        if self.d_enc == 0 || self.d_t == 0 || self.c == 0 || self.ffn_mult == 0 || self.regression_hidden == 0 {
            return bad("widths and channel counts must be positive".into());
        }
        if self.n_heads == 0 || self.d_t % self.n_heads != 0 {
            return bad(format!("d_t {} not divisible by n_heads {}", self.d_t, self.n_heads));
        }
        if self.d_t % 4 != 0 {
            return bad(format!("d_t {} must be a multiple of 4 for the 2-D positional embedding", self.d_t));
        }
        Ok(())
    }

    /// Side of the token grid.
    pub fn grid_side(&self) -> usize {
        self.input_size >> self.k
    }

    /// Output widths of the encoder stages, doubling up to `d_enc`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.k).map(|i| (self.d_enc >> (self.k - 1 - i)).max(1)).collect()
    }

    /// Output widths of the decoder blocks, halving from `d_t`.
    pub fn decoder_widths(&self) -> Vec<usize> {
        (1..=self.k).map(|i| (self.d_t >> i).max(1)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid_side(), 8);
        assert_eq!(c.encoder_widths(), vec![16, 32, 64]);
        assert_eq!(c.decoder_widths(), vec![64, 32, 16]);
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        for c in [
            ModelConfig { input_size: 60, ..base.clone() },
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { d_t: 6, n_heads: 2, ..base.clone() },
            ModelConfig { k: 0, ..base.clone() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_uses_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"variant":"local_concat","attn_scale":"inv_d"}"#).unwrap();
        assert_eq!(c.variant, LOCAL_CONCAT);
        assert_eq!(c.attn_scale, AttentionScale::InvD);
        assert_eq!(c.d_t, 128);
    }
}
