use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Representation width.
    pub d: usize,
    pub heads: usize,
    pub n_self_layers: usize,
    pub n_cross_layers: usize,
    /// 1-based cross layer whose attention feeds the bidirectional weights.
    pub bidiratt_layer: usize,
    /// Width of the coarse (contrastive) embedding space.
    pub proj_dim: usize,
    pub patch_grid: (usize, usize),
    pub patch_pixels: usize,
    pub max_text_len: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub init_std: f64,
    /// Phrases reuse the text projection for coarse similarity.
    pub share_phrase_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            n_self_layers: 1,
            n_cross_layers: 6,
            bidiratt_layer: 3,
            proj_dim: 16,
            patch_grid: (8, 8),
            patch_pixels: 48,
            max_text_len: 50,
            ff_mult: 2,
            vocab_size: 0,
            init_std: 0.02,
            share_phrase_projection: true,
        }
    }
}

impl ModelConfig {
    /// Full-scale widths (768-d representations, 256-d projections, 12 heads).
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            heads: 12,
            n_self_layers: 6,
            proj_dim: 256,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.n_cross_layers == 0 || self.bidiratt_layer == 0 || self.bidiratt_layer > self.n_cross_layers {
            return fail(format!(
                "bidiratt_layer={} must lie in 1..={}",
                self.bidiratt_layer, self.n_cross_layers
            ));
        }
        if self.proj_dim == 0 || self.patch_pixels == 0 || self.num_patches() == 0 || self.max_text_len == 0 {
            return fail("zero-sized dimension".into());
        }
        if self.vocab_size <= crate::textproc::UNK_ID {
            return fail(format!("vocab_size={} leaves no room for words", self.vocab_size));
        }
        if self.ff_mult == 0 || !(self.init_std > 0.0) {
            return fail("ff_mult and init_std must be positive".into());
        }
        if self.bidiratt_layer == self.n_cross_layers {
            log::warn!("bidiratt_layer is the last cross layer; its backward attention carries no retrieval gradient");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_vocab() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_is_valid() {
        with_vocab().validate().unwrap();
        assert_eq!(with_vocab().head_dim(), 8);
    }

    #[test]
    fn rejects_bad_heads_and_layers() {
        let mut c = with_vocab();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = with_vocab();
        c.bidiratt_layer = 7;
        assert!(c.validate().is_err());
        let mut c = with_vocab();
        c.bidiratt_layer = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"d": 16, "bogus": 1}"#);
        assert!(err.is_err());
    }
}
