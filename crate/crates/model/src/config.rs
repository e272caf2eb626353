use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Network shape. Input height and width must be multiples of 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder widths at strides 1, 2, 4 and 8.
    pub channels: [usize; 4],
    pub d_model: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub mask_dim: usize,
    pub decoder_layers: usize,
    /// Initial class probability, used to set the class-logit bias.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 480,
            width: 600,
            channels: [16, 32, 64, 96],
            d_model: 96,
            ffn_dim: 192,
            queries: 16,
            embed_dim: 32,
            num_classes: 1,
            mask_dim: 8,
            decoder_layers: 2,
            prior_prob: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    /// The reduced network used for desk-scale experiments at 32x40.
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 40,
            channels: [8, 16, 32, 64],
            d_model: 64,
            ffn_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(ModelError::Config(format!(
                "input size {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        let dims = [
            self.d_model,
            self.ffn_dim,
            self.queries,
            self.embed_dim,
            self.num_classes,
            self.mask_dim,
            self.decoder_layers,
        ];
        if self.channels.contains(&0) || dims.contains(&0) {
            return Err(ModelError::Config("all widths and counts must be positive".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(ModelError::Config("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
