use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How neighbourhoods are completed at the grid border.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Cyclic,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub word_dim: usize,
    /// Neighbourhood side `r` (odd); also the depthwise kernel size.
    pub neighborhood: usize,
    pub nfa_layers: usize,
    pub padding: Padding,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Divides the before/after similarity logits.
    pub temperature: f64,
    pub share_localizer: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            word_dim: 48,
            neighborhood: 3,
            nfa_layers: 1,
            padding: Padding::Zero,
            decoder_layers: 2,
            heads: 8,
            ffn_dim: 128,
            max_len: 20,
            temperature: 1.0,
            share_localizer: false,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::invalid(format!("model.{key}: {why}")));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad("d_model", "must be a positive even number");
        }
        if self.word_dim == 0 {
            return bad("word_dim", "must be positive");
        }
        if self.neighborhood.is_multiple_of(2) {
            return bad("neighborhood", "must be odd");
        }
        if self.nfa_layers == 0 {
            return bad("nfa_layers", "must be at least 1");
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers", "must be at least 1");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads", "must divide d_model");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len", "must be at least 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        Ok(())
    }
}

/// A [`ModelConfig`] together with the sizes fixed by the data: feature
/// channels `C`, grid `H×W`, vocabulary size `U` and tagset size `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub tagset_size: usize,
}

impl ModelSpec {
    pub fn new(
        config: ModelConfig,
        channels: usize,
        height: usize,
        width: usize,
        vocab_size: usize,
        tagset_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let r = config.neighborhood;
        if r > height.min(width) {
            return Err(Error::invalid(format!(
                "model.neighborhood: {r} exceeds the {height}x{width} grid"
            )));
        }
        if channels == 0 || vocab_size == 0 || tagset_size == 0 {
            return Err(Error::invalid("channels, vocabulary and tagset must be non-empty"));
        }
        Ok(ModelSpec {
            config,
            channels,
            height,
            width,
            vocab_size,
            tagset_size,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn d(&self) -> usize {
        self.config.d_model
    }
}
