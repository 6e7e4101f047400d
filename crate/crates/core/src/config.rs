//! Run configuration: scene generation, architecture and training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, ModelSpec};
use crate::scene::{SceneConfig, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the dependency loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffling seed.
    pub seed: u64,
    /// Global-norm gradient clipping, applied when `clip_grad` is set.
    pub clip_grad: bool,
    pub grad_clip: f64,
    pub use_nfa: bool,
    pub use_cfd: bool,
    pub use_syntax: bool,
    pub diff_sub: bool,
    /// Sample ids `0..train_samples` form the training split and the next
    /// `val_samples` ids the validation split.
    pub train_samples: u64,
    pub val_samples: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            lr: 2e-4,
            batch_size: 16,
            epochs: 30,
            seed: 1,
            clip_grad: false,
            grad_clip: 5.0,
            use_nfa: true,
            use_cfd: true,
            use_syntax: true,
            diff_sub: false,
            train_samples: 2000,
            val_samples: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::invalid(format!("train.{key}: {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be a finite value >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.clip_grad && !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive when clipping is enabled");
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_nfa: self.use_nfa,
            use_cfd: self.use_cfd,
            diff_sub: self.diff_sub,
        }
    }

    /// The dependency weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_syntax {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.model_spec(&Vocabulary::grammar()).map(|_| ())
    }

    /// Architecture with the data-dependent sizes filled in.
    pub fn model_spec(&self, vocab: &Vocabulary) -> Result<ModelSpec> {
        ModelSpec::new(
            self.model.clone(),
            self.scene.channels,
            self.scene.grid_h,
            self.scene.grid_w,
            vocab.size(),
            vocab.tagset_size(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model.neighborhood, 3);
        assert_eq!(c.model.decoder_layers, 2);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.train.lambda, 0.01);
    }

    #[test]
    fn negative_lambda_names_key() {
        let mut c = RunConfig::default();
        c.train.lambda = -0.1;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("train.lambda"), "{e}");
    }

    #[test]
    fn unknown_key_rejected() {
        let r: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"train": {"lamda": 0.1}}"#);
        assert!(r.unwrap_err().to_string().contains("lamda"));
    }
}
