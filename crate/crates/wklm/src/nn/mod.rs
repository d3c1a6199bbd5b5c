//! Minimal transformer encoder with exact manual backpropagation.
//!
//! The encoder follows the post-layer-norm design: token + position
//! embeddings with an embedding layer norm, then per layer multi-head
//! self-attention and a GELU feed-forward block, each wrapped in a residual
//! connection and layer norm. Dropout is applied only to the final hidden
//! states, in training mode, as inverted dropout. Two heads sit on top:
//!
//! - a replacement-detection head reading the concatenated boundary-word
//!   representations of a mention span, and
//! - an MLM head projecting hidden states to vocabulary logits.
//!
//! All arithmetic is in `f64`; the analytic gradients are checked against
//! central finite differences in the test suites.

mod backward;
mod checkpoint;
mod forward;
mod params;

pub use backward::backward_instance;
pub use checkpoint::{load_checkpoint, save_checkpoint, Model};
pub use forward::{
    encode, forward_instance, mlm_log_softmax, mlm_loss, replacement_logit, replacement_loss,
    replacement_prob, sample_dropout_mask, DropoutSpec, EncodedMention, ForwardTrace,
    InstanceForward, InstanceTask, PROB_EPSILON,
};
pub use params::{LayerNormParams, LayerParams, ModelParams, ParamLayout, TensorSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("token index {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("sequence must be framed as bos ... eos")]
    BadFraming,
    #[error("degenerate mention span [{start}, {end}) in sequence of length {len}")]
    DegenerateSpan { start: usize, end: usize, len: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Encoder architecture and special-token bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub final_dropout: f64,
    pub mask_token: usize,
    pub bos_token: usize,
    pub eos_token: usize,
    pub pad_token: usize,
}

impl ModelConfig {
    /// Desk-scale config with the standard special-token bindings.
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        ff_dim: usize,
        vocab: usize,
        max_len: usize,
    ) -> Self {
        ModelConfig {
            layers,
            hidden,
            heads,
            ff_dim,
            vocab,
            max_len,
            final_dropout: 0.05,
            mask_token: MASK_ID,
            bos_token: BOS_ID,
            eos_token: EOS_ID,
            pad_token: PAD_ID,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(NnError::BadConfig(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_len < 2 {
            return Err(NnError::BadConfig(
                "layers, ff_dim must be positive and max_len >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.final_dropout) {
            return Err(NnError::BadConfig(format!(
                "final_dropout {} outside [0, 1)",
                self.final_dropout
            )));
        }
        for (name, id) in [
            ("mask_token", self.mask_token),
            ("bos_token", self.bos_token),
            ("eos_token", self.eos_token),
            ("pad_token", self.pad_token),
        ] {
            if id >= self.vocab {
                return Err(NnError::BadConfig(format!(
                    "{name} index {id} outside vocab of {}",
                    self.vocab
                )));
            }
        }
        Ok(())
    }
}
