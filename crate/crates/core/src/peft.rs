//! Selective fine-tuning masks.
//!
//! The fine-tuning policy trains only: cross-attention weights (names
//! containing `.cross.`), self-attention output projections (`.self.to_out`),
//! and the last k numeric layers of the codec encoder. Everything else —
//! including the text embedding table, the perceptual extractor, and the
//! discriminator — stays frozen under the mask.

use framecast_autograd::{ParamStore, TrainMask};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PeftPolicy {
    pub train_cross_attention: bool,
    pub train_self_attention_out_proj: bool,
    /// How many trailing encoder layers of the codec to unfreeze.
    pub train_codec_last_k_layers: usize,
}

impl Default for PeftPolicy {
    fn default() -> Self {
        PeftPolicy {
            train_cross_attention: true,
            train_self_attention_out_proj: true,
            train_codec_last_k_layers: 2,
        }
    }
}

impl PeftPolicy {
    pub fn enables_anything(&self) -> bool {
        self.train_cross_attention
            || self.train_self_attention_out_proj
            || self.train_codec_last_k_layers > 0
    }
}

/// Builds the trainability mask for a fine-tuning run.
pub fn peft_mask(store: &ParamStore, codec: &Codec, policy: &PeftPolicy) -> Result<TrainMask> {
    if !policy.enables_anything() {
        return Err(CoreError::invalid(
            "peft_mask",
            "fine-tuning requested but the policy enables no parameters",
        ));
    }
    let first_trainable_layer = codec
        .num_encoder_layers()
        .saturating_sub(policy.train_codec_last_k_layers);
    let mask = TrainMask::from_predicate(store, |name| {
        if policy.train_cross_attention && name.contains(".cross.") {
            return true;
        }
        if policy.train_self_attention_out_proj && name.contains(".self.to_out") {
            return true;
        }
        if policy.train_codec_last_k_layers > 0 {
            if let Some(idx) = Codec::encoder_layer_index(name) {
                return idx >= first_trainable_layer;
            }
        }
        false
    });
    if mask.is_empty() {
        return Err(CoreError::invalid(
            "peft_mask",
            "policy selected zero parameters from this model",
        ));
    }
    Ok(mask)
}

/// Fraction of parameter scalars the mask marks trainable.
pub fn trainable_fraction(store: &ParamStore, mask: &TrainMask) -> f64 {
    mask.trainable_elems(store) as f64 / store.total_elems() as f64
}
