use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub d_model: usize,
    /// Phoneme vocabulary size `V_p`.
    pub vocab_size: usize,
    /// Codebook size `K`.
    pub num_units: usize,
    /// Input video feature dimension `d_v`.
    pub video_dim: usize,
    pub text_blocks: usize,
    pub video_blocks: usize,
    pub predictor_blocks: usize,
    pub attention_heads: usize,
    /// Hidden width of the convolutional feed-forward sublayer; `4 * d_model` when unset.
    pub conv_filter_size: Option<usize>,
    pub conv_kernel_sizes: [usize; 2],
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            vocab_size: 40,
            num_units: 100,
            video_dim: 32,
            text_blocks: 4,
            video_blocks: 2,
            predictor_blocks: 1,
            attention_heads: 2,
            conv_filter_size: None,
            conv_kernel_sizes: [9, 1],
            dropout: 0.1,
            max_seq_len: 1024,
        }
    }
}

impl ModelConfig {
    pub fn filter_size(&self) -> usize {
        self.conv_filter_size.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(format!("model config: {m}")));
        for (name, v) in [
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("num_units", self.num_units),
            ("video_dim", self.video_dim),
            ("text_blocks", self.text_blocks),
            ("video_blocks", self.video_blocks),
            ("predictor_blocks", self.predictor_blocks),
            ("attention_heads", self.attention_heads),
            ("conv_filter_size", self.filter_size()),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v < 1 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.attention_heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.attention_heads
            ));
        }
        if self.conv_kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return fail("convolution kernel sizes must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}
