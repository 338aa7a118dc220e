use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the vision-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_question_len: usize,
    pub num_patches: usize,
    #[serde(default = "default_layer_norm_epsilon")]
    pub layer_norm_epsilon: f64,
    /// Fixed decoder prompt; the answer is read at its last position.
    #[serde(default = "default_decoder_prompt")]
    pub decoder_prompt: Vec<u32>,
}

fn default_layer_norm_epsilon() -> f64 {
    1e-12
}

fn default_decoder_prompt() -> Vec<u32> {
    vec![0]
}

impl Default for ModelConfig {
    /// Desk-scale geometry: 64 wide, 4 heads, 4 + 4 layers, 16 patches.
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            ffn_dim: 256,
            vocab_size: 512,
            max_question_len: 16,
            num_patches: 16,
            layer_norm_epsilon: default_layer_norm_epsilon(),
            decoder_prompt: default_decoder_prompt(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_question_len", self.max_question_len),
            ("num_patches", self.num_patches),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Load(format!("config field {name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Load(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_epsilon.is_finite() && self.layer_norm_epsilon > 0.0) {
            return Err(Error::Load("layer_norm_epsilon must be positive".into()));
        }
        if self.decoder_prompt.is_empty() || self.decoder_prompt.len() > self.max_question_len {
            return Err(Error::Load(format!(
                "decoder_prompt length must be in 1..={}",
                self.max_question_len
            )));
        }
        if let Some(&id) = self
            .decoder_prompt
            .iter()
            .find(|&&id| id as usize >= self.vocab_size)
        {
            return Err(Error::Load(format!(
                "decoder_prompt token {id} >= vocab_size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn decoder_len(&self) -> usize {
        self.decoder_prompt.len()
    }
}
