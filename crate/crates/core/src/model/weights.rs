//! Named weight tensors and the canonical naming scheme.
//!
//! Linear layers compute `y = x · W + b` with `W` stored as `(in, out)`.
//!
//! | name                                   | shape                 |
//! |----------------------------------------|-----------------------|
//! | `embed.tokens`                         | (vocab, hidden)       |
//! | `{enc,dec}.pos_embed`                  | (max_q_len, hidden)   |
//! | `{enc,dec}.embed_ln.{gain,bias}`       | (hidden)              |
//! | `{s}.L{l}.{attn}.{q,k,v,o}_proj.weight` | (hidden, hidden)     |
//! | `{s}.L{l}.{attn}.{q,k,v,o}_proj.bias`  | (hidden)              |
//! | `{s}.L{l}.{attn}.ln.{gain,bias}`       | (hidden)              |
//! | `{s}.L{l}.ffn.up.weight` / `.bias`     | (hidden, ffn) / (ffn) |
//! | `{s}.L{l}.ffn.down.weight` / `.bias`   | (ffn, hidden) / (hidden) |
//! | `{s}.L{l}.ffn.ln.{gain,bias}`          | (hidden)              |
//! | `head.weight` / `head.bias`            | (hidden, vocab) / (vocab) |
//!
//! where `{s}` is `enc` or `dec` and `{attn}` is `self_attn` or `cross_attn`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::{sample_normal, RngState};
use crate::tensor::Tensor;

/// Map from canonical tensor name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Fetches a tensor and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Load(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// Checks that every required tensor is present with its expected shape.
    /// Extra tensors are reported as an error too.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let required = required_tensors(cfg);
        for (name, shape) in &required {
            self.require(name, shape)?;
        }
        if self.len() != required.len() {
            let known: std::collections::BTreeSet<&str> =
                required.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = self
                .tensors
                .keys()
                .map(String::as_str)
                .filter(|n| !known.contains(n))
                .collect();
            return Err(Error::Load(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(())
    }

    /// Random weights for experiments and fixtures. Projections are drawn
    /// from N(0, 1/fan_in), biases from N(0, 0.02²), norm gains are 1.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed);
        let mut store = Self::new();
        for (name, shape) in required_tensors(cfg) {
            let t = if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("ln.bias") {
                Tensor::zeros(shape)
            } else if shape.len() == 1 {
                sample_normal(&mut rng, shape, 0.0, 0.02)?
            } else if name == "embed.tokens" || name.ends_with("pos_embed") {
                sample_normal(&mut rng, shape, 0.0, 1.0)?
            } else {
                let fan_in = shape[0] as f64;
                sample_normal(&mut rng, shape, 0.0, fan_in.sqrt().recip())?
            };
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Which transformer stack a name belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

pub fn layer_prefix(stack: Stack, layer: usize) -> String {
    format!("{}.L{layer}", stack.prefix())
}

/// Every tensor the model needs, in canonical order, with its shape.
pub fn required_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let mut out = vec![("embed.tokens".to_string(), vec![cfg.vocab_size, h])];
    for (stack, layers) in [
        (Stack::Encoder, cfg.enc_layers),
        (Stack::Decoder, cfg.dec_layers),
    ] {
        let p = stack.prefix();
        out.push((format!("{p}.pos_embed"), vec![cfg.max_question_len, h]));
        out.push((format!("{p}.embed_ln.gain"), vec![h]));
        out.push((format!("{p}.embed_ln.bias"), vec![h]));
        for l in 0..layers {
            let lp = layer_prefix(stack, l);
            for attn in ["self_attn", "cross_attn"] {
                for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                    out.push((format!("{lp}.{attn}.{proj}.weight"), vec![h, h]));
                    out.push((format!("{lp}.{attn}.{proj}.bias"), vec![h]));
                }
                out.push((format!("{lp}.{attn}.ln.gain"), vec![h]));
                out.push((format!("{lp}.{attn}.ln.bias"), vec![h]));
            }
            out.push((format!("{lp}.ffn.up.weight"), vec![h, cfg.ffn_dim]));
            out.push((format!("{lp}.ffn.up.bias"), vec![cfg.ffn_dim]));
            out.push((format!("{lp}.ffn.down.weight"), vec![cfg.ffn_dim, h]));
            out.push((format!("{lp}.ffn.down.bias"), vec![h]));
            out.push((format!("{lp}.ffn.ln.gain"), vec![h]));
            out.push((format!("{lp}.ffn.ln.bias"), vec![h]));
        }
    }
    out.push(("head.weight".to_string(), vec![h, cfg.vocab_size]));
    out.push(("head.bias".to_string(), vec![cfg.vocab_size]));
    out
}
