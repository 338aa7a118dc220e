//! BLIP-style VQA model: a question encoder that cross-attends to image patch
//! embeddings, and a causal answer decoder that cross-attends to the encoder
//! output.
//!
//! Every block is post-norm:
//!
//! ```text
//! h = LN(x + SelfAttn(x))
//! h = LN(h + CrossAttn(h, context))
//! h = LN(h + FFN(h))          <- hook point for (layer, token)
//! ```
//!
//! Encoder context is the image embedding; decoder context is the encoder
//! output. Token inputs are `LN(token_embed + pos_embed)`.

pub mod config;
pub mod container;
pub mod manifest;
pub mod weights;

pub use config::ModelConfig;
pub use weights::WeightStore;

use crate::error::{Error, Result};
use crate::hooks::{HookTap, StateAddress, TapAction};
use crate::tensor::{gelu, layer_norm, linear, softmax_in_place, Tensor};
use weights::{layer_prefix, Stack};

/// Question token ids, validated against a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTokens(Vec<u32>);

impl QuestionTokens {
    pub fn new(ids: Vec<u32>, cfg: &ModelConfig) -> Result<Self> {
        check_tokens(&ids, cfg, "question")?;
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_tokens(ids: &[u32], cfg: &ModelConfig, what: &str) -> Result<()> {
    if ids.is_empty() || ids.len() > cfg.max_question_len {
        return Err(Error::Shape(format!(
            "{what} length {} outside 1..={}",
            ids.len(),
            cfg.max_question_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "{what} token id {bad} >= vocab_size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Image patch embeddings of shape `(num_patches, hidden_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding(Tensor);

impl ImageEmbedding {
    pub fn new(tensor: Tensor, cfg: &ModelConfig) -> Result<Self> {
        if tensor.shape() != [cfg.num_patches, cfg.hidden_dim] {
            return Err(Error::Shape(format!(
                "image embedding has shape {:?}, expected [{}, {}]",
                tensor.shape(),
                cfg.num_patches,
                cfg.hidden_dim
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::Parameter("image embedding contains non-finite values".into()));
        }
        Ok(Self(tensor))
    }

    pub(crate) fn from_tensor_unchecked(tensor: Tensor) -> Self {
        Self(tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_patches(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub(crate) fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        self.0.row_mut(i)
    }
}

/// Probabilities over the vocabulary at the answer position.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution(Vec<f64>);

impl AnswerDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, id: u32) -> Result<f64> {
        self.0.get(id as usize).copied().ok_or_else(|| {
            Error::Parameter(format!("answer id {id} >= vocab_size {}", self.0.len()))
        })
    }

    /// Most probable id; ties go to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Softmax of the final row of `logits`, indexed at `answer_id`.
pub fn answer_probability(logits: &Tensor, answer_id: u32) -> Result<f64> {
    let last = logits.rows().checked_sub(1).ok_or_else(|| Error::Shape("empty logits".into()))?;
    AnswerDistribution::from_logits(logits.row(last)).prob(answer_id)
}

/// Validated config + weights.
#[derive(Debug, Clone)]
pub struct VlModel {
    config: ModelConfig,
    weights: WeightStore,
}

impl VlModel {
    pub fn new(config: ModelConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    /// Model with random weights (see [`WeightStore::random`]).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = WeightStore::random(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    /// Mutable weight access for building rigged fixtures. Shapes are
    /// re-validated by [`VlModel::new`] only, so keep them unchanged.
    pub fn weights_mut(&mut self) -> &mut WeightStore {
        &mut self.weights
    }

    fn w(&self, name: &str) -> &Tensor {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("validated weight store lost `{name}`"))
    }

    fn embed(&self, ids: &[u32], stack: Stack) -> Result<Tensor> {
        let h = self.config.hidden_dim;
        let table = self.w("embed.tokens");
        let pos = self.w(&format!("{}.pos_embed", stack.prefix()));
        let mut x = Tensor::zeros(vec![ids.len(), h]);
        for (t, &id) in ids.iter().enumerate() {
            let row = x.row_mut(t);
            for ((v, e), p) in row.iter_mut().zip(table.row(id as usize)).zip(pos.row(t)) {
                *v = e + p;
            }
        }
        let p = stack.prefix();
        layer_norm(
            &x,
            self.w(&format!("{p}.embed_ln.gain")),
            self.w(&format!("{p}.embed_ln.bias")),
            self.config.layer_norm_epsilon,
        )
    }

    fn attention(&self, x: &Tensor, ctx: &Tensor, prefix: &str, causal: bool) -> Result<Tensor> {
        let q = linear(x, self.w(&format!("{prefix}.q_proj.weight")), self.w(&format!("{prefix}.q_proj.bias")))?;
        let k = linear(ctx, self.w(&format!("{prefix}.k_proj.weight")), self.w(&format!("{prefix}.k_proj.bias")))?;
        let v = linear(ctx, self.w(&format!("{prefix}.v_proj.weight")), self.w(&format!("{prefix}.v_proj.bias")))?;
        let (n, m) = (q.rows(), k.rows());
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(vec![n, self.config.hidden_dim]);
        let mut scores = vec![0.0; m];
        for head in 0..self.config.num_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let visible = if causal { i + 1 } else { m };
                let qi = &q.row(i)[cols.clone()];
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..visible]);
                let oi = &mut out.row_mut(i)[cols.clone()];
                for (j, &a) in scores[..visible].iter().enumerate() {
                    let vj = &v.row(j)[cols.clone()];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
        linear(&out, self.w(&format!("{prefix}.o_proj.weight")), self.w(&format!("{prefix}.o_proj.bias")))
    }

    fn add_norm(&self, residual: &Tensor, update: &Tensor, prefix: &str) -> Result<Tensor> {
        layer_norm(
            &residual.add(update)?,
            self.w(&format!("{prefix}.ln.gain")),
            self.w(&format!("{prefix}.ln.bias")),
            self.config.layer_norm_epsilon,
        )
    }

    fn block(&self, x: &Tensor, ctx: &Tensor, stack: Stack, layer: usize) -> Result<Tensor> {
        let lp = layer_prefix(stack, layer);
        let causal = stack == Stack::Decoder;
        let sa = format!("{lp}.self_attn");
        let h = self.add_norm(x, &self.attention(x, x, &sa, causal)?, &sa)?;
        let ca = format!("{lp}.cross_attn");
        let h = self.add_norm(&h, &self.attention(&h, ctx, &ca, false)?, &ca)?;
        let up = linear(&h, self.w(&format!("{lp}.ffn.up.weight")), self.w(&format!("{lp}.ffn.up.bias")))?;
        let down = linear(&gelu(&up), self.w(&format!("{lp}.ffn.down.weight")), self.w(&format!("{lp}.ffn.down.bias")))?;
        self.add_norm(&h, &down, &format!("{lp}.ffn"))
    }

    fn run_stack(
        &self,
        ids: &[u32],
        ctx: &Tensor,
        stack: Stack,
        mut tap: Option<&mut dyn HookTap>,
    ) -> Result<Tensor> {
        let layers = match stack {
            Stack::Encoder => self.config.enc_layers,
            Stack::Decoder => self.config.dec_layers,
        };
        let mut x = self.embed(ids, stack)?;
        for layer in 0..layers {
            x = self.block(&x, ctx, stack, layer)?;
            if let Some(tap) = tap.as_deref_mut() {
                for token in 0..ids.len() {
                    let addr = match stack {
                        Stack::Encoder => StateAddress::Encoder { layer, token },
                        Stack::Decoder => StateAddress::Decoder { layer, token },
                    };
                    if let TapAction::Replace(v) = tap.on_state(addr, x.row(token))? {
                        if v.len() != self.config.hidden_dim {
                            return Err(Error::Intervention(format!(
                                "replacement for {addr} has length {}, expected {}",
                                v.len(),
                                self.config.hidden_dim
                            )));
                        }
                        x.row_mut(token).copy_from_slice(&v);
                    }
                }
            }
        }
        Ok(x)
    }

    /// Question encoder: `(question_len, hidden_dim)` image-conditioned states.
    pub fn encode_question(
        &self,
        tokens: &QuestionTokens,
        image: &ImageEmbedding,
        tap: Option<&mut dyn HookTap>,
    ) -> Result<Tensor> {
        check_tokens(tokens.ids(), &self.config, "question")?;
        if image.tensor().shape() != [self.config.num_patches, self.config.hidden_dim] {
            return Err(Error::Shape(format!(
                "image embedding shape {:?} does not match config",
                image.tensor().shape()
            )));
        }
        self.run_stack(tokens.ids(), image.tensor(), Stack::Encoder, tap)
    }

    /// Answer decoder: logits `(decoder_len, vocab_size)`.
    pub fn decode_answer(
        &self,
        encoder_out: &Tensor,
        decoder_tokens: &[u32],
        tap: Option<&mut dyn HookTap>,
    ) -> Result<Tensor> {
        if encoder_out.rank() != 2 || encoder_out.cols() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "encoder output shape {:?} does not have hidden_dim {}",
                encoder_out.shape(),
                self.config.hidden_dim
            )));
        }
        check_tokens(decoder_tokens, &self.config, "decoder prompt")?;
        let h = self.run_stack(decoder_tokens, encoder_out, Stack::Decoder, tap)?;
        linear(&h, self.w("head.weight"), self.w("head.bias"))
    }

    /// Answer distribution from an already computed encoder output.
    pub fn answer_from_encoding(
        &self,
        encoder_out: &Tensor,
        tap: Option<&mut dyn HookTap>,
    ) -> Result<AnswerDistribution> {
        let logits = self.decode_answer(encoder_out, &self.config.decoder_prompt, tap)?;
        Ok(AnswerDistribution::from_logits(logits.row(logits.rows() - 1)))
    }

    /// Full forward pass with one tap shared by both stacks.
    pub fn forward(
        &self,
        tokens: &QuestionTokens,
        image: &ImageEmbedding,
        mut tap: Option<&mut dyn HookTap>,
    ) -> Result<AnswerDistribution> {
        let enc = match tap.as_mut() {
            Some(t) => self.encode_question(tokens, image, Some(&mut **t))?,
            None => self.encode_question(tokens, image, None)?,
        };
        self.answer_from_encoding(&enc, tap)
    }

    /// Single-token greedy answer; ties go to the lowest id.
    pub fn greedy_answer(&self, tokens: &QuestionTokens, image: &ImageEmbedding) -> Result<u32> {
        Ok(self.forward(tokens, image, None)?.argmax())
    }
}

/// Replaces the listed rows of `image` with rows from `source`.
pub(crate) fn restore_patches(image: &mut ImageEmbedding, source: &ImageEmbedding, patches: &[usize]) {
    for &p in patches {
        image.patch_mut(p).copy_from_slice(source.patch(p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::borrow::Cow;
    use crate::hooks::{NoopTap, OverrideTap, RecordingTap};
    use crate::rng::{sample_normal, RngState};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_question_len: 5,
            num_patches: 4,
            decoder_prompt: vec![0, 3, 1],
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (QuestionTokens, ImageEmbedding) {
        let mut rng = RngState::new(seed);
        let q = QuestionTokens::new(vec![2, 5, 7], cfg).unwrap();
        let img = sample_normal(&mut rng, vec![cfg.num_patches, cfg.hidden_dim], 0.0, 1.0).unwrap();
        (q, ImageEmbedding::new(img, cfg).unwrap())
    }

    #[test]
    fn noop_and_recording_taps_are_transparent() {
        let cfg = tiny_config();
        let m = VlModel::random(cfg.clone(), 3).unwrap();
        let (q, img) = inputs(&cfg, 4);
        let plain = m.encode_question(&q, &img, None).unwrap();
        assert_eq!(plain, m.encode_question(&q, &img, Some(&mut NoopTap)).unwrap());
        let mut rec = RecordingTap::default();
        assert_eq!(plain, m.encode_question(&q, &img, Some(&mut rec)).unwrap());
        assert_eq!(rec.states.len(), cfg.enc_layers * q.len());
        for t in 0..q.len() {
            let addr = StateAddress::Encoder { layer: cfg.enc_layers - 1, token: t };
            assert_eq!(rec.states[&addr], plain.row(t));
        }
    }

    #[test]
    fn total_override_reproduces_reference_run() {
        let cfg = tiny_config();
        let m = VlModel::random(cfg.clone(), 3).unwrap();
        let (q, img) = inputs(&cfg, 4);
        let (_, other) = inputs(&cfg, 99);
        let mut rec = RecordingTap::default();
        let reference = m.encode_question(&q, &img, Some(&mut rec)).unwrap();
        let mut tap = OverrideTap { replacements: &rec.states };
        let overridden = m.encode_question(&q, &other, Some(&mut tap)).unwrap();
        assert_eq!(reference, overridden);
    }

    #[test]
    fn wrong_length_replacement_is_an_intervention_error() {
        struct Bad;
        impl HookTap for Bad {
            fn on_state(&mut self, _: StateAddress, _: &[f64]) -> Result<TapAction<'_>> {
                Ok(TapAction::Replace(Cow::Owned(vec![0.0; 3])))
            }
        }
        let cfg = tiny_config();
        let m = VlModel::random(cfg.clone(), 3).unwrap();
        let (q, img) = inputs(&cfg, 4);
        assert!(matches!(
            m.encode_question(&q, &img, Some(&mut Bad)),
            Err(Error::Intervention(_))
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = tiny_config();
        let m = VlModel::random(cfg.clone(), 8).unwrap();
        let (q, img) = inputs(&cfg, 9);
        let enc = m.encode_question(&q, &img, None).unwrap();
        let a = m.decode_answer(&enc, &[1, 2, 3, 4], None).unwrap();
        let b = m.decode_answer(&enc, &[1, 2, 9, 4], None).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn answer_probability_cases() {
        let uniform = Tensor::zeros(vec![2, 5]);
        assert!((answer_probability(&uniform, 3).unwrap() - 0.2).abs() < 1e-15);
        let mut peaked = Tensor::zeros(vec![1, 5]);
        peaked.data_mut()[2] = 50.0;
        assert!(answer_probability(&peaked, 2).unwrap() >= 1.0 - 1e-9);
        assert!(matches!(answer_probability(&peaked, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn argmax_tie_goes_to_lowest_id() {
        let mut logits = vec![0.0; 12];
        logits[3] = 2.0;
        logits[9] = 2.0;
        assert_eq!(AnswerDistribution::from_logits(&logits).argmax(), 3);
        logits[7] = 5.0;
        assert_eq!(AnswerDistribution::from_logits(&logits).argmax(), 7);
    }

    #[test]
    fn input_validation() {
        let cfg = tiny_config();
        assert!(QuestionTokens::new(vec![], &cfg).is_err());
        assert!(QuestionTokens::new(vec![11], &cfg).is_err());
        assert!(QuestionTokens::new(vec![0; 6], &cfg).is_err());
        assert!(ImageEmbedding::new(Tensor::zeros(vec![3, 8]), &cfg).is_err());
    }
}
