//! Small deterministic models, samples and a demo bundle for tests,
//! benchmarks and `patchtrace init-demo`.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::dataset::{write_dataset, Category, Dataset, VqaSample};
use crate::model::container::DType;
use crate::model::manifest::save_model;
use crate::model::weights::{layer_prefix, Stack};
use crate::model::{ImageEmbedding, ModelConfig, QuestionTokens, VlModel};
use crate::rng::{derive_seed, sample_normal, RngState};
use crate::tensor::Tensor;
use crate::trace::TraceSample;

/// Two encoder and two decoder layers, 3-token questions.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        num_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        ffn_dim: 16,
        vocab_size: 13,
        max_question_len: 3,
        num_patches: 4,
        decoder_prompt: vec![0, 1],
        ..ModelConfig::default()
    }
}

/// Image embedding with N(0, 1) entries.
pub fn random_image(cfg: &ModelConfig, seed: u64) -> Result<ImageEmbedding> {
    let mut rng = RngState::new(seed);
    let t = sample_normal(&mut rng, vec![cfg.num_patches, cfg.hidden_dim], 0.0, 1.0)?;
    ImageEmbedding::new(t, cfg)
}

/// `len` token ids drawn uniformly from the vocabulary.
pub fn random_question(cfg: &ModelConfig, len: usize, seed: u64) -> Result<QuestionTokens> {
    let mut rng = RngState::new(seed);
    let ids = (0..len)
        .map(|_| (rng.next_uniform() * cfg.vocab_size as f64) as u32 % cfg.vocab_size as u32)
        .collect();
    QuestionTokens::new(ids, cfg)
}

/// Random [`tiny_config`] model plus one full-length sample whose answer is
/// the model's own greedy prediction.
pub fn tiny_trace_fixture(seed: u64) -> (VlModel, TraceSample) {
    let cfg = tiny_config();
    let model = VlModel::random(cfg.clone(), seed).expect("tiny config is valid");
    let sample = sample_for(&model, &format!("tiny-{seed}"), seed).expect("tiny sample is valid");
    (model, sample)
}

/// A full-length random sample for `model`, answered by its greedy prediction.
pub fn sample_for(model: &VlModel, sample_id: &str, seed: u64) -> Result<TraceSample> {
    let cfg = model.config();
    let tokens = random_question(cfg, cfg.max_question_len, derive_seed(seed, "question", 0))?;
    let image = random_image(cfg, derive_seed(seed, "image", 0))?;
    let answer_id = model.greedy_answer(&tokens, &image)?;
    Ok(TraceSample {
        sample_id: sample_id.to_string(),
        tokens,
        image,
        answer_id,
    })
}

/// Makes the output head ignore its input and always favour `answer_id`.
pub fn rig_head(model: &mut VlModel, answer_id: u32) {
    let cfg = model.config().clone();
    let w = model.weights_mut();
    w.insert("head.weight", Tensor::zeros(vec![cfg.hidden_dim, cfg.vocab_size]));
    let mut bias = Tensor::zeros(vec![cfg.vocab_size]);
    bias.data_mut()[answer_id as usize] = 10.0;
    w.insert("head.bias", bias);
}

/// Zeroes the encoder cross-attention output projection in every layer but
/// the last, so the image reaches the encoder only through its final layer.
/// Earlier encoder states then do not depend on the image at all.
pub fn isolate_image_to_final_encoder_layer(model: &mut VlModel) {
    let cfg = model.config().clone();
    let w = model.weights_mut();
    for l in 0..cfg.enc_layers.saturating_sub(1) {
        let p = format!("{}.cross_attn.o_proj", layer_prefix(Stack::Encoder, l));
        w.insert(format!("{p}.weight"), Tensor::zeros(vec![cfg.hidden_dim, cfg.hidden_dim]));
        w.insert(format!("{p}.bias"), Tensor::zeros(vec![cfg.hidden_dim]));
    }
}

const FUNCTION_WORDS: [&str; 12] = [
    "<answer>", "<sep>", "what", "color", "is", "the", "how", "many", "are", "there", "where", "on",
];
const COLORS: [&str; 10] = [
    "red", "orange", "yellow", "green", "blue", "purple", "brown", "black", "white", "gray",
];
const OBJECTS: [&str; 12] = [
    "cat", "dog", "bus", "car", "bird", "horse", "plate", "chair", "kite", "train", "boat", "man",
];
const NUMBERS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];
const LOCATIONS: [&str; 6] = ["kitchen", "street", "beach", "field", "table", "room"];

/// Word list for the demo vocabulary; ids past the named words are `w<id>`.
pub fn demo_vocab(vocab_size: usize) -> Vec<String> {
    let mut words: Vec<String> = FUNCTION_WORDS
        .iter()
        .chain(&COLORS)
        .chain(&OBJECTS)
        .chain(&NUMBERS)
        .chain(&LOCATIONS)
        .map(|s| s.to_string())
        .collect();
    while words.len() < vocab_size {
        words.push(format!("w{}", words.len()));
    }
    words.truncate(vocab_size);
    words
}

/// Paths written by [`write_demo`].
#[derive(Debug, Clone)]
pub struct DemoBundle {
    pub manifest: PathBuf,
    pub dataset: PathBuf,
}

/// Writes a random desk-scale model and an `n`-sample dataset into `dir`:
/// `model.json` + `model.vltc`, `demo.jsonl` + `demo.vltc`.
///
/// Categories cycle color, object, number, location. Color answers are the
/// model's greedy prediction, so the color split scores 100%; the other
/// categories use fixed answer words.
pub fn write_demo(dir: &Path, n: usize, seed: u64) -> Result<DemoBundle> {
    let cfg = ModelConfig::default();
    let model = VlModel::random(cfg.clone(), seed)?;
    let vocab = demo_vocab(cfg.vocab_size);
    let id = |w: &str| vocab.iter().position(|v| v == w).expect("word in demo vocab") as u32;

    let mut dataset = Dataset::default();
    for i in 0..n {
        let obj = OBJECTS[i % OBJECTS.len()];
        let category = [Category::Color, Category::Object, Category::Number, Category::Location][i % 4];
        let words: Vec<&str> = match category {
            Category::Color => vec!["what", "color", "is", "the", obj],
            Category::Object => vec!["what", "is", "on", "the", LOCATIONS[i % LOCATIONS.len()]],
            Category::Number => vec!["how", "many", obj, "are", "there"],
            Category::Location => vec!["where", "is", "the", obj],
        };
        let question: Vec<u32> = words.iter().map(|w| id(w)).collect();
        let image_ref = format!("img{i:04}");
        let image = random_image(&cfg, derive_seed(seed, &image_ref, 0))?;
        let answer_id = match category {
            // Filled in below from the stored model.
            Category::Color => 0,
            Category::Object => id(obj),
            Category::Number => id(NUMBERS[i % NUMBERS.len()]),
            Category::Location => id(LOCATIONS[i % LOCATIONS.len()]),
        };
        dataset.embeddings.insert(image_ref.clone(), image.into_tensor());
        dataset.samples.push(VqaSample {
            sample_id: format!("demo-{i:04}"),
            image_ref,
            question,
            question_text: words.join(" "),
            answer_id,
            answer_text: vocab[answer_id as usize].clone(),
            category,
        });
    }
    let manifest = save_model(&model, dir, "model", DType::F32)?;
    // Reload so the dataset's greedy answers match the f32-rounded weights.
    let stored = crate::model::manifest::load_model(&manifest)?;
    for s in dataset.samples.iter_mut().filter(|s| s.category == Category::Color) {
        let image = dataset.embeddings[&s.image_ref].clone();
        s.answer_id = stored.greedy_answer(
            &QuestionTokens::new(s.question.clone(), &cfg)?,
            &ImageEmbedding::new(image, &cfg)?,
        )?;
        s.answer_text = vocab[s.answer_id as usize].clone();
    }
    let dataset_path = dir.join("demo.jsonl");
    write_dataset(&dataset_path, &dataset)?;
    Ok(DemoBundle {
        manifest,
        dataset: dataset_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_fixture_is_deterministic_and_self_consistent() {
        let (m1, s1) = tiny_trace_fixture(9);
        let (m2, s2) = tiny_trace_fixture(9);
        assert_eq!(m1.weights().iter().count(), m2.weights().iter().count());
        assert_eq!(s1.tokens, s2.tokens);
        assert_eq!(s1.image, s2.image);
        assert_eq!(s1.answer_id, m1.greedy_answer(&s1.tokens, &s1.image).unwrap());
        assert_eq!(s1.tokens.len(), 3);
    }

    #[test]
    fn rigged_head_always_answers_target() {
        let (mut m, s) = tiny_trace_fixture(2);
        rig_head(&mut m, 7);
        assert_eq!(m.greedy_answer(&s.tokens, &s.image).unwrap(), 7);
        let other = random_image(m.config(), 99).unwrap();
        assert_eq!(m.greedy_answer(&s.tokens, &other).unwrap(), 7);
    }

    #[test]
    fn demo_vocab_has_requested_size() {
        let v = demo_vocab(512);
        assert_eq!(v.len(), 512);
        assert_eq!(v[0], "<answer>");
        assert_eq!(v[511], "w511");
    }
}
