//! VQA datasets: a JSONL file of samples plus a VLTC container of
//! precomputed image embeddings next to it (`split.jsonl` → `split.vltc`).
//!
//! One JSON object per line:
//!
//! ```json
//! {"sample_id":"COCOQA-1","image_ref":"img/1","question":[4,9,2],
//!  "question_text":"what color is cat","answer_id":17,"answer_text":"brown",
//!  "category":"color"}
//! ```
//!
//! `question_text` and `answer_text` are optional. Blank lines are skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::container::{self, DType};
use crate::model::{ImageEmbedding, ModelConfig, QuestionTokens};
use crate::tensor::Tensor;
use crate::trace::TraceSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Number,
    Color,
    Location,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Object,
        Category::Number,
        Category::Color,
        Category::Location,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Number => "number",
            Category::Color => "color",
            Category::Location => "location",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "object" => Ok(Category::Object),
            "number" => Ok(Category::Number),
            "color" | "colour" => Ok(Category::Color),
            "location" => Ok(Category::Location),
            other => Err(format!(
                "unknown category `{other}` (object|number|color|location)"
            )),
        }
    }
}

/// One question about one image, with a single-token answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub sample_id: String,
    pub image_ref: String,
    pub question: Vec<u32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub question_text: String,
    pub answer_id: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub answer_text: String,
    pub category: Category,
}

impl VqaSample {
    /// Row labels for report axes: the whitespace-split question text when it
    /// lines up with the token ids, otherwise `t{i}:{id}`.
    pub fn token_labels(&self) -> Vec<String> {
        let words: Vec<&str> = self.question_text.split_whitespace().collect();
        if words.len() == self.question.len() {
            words.into_iter().map(str::to_string).collect()
        } else {
            self.question
                .iter()
                .enumerate()
                .map(|(i, id)| format!("t{i}:{id}"))
                .collect()
        }
    }
}

/// Samples plus the embeddings they reference.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<VqaSample>,
    pub embeddings: BTreeMap<String, Tensor>,
}

/// Path of the embedding container that belongs to a JSONL file.
pub fn embeddings_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("vltc")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, image_ref: &str, cfg: &ModelConfig) -> Result<ImageEmbedding> {
        let t = self
            .embeddings
            .get(image_ref)
            .ok_or_else(|| Error::Load(format!("dangling image_ref `{image_ref}`")))?;
        ImageEmbedding::new(t.clone(), cfg)
    }

    pub fn trace_sample(&self, sample: &VqaSample, cfg: &ModelConfig) -> Result<TraceSample> {
        Ok(TraceSample {
            sample_id: sample.sample_id.clone(),
            tokens: QuestionTokens::new(sample.question.clone(), cfg)?,
            image: self.image(&sample.image_ref, cfg)?,
            answer_id: sample.answer_id,
        })
    }
}

fn line_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads and validates a dataset against a model config.
pub fn load_dataset(path: &Path, cfg: &ModelConfig) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let s: VqaSample =
            serde_json::from_str(line).map_err(|e| line_error(path, lineno, e.to_string()))?;
        if !seen.insert(s.sample_id.clone()) {
            return Err(line_error(path, lineno, format!("duplicate sample_id `{}`", s.sample_id)));
        }
        QuestionTokens::new(s.question.clone(), cfg)
            .map_err(|e| line_error(path, lineno, e.to_string()))?;
        if s.answer_id as usize >= cfg.vocab_size {
            return Err(line_error(
                path,
                lineno,
                format!("answer_id {} >= vocab_size {}", s.answer_id, cfg.vocab_size),
            ));
        }
        samples.push(s);
        lines.push(lineno);
    }
    if samples.is_empty() {
        return Ok(Dataset::default());
    }

    let emb_path = embeddings_path(path);
    let embeddings = container::read(&emb_path)?;
    for (s, lineno) in samples.iter().zip(lines) {
        let t = embeddings.get(&s.image_ref).ok_or_else(|| {
            line_error(
                path,
                lineno,
                format!("dangling image_ref `{}` (not in {})", s.image_ref, emb_path.display()),
            )
        })?;
        if t.shape() != [cfg.num_patches, cfg.hidden_dim] {
            return Err(line_error(
                path,
                lineno,
                format!(
                    "embedding `{}` has shape {:?}, expected [{}, {}]",
                    s.image_ref,
                    t.shape(),
                    cfg.num_patches,
                    cfg.hidden_dim
                ),
            ));
        }
    }
    Ok(Dataset {
        samples,
        embeddings,
    })
}

/// Writes `path` (JSONL) and its sibling embedding container.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut text = String::new();
    for s in &dataset.samples {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    crate::io::write_atomic(path, text.as_bytes())?;
    container::write(
        &embeddings_path(path),
        dataset.embeddings.iter().map(|(n, t)| (n.as_str(), t)),
        DType::F64,
    )
}

/// Partitions samples by category, keeping input order within each bucket.
/// All four categories are always present.
pub fn split_by_category(samples: &[VqaSample]) -> BTreeMap<Category, Vec<VqaSample>> {
    let mut out: BTreeMap<Category, Vec<VqaSample>> =
        Category::ALL.iter().map(|&c| (c, Vec::new())).collect();
    for s in samples {
        out.get_mut(&s.category).expect("all categories present").push(s.clone());
    }
    out
}
