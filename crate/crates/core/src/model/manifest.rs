//! Model manifest: a JSON file with the config fields, the relative path of
//! the tensor container and its content hash.
//!
//! ```json
//! {
//!   "hidden_dim": 64, "num_heads": 4, ...,
//!   "tensor_file": "weights.vltc",
//!   "content_hash": "sha256:…"
//! }
//! ```
//!
//! Unknown fields (exporter provenance, parity notes) are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{content_hash, write_atomic};
use crate::model::config::ModelConfig;
use crate::model::container::{self, DType};
use crate::model::weights::WeightStore;
use crate::model::VlModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub config: ModelConfig,
    pub tensor_file: String,
    pub content_hash: String,
}

/// Loads and fully validates a model from its manifest.
pub fn load_model(manifest_path: &Path) -> Result<VlModel> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let tensor_path = base.join(&manifest.tensor_file);
    let bytes = std::fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    let hash = content_hash(&bytes);
    if hash != manifest.content_hash {
        return Err(Error::Load(format!(
            "{}: content hash {hash} does not match manifest {}",
            tensor_path.display(),
            manifest.content_hash
        )));
    }
    let tensors = container::decode(&bytes)
        .map_err(|e| Error::Load(format!("{}: {e}", tensor_path.display())))?;
    let mut weights = WeightStore::new();
    for (name, t) in tensors {
        weights.insert(name, t);
    }
    VlModel::new(manifest.config, weights)
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.vltc`; returns the manifest path.
pub fn save_model(model: &VlModel, dir: &Path, stem: &str, dtype: DType) -> Result<std::path::PathBuf> {
    let tensor_file = format!("{stem}.vltc");
    let bytes = container::encode(
        model.weights().iter().map(|(n, t)| (n.as_str(), t)),
        dtype,
    )?;
    write_atomic(&dir.join(&tensor_file), &bytes)?;
    let manifest = Manifest {
        config: model.config().clone(),
        tensor_file,
        content_hash: content_hash(&bytes),
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}
