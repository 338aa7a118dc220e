//! Multi-sample, multi-noise-level trace sweeps.
//!
//! Output tree under `out_dir`:
//!
//! ```text
//! index.json                              sweep config, sample list, file list
//! grids/<sample>/nu<ν>.<component>.json   per-sample Γ grid
//! grids/<sample>/nu<ν>.runs.json          per-run probabilities behind that grid
//! mean/nu<ν>.<component>.json             cross-sample mean grid
//! curve.csv                               nu,component,gamma_avg,n_cells,n_degenerate
//! ```
//!
//! Samples are the first `samples` entries of the dataset. Per-sample files
//! are written first; mean grids and the curve are then folded from the
//! files on disk. Nothing time-dependent is written unless `stamp` is set.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, VqaSample};
use crate::hooks::Component;
use crate::io::write_atomic;
use crate::metrics::{gamma_of_nu, GammaGrid};
use crate::model::{ModelConfig, VlModel};
use crate::report::curve::{self, CurveRow};
use crate::trace::{trace_grid, CorruptionMode, RunRecord, TraceSettings};

/// Noise levels swept by default, spanning 0.1 to 30.
pub const DEFAULT_NU_GRID: [f64; 8] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0];
/// Noise level used for single-level traces.
pub const DEFAULT_NU: f64 = 5.0;
pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub nu_values: Vec<f64>,
    pub samples: usize,
    pub runs_per_sample: usize,
    pub components: Vec<Component>,
    pub mode: CorruptionMode,
    pub base_seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
    /// Worker thread cap; `None` uses rayon's default.
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            nu_values: DEFAULT_NU_GRID.to_vec(),
            samples: DEFAULT_SAMPLES,
            runs_per_sample: DEFAULT_RUNS,
            components: vec![Component::Encoder, Component::Decoder],
            mode: CorruptionMode::Scalar,
            base_seed: 0,
            out_dir: PathBuf::from("trace-out"),
            threads: None,
            stamp: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Parameter("samples must be >= 1".into()));
        }
        if self.runs_per_sample == 0 {
            return Err(Error::Parameter("runs must be >= 1".into()));
        }
        if self.nu_values.is_empty() {
            return Err(Error::Parameter("at least one noise level is required".into()));
        }
        for &nu in &self.nu_values {
            if nu == 0.0 {
                return Err(Error::Parameter(
                    "nu = 0 is excluded: with no noise the clean and corrupted runs coincide, \
                     so every cell is degenerate"
                        .into(),
                ));
            }
            if !(nu.is_finite() && nu > 0.0) {
                return Err(Error::Parameter(format!("noise level {nu} must be finite and > 0")));
            }
        }
        let mut seen = Vec::new();
        for &c in &self.components {
            if c == Component::ImageEmbedding {
                return Err(Error::Parameter("components must be encoder and/or decoder".into()));
            }
            if seen.contains(&c) {
                return Err(Error::Parameter(format!("component {c} listed twice")));
            }
            seen.push(c);
        }
        if seen.is_empty() {
            return Err(Error::Parameter("no components selected".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("thread count must be positive".into()));
        }
        Ok(())
    }
}

pub fn nu_key(nu: f64) -> String {
    format!("nu{nu}")
}

/// File-system-safe form of a sample id.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub fn grid_file(sample_id: &str, nu: f64, component: Component) -> String {
    format!("grids/{}/{}.{}.json", sanitize_id(sample_id), nu_key(nu), component)
}

pub fn runs_file(sample_id: &str, nu: f64) -> String {
    format!("grids/{}/{}.runs.json", sanitize_id(sample_id), nu_key(nu))
}

pub fn mean_file(nu: f64, component: Component) -> String {
    format!("mean/{}.{}.json", nu_key(nu), component)
}

pub const CURVE_FILE: &str = "curve.csv";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateEntry {
    pub sample_id: String,
    pub nu: f64,
    pub component: Component,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub grids: Vec<String>,
    pub runs: Vec<String>,
}

/// Contents of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub format: String,
    pub sweep: SweepConfig,
    pub model: ModelConfig,
    pub samples: Vec<SampleEntry>,
    pub mean_grids: Vec<String>,
    pub curve: String,
    /// (sample, ν, component) triples whose grid has no numeric cell.
    pub degenerate: Vec<DegenerateEntry>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub out_dir: PathBuf,
    pub index: SweepIndex,
    pub mean_grids: Vec<GammaGrid>,
    pub curve: Vec<CurveRow>,
}

/// Per-run probabilities as persisted next to a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsFile {
    pub sample_id: String,
    pub nu: f64,
    pub answer_id: u32,
    pub runs: Vec<RunRecord>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn decoder_labels(cfg: &ModelConfig) -> Vec<String> {
    cfg.decoder_prompt
        .iter()
        .enumerate()
        .map(|(i, id)| format!("a{i}:{id}"))
        .collect()
}

fn trace_sample(
    model: &VlModel,
    dataset: &Dataset,
    sample: &VqaSample,
    sweep: &SweepConfig,
) -> Result<(SampleEntry, Vec<DegenerateEntry>)> {
    let ts = dataset.trace_sample(sample, model.config())?;
    let mut entry = SampleEntry {
        sample_id: sample.sample_id.clone(),
        grids: Vec::new(),
        runs: Vec::new(),
    };
    let mut degenerate = Vec::new();
    for &nu in &sweep.nu_values {
        let settings = TraceSettings {
            nu,
            runs: sweep.runs_per_sample,
            base_seed: sweep.base_seed,
            mode: sweep.mode,
            components: sweep.components.clone(),
        };
        let outcome = trace_grid(model, &ts, &settings)?;
        for &component in &sweep.components {
            let mut grid = outcome.grid(component).expect("requested component traced").clone();
            grid.meta.token_labels = match component {
                Component::Decoder => decoder_labels(model.config()),
                _ => sample.token_labels(),
            };
            if grid.all_degenerate() {
                degenerate.push(DegenerateEntry {
                    sample_id: sample.sample_id.clone(),
                    nu,
                    component,
                });
            }
            let rel = grid_file(&sample.sample_id, nu, component);
            write_json(&sweep.out_dir.join(&rel), &grid)?;
            entry.grids.push(rel);
        }
        let rel = runs_file(&sample.sample_id, nu);
        let runs = RunsFile {
            sample_id: sample.sample_id.clone(),
            nu,
            answer_id: sample.answer_id,
            runs: outcome.runs,
        };
        write_json(&sweep.out_dir.join(&rel), &runs)?;
        entry.runs.push(rel);
    }
    Ok((entry, degenerate))
}

/// Traces the first `sweep.samples` samples at every noise level and writes
/// the result tree. Output is a pure function of (model, dataset, sweep).
pub fn run_trace_sweep(model: &VlModel, sweep: &SweepConfig, dataset: &Dataset) -> Result<SweepResult> {
    sweep.validate()?;
    if dataset.len() < sweep.samples {
        return Err(Error::Parameter(format!(
            "sweep wants {} samples but the dataset has {}",
            sweep.samples,
            dataset.len()
        )));
    }
    let chosen = &dataset.samples[..sweep.samples];
    let mut names = std::collections::HashSet::new();
    for s in chosen {
        if !names.insert(sanitize_id(&s.sample_id)) {
            return Err(Error::Parameter(format!(
                "sample id `{}` collides with another after sanitising for file names",
                s.sample_id
            )));
        }
    }

    let work = || -> Result<Vec<(SampleEntry, Vec<DegenerateEntry>)>> {
        chosen
            .par_iter()
            .map(|s| trace_sample(model, dataset, s, sweep))
            .collect()
    };
    let per_sample = match sweep.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(format!("cannot build thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut samples = Vec::with_capacity(per_sample.len());
    let mut degenerate = Vec::new();
    for (entry, deg) in per_sample {
        samples.push(entry);
        degenerate.extend(deg);
    }

    let mut mean_grids = Vec::new();
    let mut mean_files = Vec::new();
    let mut curve_rows = Vec::new();
    for &nu in &sweep.nu_values {
        for &component in &sweep.components {
            let grids: Vec<GammaGrid> = chosen
                .iter()
                .map(|s| read_json(&sweep.out_dir.join(grid_file(&s.sample_id, nu, component))))
                .collect::<Result<_>>()?;
            let mut mean = GammaGrid::mean_of(&grids)?;
            if grids.iter().any(|g| g.meta.token_labels != mean.meta.token_labels) {
                mean.meta.token_labels = (0..mean.tokens).map(|t| format!("t{t}")).collect();
            }
            let rel = mean_file(nu, component);
            write_json(&sweep.out_dir.join(&rel), &mean)?;
            mean_files.push(rel);
            mean_grids.push(mean);

            curve_rows.push(match gamma_of_nu(&grids) {
                Ok(point) => CurveRow::from(&point),
                Err(Error::Degenerate(_)) => {
                    let n_cells = grids.iter().map(|g| g.layers * g.tokens).sum();
                    CurveRow {
                        nu,
                        component,
                        gamma_avg: None,
                        n_cells,
                        n_degenerate: n_cells,
                    }
                }
                Err(e) => return Err(e),
            });
        }
    }
    write_atomic(&sweep.out_dir.join(CURVE_FILE), curve::to_csv(&curve_rows).as_bytes())?;

    // Run-local settings stay out of the index so it matches its file form.
    let echoed = SweepConfig {
        out_dir: PathBuf::new(),
        threads: None,
        ..sweep.clone()
    };
    let index = SweepIndex {
        format: "patchtrace-sweep/1".into(),
        sweep: echoed,
        model: model.config().clone(),
        samples,
        mean_grids: mean_files,
        curve: CURVE_FILE.into(),
        degenerate,
    };
    write_json(&sweep.out_dir.join(INDEX_FILE), &index)?;
    Ok(SweepResult {
        out_dir: sweep.out_dir.clone(),
        index,
        mean_grids,
        curve: curve_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_zero_noise_with_reason() {
        let cfg = SweepConfig {
            nu_values: vec![0.1, 0.0],
            ..SweepConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("degenerate"), "{msg}");
        for bad in [
            SweepConfig { samples: 0, ..SweepConfig::default() },
            SweepConfig { runs_per_sample: 0, ..SweepConfig::default() },
            SweepConfig { nu_values: vec![-1.0], ..SweepConfig::default() },
            SweepConfig { components: vec![], ..SweepConfig::default() },
            SweepConfig { components: vec![Component::ImageEmbedding], ..SweepConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        SweepConfig::default().validate().unwrap();
    }

    #[test]
    fn file_names() {
        assert_eq!(sanitize_id("COCOQA-ID458864"), "COCOQA-ID458864");
        assert_eq!(sanitize_id("a/b c"), "a_b_c");
        assert_eq!(grid_file("x", 0.1, Component::Encoder), "grids/x/nu0.1.encoder.json");
        assert_eq!(mean_file(5.0, Component::Decoder), "mean/nu5.decoder.json");
    }
}
