//! Recovery metrics.
//!
//! Per state: `Γ = (p_patched − p_corrupt) / (p_clean − p_corrupt)`, left
//! unclamped. When `|p_clean − p_corrupt| < 1e-9` the cell is degenerate and
//! carries no value. The noise-level aggregate is the mean of Γ over all
//! non-degenerate cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::Component;
use crate::trace::CorruptionMode;

/// Denominators smaller than this make Γ undefined.
pub const DEGENERATE_THRESHOLD: f64 = 1e-9;

/// Answer probabilities from the clean, corrupted and patched runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTriple {
    pub p_clean: f64,
    pub p_corrupt: f64,
    pub p_patched: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Value(f64),
    Degenerate,
}

impl Gamma {
    pub fn value(self) -> Option<f64> {
        match self {
            Gamma::Value(v) => Some(v),
            Gamma::Degenerate => None,
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Gamma::Degenerate)
    }
}

/// Normalised recovery of one patched run.
pub fn gamma(triple: &RunTriple) -> Result<Gamma> {
    for (name, p) in [
        ("p_clean", triple.p_clean),
        ("p_corrupt", triple.p_corrupt),
        ("p_patched", triple.p_patched),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("{name} = {p} is not a probability")));
        }
    }
    let denom = triple.p_clean - triple.p_corrupt;
    if denom.abs() < DEGENERATE_THRESHOLD {
        return Ok(Gamma::Degenerate);
    }
    Ok(Gamma::Value((triple.p_patched - triple.p_corrupt) / denom))
}

/// Provenance carried by every grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub nu: f64,
    pub runs: usize,
    pub base_seed: u64,
    pub mode: CorruptionMode,
    pub sample_ids: Vec<String>,
    /// Row labels for reports; may be empty.
    #[serde(default)]
    pub token_labels: Vec<String>,
}

/// Γ over a component's `layers × tokens` grid.
///
/// `values[l][t]` is `None` when every contribution to that cell was
/// degenerate. `degenerate_counts[l][t]` counts the degenerate contributions
/// (runs, or summed over samples for a cross-sample mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    pub component: Component,
    pub layers: usize,
    pub tokens: usize,
    pub meta: GridMeta,
    pub values: Vec<Vec<Option<f64>>>,
    pub degenerate_counts: Vec<Vec<u64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl GammaGrid {
    /// Builds a grid from raw cells, each `Some(Γ)` or `None` for degenerate.
    pub fn from_cells(
        component: Component,
        values: Vec<Vec<Option<f64>>>,
        meta: GridMeta,
    ) -> Result<Self> {
        let layers = values.len();
        let tokens = values.first().map_or(0, Vec::len);
        if layers == 0 || tokens == 0 || values.iter().any(|r| r.len() != tokens) {
            return Err(Error::Shape("grid must be a non-empty rectangle".into()));
        }
        let degenerate_counts = values
            .iter()
            .map(|r| r.iter().map(|v| u64::from(v.is_none())).collect())
            .collect();
        Ok(Self {
            component,
            layers,
            tokens,
            meta,
            values,
            degenerate_counts,
        })
    }

    /// Averages per-run cells (`per_run[r][l * tokens + t]`), skipping
    /// degenerate runs cell by cell.
    pub fn average_runs(
        component: Component,
        layers: usize,
        tokens: usize,
        per_run: &[Vec<Gamma>],
        meta: GridMeta,
    ) -> Result<Self> {
        if per_run.is_empty() || per_run.iter().any(|r| r.len() != layers * tokens) {
            return Err(Error::Shape(format!(
                "per-run cells must each hold {layers}x{tokens} values"
            )));
        }
        let mut values = vec![vec![None; tokens]; layers];
        let mut degenerate_counts = vec![vec![0u64; tokens]; layers];
        for l in 0..layers {
            for t in 0..tokens {
                let cells = per_run.iter().map(|r| r[l * tokens + t]);
                values[l][t] = mean(cells.clone().filter_map(Gamma::value));
                degenerate_counts[l][t] = cells.filter(|g| g.is_degenerate()).count() as u64;
            }
        }
        Ok(Self {
            component,
            layers,
            tokens,
            meta,
            values,
            degenerate_counts,
        })
    }

    /// Cell-wise mean of non-degenerate values across grids of the same
    /// component, layer count and noise level. Token axes may differ in
    /// length: they are aligned at position 0 and the result is as long as
    /// the longest grid, each cell averaging only the grids that have it.
    /// Degenerate counts add up.
    pub fn mean_of(grids: &[GammaGrid]) -> Result<Self> {
        let longest = grids
            .iter()
            .max_by_key(|g| g.tokens)
            .ok_or_else(|| Error::Parameter("no grids to average".into()))?;
        check_compatible(grids)?;
        if grids.iter().any(|g| g.layers != longest.layers) {
            return Err(Error::Shape("grids to average differ in layer count".into()));
        }
        let mut out = longest.clone();
        out.meta.sample_ids = grids.iter().flat_map(|g| g.meta.sample_ids.clone()).collect();
        for l in 0..out.layers {
            for t in 0..out.tokens {
                let covering = grids.iter().filter(|g| t < g.tokens);
                out.values[l][t] = mean(covering.clone().filter_map(|g| g.values[l][t]));
                out.degenerate_counts[l][t] = covering.map(|g| g.degenerate_counts[l][t]).sum();
            }
        }
        Ok(out)
    }

    pub fn cell(&self, layer: usize, token: usize) -> Option<f64> {
        self.values.get(layer)?.get(token).copied().flatten()
    }

    pub fn cells(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn n_degenerate(&self) -> usize {
        self.cells().filter(Option::is_none).count()
    }

    pub fn all_degenerate(&self) -> bool {
        self.cells().all(|c| c.is_none())
    }

    /// (layer, token, Γ) of the largest non-degenerate cell; first wins ties.
    pub fn argmax(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, row) in self.values.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|(_, _, b)| v > b) {
                        best = Some((l, t, v));
                    }
                }
            }
        }
        best
    }
}

fn check_compatible(grids: &[GammaGrid]) -> Result<()> {
    let first = &grids[0];
    for g in grids {
        if g.component != first.component {
            return Err(Error::Parameter(format!(
                "cannot combine {} and {} grids",
                first.component, g.component
            )));
        }
        if g.meta.nu.to_bits() != first.meta.nu.to_bits() {
            return Err(Error::Parameter(format!(
                "cannot combine grids at nu={} and nu={}",
                first.meta.nu, g.meta.nu
            )));
        }
    }
    Ok(())
}

/// One point of the Γ-versus-noise curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurvePoint {
    pub nu: f64,
    pub component: Component,
    /// Mean Γ over the non-degenerate cells.
    pub gamma_avg: f64,
    /// All cells considered, degenerate ones included.
    pub n_cells: usize,
    pub n_degenerate: usize,
}

/// Mean Γ over every non-degenerate cell of grids sharing component and ν.
pub fn gamma_of_nu(grids: &[GammaGrid]) -> Result<NoiseCurvePoint> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Parameter("gamma_of_nu needs at least one grid".into()))?;
    check_compatible(grids)?;
    let cells: Vec<Option<f64>> = grids.iter().flat_map(GammaGrid::cells).collect();
    let n_degenerate = cells.iter().filter(|c| c.is_none()).count();
    let gamma_avg = mean(cells.iter().flatten().copied()).ok_or_else(|| {
        Error::Degenerate(format!(
            "all {} {} cells at nu={} are degenerate (clean and corrupted answer probabilities coincide)",
            cells.len(),
            first.component,
            first.meta.nu
        ))
    })?;
    Ok(NoiseCurvePoint {
        nu: first.meta.nu,
        component: first.component,
        gamma_avg,
        n_cells: cells.len(),
        n_degenerate,
    })
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[u32], golds: &[u32]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} gold answers",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Parameter("accuracy of an empty split".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}
