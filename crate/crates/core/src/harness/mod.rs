//! Dataset handling, split evaluation and multi-sample sweeps.

pub mod dataset;
pub mod sweep;

pub use dataset::{load_dataset, split_by_category, write_dataset, Category, Dataset, VqaSample};
pub use sweep::{run_trace_sweep, SweepConfig, SweepResult};

use crate::error::Result;
use crate::metrics::accuracy;
use crate::model::{QuestionTokens, VlModel};

/// Greedy single-token predictions for `samples`, in order.
pub fn predict(model: &VlModel, dataset: &Dataset, samples: &[VqaSample]) -> Result<Vec<u32>> {
    let cfg = model.config();
    samples
        .iter()
        .map(|s| {
            let tokens = QuestionTokens::new(s.question.clone(), cfg)?;
            let image = dataset.image(&s.image_ref, cfg)?;
            model.greedy_answer(&tokens, &image)
        })
        .collect()
}

/// Fraction of `samples` whose greedy answer equals the gold answer id.
pub fn evaluate_split(model: &VlModel, dataset: &Dataset, samples: &[VqaSample]) -> Result<f64> {
    let predictions = predict(model, dataset, samples)?;
    let golds: Vec<u32> = samples.iter().map(|s| s.answer_id).collect();
    accuracy(&predictions, &golds)
}
