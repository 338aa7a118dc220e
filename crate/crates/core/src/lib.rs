//! Causal tracing for BLIP-style vision-language transformers.
//!
//! A clean run caches every hidden state; the image embedding is corrupted
//! with multiplicative Gaussian noise; each (layer, token) state of the
//! question encoder and answer decoder is then restored from the clean cache
//! in turn, and the recovery of the correct answer's probability is scored.
//!
//! ```no_run
//! use patchtrace::{trace_grid, CorruptionMode, ModelConfig, TraceSample, TraceSettings, VlModel};
//! # fn main() -> patchtrace::Result<()> {
//! let model = VlModel::random(ModelConfig::default(), 7)?;
//! # let sample: TraceSample = unimplemented!();
//! let settings = TraceSettings::new(5.0, 10, 1234, CorruptionMode::Scalar);
//! let outcome = trace_grid(&model, &sample, &settings)?;
//! let encoder = outcome.encoder.expect("encoder traced by default");
//! println!("{:?}", encoder.cell(3, 0));
//! # Ok(())
//! # }
//! ```

pub mod cli;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod hooks;
pub mod io;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use hooks::{Component, HookTap, StateAddress, TapAction};
pub use metrics::{gamma, gamma_of_nu, Gamma, GammaGrid, NoiseCurvePoint};
pub use model::manifest::load_model;
pub use model::{AnswerDistribution, ImageEmbedding, ModelConfig, QuestionTokens, VlModel, WeightStore};
pub use rng::RngState;
pub use tensor::Tensor;
pub use trace::{
    trace_grid,
    ActivationCache, CorruptionMode, CorruptionSpec, PatchSet, RunTriple, TraceOutcome, TraceSample, TraceSettings,
};
