//! The three-run causal intervention: clean run with full state capture,
//! corrupted run, and corrupted runs with states restored from the clean cache.
//!
//! Corruption is multiplicative: every element of the image embedding is
//! multiplied by `ε ~ N(1, ν²)` (ν is the standard deviation). In scalar mode a
//! single ε is drawn per image; in per-element mode each element gets its own.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::{Component, HookTap, RecordingTap, StateAddress, TapAction};
use crate::metrics::{gamma, Gamma, GammaGrid, GridMeta};
use crate::model::{restore_patches, AnswerDistribution, ImageEmbedding, QuestionTokens, VlModel};
use crate::rng::{derive_seed, sample_normal, RngState};
use crate::tensor::Tensor;

pub use crate::metrics::RunTriple;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// One ε per image.
    #[default]
    Scalar,
    /// One ε per embedding element.
    PerElement,
}

impl CorruptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionMode::Scalar => "scalar",
            CorruptionMode::PerElement => "per_element",
        }
    }
}

impl std::str::FromStr for CorruptionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "scalar" => Ok(CorruptionMode::Scalar),
            "per_element" => Ok(CorruptionMode::PerElement),
            other => Err(format!("unknown corruption mode `{other}` (scalar|per_element)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Standard deviation of the multiplicative noise.
    pub nu: f64,
    pub seed: u64,
    pub mode: CorruptionMode,
}

/// Draws the multiplier tensor for `spec`: shape `(1,)` in scalar mode,
/// the embedding's shape in per-element mode.
pub fn draw_noise(spec: &CorruptionSpec, shape: &[usize]) -> Result<Tensor> {
    if !(spec.nu.is_finite() && spec.nu >= 0.0) {
        return Err(Error::Parameter(format!(
            "noise level nu must be finite and >= 0, got {}",
            spec.nu
        )));
    }
    let mut rng = RngState::new(spec.seed);
    let shape = match spec.mode {
        CorruptionMode::Scalar => vec![1],
        CorruptionMode::PerElement => shape.to_vec(),
    };
    sample_normal(&mut rng, shape, 1.0, spec.nu)
}

/// Multiplies the embedding by noise drawn from `spec`.
pub fn corrupt_image(image: &ImageEmbedding, spec: &CorruptionSpec) -> Result<ImageEmbedding> {
    let src = image.tensor();
    if !src.is_finite() {
        return Err(Error::Parameter("cannot corrupt a non-finite embedding".into()));
    }
    let noise = draw_noise(spec, src.shape())?;
    let out = match spec.mode {
        CorruptionMode::Scalar => {
            let eps = noise.data()[0];
            src.map(|v| v * eps)
        }
        CorruptionMode::PerElement => src.mul(&noise)?,
    };
    Ok(ImageEmbedding::from_tensor_unchecked(out))
}

/// Every encoder and decoder state of a clean run, plus its answer
/// distribution and image embedding.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    states: BTreeMap<StateAddress, Vec<f64>>,
    clean: AnswerDistribution,
    clean_image: ImageEmbedding,
    enc_layers: usize,
    dec_layers: usize,
    question_len: usize,
    decoder_len: usize,
}

impl ActivationCache {
    pub fn get(&self, addr: &StateAddress) -> Option<&[f64]> {
        match addr {
            StateAddress::ImagePatch { patch } => {
                (*patch < self.clean_image.num_patches()).then(|| self.clean_image.patch(*patch))
            }
            _ => self.states.get(addr).map(Vec::as_slice),
        }
    }

    pub fn contains(&self, addr: &StateAddress) -> bool {
        self.get(addr).is_some()
    }

    /// Number of cached (layer, token) states, image rows excluded.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &BTreeMap<StateAddress, Vec<f64>> {
        &self.states
    }

    pub fn clean_distribution(&self) -> &AnswerDistribution {
        &self.clean
    }

    pub fn clean_image(&self) -> &ImageEmbedding {
        &self.clean_image
    }

    /// (layers, tokens) of a component's grid.
    pub fn grid_dims(&self, component: Component) -> (usize, usize) {
        match component {
            Component::Encoder => (self.enc_layers, self.question_len),
            Component::Decoder => (self.dec_layers, self.decoder_len),
            Component::ImageEmbedding => (1, self.clean_image.num_patches()),
        }
    }
}

/// Runs the clean forward pass and records every hook point.
pub fn capture_clean(
    model: &VlModel,
    tokens: &QuestionTokens,
    image: &ImageEmbedding,
) -> Result<ActivationCache> {
    let mut rec = RecordingTap::default();
    let clean = model.forward(tokens, image, Some(&mut rec))?;
    let cfg = model.config();
    Ok(ActivationCache {
        states: rec.states,
        clean,
        clean_image: image.clone(),
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
        question_len: tokens.len(),
        decoder_len: cfg.decoder_len(),
    })
}

/// A set of distinct states to restore together.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchSet(BTreeSet<StateAddress>);

impl PatchSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(addr: StateAddress) -> Self {
        Self(BTreeSet::from([addr]))
    }

    /// Fails on duplicate addresses.
    pub fn new(addrs: impl IntoIterator<Item = StateAddress>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for a in addrs {
            if !set.insert(a) {
                return Err(Error::Intervention(format!("duplicate patch address {a}")));
            }
        }
        Ok(Self(set))
    }

    /// Every patch row of the image embedding.
    pub fn whole_image(num_patches: usize) -> Self {
        Self((0..num_patches).map(|patch| StateAddress::ImagePatch { patch }).collect())
    }

    /// Every token of one layer of one stack.
    pub fn layer(component: Component, layer: usize, tokens: usize) -> Self {
        Self(
            (0..tokens)
                .map(|token| match component {
                    Component::Decoder => StateAddress::Decoder { layer, token },
                    _ => StateAddress::Encoder { layer, token },
                })
                .collect(),
        )
    }

    pub fn union(mut self, other: PatchSet) -> Self {
        self.0.extend(other.0);
        self
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, addr: &StateAddress) -> bool {
        self.0.contains(addr)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StateAddress> {
        self.0.iter()
    }

    pub fn touches(&self, component: Component) -> bool {
        self.0.iter().any(|a| a.component() == component)
    }
}

/// Tap that swaps addressed states for their cached clean values.
pub struct PatchTap<'a> {
    cache: &'a ActivationCache,
    patches: &'a PatchSet,
}

impl<'a> PatchTap<'a> {
    pub fn new(cache: &'a ActivationCache, patches: &'a PatchSet) -> Self {
        Self { cache, patches }
    }
}

impl HookTap for PatchTap<'_> {
    fn on_state(&mut self, addr: StateAddress, _state: &[f64]) -> Result<TapAction<'_>> {
        if !self.patches.contains(&addr) {
            return Ok(TapAction::Keep);
        }
        let clean = self
            .cache
            .get(&addr)
            .ok_or_else(|| Error::Intervention(format!("{addr} is not in the clean cache")))?;
        Ok(TapAction::Replace(Cow::Borrowed(clean)))
    }
}

fn check_patches(cache: &ActivationCache, patches: &PatchSet) -> Result<()> {
    match patches.iter().find(|a| !cache.contains(a)) {
        Some(a) => Err(Error::Intervention(format!("{a} is not in the clean cache"))),
        None => Ok(()),
    }
}

/// Corrupted forward pass with every state in `patches` restored from `cache`.
/// Image-patch addresses restore rows of the embedding before encoding.
pub fn run_patched(
    model: &VlModel,
    tokens: &QuestionTokens,
    corrupted: &ImageEmbedding,
    cache: &ActivationCache,
    patches: &PatchSet,
) -> Result<AnswerDistribution> {
    check_patches(cache, patches)?;
    let rows: Vec<usize> = patches
        .iter()
        .filter_map(|a| match a {
            StateAddress::ImagePatch { patch } => Some(*patch),
            _ => None,
        })
        .collect();
    let image: Cow<'_, ImageEmbedding> = if rows.is_empty() {
        Cow::Borrowed(corrupted)
    } else {
        let mut img = corrupted.clone();
        restore_patches(&mut img, cache.clean_image(), &rows);
        Cow::Owned(img)
    };
    if patches.is_empty() {
        return model.forward(tokens, &image, None);
    }
    let mut tap = PatchTap::new(cache, patches);
    model.forward(tokens, &image, Some(&mut tap))
}

/// Decoder-only variant of [`run_patched`] that reuses an already computed
/// corrupted encoder output. Patches must all address the decoder.
fn run_patched_decoder(
    model: &VlModel,
    corrupted_encoding: &Tensor,
    cache: &ActivationCache,
    patches: &PatchSet,
) -> Result<AnswerDistribution> {
    debug_assert!(patches.iter().all(|a| a.component() == Component::Decoder));
    check_patches(cache, patches)?;
    let mut tap = PatchTap::new(cache, patches);
    model.answer_from_encoding(corrupted_encoding, Some(&mut tap))
}

/// One dataset item ready for tracing.
#[derive(Debug, Clone)]
pub struct TraceSample {
    pub sample_id: String,
    pub tokens: QuestionTokens,
    pub image: ImageEmbedding,
    pub answer_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSettings {
    pub nu: f64,
    pub runs: usize,
    pub base_seed: u64,
    pub mode: CorruptionMode,
    /// Stacks to trace; any subset of encoder/decoder.
    pub components: Vec<Component>,
}

impl TraceSettings {
    pub fn new(nu: f64, runs: usize, base_seed: u64, mode: CorruptionMode) -> Self {
        Self {
            nu,
            runs,
            base_seed,
            mode,
            components: vec![Component::Encoder, Component::Decoder],
        }
    }

    fn wants(&self, c: Component) -> bool {
        self.components.contains(&c)
    }
}

/// Probabilities observed in one corruption run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub p_clean: f64,
    pub p_corrupt: f64,
    /// `p_patched` per encoder cell, `[layer][token]`; empty if not traced.
    pub encoder_patched: Vec<Vec<f64>>,
    /// `p_patched` per decoder cell, `[layer][token]`; empty if not traced.
    pub decoder_patched: Vec<Vec<f64>>,
}

impl RunRecord {
    pub fn triple(&self, component: Component, layer: usize, token: usize) -> Option<RunTriple> {
        let grid = match component {
            Component::Encoder => &self.encoder_patched,
            Component::Decoder => &self.decoder_patched,
            Component::ImageEmbedding => return None,
        };
        let p_patched = *grid.get(layer)?.get(token)?;
        Some(RunTriple {
            p_clean: self.p_clean,
            p_corrupt: self.p_corrupt,
            p_patched,
        })
    }
}

/// Result of [`trace_grid`] for one sample at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub encoder: Option<GammaGrid>,
    pub decoder: Option<GammaGrid>,
    pub runs: Vec<RunRecord>,
}

impl TraceOutcome {
    pub fn grid(&self, component: Component) -> Option<&GammaGrid> {
        match component {
            Component::Encoder => self.encoder.as_ref(),
            Component::Decoder => self.decoder.as_ref(),
            Component::ImageEmbedding => None,
        }
    }
}

fn patched_probabilities(
    model: &VlModel,
    sample: &TraceSample,
    corrupted: &ImageEmbedding,
    corrupted_encoding: &Tensor,
    cache: &ActivationCache,
    component: Component,
) -> Result<Vec<Vec<f64>>> {
    let (layers, tokens) = cache.grid_dims(component);
    let cells: Vec<(usize, usize)> = (0..layers)
        .flat_map(|l| (0..tokens).map(move |t| (l, t)))
        .collect();
    let probs: Vec<f64> = cells
        .par_iter()
        .map(|&(layer, token)| {
            let dist = match component {
                Component::Encoder => run_patched(
                    model,
                    &sample.tokens,
                    corrupted,
                    cache,
                    &PatchSet::single(StateAddress::Encoder { layer, token }),
                )?,
                _ => run_patched_decoder(
                    model,
                    corrupted_encoding,
                    cache,
                    &PatchSet::single(StateAddress::Decoder { layer, token }),
                )?,
            };
            dist.prob(sample.answer_id)
        })
        .collect::<Result<_>>()?;
    Ok(probs.chunks(tokens).map(<[f64]>::to_vec).collect())
}

/// Traces every (layer, token) state of the requested stacks.
///
/// Run `r` corrupts with seed [`derive_seed`]`(base_seed, sample_id, r)`.
/// Each cell is Γ averaged over the non-degenerate runs; a cell whose runs
/// are all degenerate stays flagged.
pub fn trace_grid(model: &VlModel, sample: &TraceSample, settings: &TraceSettings) -> Result<TraceOutcome> {
    if settings.runs == 0 {
        return Err(Error::Parameter("runs_per_state must be >= 1".into()));
    }
    if settings.components.contains(&Component::ImageEmbedding) {
        return Err(Error::Parameter("only encoder and decoder grids can be traced".into()));
    }
    let cache = capture_clean(model, &sample.tokens, &sample.image)?;
    let p_clean = cache.clean_distribution().prob(sample.answer_id)?;

    let mut runs = Vec::with_capacity(settings.runs);
    for run in 0..settings.runs {
        let seed = derive_seed(settings.base_seed, &sample.sample_id, run as u64);
        let spec = CorruptionSpec {
            nu: settings.nu,
            seed,
            mode: settings.mode,
        };
        let corrupted = corrupt_image(&sample.image, &spec)?;
        let corrupted_encoding = model.encode_question(&sample.tokens, &corrupted, None)?;
        let p_corrupt = model
            .answer_from_encoding(&corrupted_encoding, None)?
            .prob(sample.answer_id)?;
        let mut record = RunRecord {
            run,
            seed,
            p_clean,
            p_corrupt,
            encoder_patched: Vec::new(),
            decoder_patched: Vec::new(),
        };
        for component in [Component::Encoder, Component::Decoder] {
            if !settings.wants(component) {
                continue;
            }
            let probs = patched_probabilities(
                model,
                sample,
                &corrupted,
                &corrupted_encoding,
                &cache,
                component,
            )?;
            match component {
                Component::Encoder => record.encoder_patched = probs,
                _ => record.decoder_patched = probs,
            }
        }
        runs.push(record);
    }

    let grid_for = |component: Component| -> Result<Option<GammaGrid>> {
        if !settings.wants(component) {
            return Ok(None);
        }
        let (layers, tokens) = cache.grid_dims(component);
        let mut per_run = Vec::with_capacity(runs.len());
        for rec in &runs {
            let mut cells = Vec::with_capacity(layers * tokens);
            for l in 0..layers {
                for t in 0..tokens {
                    let triple = rec.triple(component, l, t).expect("cell recorded");
                    cells.push(gamma(&triple)?);
                }
            }
            per_run.push(cells);
        }
        let meta = GridMeta {
            nu: settings.nu,
            runs: settings.runs,
            base_seed: settings.base_seed,
            mode: settings.mode,
            sample_ids: vec![sample.sample_id.clone()],
            token_labels: Vec::new(),
        };
        Ok(Some(GammaGrid::average_runs(component, layers, tokens, &per_run, meta)?))
    };
    Ok(TraceOutcome {
        encoder: grid_for(Component::Encoder)?,
        decoder: grid_for(Component::Decoder)?,
        runs,
    })
}

/// Γ of every cell in a single run, for callers that need unaveraged values.
pub fn run_gammas(record: &RunRecord, component: Component) -> Result<Vec<Vec<Gamma>>> {
    let grid = match component {
        Component::Encoder => &record.encoder_patched,
        _ => &record.decoder_patched,
    };
    grid.iter()
        .map(|row| {
            row.iter()
                .map(|&p_patched| {
                    gamma(&RunTriple {
                        p_clean: record.p_clean,
                        p_corrupt: record.p_corrupt,
                        p_patched,
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn zero_noise_is_identity() {
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        for mode in [CorruptionMode::Scalar, CorruptionMode::PerElement] {
            let spec = CorruptionSpec { nu: 0.0, seed: 11, mode };
            let out = corrupt_image(&sample.image, &spec).unwrap();
            let bits = |e: &ImageEmbedding| e.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out), bits(&sample.image));
        }
        let _ = model;
    }

    #[test]
    fn scalar_mode_uses_one_multiplier() {
        let (_, sample) = fixtures::tiny_trace_fixture(5);
        let spec = CorruptionSpec { nu: 2.0, seed: 3, mode: CorruptionMode::Scalar };
        let out = corrupt_image(&sample.image, &spec).unwrap();
        let eps = draw_noise(&spec, &[1]).unwrap().data()[0];
        for (o, i) in out.tensor().data().iter().zip(sample.image.tensor().data()) {
            assert_eq!(*o, i * eps);
        }
        assert!(corrupt_image(&sample.image, &CorruptionSpec { nu: -1.0, ..spec }).is_err());
    }

    #[test]
    fn cache_counts_and_final_layer_rows() {
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        let cfg = model.config();
        let cache = capture_clean(&model, &sample.tokens, &sample.image).unwrap();
        assert_eq!(
            cache.len(),
            cfg.enc_layers * sample.tokens.len() + cfg.dec_layers * cfg.decoder_len()
        );
        let enc = model.encode_question(&sample.tokens, &sample.image, None).unwrap();
        for t in 0..sample.tokens.len() {
            let addr = StateAddress::Encoder { layer: cfg.enc_layers - 1, token: t };
            assert_eq!(cache.get(&addr).unwrap(), enc.row(t));
        }
        let again = capture_clean(&model, &sample.tokens, &sample.image).unwrap();
        assert_eq!(cache.states(), again.states());
    }

    #[test]
    fn patch_set_rejects_duplicates_and_missing_addresses() {
        let a = StateAddress::Encoder { layer: 0, token: 0 };
        assert!(PatchSet::new([a, a]).is_err());
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        let cache = capture_clean(&model, &sample.tokens, &sample.image).unwrap();
        let far = PatchSet::single(StateAddress::Encoder { layer: 99, token: 0 });
        assert!(matches!(
            run_patched(&model, &sample.tokens, &sample.image, &cache, &far),
            Err(Error::Intervention(_))
        ));
        let far = PatchSet::single(StateAddress::ImagePatch { patch: 99 });
        assert!(run_patched(&model, &sample.tokens, &sample.image, &cache, &far).is_err());
    }

    #[test]
    fn empty_patch_and_full_image_restoration() {
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        let cache = capture_clean(&model, &sample.tokens, &sample.image).unwrap();
        let spec = CorruptionSpec { nu: 3.0, seed: 1, mode: CorruptionMode::PerElement };
        let corrupted = corrupt_image(&sample.image, &spec).unwrap();
        let plain = model.forward(&sample.tokens, &corrupted, None).unwrap();
        let empty =
            run_patched(&model, &sample.tokens, &corrupted, &cache, &PatchSet::empty()).unwrap();
        assert_eq!(plain, empty);
        let full = PatchSet::whole_image(model.config().num_patches);
        let restored = run_patched(&model, &sample.tokens, &corrupted, &cache, &full).unwrap();
        assert_eq!(&restored, cache.clean_distribution());
    }

    #[test]
    fn decoder_shortcut_matches_full_run() {
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        let cache = capture_clean(&model, &sample.tokens, &sample.image).unwrap();
        let spec = CorruptionSpec { nu: 1.5, seed: 2, mode: CorruptionMode::Scalar };
        let corrupted = corrupt_image(&sample.image, &spec).unwrap();
        let enc = model.encode_question(&sample.tokens, &corrupted, None).unwrap();
        let patches = PatchSet::single(StateAddress::Decoder { layer: 0, token: 0 });
        assert_eq!(
            run_patched_decoder(&model, &enc, &cache, &patches).unwrap(),
            run_patched(&model, &sample.tokens, &corrupted, &cache, &patches).unwrap()
        );
    }

    #[test]
    fn zero_runs_rejected() {
        let (model, sample) = fixtures::tiny_trace_fixture(5);
        let s = TraceSettings::new(1.0, 0, 0, CorruptionMode::Scalar);
        assert!(matches!(trace_grid(&model, &sample, &s), Err(Error::Parameter(_))));
    }
}
