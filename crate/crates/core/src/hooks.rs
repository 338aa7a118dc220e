//! Hook points: addresses of hidden states and taps that observe or replace them.
//!
//! The hook point is the post-block hidden state of each (layer, token): the
//! output of the block's final residual + layer norm. A tap sees every such
//! state in forward order and may replace it; the replacement feeds all
//! downstream computation.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Model component a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Decoder,
    ImageEmbedding,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::ImageEmbedding => "image_embedding",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "encoder" => Ok(Component::Encoder),
            "decoder" => Ok(Component::Decoder),
            "image_embedding" => Ok(Component::ImageEmbedding),
            other => Err(format!("unknown component `{other}`")),
        }
    }
}

/// One hidden state: a (layer, token) of a text stack, or one image patch row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateAddress {
    Encoder { layer: usize, token: usize },
    Decoder { layer: usize, token: usize },
    /// A row of the image embedding. Its layer is reported as −1.
    ImagePatch { patch: usize },
}

impl StateAddress {
    pub fn component(&self) -> Component {
        match self {
            StateAddress::Encoder { .. } => Component::Encoder,
            StateAddress::Decoder { .. } => Component::Decoder,
            StateAddress::ImagePatch { .. } => Component::ImageEmbedding,
        }
    }

    /// Layer index, −1 for image patches.
    pub fn layer(&self) -> i64 {
        match *self {
            StateAddress::Encoder { layer, .. } | StateAddress::Decoder { layer, .. } => layer as i64,
            StateAddress::ImagePatch { .. } => -1,
        }
    }

    /// Token position, or patch index for image patches.
    pub fn token(&self) -> usize {
        match *self {
            StateAddress::Encoder { token, .. } | StateAddress::Decoder { token, .. } => token,
            StateAddress::ImagePatch { patch } => patch,
        }
    }
}

impl fmt::Display for StateAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[L{}, T{}]", self.component(), self.layer(), self.token())
    }
}

/// What a tap wants done with the state it was shown.
#[derive(Debug, Clone, PartialEq)]
pub enum TapAction<'a> {
    Keep,
    Replace(Cow<'a, [f64]>),
}

impl TapAction<'_> {
    /// Detaches the action from the tap that produced it.
    pub fn into_owned(self) -> TapAction<'static> {
        match self {
            TapAction::Keep => TapAction::Keep,
            TapAction::Replace(v) => TapAction::Replace(Cow::Owned(v.into_owned())),
        }
    }
}

/// Observer/editor of hidden states during one forward pass.
pub trait HookTap {
    fn on_state(&mut self, addr: StateAddress, state: &[f64]) -> Result<TapAction<'_>>;
}

/// Tap that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopTap;

impl HookTap for NoopTap {
    fn on_state(&mut self, _addr: StateAddress, _state: &[f64]) -> Result<TapAction<'_>> {
        Ok(TapAction::Keep)
    }
}

/// Records every state it sees without changing anything.
#[derive(Debug, Default, Clone)]
pub struct RecordingTap {
    pub states: BTreeMap<StateAddress, Vec<f64>>,
}

impl HookTap for RecordingTap {
    fn on_state(&mut self, addr: StateAddress, state: &[f64]) -> Result<TapAction<'_>> {
        self.states.insert(addr, state.to_vec());
        Ok(TapAction::Keep)
    }
}

/// Replaces states with entries from a map; states not in the map pass through.
#[derive(Debug, Clone)]
pub struct OverrideTap<'a> {
    pub replacements: &'a BTreeMap<StateAddress, Vec<f64>>,
}

impl HookTap for OverrideTap<'_> {
    fn on_state(&mut self, addr: StateAddress, _state: &[f64]) -> Result<TapAction<'_>> {
        Ok(match self.replacements.get(&addr) {
            Some(v) => TapAction::Replace(Cow::Borrowed(v.as_slice())),
            None => TapAction::Keep,
        })
    }
}

/// Runs two taps in sequence: `first` may replace, then `second` sees the result.
pub struct ChainTap<'a, 'b> {
    pub first: &'a mut dyn HookTap,
    pub second: &'b mut dyn HookTap,
}

impl HookTap for ChainTap<'_, '_> {
    fn on_state(&mut self, addr: StateAddress, state: &[f64]) -> Result<TapAction<'_>> {
        let replaced: Option<Vec<f64>> = match self.first.on_state(addr, state)? {
            TapAction::Keep => None,
            TapAction::Replace(v) => Some(v.into_owned()),
        };
        let seen = replaced.as_deref().unwrap_or(state);
        match self.second.on_state(addr, seen)? {
            TapAction::Replace(v) => Ok(TapAction::Replace(Cow::Owned(v.into_owned()))),
            TapAction::Keep => Ok(match replaced {
                Some(v) => TapAction::Replace(Cow::Owned(v)),
                None => TapAction::Keep,
            }),
        }
    }
}
