//! The planning model: context encoder with per-layer key/value caches, the
//! autoregressive token head, the action codebook, and the flow-matching
//! action expert bridged to a sparse subset of encoder layers.

pub mod codebook;
pub mod context;
pub mod flow;
pub mod model;
pub mod vocab;

pub use codebook::{fit_codebook, segment_motions, ActionCodebook, Motion};
pub use context::{encode_features, ContextTokens, FEATURE_DIM};
pub use flow::{euler_integrate, fm_interpolate, sample_tau, target_field};
pub use model::{DecodeOutput, HistoryEmbedding, LayerKvCache, PolicyModel, SequenceScores};
pub use vocab::{GrammarState, TokenVocabulary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkit::NnError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context has {len} tokens, maximum is {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("grammar violation: {0}")]
    Grammar(String),
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("layer selection: {0}")]
    Layers(String),
    #[error("non-finite value during {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which encoder layers feed the action expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    Interval(usize),
    LastOnly,
}

impl LayerSelection {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>, PolicyError> {
        match *self {
            LayerSelection::Interval(k) => select_sparse_layers(n_layers, k),
            LayerSelection::LastOnly if n_layers > 0 => Ok(vec![n_layers - 1]),
            LayerSelection::LastOnly => Err(PolicyError::Layers("no layers".into())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerSelection::Interval(k) => format!("interval-{k}"),
            LayerSelection::LastOnly => "last-only".into(),
        }
    }
}

/// Layers `interval-1, 2*interval-1, ...` (0-based), plus the final layer.
pub fn select_sparse_layers(n_layers: usize, interval: usize) -> Result<Vec<usize>, PolicyError> {
    if interval == 0 || interval > n_layers {
        return Err(PolicyError::Layers(format!("interval {interval} outside 1..={n_layers}")));
    }
    let mut out: Vec<usize> = (1..=n_layers / interval).map(|j| j * interval - 1).collect();
    if out.last() != Some(&(n_layers - 1)) {
        out.push(n_layers - 1);
    }
    Ok(out)
}

/// Model dimensions and flow settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub d_bridge: usize,
    pub bridge_mlp_hidden: usize,
    /// Fixed number of query slots in the action expert.
    pub query_slots: usize,
    pub layers: LayerSelection,
    pub history_hidden: usize,
    /// Anchors from the history embedding; `false` starts the flow at zero.
    pub history_init: bool,
    pub codebook_size: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub dt: f64,
    pub max_context: usize,
    pub max_obstacles: usize,
    pub max_reason: usize,
    /// Metres per internal action unit.
    pub action_scale: f64,
    pub noise_std: f64,
    pub tau_shift: f64,
    pub flow_steps: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 8,
            heads: 4,
            mlp_hidden: 256,
            d_bridge: 64,
            bridge_mlp_hidden: 128,
            query_slots: 8,
            layers: LayerSelection::Interval(2),
            history_hidden: 64,
            history_init: true,
            codebook_size: 256,
            history_steps: 4,
            future_steps: 10,
            dt: 0.5,
            max_context: 24,
            max_obstacles: 8,
            max_reason: 6,
            action_scale: 10.0,
            noise_std: 0.25,
            tau_shift: 0.0,
            flow_steps: 5,
            seed: 0,
        }
    }
}
