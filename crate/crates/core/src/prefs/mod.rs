//! Teacher-replay preference construction.
//!
//! For each verified teacher trajectory, the student is queried at every
//! teacher context. Steps whose executions match within tolerance (after
//! wait removal) are discarded; each remaining divergence becomes a
//! preference pair — teacher response chosen, replayed student response
//! rejected — tagged with its error type. Masks restrict the training loss
//! to the behaviorally relevant spans: execution tokens always, description
//! tokens only for planning-level errors, reasoning tokens never (the
//! two-span variant instead trains reasoning tokens on planning errors).

mod dataset;
mod mask;
mod replay;

pub use dataset::{load_pref, persist_pref, PrefDataset, PrefHeader, PrefRecord, PREFS_SCHEMA};
pub use mask::{build_mask, MaskError};
pub use replay::{replay_teacher, ReplayOutcome};

use serde::{Deserialize, Serialize};

use crate::action::{AgentResponse, DiffKind};
use crate::trajectory::StepContext;

/// Per-token binary loss weights, aligned to a tokenized response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    pub weights: Vec<u8>,
}

impl MaskVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Number of tokens carrying loss.
    pub fn weight_sum(&self) -> u64 {
        self.weights.iter().map(|w| *w as u64).sum()
    }
}

/// Which span layout the mask rule is instantiated over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Reasoning / description / execution: reasoning is never trained,
    /// description trains only on planning errors, execution always.
    ThreeSpan,
    /// Reasoning / execution only: planning errors train both spans,
    /// execution errors train execution only.
    TwoSpan,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::ThreeSpan => "three_span",
            MaskMode::TwoSpan => "two_span",
        }
    }
}

/// Where a preference pair came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSource {
    pub query_id: String,
    pub step_index: u32,
}

/// One step-level preference example: the teacher context, the teacher's
/// response (chosen), and the replayed student response (rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: StepContext,
    pub chosen: AgentResponse,
    pub rejected: AgentResponse,
    /// Never `Match`: matching steps are discarded before pairing.
    pub error_type: DiffKind,
    pub tolerance_px: u32,
    pub source: PairSource,
}
