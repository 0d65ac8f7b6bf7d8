//! Numerical training core: tokenization seam, masked scores, masked
//! preference/SFT losses with analytic gradients, and a toy differentiable
//! policy with per-domain low-rank adapters.
//!
//! The toy policy is a bigram logit table over a byte-level vocabulary — the
//! smallest autoregressive policy that exercises every term of the masked
//! objectives. Step contexts fold in as a short hashed token prefix. Real
//! model tokenizers plug in behind the [`Tokenizer`] trait; the reference
//! implementation is byte-level with explicit begin/end tokens.

mod loss;
mod policy;
mod train;

pub use loss::{
    dpo_loss, dpo_loss_grad, masked_score, neg_log_sigmoid, sft_loss, sft_loss_grad, LossError,
    LossReport, PolicyGradients, TokenizedPair,
};
// Masks are defined by the preference builder; re-exported here because every
// loss consumer needs them alongside the token types.
pub use crate::prefs::MaskVector;
pub use policy::{AdapterDelta, AdapterRegistry, RegistryError, ToyPolicy};
pub use train::{train_adapter, TrainConfig, TrainError, TrainOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::AgentResponse;
use crate::hashutil;
use crate::trajectory::StepContext;

/// Byte vocabulary plus explicit begin/end tokens.
pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// Identifier recorded in dataset headers for the reference tokenizer.
pub const BYTE_TOKENIZER_ID: &str = "byte-258";

/// Which response span a token originates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanTag {
    Reasoning,
    Description,
    Execution,
    /// Delimiters, context tokens, and the end-of-sequence marker.
    Outside,
}

/// Token ids with per-token span origin tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub tags: Vec<SpanTag>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, tags: Vec<SpanTag>) -> Self {
        assert_eq!(ids.len(), tags.len(), "ids and tags must align");
        TokenSeq { ids, tags }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("token at byte {position} straddles the end of the raw text (len {len})")]
    SpanAlignment { position: usize, len: usize },
}

/// Tokenization seam between structured responses and the numeric core.
pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn vocab_size(&self) -> usize;
    /// Tokenize a response's raw text with span origin tags.
    fn tokenize_response(&self, response: &AgentResponse) -> Result<TokenSeq, TokenizeError>;
    /// Fold a step context into a short token prefix.
    fn tokenize_context(&self, ctx: &StepContext) -> TokenSeq;
}

/// Reference byte-level tokenizer: one token per byte of the raw text plus a
/// trailing end marker; contexts hash to an 8-byte prefix after the begin
/// marker.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn id(&self) -> &str {
        BYTE_TOKENIZER_ID
    }

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn tokenize_response(&self, response: &AgentResponse) -> Result<TokenSeq, TokenizeError> {
        let raw = response.raw_text.as_bytes();
        let spans = &response.span_map;
        for span in [&spans.reasoning, &spans.description, &spans.execution] {
            if span.end > raw.len() {
                return Err(TokenizeError::SpanAlignment { position: span.end, len: raw.len() });
            }
        }
        let mut ids = Vec::with_capacity(raw.len() + 1);
        let mut tags = Vec::with_capacity(raw.len() + 1);
        for (i, byte) in raw.iter().enumerate() {
            ids.push(*byte as u32);
            tags.push(if spans.reasoning.contains(&i) {
                SpanTag::Reasoning
            } else if spans.description.contains(&i) {
                SpanTag::Description
            } else if spans.execution.contains(&i) {
                SpanTag::Execution
            } else {
                SpanTag::Outside
            });
        }
        ids.push(EOS);
        tags.push(SpanTag::Outside);
        Ok(TokenSeq::new(ids, tags))
    }

    fn tokenize_context(&self, ctx: &StepContext) -> TokenSeq {
        let mut parts: Vec<String> = vec![ctx.query.clone(), ctx.current_obs.screenshot_ref.clone()];
        for step in &ctx.history {
            parts.push(step.observation.screenshot_ref.clone());
            parts.push(step.response.raw_text.clone());
        }
        let part_refs: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
        let digest = hashutil::derive_bytes(&part_refs, 8);
        let mut ids = vec![BOS];
        ids.extend(digest.iter().map(|b| *b as u32));
        let tags = vec![SpanTag::Outside; ids.len()];
        TokenSeq::new(ids, tags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{FormatConfig, ToolCall};
    use crate::trajectory::Observation;

    #[test]
    fn response_tokens_carry_span_tags() {
        let cfg = FormatConfig::default();
        let resp = AgentResponse::new("think", "act", vec![ToolCall::coord("Click", 3, 4)], &cfg);
        let toks = ByteTokenizer.tokenize_response(&resp).unwrap();
        assert_eq!(toks.len(), resp.raw_text.len() + 1);
        assert_eq!(*toks.ids.last().unwrap(), EOS);
        assert_eq!(*toks.tags.last().unwrap(), SpanTag::Outside);
        // Count tags per span.
        let n = |tag: SpanTag| toks.tags.iter().filter(|t| **t == tag).count();
        assert_eq!(n(SpanTag::Reasoning), "think".len());
        assert_eq!(n(SpanTag::Description), "act".len());
        assert_eq!(n(SpanTag::Execution), "Click(3,4)".len());
    }

    #[test]
    fn context_prefix_is_short_and_stable() {
        let ctx = StepContext {
            query: "do a thing".into(),
            current_obs: Observation { step_index: 1, screenshot_ref: "abc".into(), feature_vec: None },
            history: vec![],
        };
        let a = ByteTokenizer.tokenize_context(&ctx);
        let b = ByteTokenizer.tokenize_context(&ctx);
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
        assert_eq!(a.ids[0], BOS);
    }
}
