//! Per-token mask construction from span structure and error type.

use thiserror::Error;

use crate::action::{AgentResponse, DiffKind};
use crate::dpo::{SpanTag, TokenizeError, Tokenizer};

use super::{MaskMode, MaskVector};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    SpanAlignment(#[from] TokenizeError),
    #[error("three-span masking requires a non-empty description span")]
    MissingDescriptionSpan,
    #[error("mask rule is undefined for matching steps")]
    NotAnError,
}

/// Build the response-wise mask for one error type under one mask mode.
///
/// Token weights are a pure function of (span tag, error type, mode): a token
/// takes the weight of the span containing its first character; tokens
/// outside every span (delimiters, end marker) weigh 0.
pub fn build_mask(
    response: &AgentResponse,
    error_type: DiffKind,
    mode: MaskMode,
    tokenizer: &dyn Tokenizer,
) -> Result<MaskVector, MaskError> {
    if error_type == DiffKind::Match {
        return Err(MaskError::NotAnError);
    }
    if mode == MaskMode::ThreeSpan && response.span_map.description.is_empty() {
        return Err(MaskError::MissingDescriptionSpan);
    }
    let tokens = tokenizer.tokenize_response(response)?;
    let plan = error_type == DiffKind::PlanError;
    let weights = tokens
        .tags
        .iter()
        .map(|tag| weight_for(*tag, plan, mode))
        .collect();
    Ok(MaskVector { weights })
}

fn weight_for(tag: SpanTag, plan_error: bool, mode: MaskMode) -> u8 {
    match mode {
        MaskMode::ThreeSpan => match tag {
            SpanTag::Reasoning => 0,
            SpanTag::Description => u8::from(plan_error),
            SpanTag::Execution => 1,
            SpanTag::Outside => 0,
        },
        MaskMode::TwoSpan => match tag {
            SpanTag::Reasoning => u8::from(plan_error),
            SpanTag::Description => 0,
            SpanTag::Execution => 1,
            SpanTag::Outside => 0,
        },
    }
}
