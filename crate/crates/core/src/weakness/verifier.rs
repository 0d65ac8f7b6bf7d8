//! Parsing for chat-backed verifier replies.
//!
//! The simulator supplies verdicts programmatically; against real
//! environments a judge model returns a strict JSON verdict document, parsed
//! and normalized here.

use serde::Deserialize;

use crate::trajectory::VerificationResult;

#[derive(Deserialize)]
struct VerifierReply {
    task_completion_criteria: CriteriaField,
    verification_process: String,
    agent_pass: bool,
    agent_failure_analysis: String,
}

/// Models sometimes return the criteria as one string, sometimes as a list.
#[derive(Deserialize)]
#[serde(untagged)]
enum CriteriaField {
    One(String),
    Many(Vec<String>),
}

/// Validate and normalize a verifier reply. Suitable as the validator for
/// [`crate::gateway::chat_structured`].
pub fn parse_verifier_reply(raw: &str) -> Result<VerificationResult, String> {
    let reply: VerifierReply = serde_json::from_str(raw.trim()).map_err(|e| e.to_string())?;
    let criteria = match reply.task_completion_criteria {
        CriteriaField::One(s) => vec![s],
        CriteriaField::Many(v) => v,
    };
    if !reply.agent_pass && reply.agent_failure_analysis.trim().is_empty() {
        return Err("failed verdicts must carry a non-empty agent_failure_analysis".into());
    }
    let analysis = if reply.agent_pass { String::new() } else { reply.agent_failure_analysis };
    Ok(VerificationResult {
        passed: reply.agent_pass,
        completion_criteria: criteria,
        verification_process: reply.verification_process,
        failure_analysis: analysis,
    })
}
