//! Weakness summarization and dual-mode query synthesis over the chat seam.

use serde::Deserialize;
use serde_json::json;

use crate::gateway::{chat_structured, ChatEndpoint, GatewayError, Message};
use crate::trajectory::Observation;

use super::{
    prompts::weakness_json, DomainMetadata, PromptTemplates, QueryMode, QuerySpec, WeaknessCategory,
    WeaknessError, WeaknessReport,
};

/// Case-folded, whitespace-collapsed form used for duplicate detection.
pub fn normalize_instruction(instruction: &str) -> String {
    instruction
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_string()
}

#[derive(Deserialize)]
struct ReportReply {
    overall_summary: String,
    failure_categories: Vec<WeaknessCategory>,
}

/// Distill per-task failure analyses into a structured weakness report.
/// Categories deduplicate by exact category string.
pub fn summarize_report(
    failure_analyses: &[(String, String)],
    summarizer: &ChatEndpoint,
    templates: &PromptTemplates,
    iteration: u32,
) -> Result<WeaknessReport, GatewayError> {
    assert!(
        !failure_analyses.is_empty(),
        "summarization requires at least one failure analysis; callers reuse the prior report \
         when the failure set is empty"
    );
    let cases: Vec<serde_json::Value> = failure_analyses
        .iter()
        .map(|(instruction, analysis)| {
            json!({
                "instruction": instruction,
                "student_agent_failure_analysis": analysis,
            })
        })
        .collect();
    let cases_json = serde_json::to_string_pretty(&cases).expect("cases serialize");
    let machine_context = json!({"cases": cases, "iteration": iteration}).to_string();
    let prompt = templates.summarizer(&cases_json, &machine_context);

    let reply: ReportReply = chat_structured(summarizer, &[Message::user(&prompt)], |raw| {
        let parsed: ReportReply = serde_json::from_str(raw.trim()).map_err(|e| e.to_string())?;
        if parsed.failure_categories.is_empty() {
            return Err("failure_categories must be non-empty".into());
        }
        Ok(parsed)
    })?;

    let mut seen = std::collections::BTreeSet::new();
    let categories: Vec<WeaknessCategory> = reply
        .failure_categories
        .into_iter()
        .filter(|c| seen.insert(c.category.clone()))
        .collect();
    Ok(WeaknessReport { iteration, overall_summary: reply.overall_summary, categories })
}

#[derive(Deserialize)]
struct GeneratedQuery {
    reference_config_id: String,
    instruction: String,
    #[serde(default)]
    targets_student_gaps: Vec<String>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct GeneratorReply {
    queries: Vec<GeneratedQuery>,
}

/// Synthesize queries for the next iteration: one generator call per
/// configuration per `calls_per_config`, each asking for
/// `instructions_per_call` instructions. Weak mode (report present) stamps
/// non-empty target gaps; explore mode omits the report entirely. Outputs
/// deduplicate against prior queries by normalized instruction. A schema
/// violation on one call drops that call's contribution and the round
/// proceeds with fewer queries.
#[allow(clippy::too_many_arguments)]
pub fn generate_queries(
    prior: &[QuerySpec],
    report: Option<&WeaknessReport>,
    screenshots: &[Observation],
    metadata: &DomainMetadata,
    generator: &ChatEndpoint,
    templates: &PromptTemplates,
    calls_per_config: u32,
    instructions_per_call: u32,
    iteration: u32,
    word_cap: usize,
    config_info: &dyn Fn(&str) -> String,
) -> Result<Vec<QuerySpec>, WeaknessError> {
    assert!(!screenshots.is_empty(), "query generation needs a screenshot set");
    metadata.validate()?;

    let mode = if report.is_some() { QueryMode::Weak } else { QueryMode::Explore };
    let mode_tag = match mode {
        QueryMode::Weak => "weak",
        _ => "explore",
    };
    let prior_instructions: Vec<String> =
        prior.iter().map(|q| q.instruction.clone()).collect();
    let prior_json =
        serde_json::to_string_pretty(&prior_instructions).expect("instructions serialize");
    let weakness = match report {
        Some(r) => weakness_json(r),
        None => "(not used in this run)".to_string(),
    };
    let fallback_gaps: Vec<String> = report
        .map(|r| r.categories.iter().map(|c| c.category.clone()).collect())
        .unwrap_or_default();

    let mut seen: std::collections::BTreeSet<String> =
        prior.iter().map(|q| normalize_instruction(&q.instruction)).collect();
    let mut out: Vec<QuerySpec> = Vec::new();

    for config_id in &metadata.config_ids {
        for call in 0..calls_per_config {
            let machine_context = json!({
                "mode": mode_tag,
                "config_id": config_id,
                "count": instructions_per_call,
                "call": call,
                "iteration": iteration,
                "prior_instructions": prior_instructions,
                "weakness_categories": fallback_gaps,
                "asset_notes": metadata.asset_notes,
            })
            .to_string();
            let prompt = templates.generator(
                report.is_some(),
                instructions_per_call,
                word_cap,
                &prior_json,
                &weakness,
                &metadata.workspace_contract,
                config_id,
                &config_info(config_id),
                &machine_context,
            );
            let mut parts = vec![crate::gateway::ContentPart::Text { text: prompt }];
            for (i, obs) in screenshots.iter().enumerate() {
                parts.push(crate::gateway::ContentPart::Text { text: format!("Image {i}:") });
                parts.push(crate::gateway::ContentPart::Image {
                    screenshot_ref: obs.screenshot_ref.clone(),
                });
            }
            let messages =
                vec![Message { role: crate::gateway::MsgRole::User, parts }];

            let reply = chat_structured(generator, &messages, |raw| {
                serde_json::from_str::<GeneratorReply>(raw.trim()).map_err(|e| e.to_string())
            });
            let reply = match reply {
                Ok(r) => r,
                Err(GatewayError::SchemaViolation { error, .. }) => {
                    log::warn!(
                        "generator call {call} for {config_id} failed schema validation ({error}); \
                         continuing with fewer queries"
                    );
                    continue;
                }
                Err(e) => {
                    log::warn!("generator call {call} for {config_id} failed: {e}");
                    continue;
                }
            };

            for (idx, q) in reply.queries.into_iter().take(instructions_per_call as usize).enumerate()
            {
                let words = q.instruction.split_whitespace().count();
                if words > word_cap {
                    log::warn!(
                        "dropping generated instruction over the {word_cap}-word cap: {:?}",
                        q.instruction
                    );
                    continue;
                }
                let normalized = normalize_instruction(&q.instruction);
                if normalized.is_empty() || !seen.insert(normalized) {
                    continue;
                }
                let target_gaps = match mode {
                    QueryMode::Weak if q.targets_student_gaps.is_empty() => fallback_gaps.clone(),
                    QueryMode::Weak => q.targets_student_gaps,
                    _ => vec![],
                };
                let spec = QuerySpec {
                    query_id: format!(
                        "gen-i{iteration}-{mode_tag}-{}-c{call}-{idx}",
                        q.reference_config_id
                    ),
                    config_id: q.reference_config_id,
                    instruction: q.instruction,
                    mode,
                    iteration,
                    target_gaps,
                    rationale: q.rationale,
                };
                spec.validate(word_cap)?;
                out.push(spec);
            }
        }
    }
    Ok(out)
}
