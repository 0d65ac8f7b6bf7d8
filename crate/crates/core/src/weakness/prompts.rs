//! Prompt templates for the model-backed pipeline roles.
//!
//! Templates are plain text files with `{name}` placeholders, editable
//! without recompiling; the built-in set ships with the crate. Each template
//! ends with a machine-context JSON block so deterministic stand-in services
//! (and cost-sensitive callers) can read the structured inputs directly.

use std::path::Path;

use super::{WeaknessError, WeaknessReport};

/// Marker preceding the machine-readable context block in every prompt.
pub const MACHINE_CONTEXT_MARKER: &str = "## Machine context (JSON)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub verifier: String,
    pub summarizer: String,
    pub reranker: String,
    pub generator_weak: String,
    pub generator_explore: String,
}

impl PromptTemplates {
    /// The templates embedded in the crate.
    pub fn builtin() -> Self {
        PromptTemplates {
            verifier: include_str!("../../assets/prompts/verifier.txt").to_string(),
            summarizer: include_str!("../../assets/prompts/summarizer.txt").to_string(),
            reranker: include_str!("../../assets/prompts/reranker.txt").to_string(),
            generator_weak: include_str!("../../assets/prompts/generator_weak.txt").to_string(),
            generator_explore: include_str!("../../assets/prompts/generator_explore.txt")
                .to_string(),
        }
    }

    /// Load editable templates from a directory holding `verifier.txt`,
    /// `summarizer.txt`, `reranker.txt`, `generator_weak.txt`, and
    /// `generator_explore.txt`.
    pub fn from_dir(dir: &Path) -> Result<Self, WeaknessError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| {
                WeaknessError::InvalidMetadata(format!("prompt template {name}: {e}"))
            })
        };
        Ok(PromptTemplates {
            verifier: read("verifier.txt")?,
            summarizer: read("summarizer.txt")?,
            reranker: read("reranker.txt")?,
            generator_weak: read("generator_weak.txt")?,
            generator_explore: read("generator_explore.txt")?,
        })
    }

    pub fn verifier(&self, instruction: &str, steps: &str) -> String {
        fill(&self.verifier, &[("instruction", instruction), ("steps", steps)])
    }

    pub fn summarizer(&self, cases_json: &str, machine_context: &str) -> String {
        fill(
            &self.summarizer,
            &[("cases_json", cases_json), ("machine_context", machine_context)],
        )
    }

    pub fn reranker(&self, k: usize, machine_context: &str) -> String {
        fill(&self.reranker, &[("k", &k.to_string()), ("machine_context", machine_context)])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn generator(
        &self,
        weak: bool,
        count: u32,
        word_cap: usize,
        prior_instructions_json: &str,
        weakness_json: &str,
        workspace_contract: &str,
        config_id: &str,
        config_info: &str,
        machine_context: &str,
    ) -> String {
        let template = if weak { &self.generator_weak } else { &self.generator_explore };
        fill(
            template,
            &[
                ("count", &count.to_string()),
                ("word_cap", &word_cap.to_string()),
                ("prior_instructions_json", prior_instructions_json),
                ("weakness_json", weakness_json),
                ("workspace_contract", workspace_contract),
                ("config_id", config_id),
                ("config_info", config_info),
                ("machine_context", machine_context),
            ],
        )
    }
}

fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in substitutions {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Extract the machine-context JSON block from a rendered prompt. Stand-in
/// services parse this instead of the prose. Content after the JSON value
/// (for example appended image labels) is ignored.
pub fn machine_context(prompt: &str) -> Option<serde_json::Value> {
    let at = prompt.rfind(MACHINE_CONTEXT_MARKER)?;
    let tail = prompt[at + MACHINE_CONTEXT_MARKER.len()..].trim_start();
    serde_json::Deserializer::from_str(tail).into_iter::<serde_json::Value>().next()?.ok()
}

/// Render a weakness report as the JSON fragment prompts embed.
pub fn weakness_json(report: &WeaknessReport) -> String {
    serde_json::to_string_pretty(&report.categories).expect("categories serialize")
}
