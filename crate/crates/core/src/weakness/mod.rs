//! Iterative weakness-driven data generation.
//!
//! One iteration runs every pending query through paired teacher/student
//! episodes, keeps the tasks the teacher passes and the student fails,
//! distills the student's failure analyses into a weakness report, selects a
//! diverse, informative screenshot set from the iteration's trajectories, and
//! synthesizes the next round of queries — one weakness-conditioned call and
//! one exploration call per configuration. Iterating shifts the generated
//! task distribution toward whatever the student still cannot do, while the
//! exploration stream keeps coverage broad. The aggregate failure set across
//! iterations is the training task set.

mod discover;
mod generate;
mod pipeline;
pub mod prompts;
mod screenshots;
mod verifier;

pub use discover::{discover_weaknesses, DiscoveryOutcome, EpisodeRunner};
pub use generate::{generate_queries, summarize_report, normalize_instruction};
pub use pipeline::{
    dataset_stats, filter_tasks, run_generation_loop, DatasetStats, FilterRule, LoopHandles,
    LoopOptions, LoopSummary, PipelineError,
};
pub use prompts::PromptTemplates;
pub use screenshots::{farthest_point_order, select_screenshots};
pub use verifier::parse_verifier_reply;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::VerificationResult;

/// Domain-level environment metadata handed to the query generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainMetadata {
    pub domain_id: String,
    pub config_ids: Vec<String>,
    pub asset_notes: Vec<String>,
    pub workspace_contract: String,
}

impl DomainMetadata {
    pub fn from_sim(domain: &crate::sim::SimDomain) -> Self {
        DomainMetadata {
            domain_id: domain.domain_id.clone(),
            config_ids: domain.config_ids(),
            asset_notes: domain.asset_notes.clone(),
            workspace_contract: domain.workspace_contract.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), WeaknessError> {
        if self.config_ids.is_empty() {
            return Err(WeaknessError::InvalidMetadata("no config ids".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Seed,
    Weak,
    Explore,
}

/// One task query flowing through the loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub config_id: String,
    pub instruction: String,
    pub mode: QueryMode,
    pub iteration: u32,
    /// Weakness categories the query targets; non-empty exactly in weak mode.
    #[serde(default)]
    pub target_gaps: Vec<String>,
    #[serde(default)]
    pub rationale: String,
}

impl QuerySpec {
    pub fn seed(index: usize, config_id: &str, instruction: &str) -> Self {
        QuerySpec {
            query_id: format!("seed-{index:03}"),
            config_id: config_id.to_string(),
            instruction: instruction.to_string(),
            mode: QueryMode::Seed,
            iteration: 0,
            target_gaps: vec![],
            rationale: String::new(),
        }
    }

    pub fn validate(&self, word_cap: usize) -> Result<(), WeaknessError> {
        if self.mode == QueryMode::Seed && self.iteration != 0 {
            return Err(WeaknessError::InvalidQuery(format!(
                "{}: seed queries carry iteration 0",
                self.query_id
            )));
        }
        let weak = self.mode == QueryMode::Weak;
        if weak != !self.target_gaps.is_empty() {
            return Err(WeaknessError::InvalidQuery(format!(
                "{}: target_gaps must be non-empty exactly in weak mode",
                self.query_id
            )));
        }
        let words = self.instruction.split_whitespace().count();
        if words > word_cap {
            return Err(WeaknessError::InvalidQuery(format!(
                "{}: instruction has {words} words, cap is {word_cap}",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeaknessCategory {
    pub category: String,
    pub what_student_cannot_do: String,
    pub likely_failed_features_or_operations: Vec<String>,
}

/// Structured summary of recurring student failure modes for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeaknessReport {
    pub iteration: u32,
    pub overall_summary: String,
    pub categories: Vec<WeaknessCategory>,
}

/// A task the teacher passed and the student failed — the unit of
/// supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCase {
    pub query: QuerySpec,
    pub teacher_traj_id: String,
    pub student_traj_id: String,
    pub teacher_verdict: VerificationResult,
    pub student_verdict: VerificationResult,
}

impl FailureCase {
    pub fn new(
        query: QuerySpec,
        teacher_traj_id: String,
        student_traj_id: String,
        teacher_verdict: VerificationResult,
        student_verdict: VerificationResult,
    ) -> Result<Self, WeaknessError> {
        if !teacher_verdict.passed || student_verdict.passed {
            return Err(WeaknessError::NotAFailureCase {
                query_id: query.query_id,
                teacher_passed: teacher_verdict.passed,
                student_passed: student_verdict.passed,
            });
        }
        Ok(FailureCase { query, teacher_traj_id, student_traj_id, teacher_verdict, student_verdict })
    }

    /// Re-checked whenever cases are loaded from disk.
    pub fn validate(&self) -> Result<(), WeaknessError> {
        if !self.teacher_verdict.passed || self.student_verdict.passed {
            return Err(WeaknessError::NotAFailureCase {
                query_id: self.query.query_id.clone(),
                teacher_passed: self.teacher_verdict.passed,
                student_passed: self.student_verdict.passed,
            });
        }
        Ok(())
    }
}

/// Bookkeeping for one attempted query: both verdicts, or why it was skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub query: QuerySpec,
    pub teacher_traj_id: String,
    pub student_traj_id: String,
    pub teacher_verdict: Option<VerificationResult>,
    pub student_verdict: Option<VerificationResult>,
    /// Reason when the query could not be fully attempted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl CaseRecord {
    pub fn attempted(&self) -> bool {
        self.skipped.is_none() && self.teacher_verdict.is_some() && self.student_verdict.is_some()
    }
}

/// All verdict bookkeeping across iterations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub records: Vec<CaseRecord>,
}

#[derive(Debug, Error)]
pub enum WeaknessError {
    #[error("invalid domain metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error(
        "{query_id} is not a failure case (teacher_passed={teacher_passed}, student_passed={student_passed})"
    )]
    NotAFailureCase { query_id: String, teacher_passed: bool, student_passed: bool },
    #[error("no failure analyses to summarize")]
    NothingToSummarize,
}
