//! The iterative generation loop, its on-disk archive, task-selection
//! filtering, and dataset statistics.
//!
//! Each iteration writes a self-contained directory — queries, trajectories,
//! verdict records, failure cases, the weakness report, the selected
//! screenshot set, and the next round's generated queries — plus a manifest
//! with content hashes. A rerun with the same seed reproduces every file
//! byte for byte; a resumed run skips iterations whose manifest matches and
//! continues from the first incomplete one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatEndpoint, Embedder, GatewayError, ScreenshotResolver};
use crate::hashutil;
use crate::trajectory::{
    load_trajectories, save_trajectories, PolicyClient, StoreError, Trajectory,
};

use super::{
    discover_weaknesses, generate_queries, select_screenshots, summarize_report, Bookkeeping,
    CaseRecord, DomainMetadata, EpisodeRunner, FailureCase, PromptTemplates, QuerySpec,
    WeaknessError, WeaknessReport,
};

pub const ITERATION_SCHEMA: &str = "iteration/v1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Weakness(#[from] WeaknessError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("iteration {iteration} failed wholly ({reason}); checkpoint written, rerun to resume")]
    IterationFailed { iteration: u32, reason: String },
    #[error("interrupted after iteration {after} (checkpoint written)")]
    Interrupted { after: u32 },
    #[error("student snapshot changed mid-run: {first} vs {second}")]
    SnapshotDrift { first: String, second: String },
    #[error("corrupt archive at {path}: {reason}")]
    CorruptArchive { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Handles for every external role the loop touches.
pub struct LoopHandles<'a> {
    pub teacher: &'a dyn PolicyClient,
    pub student: &'a dyn PolicyClient,
    pub runner: &'a dyn EpisodeRunner,
    pub summarizer: &'a ChatEndpoint,
    pub generator: &'a ChatEndpoint,
    pub reranker: &'a ChatEndpoint,
    pub embedder: &'a dyn Embedder,
    pub resolver: &'a dyn ScreenshotResolver,
    /// provide_info: extra per-config context for the generator prompt.
    pub config_info: &'a dyn Fn(&str) -> String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOptions {
    /// Total iterations N; generation runs on the first N-1.
    pub iterations: u32,
    /// Screenshots kept after reranking.
    pub screenshot_k: usize,
    /// Generator calls per configuration per mode (weak / explore).
    pub calls_per_config_per_mode: u32,
    pub instructions_per_call: u32,
    pub instruction_word_cap: usize,
    /// Abort (with a resumable checkpoint) after completing this many
    /// iterations; used by kill/resume testing and budget-capped operation.
    #[serde(default)]
    pub interrupt_after: Option<u32>,
}

impl Default for LoopOptions {
    fn default() -> Self {
        LoopOptions {
            iterations: 5,
            screenshot_k: 10,
            calls_per_config_per_mode: 1,
            instructions_per_call: 3,
            instruction_word_cap: 15,
            interrupt_after: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopSummary {
    pub domain_id: String,
    pub iterations_run: u32,
    pub generation_rounds: u32,
    pub per_round_generated: Vec<u64>,
    pub total_generated: u64,
    pub failure_count: u64,
    pub student_policy_id: String,
    #[serde(skip)]
    pub failures: Vec<FailureCase>,
    #[serde(skip)]
    pub bookkeeping: Bookkeeping,
}

#[derive(Debug, Serialize, Deserialize)]
struct IterationManifest {
    schema_version: String,
    iteration: u32,
    /// Hash of this iteration's input query file.
    inputs_hash: String,
    /// Hash of the loop options and domain metadata.
    options_hash: String,
    code_version: String,
    queries: u64,
    attempted: u64,
    skipped: u64,
    failures: u64,
    generated: u64,
    completed: bool,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("archive records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line).map_err(|e| PipelineError::CorruptArchive {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(items)
}

fn jsonl_hash<T: Serialize>(items: &[T]) -> String {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("records serialize"));
        text.push('\n');
    }
    hashutil::sha256_hex(text.as_bytes())
}

/// Load failure cases from an archive, re-checking the defining predicate on
/// every record.
pub fn load_failures(path: &Path) -> Result<Vec<FailureCase>, PipelineError> {
    let failures: Vec<FailureCase> = read_jsonl(path)?;
    for case in &failures {
        case.validate().map_err(|e| PipelineError::CorruptArchive {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    Ok(failures)
}

/// Run the full iterative loop. Seeds drive iteration 0; afterwards each
/// iteration consumes the queries generated by the previous one. Returns the
/// aggregate failure set and accounting.
pub fn run_generation_loop(
    metadata: &DomainMetadata,
    seeds: &[QuerySpec],
    handles: &LoopHandles,
    options: &LoopOptions,
    templates: &PromptTemplates,
    out_dir: &Path,
    resume: bool,
) -> Result<LoopSummary, PipelineError> {
    assert!(!seeds.is_empty(), "at least one seed query is required");
    assert!(options.iterations >= 1, "at least one iteration is required");
    metadata.validate()?;
    for seed in seeds {
        seed.validate(options.instruction_word_cap)?;
    }

    let options_hash = hashutil::sha256_hex(
        serde_json::to_string(&(options, metadata)).expect("options serialize").as_bytes(),
    );

    let mut queries: Vec<QuerySpec> = seeds.to_vec();
    let mut prior_all: Vec<QuerySpec> = Vec::new();
    let mut all_failures: Vec<FailureCase> = Vec::new();
    let mut bookkeeping = Bookkeeping::default();
    let mut per_round_generated: Vec<u64> = Vec::new();
    let mut student_policy_id: Option<String> = None;

    for i in 0..options.iterations {
        let iter_dir = out_dir.join("iterations").join(format!("iter_{i:03}"));
        let inputs_hash = jsonl_hash(&queries);
        let manifest_path = iter_dir.join("manifest.json");

        let reuse = resume
            && manifest_path.exists()
            && match read_manifest(&manifest_path) {
                Ok(m) => m.completed && m.inputs_hash == inputs_hash && m.options_hash == options_hash,
                Err(_) => false,
            };

        if reuse {
            let failures = load_failures(&iter_dir.join("failures.jsonl"))?;
            let records: Vec<CaseRecord> = read_jsonl(&iter_dir.join("results.jsonl"))?;
            all_failures.extend(failures);
            bookkeeping.records.extend(records);
            let trajs = load_trajectories(&iter_dir.join("trajectories.jsonl"), true)?;
            note_student_policy(&mut student_policy_id, &trajs.trajectories)?;
            prior_all.append(&mut queries);
            if i + 1 < options.iterations {
                let generated: Vec<QuerySpec> = read_jsonl(&iter_dir.join("generated.jsonl"))?;
                per_round_generated.push(generated.len() as u64);
                queries = generated;
            }
            continue;
        }

        fs::create_dir_all(&iter_dir).map_err(io_err(&iter_dir))?;
        write_jsonl(&iter_dir.join("queries.jsonl"), &queries)?;

        let outcome =
            discover_weaknesses(&queries, handles.teacher, handles.student, handles.runner);
        save_trajectories(&iter_dir.join("trajectories.jsonl"), &outcome.trajectories)?;
        write_jsonl(&iter_dir.join("results.jsonl"), &outcome.bookkeeping.records)?;
        write_jsonl(&iter_dir.join("failures.jsonl"), &outcome.failures)?;
        note_student_policy(&mut student_policy_id, &outcome.trajectories)?;

        let attempted = outcome.bookkeeping.records.iter().filter(|r| r.attempted()).count();
        let skipped = outcome.bookkeeping.records.len() - attempted;
        if attempted == 0 {
            write_manifest(
                &manifest_path,
                &IterationManifest {
                    schema_version: ITERATION_SCHEMA.into(),
                    iteration: i,
                    inputs_hash: inputs_hash.clone(),
                    options_hash: options_hash.clone(),
                    code_version: env!("CARGO_PKG_VERSION").into(),
                    queries: queries.len() as u64,
                    attempted: 0,
                    skipped: skipped as u64,
                    failures: 0,
                    generated: 0,
                    completed: false,
                },
            )?;
            return Err(PipelineError::IterationFailed {
                iteration: i,
                reason: "every query was skipped".into(),
            });
        }

        // Summarize this iteration's failure analyses. An empty failure set
        // gives nothing to summarize; weak-mode generation is skipped below.
        let report: Option<WeaknessReport> = if outcome.failures.is_empty() {
            None
        } else {
            let analyses: Vec<(String, String)> = outcome
                .failures
                .iter()
                .map(|f| {
                    (f.query.instruction.clone(), f.student_verdict.failure_analysis.clone())
                })
                .collect();
            let report = summarize_report(&analyses, handles.summarizer, templates, i)?;
            let path = iter_dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
                .map_err(io_err(&path))?;
            Some(report)
        };

        let mut generated: Vec<QuerySpec> = Vec::new();
        if i + 1 < options.iterations {
            // Screenshot pool: both roles, this iteration only.
            let pool: Vec<crate::trajectory::Observation> = outcome
                .trajectories
                .iter()
                .flat_map(|t| t.steps.iter().map(|s| s.observation.clone()))
                .collect();
            let shots = select_screenshots(
                &pool,
                handles.resolver,
                handles.embedder,
                handles.reranker,
                templates,
                options.screenshot_k,
            )?;
            write_jsonl(&iter_dir.join("screenshots.jsonl"), &shots)?;

            let mut dedup_base: Vec<QuerySpec> = prior_all.clone();
            dedup_base.extend(queries.iter().cloned());

            if let Some(report) = &report {
                let weak = generate_queries(
                    &dedup_base,
                    Some(report),
                    &shots,
                    metadata,
                    handles.generator,
                    templates,
                    options.calls_per_config_per_mode,
                    options.instructions_per_call,
                    i + 1,
                    options.instruction_word_cap,
                    handles.config_info,
                )?;
                dedup_base.extend(weak.iter().cloned());
                generated.extend(weak);
            }
            let explore = generate_queries(
                &dedup_base,
                None,
                &shots,
                metadata,
                handles.generator,
                templates,
                options.calls_per_config_per_mode,
                options.instructions_per_call,
                i + 1,
                options.instruction_word_cap,
                handles.config_info,
            )?;
            generated.extend(explore);
            write_jsonl(&iter_dir.join("generated.jsonl"), &generated)?;
            per_round_generated.push(generated.len() as u64);
        }

        write_manifest(
            &manifest_path,
            &IterationManifest {
                schema_version: ITERATION_SCHEMA.into(),
                iteration: i,
                inputs_hash: inputs_hash.clone(),
                options_hash: options_hash.clone(),
                code_version: env!("CARGO_PKG_VERSION").into(),
                queries: queries.len() as u64,
                attempted: attempted as u64,
                skipped: skipped as u64,
                failures: outcome.failures.len() as u64,
                generated: generated.len() as u64,
                completed: true,
            },
        )?;

        all_failures.extend(outcome.failures);
        bookkeeping.records.extend(outcome.bookkeeping.records);
        prior_all.append(&mut queries);
        queries = generated;

        if let Some(cap) = options.interrupt_after {
            if i + 1 >= cap && i + 1 < options.iterations {
                return Err(PipelineError::Interrupted { after: i + 1 });
            }
        }
    }

    write_jsonl(&out_dir.join("failures.jsonl"), &all_failures)?;
    write_jsonl(&out_dir.join("results.jsonl"), &bookkeeping.records)?;
    let summary = LoopSummary {
        domain_id: metadata.domain_id.clone(),
        iterations_run: options.iterations,
        generation_rounds: options.iterations - 1,
        total_generated: per_round_generated.iter().sum(),
        per_round_generated,
        failure_count: all_failures.len() as u64,
        student_policy_id: student_policy_id.unwrap_or_default(),
        failures: all_failures,
        bookkeeping,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(io_err(&summary_path))?;
    Ok(summary)
}

fn note_student_policy(
    current: &mut Option<String>,
    trajectories: &[Trajectory],
) -> Result<(), PipelineError> {
    for traj in trajectories {
        if traj.role != crate::trajectory::Role::Student {
            continue;
        }
        match current {
            None => *current = Some(traj.policy_id.clone()),
            Some(existing) if existing != &traj.policy_id => {
                return Err(PipelineError::SnapshotDrift {
                    first: existing.clone(),
                    second: traj.policy_id.clone(),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<IterationManifest, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::CorruptArchive {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_manifest(path: &Path, manifest: &IterationManifest) -> Result<(), PipelineError> {
    fs::write(path, serde_json::to_string_pretty(manifest).expect("manifest serializes"))
        .map_err(io_err(path))
}

/// Task-selection rule for building the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    /// Every attempted task.
    All,
    /// Tasks the teacher passed.
    TeacherPass,
    /// Tasks the teacher passed and the student failed (the main rule).
    TeacherPassStudentFail,
}

impl FilterRule {
    pub fn parse(s: &str) -> Option<FilterRule> {
        match s {
            "all" => Some(FilterRule::All),
            "tp" | "teacher_pass" => Some(FilterRule::TeacherPass),
            "tpsf" | "teacher_pass_and_student_fail" => Some(FilterRule::TeacherPassStudentFail),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterRule::All => "all",
            FilterRule::TeacherPass => "tp",
            FilterRule::TeacherPassStudentFail => "tpsf",
        }
    }
}

/// Select task query ids from verdict bookkeeping. The three rules nest:
/// tpsf ⊆ tp ⊆ all.
pub fn filter_tasks(bookkeeping: &Bookkeeping, rule: FilterRule) -> Vec<String> {
    bookkeeping
        .records
        .iter()
        .filter(|r| r.attempted())
        .filter(|r| {
            let teacher_pass = r.teacher_verdict.as_ref().map(|v| v.passed).unwrap_or(false);
            let student_pass = r.student_verdict.as_ref().map(|v| v.passed).unwrap_or(false);
            match rule {
                FilterRule::All => true,
                FilterRule::TeacherPass => teacher_pass,
                FilterRule::TeacherPassStudentFail => teacher_pass && !student_pass,
            }
        })
        .map(|r| r.query.query_id.clone())
        .collect()
}

/// Per-domain counts over an archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub domain_id: String,
    pub tasks: u64,
    pub teacher_pass: u64,
    pub student_fail: u64,
    pub plan_errors: u64,
    pub exec_errors: u64,
}

/// Counts from bookkeeping plus the preference pairs built from the archive
/// (pass an empty slice when the preference stage has not run yet).
pub fn dataset_stats(
    domain_id: &str,
    bookkeeping: &Bookkeeping,
    pairs: &[crate::prefs::PreferencePair],
) -> DatasetStats {
    let attempted: Vec<&CaseRecord> =
        bookkeeping.records.iter().filter(|r| r.attempted()).collect();
    let teacher_pass = attempted
        .iter()
        .filter(|r| r.teacher_verdict.as_ref().is_some_and(|v| v.passed))
        .count() as u64;
    let student_fail = attempted
        .iter()
        .filter(|r| {
            r.teacher_verdict.as_ref().is_some_and(|v| v.passed)
                && r.student_verdict.as_ref().is_some_and(|v| !v.passed)
        })
        .count() as u64;
    let plan_errors = pairs
        .iter()
        .filter(|p| p.error_type == crate::action::DiffKind::PlanError)
        .count() as u64;
    let exec_errors = pairs
        .iter()
        .filter(|p| p.error_type == crate::action::DiffKind::ExecError)
        .count() as u64;
    DatasetStats {
        domain_id: domain_id.to_string(),
        tasks: attempted.len() as u64,
        teacher_pass,
        student_fail,
        plan_errors,
        exec_errors,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "domain           {:>10}", self.domain_id)?;
        writeln!(f, "tasks            {:>10}", self.tasks)?;
        writeln!(f, "teacher-pass     {:>10}", self.teacher_pass)?;
        writeln!(f, "student-fail     {:>10}", self.student_fail)?;
        writeln!(f, "plan errors      {:>10}", self.plan_errors)?;
        write!(f, "exec errors      {:>10}", self.exec_errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::VerificationResult;
    use crate::weakness::QueryMode;
    use rand::{Rng, SeedableRng};

    fn record(id: &str, teacher: bool, student: bool) -> CaseRecord {
        let verdict = |pass: bool| {
            if pass {
                VerificationResult::pass(vec![], "p".into())
            } else {
                VerificationResult::fail(vec![], "p".into(), "a".into())
            }
        };
        CaseRecord {
            query: QuerySpec {
                query_id: id.into(),
                config_id: "c".into(),
                instruction: "i".into(),
                mode: QueryMode::Seed,
                iteration: 0,
                target_gaps: vec![],
                rationale: String::new(),
            },
            teacher_traj_id: format!("{id}.teacher"),
            student_traj_id: format!("{id}.student"),
            teacher_verdict: Some(verdict(teacher)),
            student_verdict: Some(verdict(student)),
            skipped: None,
        }
    }

    #[test]
    fn filter_rules_match_spec_examples() {
        let bookkeeping = Bookkeeping {
            records: vec![record("a", true, false), record("b", true, true), record("c", false, false)],
        };
        assert_eq!(filter_tasks(&bookkeeping, FilterRule::TeacherPassStudentFail), vec!["a"]);
        assert_eq!(filter_tasks(&bookkeeping, FilterRule::TeacherPass), vec!["a", "b"]);
        assert_eq!(filter_tasks(&bookkeeping, FilterRule::All), vec!["a", "b", "c"]);
    }

    #[test]
    fn filter_rules_nest_on_random_archives() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(0..30);
            let records: Vec<CaseRecord> = (0..n)
                .map(|i| record(&format!("q{i}"), rng.gen_bool(0.5), rng.gen_bool(0.5)))
                .collect();
            let bk = Bookkeeping { records };
            let all: std::collections::BTreeSet<String> =
                filter_tasks(&bk, FilterRule::All).into_iter().collect();
            let tp: std::collections::BTreeSet<String> =
                filter_tasks(&bk, FilterRule::TeacherPass).into_iter().collect();
            let tpsf: std::collections::BTreeSet<String> =
                filter_tasks(&bk, FilterRule::TeacherPassStudentFail).into_iter().collect();
            assert!(tpsf.is_subset(&tp));
            assert!(tp.is_subset(&all));
        }
    }

    #[test]
    fn stats_partition_counts() {
        let bookkeeping = Bookkeeping {
            records: vec![
                record("a", true, false),
                record("b", true, true),
                record("c", false, true),
            ],
        };
        let stats = dataset_stats("d", &bookkeeping, &[]);
        assert_eq!(stats.tasks, 3);
        assert_eq!(stats.teacher_pass, 2);
        assert_eq!(stats.student_fail, 1);
        assert_eq!(stats.plan_errors + stats.exec_errors, 0);
    }
}
