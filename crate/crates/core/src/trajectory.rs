//! Rollout representation and persistence.
//!
//! A trajectory is a query plus the ordered (observation, response) steps one
//! policy produced against one environment session, capped by a step horizon.
//! Step contexts package the query, the current observation, and the full
//! prior history — the conditioning input for any policy. Trajectories
//! persist as a record-per-line archive with a schema version on every
//! record; screenshots live in a content-addressed store alongside.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{AgentResponse, ToolCall};

/// Schema version stamped on every persisted trajectory record.
pub const TRAJECTORY_SCHEMA: &str = "trajectory/v1";

/// One observed screen state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based step index within the trajectory.
    pub step_index: u32,
    /// Content-addressed identifier of the stored screenshot artifact.
    pub screenshot_ref: String,
    /// Optional cached embedding for this screenshot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_vec: Option<Vec<f32>>,
}

/// Which policy produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    ReplayedStudent,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::ReplayedStudent => "replayed_student",
        }
    }
}

/// Terminal condition of a rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryStatus {
    /// Ended with a DONE/FAIL call.
    Complete,
    /// Hit the step cap without a terminal call.
    HorizonCapped,
    /// Policy or environment fault left a partial trajectory.
    Invalid { reason: String },
}

/// One step: what the policy saw and what it answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub observation: Observation,
    pub response: AgentResponse,
}

/// A full rollout for one query and one policy role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub instruction: String,
    pub role: Role,
    /// Identifier of the policy snapshot that produced every step.
    pub policy_id: String,
    pub steps: Vec<TrajStep>,
    pub horizon_cap: u32,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn id(&self) -> String {
        format!("{}.{}", self.query_id, self.role.as_str())
    }

    pub fn is_valid(&self) -> bool {
        !matches!(self.status, TrajectoryStatus::Invalid { .. })
    }

    /// Structural checks: step cap, contiguous 1-based indices, terminal call
    /// only in the last step.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.steps.len() as u32 > self.horizon_cap {
            return Err(StoreError::CorruptRecord {
                line: 0,
                reason: format!(
                    "{} steps exceed horizon cap {}",
                    self.steps.len(),
                    self.horizon_cap
                ),
            });
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.observation.step_index != (i + 1) as u32 {
                return Err(StoreError::CorruptRecord {
                    line: 0,
                    reason: format!(
                        "step {} carries observation index {}",
                        i + 1,
                        step.observation.step_index
                    ),
                });
            }
            if step.response.is_terminal() && i + 1 != self.steps.len() {
                return Err(StoreError::CorruptRecord {
                    line: 0,
                    reason: format!("terminal call at step {} of {}", i + 1, self.steps.len()),
                });
            }
        }
        Ok(())
    }
}

/// The conditioning input for one policy decision: the task instruction, the
/// current observation, and all prior (observation, response) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub query: String,
    pub current_obs: Observation,
    pub history: Vec<TrajStep>,
}

/// Verdict of a verifier on one (task, trajectory) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub passed: bool,
    pub completion_criteria: Vec<String>,
    pub verification_process: String,
    /// Empty exactly when `passed` is true.
    pub failure_analysis: String,
}

impl VerificationResult {
    pub fn pass(criteria: Vec<String>, process: String) -> Self {
        VerificationResult {
            passed: true,
            completion_criteria: criteria,
            verification_process: process,
            failure_analysis: String::new(),
        }
    }

    pub fn fail(criteria: Vec<String>, process: String, analysis: String) -> Self {
        debug_assert!(!analysis.is_empty(), "failed verdicts need an analysis");
        VerificationResult {
            passed: false,
            completion_criteria: criteria,
            verification_process: process,
            failure_analysis: analysis,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.passed == self.failure_analysis.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("environment fault: {0}")]
    Fault(String),
}

/// A policy endpoint: maps a step context to one structured response.
pub trait PolicyClient: Send + Sync {
    fn respond(&self, ctx: &StepContext) -> Result<AgentResponse, PolicyError>;
    /// Stable identifier of the underlying snapshot (model + adapter state).
    fn policy_id(&self) -> String;
}

/// One exclusive environment session, already reset to a task configuration.
pub trait Environment {
    /// Observation of the current state, persisting its screenshot.
    fn observe(&mut self, step_index: u32) -> Result<Observation, EnvironmentError>;
    /// Apply one tool call. Invalid interactions are environment-defined
    /// no-ops, not errors.
    fn apply(&mut self, call: &ToolCall) -> Result<(), EnvironmentError>;
}

/// Run one policy against one environment session until a terminal call, the
/// step cap, or a fault. Faults yield a partial trajectory flagged invalid
/// rather than an error.
pub fn run_rollout(
    policy: &dyn PolicyClient,
    env: &mut dyn Environment,
    query_id: &str,
    instruction: &str,
    role: Role,
    max_steps: u32,
) -> Trajectory {
    assert!(max_steps >= 1, "max_steps must be at least 1");
    let mut traj = Trajectory {
        query_id: query_id.to_string(),
        instruction: instruction.to_string(),
        role,
        policy_id: policy.policy_id(),
        steps: Vec::new(),
        horizon_cap: max_steps,
        status: TrajectoryStatus::HorizonCapped,
    };
    for t in 1..=max_steps {
        let obs = match env.observe(t) {
            Ok(o) => o,
            Err(e) => {
                traj.status = TrajectoryStatus::Invalid { reason: e.to_string() };
                return traj;
            }
        };
        let ctx = StepContext {
            query: instruction.to_string(),
            current_obs: obs.clone(),
            history: traj.steps.clone(),
        };
        let response = match policy.respond(&ctx) {
            Ok(r) => r,
            Err(e) => {
                traj.status = TrajectoryStatus::Invalid { reason: e.to_string() };
                return traj;
            }
        };
        let terminal = response.is_terminal();
        let calls = response.executions.clone();
        traj.steps.push(TrajStep { observation: obs, response });
        if terminal {
            traj.status = TrajectoryStatus::Complete;
            return traj;
        }
        for call in &calls {
            if let Err(e) = env.apply(call) {
                traj.status = TrajectoryStatus::Invalid { reason: e.to_string() };
                return traj;
            }
        }
    }
    traj
}

/// Prefix view of a trajectory at step `t`: history is steps `1..t-1`, the
/// current observation is step `t`'s. Pure function of its inputs.
pub fn build_context(traj: &Trajectory, t: usize) -> Result<StepContext, StoreError> {
    if t < 1 || t > traj.steps.len() {
        return Err(StoreError::IndexOutOfRange { index: t, len: traj.steps.len() });
    }
    Ok(StepContext {
        query: traj.instruction.clone(),
        current_obs: traj.steps[t - 1].observation.clone(),
        history: traj.steps[..t - 1].to_vec(),
    })
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("step index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    schema_version: String,
    #[serde(flatten)]
    trajectory: Trajectory,
}

/// Serialized writer for appending trajectories from concurrent workers.
pub struct TrajectoryWriter {
    path: PathBuf,
    file: Mutex<BufWriter<File>>,
}

impl TrajectoryWriter {
    /// Opens `path` for appending, creating parent directories as needed.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(TrajectoryWriter { path: path.to_path_buf(), file: Mutex::new(BufWriter::new(file)) })
    }

    pub fn append(&self, traj: &Trajectory) -> Result<(), StoreError> {
        traj.validate()?;
        let record = TrajectoryRecord {
            schema_version: TRAJECTORY_SCHEMA.to_string(),
            trajectory: traj.clone(),
        };
        let line = serde_json::to_string(&record).expect("trajectory serializes");
        let mut file = self.file.lock().expect("writer lock");
        writeln!(file, "{line}").map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }
}

/// Write a whole collection in order, replacing any existing archive.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut out = String::new();
    for traj in trajectories {
        traj.validate()?;
        let record = TrajectoryRecord {
            schema_version: TRAJECTORY_SCHEMA.to_string(),
            trajectory: traj.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("trajectory serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Result of loading an archive in lenient mode.
#[derive(Debug)]
pub struct LoadOutcome {
    pub trajectories: Vec<Trajectory>,
    /// (line number, reason) for every skipped record.
    pub corrupt: Vec<(usize, String)>,
}

/// Load a record-per-line archive. In strict mode the first bad line aborts;
/// in lenient mode bad lines are skipped and reported.
pub fn load_trajectories(path: &Path, strict: bool) -> Result<LoadOutcome, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut outcome = LoadOutcome { trajectories: Vec::new(), corrupt: Vec::new() };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(traj) => outcome.trajectories.push(traj),
            Err(reason) => {
                if strict {
                    return Err(StoreError::CorruptRecord { line: line_no, reason });
                }
                outcome.corrupt.push((line_no, reason));
            }
        }
    }
    Ok(outcome)
}

fn parse_record(line: &str) -> Result<Trajectory, String> {
    let record: TrajectoryRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if record.schema_version != TRAJECTORY_SCHEMA {
        return Err(format!(
            "schema version {:?} does not match {TRAJECTORY_SCHEMA:?}",
            record.schema_version
        ));
    }
    record.trajectory.validate().map_err(|e| e.to_string())?;
    Ok(record.trajectory)
}

/// Content-addressed screenshot store with a `<domain>/<hash-prefix>/<hash>`
/// directory layout.
pub struct ScreenshotStore {
    root: PathBuf,
}

impl ScreenshotStore {
    pub fn new(root: &Path) -> Self {
        ScreenshotStore { root: root.to_path_buf() }
    }

    pub fn path_for(&self, domain: &str, hash: &str) -> PathBuf {
        let prefix = &hash[..hash.len().min(2)];
        self.root.join(domain).join(prefix).join(hash)
    }

    /// Store `bytes` under its hash; writes are skipped when the artifact
    /// already exists, deduplicating across rollouts that revisit states.
    pub fn put(&self, domain: &str, hash: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.path_for(domain, hash);
        if !path.exists() {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(&path))?;
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(path)
    }

    pub fn get(&self, domain: &str, hash: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_for(domain, hash);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn contains(&self, domain: &str, hash: &str) -> bool {
        self.path_for(domain, hash).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{FormatConfig, DONE};

    fn apply_config() -> FormatConfig {
        FormatConfig::default()
    }

    fn obs(i: u32) -> Observation {
        Observation { step_index: i, screenshot_ref: format!("ref{i}"), feature_vec: None }
    }

    fn step(i: u32, calls: Vec<ToolCall>) -> TrajStep {
        TrajStep {
            observation: obs(i),
            response: AgentResponse::new("r", "d", calls, &apply_config()),
        }
    }

    fn traj(n: u32) -> Trajectory {
        let mut steps: Vec<TrajStep> =
            (1..n).map(|i| step(i, vec![ToolCall::coord("Click", 1, 1)])).collect();
        steps.push(step(n, vec![ToolCall::known(DONE, vec![])]));
        Trajectory {
            query_id: "q1".into(),
            instruction: "do the thing".into(),
            role: Role::Teacher,
            policy_id: "scripted-teacher".into(),
            steps,
            horizon_cap: 50,
            status: TrajectoryStatus::Complete,
        }
    }

    struct AlwaysDone;
    impl PolicyClient for AlwaysDone {
        fn respond(&self, _ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
            Ok(AgentResponse::new("done", "", vec![ToolCall::known(DONE, vec![])], &apply_config()))
        }
        fn policy_id(&self) -> String {
            "always-done".into()
        }
    }

    struct Looper;
    impl PolicyClient for Looper {
        fn respond(&self, _ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
            Ok(AgentResponse::new(
                "again",
                "",
                vec![ToolCall::coord("Click", 1, 1)],
                &apply_config(),
            ))
        }
        fn policy_id(&self) -> String {
            "looper".into()
        }
    }

    struct NullEnv {
        t: u32,
    }
    impl Environment for NullEnv {
        fn observe(&mut self, step_index: u32) -> Result<Observation, EnvironmentError> {
            self.t = step_index;
            Ok(obs(step_index))
        }
        fn apply(&mut self, _call: &ToolCall) -> Result<(), EnvironmentError> {
            Ok(())
        }
    }

    #[test]
    fn immediate_terminal_yields_length_one() {
        let mut env = NullEnv { t: 0 };
        let t = run_rollout(&AlwaysDone, &mut env, "q", "noop", Role::Teacher, 50);
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.status, TrajectoryStatus::Complete);
    }

    #[test]
    fn looping_policy_hits_horizon_cap() {
        let mut env = NullEnv { t: 0 };
        let t = run_rollout(&Looper, &mut env, "q", "loop", Role::Student, 50);
        assert_eq!(t.steps.len(), 50);
        assert_eq!(t.status, TrajectoryStatus::HorizonCapped);
        t.validate().unwrap();
    }

    #[test]
    fn failing_policy_yields_invalid_partial() {
        struct Flaky;
        impl PolicyClient for Flaky {
            fn respond(&self, ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
                if ctx.current_obs.step_index >= 2 {
                    Err(PolicyError::Unavailable("gateway down".into()))
                } else {
                    Ok(AgentResponse::new(
                        "go",
                        "",
                        vec![ToolCall::coord("Click", 1, 1)],
                        &apply_config(),
                    ))
                }
            }
            fn policy_id(&self) -> String {
                "flaky".into()
            }
        }
        let mut env = NullEnv { t: 0 };
        let t = run_rollout(&Flaky, &mut env, "q", "x", Role::Student, 50);
        assert_eq!(t.steps.len(), 1);
        assert!(!t.is_valid());
    }

    #[test]
    fn build_context_prefixes() {
        let t = traj(5);
        let c1 = build_context(&t, 1).unwrap();
        assert!(c1.history.is_empty());
        let c3 = build_context(&t, 3).unwrap();
        assert_eq!(c3.history.len(), 2);
        assert_eq!(c3.current_obs.step_index, 3);
        let clast = build_context(&t, 5).unwrap();
        assert_eq!(clast.history.len(), 4);
        assert!(build_context(&t, 0).is_err());
        assert!(build_context(&t, 6).is_err());
        // Referential transparency: equal inputs, equal values.
        assert_eq!(build_context(&t, 3).unwrap(), c3);
    }

    #[test]
    fn terminal_midway_fails_validation() {
        let mut t = traj(3);
        t.steps[0].response =
            AgentResponse::new("r", "", vec![ToolCall::known(DONE, vec![])], &apply_config());
        assert!(t.validate().is_err());
    }

    #[test]
    fn archive_roundtrip_and_lenient_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("archive.jsonl");

        save_trajectories(&path, &[]).unwrap();
        assert!(load_trajectories(&path, true).unwrap().trajectories.is_empty());

        let ts = vec![traj(1), traj(3), traj(5)];
        save_trajectories(&path, &ts).unwrap();
        let loaded = load_trajectories(&path, true).unwrap();
        assert_eq!(loaded.trajectories, ts);

        // Corrupt the middle line; lenient load reports it, strict aborts.
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let bad = lines[1].replace("trajectory/v1", "trajectory/v9");
        lines[1] = &bad;
        fs::write(&path, lines.join("\n")).unwrap();

        let lenient = load_trajectories(&path, false).unwrap();
        assert_eq!(lenient.trajectories.len(), 2);
        assert_eq!(lenient.corrupt.len(), 1);
        assert_eq!(lenient.corrupt[0].0, 2);
        assert!(load_trajectories(&path, true).is_err());
    }

    #[test]
    fn screenshot_store_layout_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = ScreenshotStore::new(dir.path());
        let hash = "abcdef0123";
        let p = store.put("griddesk", hash, b"pixels").unwrap();
        assert!(p.ends_with("griddesk/ab/abcdef0123"));
        // Second put with identical hash is a no-op.
        store.put("griddesk", hash, b"ignored").unwrap();
        assert_eq!(store.get("griddesk", hash).unwrap(), b"pixels");
    }

    #[test]
    fn verification_consistency() {
        let ok = VerificationResult::pass(vec!["c".into()], "checked".into());
        assert!(ok.is_consistent());
        let bad = VerificationResult {
            passed: true,
            completion_criteria: vec![],
            verification_process: String::new(),
            failure_analysis: "but it failed".into(),
        };
        assert!(!bad.is_consistent());
    }
}
