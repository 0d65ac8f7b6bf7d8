//! Paired teacher/student weakness discovery.

use crate::par;
use crate::trajectory::{PolicyClient, Role, Trajectory, VerificationResult};

use super::{Bookkeeping, CaseRecord, FailureCase, QuerySpec};

/// Runs one policy on one query in a fresh environment session and verifies
/// the outcome. The simulator-backed runner applies the programmatic
/// verifier; gateway-backed runners judge through a chat verifier. A `None`
/// verdict means the episode was invalid (fault mid-rollout) and must be
/// excluded from failure-set computation.
pub trait EpisodeRunner: Send + Sync {
    fn run_and_verify(
        &self,
        query: &QuerySpec,
        policy: &dyn PolicyClient,
        role: Role,
    ) -> (Trajectory, Option<VerificationResult>);
}

/// Everything one discovery pass produces.
#[derive(Debug, Default)]
pub struct DiscoveryOutcome {
    /// Exactly the (teacher pass, student fail) cases.
    pub failures: Vec<FailureCase>,
    pub bookkeeping: Bookkeeping,
    /// All trajectories, teacher and student, valid or not, in query order.
    pub trajectories: Vec<Trajectory>,
}

/// Execute both roles on every query in identical fresh environments and
/// verify each trajectory. Queries fan out across workers; outputs keep
/// query order. Faulted episodes mark the query skipped rather than failed.
pub fn discover_weaknesses(
    queries: &[QuerySpec],
    teacher: &dyn PolicyClient,
    student: &dyn PolicyClient,
    runner: &dyn EpisodeRunner,
) -> DiscoveryOutcome {
    struct PerQuery {
        record: CaseRecord,
        failure: Option<FailureCase>,
        trajectories: Vec<Trajectory>,
    }

    let per_query: Vec<PerQuery> = par::map_collect(queries, |query| {
        let (teacher_traj, teacher_verdict) = runner.run_and_verify(query, teacher, Role::Teacher);
        let (student_traj, student_verdict) = runner.run_and_verify(query, student, Role::Student);

        let skipped = if !teacher_traj.is_valid() {
            Some(format!("teacher episode invalid: {:?}", teacher_traj.status))
        } else if !student_traj.is_valid() {
            Some(format!("student episode invalid: {:?}", student_traj.status))
        } else if teacher_verdict.is_none() || student_verdict.is_none() {
            Some("verifier unavailable".to_string())
        } else {
            None
        };

        let record = CaseRecord {
            query: query.clone(),
            teacher_traj_id: teacher_traj.id(),
            student_traj_id: student_traj.id(),
            teacher_verdict: teacher_verdict.clone(),
            student_verdict: student_verdict.clone(),
            skipped,
        };
        let failure = match (&record.skipped, teacher_verdict, student_verdict) {
            (None, Some(tv), Some(sv)) if tv.passed && !sv.passed => Some(
                FailureCase::new(
                    query.clone(),
                    teacher_traj.id(),
                    student_traj.id(),
                    tv,
                    sv,
                )
                .expect("verdict pattern checked"),
            ),
            _ => None,
        };
        PerQuery { record, failure, trajectories: vec![teacher_traj, student_traj] }
    });

    let mut outcome = DiscoveryOutcome::default();
    for item in per_query {
        outcome.bookkeeping.records.push(item.record);
        if let Some(failure) = item.failure {
            outcome.failures.push(failure);
        }
        outcome.trajectories.extend(item.trajectories);
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{AgentResponse, FormatConfig, ToolCall, DONE};
    use crate::trajectory::{Observation, PolicyError, StepContext, TrajStep, TrajectoryStatus};

    struct Done;
    impl PolicyClient for Done {
        fn respond(&self, _ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
            Ok(AgentResponse::new(
                "r",
                "d",
                vec![ToolCall::known(DONE, vec![])],
                &FormatConfig::default(),
            ))
        }
        fn policy_id(&self) -> String {
            "done".into()
        }
    }

    /// Verdicts scripted by query id: "tNsM" means teacher passes iff N==1,
    /// student passes iff M==1.
    struct ScriptedRunner;
    impl EpisodeRunner for ScriptedRunner {
        fn run_and_verify(
            &self,
            query: &QuerySpec,
            policy: &dyn PolicyClient,
            role: Role,
        ) -> (Trajectory, Option<VerificationResult>) {
            let ctx = StepContext {
                query: query.instruction.clone(),
                current_obs: Observation {
                    step_index: 1,
                    screenshot_ref: "s".into(),
                    feature_vec: None,
                },
                history: vec![],
            };
            let response = policy.respond(&ctx).unwrap();
            let traj = Trajectory {
                query_id: query.query_id.clone(),
                instruction: query.instruction.clone(),
                role,
                policy_id: policy.policy_id(),
                steps: vec![TrajStep {
                    observation: ctx.current_obs.clone(),
                    response,
                }],
                horizon_cap: 50,
                status: TrajectoryStatus::Complete,
            };
            if query.query_id.contains("skip") {
                return (traj, None);
            }
            let pass_flag = match role {
                Role::Teacher => query.query_id.contains("t1"),
                _ => query.query_id.contains("s1"),
            };
            let verdict = if pass_flag {
                VerificationResult::pass(vec!["c".into()], "p".into())
            } else {
                VerificationResult::fail(vec!["c".into()], "p".into(), "missed it".into())
            };
            (traj, Some(verdict))
        }
    }

    fn query(id: &str) -> QuerySpec {
        QuerySpec {
            query_id: id.to_string(),
            config_id: "cfg".into(),
            instruction: format!("do {id}"),
            mode: super::super::QueryMode::Seed,
            iteration: 0,
            target_gaps: vec![],
            rationale: String::new(),
        }
    }

    #[test]
    fn only_teacher_pass_student_fail_enters_the_failure_set() {
        let queries =
            vec![query("q-t1s0"), query("q-t1s1"), query("q-t0s0"), query("q-t0s1")];
        let outcome = discover_weaknesses(&queries, &Done, &Done, &ScriptedRunner);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].query.query_id, "q-t1s0");
        assert_eq!(outcome.bookkeeping.records.len(), 4);
        assert!(outcome.bookkeeping.records.iter().all(CaseRecord::attempted));
        assert_eq!(outcome.trajectories.len(), 8);
    }

    #[test]
    fn unverifiable_queries_are_skipped_not_failed() {
        let queries = vec![query("q-t1s0"), query("q-skip-t1s0")];
        let outcome = discover_weaknesses(&queries, &Done, &Done, &ScriptedRunner);
        assert_eq!(outcome.failures.len(), 1);
        let skipped: Vec<&CaseRecord> =
            outcome.bookkeeping.records.iter().filter(|r| r.skipped.is_some()).collect();
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].query.query_id, "q-skip-t1s0");
    }
}
