//! Step-by-step teacher replay through a student policy.

use crate::action::{classify_step_diff_with, ActionRegistry, CoordMetric, DiffKind};
use crate::par;
use crate::trajectory::{build_context, PolicyClient, Trajectory};

use super::{PairSource, PreferencePair};

/// Result of replaying one teacher trajectory.
#[derive(Debug, Default)]
pub struct ReplayOutcome {
    pub pairs: Vec<PreferencePair>,
    /// Steps whose student query failed, with the reason (step skipped).
    pub skipped: Vec<(u32, String)>,
    /// Steps discarded because the executions matched within tolerance.
    pub matches: u32,
}

/// Query the student at every teacher context and emit one preference pair
/// per step whose executions differ beyond tolerance after wait removal.
///
/// The caller guarantees the teacher trajectory was verified successful and
/// the student handle is the fixed pre-adaptation snapshot. Step replays are
/// independent and run concurrently; results assemble in step order.
pub fn replay_teacher(
    teacher: &Trajectory,
    student: &dyn PolicyClient,
    tolerance_px: u32,
    registry: &ActionRegistry,
    metric: CoordMetric,
) -> ReplayOutcome {
    let total = teacher.steps.len();
    let replies = par::map_range(total, |idx| {
        let t = idx + 1;
        let ctx = build_context(teacher, t).expect("t within range");
        student.respond(&ctx).map(|resp| (ctx, resp))
    });

    let mut outcome = ReplayOutcome::default();
    for (idx, reply) in replies.into_iter().enumerate() {
        let t = (idx + 1) as u32;
        match reply {
            Err(e) => {
                log::warn!("replay step {t} of {} skipped: {e}", teacher.id());
                outcome.skipped.push((t, e.to_string()));
            }
            Ok((ctx, replayed)) => {
                let teacher_resp = &teacher.steps[idx].response;
                let diff =
                    classify_step_diff_with(teacher_resp, &replayed, tolerance_px, registry, metric);
                match diff.kind {
                    DiffKind::Match => outcome.matches += 1,
                    kind => outcome.pairs.push(PreferencePair {
                        context: ctx,
                        chosen: teacher_resp.clone(),
                        rejected: replayed,
                        error_type: kind,
                        tolerance_px,
                        source: PairSource { query_id: teacher.query_id.clone(), step_index: t },
                    }),
                }
            }
        }
    }
    outcome
}
