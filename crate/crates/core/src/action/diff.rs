//! Step comparison: wait-call normalization, per-call equivalence under a
//! pixel tolerance, and the three-way match / plan-error / exec-error
//! classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionRegistry, AgentResponse, ArgValue, DiffKind, StepDiff, ToolCall};

/// Distance rule applied to coordinate pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordMetric {
    /// Euclidean distance over the (x, y) pair.
    #[default]
    Euclidean,
    /// Per-axis max (Chebyshev); available for sensitivity studies.
    Chebyshev,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EquivalenceError {
    #[error("argument count differs for {name}: {left} vs {right}")]
    ArityMismatch { name: String, left: usize, right: usize },
}

/// Remove wait-class calls, preserving the order of the rest. Idempotent.
pub fn normalize_executions(calls: &[ToolCall], registry: &ActionRegistry) -> Vec<ToolCall> {
    calls.iter().filter(|c| !c.is_wait(registry)).cloned().collect()
}

/// Euclidean-tolerance equivalence of two calls. Symmetric and reflexive.
///
/// Function names must match exactly; coordinate pairs compare by distance at
/// most `tolerance_px`, all other argument kinds compare exactly (text after
/// trailing-whitespace trim).
pub fn calls_equivalent(
    a: &ToolCall,
    b: &ToolCall,
    tolerance_px: u32,
) -> Result<bool, EquivalenceError> {
    calls_equivalent_with(a, b, tolerance_px, CoordMetric::Euclidean)
}

pub fn calls_equivalent_with(
    a: &ToolCall,
    b: &ToolCall,
    tolerance_px: u32,
    metric: CoordMetric,
) -> Result<bool, EquivalenceError> {
    match (a, b) {
        (ToolCall::Quarantined { name: na, raw_args: ra }, ToolCall::Quarantined { name: nb, raw_args: rb }) => {
            Ok(na == nb && ra == rb)
        }
        (ToolCall::Quarantined { .. }, _) | (_, ToolCall::Quarantined { .. }) => Ok(false),
        (ToolCall::Known { name: na, args: aa }, ToolCall::Known { name: nb, args: ab }) => {
            if na != nb {
                return Ok(false);
            }
            if aa.len() != ab.len() {
                return Err(EquivalenceError::ArityMismatch {
                    name: na.clone(),
                    left: aa.len(),
                    right: ab.len(),
                });
            }
            Ok(args_equivalent(aa, ab, tolerance_px, metric))
        }
    }
}

fn args_equivalent(a: &[ArgValue], b: &[ArgValue], tol: u32, metric: CoordMetric) -> bool {
    let mut i = 0;
    while i < a.len() {
        match (&a[i], &b[i]) {
            (ArgValue::Coord(ax), ArgValue::Coord(bx)) => {
                // Consecutive coords form an (x, y) pair; the tolerance is
                // applied independently per pair. A trailing unpaired coord
                // compares along its single axis.
                if let (Some(ArgValue::Coord(ay)), Some(ArgValue::Coord(by))) =
                    (a.get(i + 1), b.get(i + 1))
                {
                    if !coords_within(*ax, *ay, *bx, *by, tol, metric) {
                        return false;
                    }
                    i += 2;
                    continue;
                }
                if ax.abs_diff(*bx) as u64 > tol as u64 {
                    return false;
                }
            }
            (ArgValue::Text(ta), ArgValue::Text(tb)) => {
                if ta.trim_end() != tb.trim_end() {
                    return false;
                }
            }
            (ArgValue::Key(ka), ArgValue::Key(kb)) => {
                if ka != kb {
                    return false;
                }
            }
            (ArgValue::Keys(ka), ArgValue::Keys(kb)) => {
                if ka != kb {
                    return false;
                }
            }
            (ArgValue::Seconds(sa), ArgValue::Seconds(sb)) => {
                if sa != sb {
                    return false;
                }
            }
            _ => return false,
        }
        i += 1;
    }
    true
}

fn coords_within(ax: u32, ay: u32, bx: u32, by: u32, tol: u32, metric: CoordMetric) -> bool {
    let dx = ax.abs_diff(bx) as u64;
    let dy = ay.abs_diff(by) as u64;
    match metric {
        CoordMetric::Euclidean => dx * dx + dy * dy <= (tol as u64) * (tol as u64),
        CoordMetric::Chebyshev => dx.max(dy) <= tol as u64,
    }
}

/// Classify a teacher/student step pair after wait removal.
///
/// Total: never fails. Plan errors are function-name or call-count
/// divergences; exec errors are parameter divergences beyond tolerance within
/// an identical function sequence.
pub fn classify_step_diff(
    teacher: &AgentResponse,
    student: &AgentResponse,
    tolerance_px: u32,
    registry: &ActionRegistry,
) -> StepDiff {
    classify_step_diff_with(teacher, student, tolerance_px, registry, CoordMetric::Euclidean)
}

pub fn classify_step_diff_with(
    teacher: &AgentResponse,
    student: &AgentResponse,
    tolerance_px: u32,
    registry: &ActionRegistry,
    metric: CoordMetric,
) -> StepDiff {
    let t = normalize_executions(&teacher.executions, registry);
    let s = normalize_executions(&student.executions, registry);

    let diff = |kind, detail: String| StepDiff { kind, detail, tolerance_px };

    if t.len() != s.len() {
        return diff(
            DiffKind::PlanError,
            format!("tool count differs: {} vs {}", t.len(), s.len()),
        );
    }
    for (i, (tc, sc)) in t.iter().zip(&s).enumerate() {
        if tc.name() != sc.name() {
            return diff(
                DiffKind::PlanError,
                format!("function differs at call {}: {} vs {}", i + 1, tc.name(), sc.name()),
            );
        }
    }
    for (i, (tc, sc)) in t.iter().zip(&s).enumerate() {
        match (tc, sc) {
            // Same-name quarantined calls with differing payloads cannot be
            // aligned parameter-wise; treat as planning divergence.
            (ToolCall::Quarantined { raw_args: ra, .. }, ToolCall::Quarantined { raw_args: rb, .. }) => {
                if ra != rb {
                    return diff(
                        DiffKind::PlanError,
                        format!("unregistered action {} differs at call {}", tc.name(), i + 1),
                    );
                }
            }
            (ToolCall::Quarantined { .. }, _) | (_, ToolCall::Quarantined { .. }) => {
                return diff(
                    DiffKind::PlanError,
                    format!("call {} mixes registered and unregistered forms", i + 1),
                );
            }
            _ => match calls_equivalent_with(tc, sc, tolerance_px, metric) {
                Ok(true) => {}
                Ok(false) => {
                    return diff(
                        DiffKind::ExecError,
                        format!(
                            "parameters differ for {} at call {}: {} vs {}",
                            tc.name(),
                            i + 1,
                            tc.render(),
                            sc.render()
                        ),
                    )
                }
                Err(EquivalenceError::ArityMismatch { name, left, right }) => {
                    return diff(
                        DiffKind::ExecError,
                        format!("argument count differs for {name}: {left} vs {right}"),
                    )
                }
            },
        }
    }
    if t.is_empty() && s.is_empty() {
        return diff(DiffKind::Match, "both steps empty after wait removal".into());
    }
    diff(DiffKind::Match, "executions equivalent within tolerance".into())
}
