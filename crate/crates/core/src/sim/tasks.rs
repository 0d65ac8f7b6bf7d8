//! Task instructions, goal predicates, and programmatic verification.
//!
//! Instructions are plain-English sentences drawn from a small template
//! grammar over widget labels ("Turn on the wifi toggle.", "Set the subject
//! field to \"hello\"."), optionally two clauses joined by "and then". A task's
//! goal is the conjunction of per-clause predicates over the final state.
//! Instructions that reference no matching control parse into an
//! unsatisfiable goal: the task exists but nothing can pass it, which is how
//! infeasible synthetic queries surface downstream.

use serde::{Deserialize, Serialize};

use crate::hashutil;
use crate::trajectory::{Trajectory, VerificationResult};

use super::{SimConfig, SimState, WidgetKind, WidgetValue};

/// One conjunct of a task goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Criterion {
    ToggleOn { id: String, label: String },
    ToggleOff { id: String, label: String },
    ButtonPressed { id: String, label: String },
    MenuSelected { id: String, label: String },
    FieldEquals { id: String, label: String, text: String },
    /// The clause matched no available control; nothing satisfies it.
    Unsatisfiable { clause: String },
}

impl Criterion {
    /// Human-readable completion criterion.
    pub fn describe(&self) -> String {
        match self {
            Criterion::ToggleOn { label, .. } => format!("toggle '{label}' ends up on"),
            Criterion::ToggleOff { label, .. } => format!("toggle '{label}' ends up off"),
            Criterion::ButtonPressed { label, .. } => format!("button '{label}' has been pressed"),
            Criterion::MenuSelected { label, .. } => {
                format!("menu item '{label}' has been selected")
            }
            Criterion::FieldEquals { label, text, .. } => {
                format!("field '{label}' contains exactly \"{text}\"")
            }
            Criterion::Unsatisfiable { clause } => {
                format!("the request \"{clause}\" matches an available operation")
            }
        }
    }

    /// Check against a final state; `Err` carries what was observed instead.
    pub fn check(&self, state: &SimState) -> Result<(), String> {
        let lookup = |id: &str| state.widget(id);
        match self {
            Criterion::ToggleOn { id, label } => match lookup(id).map(|w| &w.value) {
                Some(WidgetValue::On { on: true }) => Ok(()),
                _ => Err(format!("toggle '{label}' is off")),
            },
            Criterion::ToggleOff { id, label } => match lookup(id).map(|w| &w.value) {
                Some(WidgetValue::On { on: false }) => Ok(()),
                _ => Err(format!("toggle '{label}' is on")),
            },
            Criterion::ButtonPressed { id, label } => match lookup(id).map(|w| &w.value) {
                Some(WidgetValue::Pressed { pressed: true }) => Ok(()),
                _ => Err(format!("button '{label}' was never pressed")),
            },
            Criterion::MenuSelected { id, label } => match lookup(id).map(|w| &w.value) {
                Some(WidgetValue::Selected { selected: true }) => Ok(()),
                _ => Err(format!("menu item '{label}' was never selected")),
            },
            Criterion::FieldEquals { id, label, text } => match lookup(id).map(|w| &w.value) {
                Some(WidgetValue::Text { text: actual }) if actual == text => Ok(()),
                Some(WidgetValue::Text { text: actual }) => {
                    Err(format!("field '{label}' contains \"{actual}\""))
                }
                _ => Err(format!("field '{label}' is missing")),
            },
            Criterion::Unsatisfiable { .. } => {
                Err("no available control supports this request".to_string())
            }
        }
    }

    /// The widget class this criterion exercises, for weakness grouping.
    pub fn op_kind(&self) -> &'static str {
        match self {
            Criterion::ToggleOn { .. } | Criterion::ToggleOff { .. } => "toggle",
            Criterion::ButtonPressed { .. } => "button",
            Criterion::MenuSelected { .. } => "menu item",
            Criterion::FieldEquals { .. } => "field",
            Criterion::Unsatisfiable { .. } => "unknown control",
        }
    }
}

/// A verifiable task bound to one configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTask {
    pub task_id: String,
    pub config_id: String,
    pub instruction: String,
    pub goal: Vec<Criterion>,
    pub feasible: bool,
}

/// Parse an instruction against one configuration's widgets.
///
/// Matching is case-insensitive; a trailing period is tolerated; clauses join
/// with "and then". Unrecognized clauses or unknown labels produce
/// unsatisfiable criteria rather than an error.
pub fn parse_instruction(config: &SimConfig, instruction: &str) -> SimTask {
    let trimmed = instruction.trim().trim_end_matches('.').trim();
    let lower = trimmed.to_ascii_lowercase();
    let mut goal = Vec::new();
    let mut cursor = 0usize;
    // ASCII lowercase preserves byte offsets, so clause spans index into the
    // original string and quoted payloads keep their case.
    for part in lower.split(" and then ") {
        let original = &trimmed[cursor..cursor + part.len()];
        goal.push(parse_clause(config, part, original));
        cursor += part.len() + " and then ".len();
    }
    if goal.len() > 2 {
        goal = vec![Criterion::Unsatisfiable { clause: trimmed.to_string() }];
    }
    let feasible =
        !goal.is_empty() && goal.iter().all(|c| !matches!(c, Criterion::Unsatisfiable { .. }));
    let task_id = format!(
        "task-{}",
        &hashutil::sha256_hex(format!("{}\x1f{}", config.config_id, lower).as_bytes())[..12]
    );
    SimTask {
        task_id,
        config_id: config.config_id.clone(),
        instruction: instruction.trim().to_string(),
        goal,
        feasible,
    }
}

fn parse_clause(config: &SimConfig, lower: &str, original: &str) -> Criterion {
    let unsatisfiable = || Criterion::Unsatisfiable { clause: original.to_string() };
    let find = |label: &str, kind: WidgetKind| {
        config.widgets.iter().find(|w| w.label.to_ascii_lowercase() == label && w.kind == kind)
    };

    if let Some(rest) = lower.strip_prefix("turn on the ") {
        if let Some(label) = rest.strip_suffix(" toggle") {
            if let Some(w) = find(label, WidgetKind::Toggle) {
                return Criterion::ToggleOn { id: w.id.clone(), label: w.label.clone() };
            }
        }
        return unsatisfiable();
    }
    if let Some(rest) = lower.strip_prefix("turn off the ") {
        if let Some(label) = rest.strip_suffix(" toggle") {
            if let Some(w) = find(label, WidgetKind::Toggle) {
                return Criterion::ToggleOff { id: w.id.clone(), label: w.label.clone() };
            }
        }
        return unsatisfiable();
    }
    if let Some(rest) = lower.strip_prefix("press the ") {
        if let Some(label) = rest.strip_suffix(" button") {
            if let Some(w) = find(label, WidgetKind::Button) {
                return Criterion::ButtonPressed { id: w.id.clone(), label: w.label.clone() };
            }
        }
        return unsatisfiable();
    }
    if let Some(rest) = lower.strip_prefix("select the ") {
        if let Some(label) = rest.strip_suffix(" menu item") {
            if let Some(w) = find(label, WidgetKind::MenuItem) {
                return Criterion::MenuSelected { id: w.id.clone(), label: w.label.clone() };
            }
        }
        return unsatisfiable();
    }
    if let Some(rest) = lower.strip_prefix("set the ") {
        // set the <label> field to "<text>"
        if let Some(mid) = rest.find(" field to \"") {
            let label = &rest[..mid];
            let text_start = mid + " field to \"".len();
            if let Some(text_len) = rest[text_start..].rfind('"') {
                if let Some(w) = find(label, WidgetKind::TextField) {
                    let offset = "set the ".len() + text_start;
                    let text = original[offset..offset + text_len].to_string();
                    return Criterion::FieldEquals {
                        id: w.id.clone(),
                        label: w.label.clone(),
                        text,
                    };
                }
            }
        }
        return unsatisfiable();
    }
    unsatisfiable()
}

/// Programmatic verifier: the goal predicate against the final state. Agent
/// self-reports (DONE claims) carry no weight; only state evidence counts.
pub fn verify_sim(task: &SimTask, final_state: &SimState, traj: &Trajectory) -> VerificationResult {
    let criteria: Vec<String> = task.goal.iter().map(Criterion::describe).collect();
    let process = format!(
        "Checked {} completion criteria against the final simulator state after {} agent steps; \
         agent self-reports such as DONE were ignored.",
        criteria.len(),
        traj.steps.len()
    );
    for criterion in &task.goal {
        if let Err(observed) = criterion.check(final_state) {
            let analysis = format!(
                "Criterion not met: {}. Observed instead: {}. The agent failed to correctly \
                 operate the {} named '{}'.",
                criterion.describe(),
                observed,
                criterion.op_kind(),
                criterion_label(criterion),
            );
            return VerificationResult::fail(criteria, process, analysis);
        }
    }
    if task.goal.is_empty() {
        return VerificationResult::fail(
            criteria,
            process,
            "The instruction expressed no verifiable objective.".to_string(),
        );
    }
    VerificationResult::pass(criteria, process)
}

fn criterion_label(criterion: &Criterion) -> String {
    match criterion {
        Criterion::ToggleOn { label, .. }
        | Criterion::ToggleOff { label, .. }
        | Criterion::ButtonPressed { label, .. }
        | Criterion::MenuSelected { label, .. }
        | Criterion::FieldEquals { label, .. } => label.clone(),
        Criterion::Unsatisfiable { clause } => clause.clone(),
    }
}

/// One enumerable instruction with the operations it exercises.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    pub instruction: String,
    pub config_id: String,
    /// (widget kind, label) per clause.
    pub ops: Vec<(WidgetKind, String)>,
}

/// Enumerate the template instructions available in one configuration:
/// every single-clause operation (field instructions once per entry of
/// `texts`), then every ordered two-clause combination over distinct widgets.
pub fn enumerate_instructions(config: &SimConfig, texts: &[&str]) -> Vec<TaskTemplate> {
    let mut simple: Vec<(String, WidgetKind, String)> = Vec::new();
    for w in &config.widgets {
        match w.kind {
            WidgetKind::Toggle => {
                if w.on {
                    simple.push((format!("Turn off the {} toggle", w.label), w.kind, w.label.clone()));
                } else {
                    simple.push((format!("Turn on the {} toggle", w.label), w.kind, w.label.clone()));
                }
            }
            WidgetKind::Button => {
                simple.push((format!("Press the {} button", w.label), w.kind, w.label.clone()));
            }
            WidgetKind::MenuItem => {
                simple.push((format!("Select the {} menu item", w.label), w.kind, w.label.clone()));
            }
            WidgetKind::TextField => {
                for text in texts {
                    simple.push((
                        format!("Set the {} field to \"{text}\"", w.label),
                        w.kind,
                        w.label.clone(),
                    ));
                }
            }
        }
    }

    let mut out: Vec<TaskTemplate> = simple
        .iter()
        .map(|(instr, kind, label)| TaskTemplate {
            instruction: format!("{instr}."),
            config_id: config.config_id.clone(),
            ops: vec![(*kind, label.clone())],
        })
        .collect();

    // Two-clause combinations over distinct widgets; field clauses use only
    // the first text so the compound space stays modest.
    let heads: Vec<&(String, WidgetKind, String)> = simple
        .iter()
        .filter(|(_, kind, _)| *kind != WidgetKind::TextField)
        .chain(simple.iter().filter(|(_, kind, _)| *kind == WidgetKind::TextField).take(1))
        .collect();
    for a in &heads {
        for b in &heads {
            if a.2 == b.2 {
                continue;
            }
            let mut second = b.0.clone();
            second[..1].make_ascii_lowercase();
            out.push(TaskTemplate {
                instruction: format!("{} and then {}.", a.0, second),
                config_id: config.config_id.clone(),
                ops: vec![(a.1, a.2.clone()), (b.1, b.2.clone())],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ToolCall;
    use crate::sim::{step, SimDomain};
    use crate::trajectory::{Role, Trajectory, TrajectoryStatus};

    fn domain() -> SimDomain {
        SimDomain::builtin()
    }

    fn empty_traj() -> Trajectory {
        Trajectory {
            query_id: "q".into(),
            instruction: "i".into(),
            role: Role::Teacher,
            policy_id: "p".into(),
            steps: vec![],
            horizon_cap: 50,
            status: TrajectoryStatus::Complete,
        }
    }

    #[test]
    fn parses_simple_and_compound_instructions() {
        let d = domain();
        let cfg = d.config("cfg-network").unwrap();
        let t = parse_instruction(cfg, "Turn on the wifi toggle.");
        assert!(t.feasible);
        assert_eq!(t.goal.len(), 1);

        let t2 = parse_instruction(
            cfg,
            "Set the proxy field to \"Host-1\" and then press the apply button.",
        );
        assert!(t2.feasible);
        assert_eq!(t2.goal.len(), 2);
        match &t2.goal[0] {
            Criterion::FieldEquals { text, .. } => assert_eq!(text, "Host-1"),
            other => panic!("unexpected criterion {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_unsatisfiable() {
        let d = domain();
        let cfg = d.config("cfg-network").unwrap();
        let t = parse_instruction(cfg, "Turn on the warp toggle.");
        assert!(!t.feasible);
        assert!(matches!(t.goal[0], Criterion::Unsatisfiable { .. }));
    }

    #[test]
    fn verify_passes_only_when_goal_met() {
        let d = domain();
        let cfg = d.config("cfg-network").unwrap();
        let task = parse_instruction(cfg, "Turn on the wifi toggle.");
        let s0 = d.reset("cfg-network").unwrap();

        let unmet = verify_sim(&task, &s0, &empty_traj());
        assert!(!unmet.passed);
        assert!(unmet.failure_analysis.contains("wifi"));
        assert!(unmet.is_consistent());

        let c = s0.widget("wifi").unwrap().rect.center();
        let s1 = step(&s0, &ToolCall::coord("Click", c.0, c.1));
        let met = verify_sim(&task, &s1, &empty_traj());
        assert!(met.passed);
        assert!(met.failure_analysis.is_empty());
    }

    #[test]
    fn done_claim_is_not_trusted() {
        // The agent terminating with DONE changes nothing: verification looks
        // only at state.
        let d = domain();
        let cfg = d.config("cfg-network").unwrap();
        let task = parse_instruction(cfg, "Press the apply button.");
        let s0 = d.reset("cfg-network").unwrap();
        let verdict = verify_sim(&task, &s0, &empty_traj());
        assert!(!verdict.passed);
    }

    #[test]
    fn verify_names_first_unmet_criterion() {
        let d = domain();
        let cfg = d.config("cfg-network").unwrap();
        let task = parse_instruction(
            cfg,
            "Turn on the wifi toggle and then press the apply button.",
        );
        let s0 = d.reset("cfg-network").unwrap();
        // Meet only the second criterion.
        let c = s0.widget("apply").unwrap().rect.center();
        let s1 = step(&s0, &ToolCall::coord("Click", c.0, c.1));
        let verdict = verify_sim(&task, &s1, &empty_traj());
        assert!(!verdict.passed);
        assert!(verdict.failure_analysis.contains("toggle 'wifi'"));
    }

    #[test]
    fn enumeration_parses_feasible_and_is_diverse() {
        let d = domain();
        let mut all = Vec::new();
        for cfg in &d.configs {
            for template in enumerate_instructions(cfg, &["alpha", "beta"]) {
                let task = parse_instruction(cfg, &template.instruction);
                assert!(task.feasible, "template not feasible: {}", template.instruction);
                all.push(template.instruction);
            }
        }
        let unique: std::collections::BTreeSet<&String> = all.iter().collect();
        assert_eq!(unique.len(), all.len(), "templates must be distinct");
        // The space grows with the text pool; two texts already give >120
        // distinct instructions across the six builtin configs.
        assert!(all.len() > 120, "expected a rich instruction space, got {}", all.len());
    }
}
