//! Scripted policies of tunable competence.
//!
//! The planner turns an instruction into an open-loop call sequence from the
//! configuration's initial state. The teacher preset executes it verbatim;
//! student presets perturb it — Gaussian pixel noise on coordinates induces
//! execution-level divergence, seeded function substitution induces
//! planning-level divergence. All randomness derives from (seed, instruction,
//! step index), so a student's replayed decision at a teacher context equals
//! its own rollout decision at the same step, and reruns are byte-identical.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action::{AgentResponse, ArgValue, FormatConfig, ToolCall, DONE};
use crate::hashutil;
use crate::trajectory::{PolicyClient, PolicyError, StepContext};

use super::{parse_instruction, Criterion, SimDomain, WidgetValue};

/// One planned step before perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub reasoning: String,
    pub description: String,
    pub call: ToolCall,
}

/// Competence knobs for a scripted policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicyConfig {
    /// Standard deviation of per-axis coordinate perturbation, in pixels.
    pub coord_noise_px: f64,
    /// Probability of substituting the planned function with another.
    pub wrong_function_prob: f64,
    pub seed: u64,
}

impl ScriptedPolicyConfig {
    /// Noiseless, substitution-free reference preset.
    pub fn teacher(seed: u64) -> Self {
        ScriptedPolicyConfig { coord_noise_px: 0.0, wrong_function_prob: 0.0, seed }
    }

    pub fn noisy_student(coord_noise_px: f64, seed: u64) -> Self {
        ScriptedPolicyConfig { coord_noise_px, wrong_function_prob: 0.0, seed }
    }

    pub fn confused_student(wrong_function_prob: f64, seed: u64) -> Self {
        ScriptedPolicyConfig { coord_noise_px: 0.0, wrong_function_prob, seed }
    }
}

/// Resolve an instruction to a plan: locate the unique configuration whose
/// widgets satisfy it and emit the goal-directed call sequence from that
/// configuration's initial state. Returns `None` when no configuration can
/// satisfy the instruction (the exploratory fallback applies).
pub fn plan_for_instruction(domain: &SimDomain, instruction: &str) -> Option<(String, Vec<PlanStep>)> {
    for config in &domain.configs {
        let task = parse_instruction(config, instruction);
        if !task.feasible {
            continue;
        }
        let initial = domain.reset(&config.config_id).ok()?;
        let mut steps = Vec::new();
        for criterion in &task.goal {
            match criterion {
                Criterion::ToggleOn { id, label } => {
                    let widget = initial.widget(id)?;
                    if widget.value == (WidgetValue::On { on: false }) {
                        let (x, y) = widget.rect.center();
                        steps.push(PlanStep {
                            reasoning: format!(
                                "The '{label}' toggle is off and the task needs it on."
                            ),
                            description: format!("Click the '{label}' toggle to switch it on."),
                            call: ToolCall::coord("Click", x, y),
                        });
                    }
                }
                Criterion::ToggleOff { id, label } => {
                    let widget = initial.widget(id)?;
                    if widget.value == (WidgetValue::On { on: true }) {
                        let (x, y) = widget.rect.center();
                        steps.push(PlanStep {
                            reasoning: format!(
                                "The '{label}' toggle is on and the task needs it off."
                            ),
                            description: format!("Click the '{label}' toggle to switch it off."),
                            call: ToolCall::coord("Click", x, y),
                        });
                    }
                }
                Criterion::ButtonPressed { id, label } => {
                    let (x, y) = initial.widget(id)?.rect.center();
                    steps.push(PlanStep {
                        reasoning: format!("The '{label}' button must be pressed."),
                        description: format!("Click the '{label}' button."),
                        call: ToolCall::coord("Click", x, y),
                    });
                }
                Criterion::MenuSelected { id, label } => {
                    let (x, y) = initial.widget(id)?.rect.center();
                    steps.push(PlanStep {
                        reasoning: format!("The '{label}' menu item must be selected."),
                        description: format!("Click the '{label}' menu item."),
                        call: ToolCall::coord("Click", x, y),
                    });
                }
                Criterion::FieldEquals { id, label, text } => {
                    let (x, y) = initial.widget(id)?.rect.center();
                    steps.push(PlanStep {
                        reasoning: format!("The '{label}' field must receive focus before typing."),
                        description: format!("Click the '{label}' field to focus it."),
                        call: ToolCall::coord("Click", x, y),
                    });
                    steps.push(PlanStep {
                        reasoning: format!("With '{label}' focused, enter the requested text."),
                        description: format!("Type \"{text}\" into the '{label}' field."),
                        call: ToolCall::known("Type", vec![ArgValue::Text(text.clone())]),
                    });
                }
                Criterion::Unsatisfiable { .. } => return None,
            }
        }
        steps.push(PlanStep {
            reasoning: "Every requested change has been made.".to_string(),
            description: "Finish the task.".to_string(),
            call: ToolCall::known(DONE, vec![]),
        });
        return Some((config.config_id.clone(), steps));
    }
    None
}

/// A deterministic scripted policy over a simulator domain.
pub struct ScriptedPolicy {
    domain: Arc<SimDomain>,
    config: ScriptedPolicyConfig,
    format: FormatConfig,
}

impl ScriptedPolicy {
    pub fn new(domain: Arc<SimDomain>, config: ScriptedPolicyConfig) -> Self {
        let format = FormatConfig {
            screen_extent: domain.screen_extent,
            ..FormatConfig::default()
        };
        ScriptedPolicy { domain, config, format }
    }

    pub fn format(&self) -> &FormatConfig {
        &self.format
    }

    fn rng_for(&self, instruction: &str, step_index: usize, stream: &str) -> ChaCha8Rng {
        let seed = hashutil::derive_seed(&[
            &self.config.seed.to_string(),
            instruction,
            &step_index.to_string(),
            stream,
        ]);
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn perturb(&self, instruction: &str, step_index: usize, call: ToolCall) -> ToolCall {
        let mut call = call;
        if call.is_terminal() {
            return call;
        }
        if self.config.wrong_function_prob > 0.0 {
            let mut rng = self.rng_for(instruction, step_index, "wf");
            if rng.gen_bool(self.config.wrong_function_prob) {
                call = substitute_function(call);
            }
        }
        if self.config.coord_noise_px > 0.0 {
            if let ToolCall::Known { name, args } = &call {
                let has_coords = args.iter().any(|a| matches!(a, ArgValue::Coord(_)));
                if has_coords {
                    let mut rng = self.rng_for(instruction, step_index, "noise");
                    let normal = Normal::new(0.0, self.config.coord_noise_px)
                        .expect("positive std deviation");
                    let extent = self.domain.screen_extent;
                    let args: Vec<ArgValue> = args
                        .iter()
                        .enumerate()
                        .map(|(i, a)| match a {
                            ArgValue::Coord(c) => {
                                let bound = if i % 2 == 0 { extent.0 } else { extent.1 };
                                let jitter: f64 = normal.sample(&mut rng);
                                let v = (*c as f64 + jitter).round().max(0.0);
                                ArgValue::Coord((v as u32).min(bound - 1))
                            }
                            other => other.clone(),
                        })
                        .collect();
                    call = ToolCall::Known { name: name.clone(), args };
                }
            }
        }
        call
    }

    /// Exploratory behavior when no configuration satisfies the instruction:
    /// probe near the screen center twice, then claim completion. The
    /// verifier is expected to reject the claim.
    fn explore_step(&self, instruction: &str, step_index: usize) -> (PlanStep, ToolCall) {
        if step_index >= 2 {
            let step = PlanStep {
                reasoning: "No control matching the request was found; stopping.".to_string(),
                description: "Finish the task.".to_string(),
                call: ToolCall::known(DONE, vec![]),
            };
            let call = step.call.clone();
            return (step, call);
        }
        let (w, h) = self.domain.screen_extent;
        let mut rng = self.rng_for(instruction, step_index, "explore");
        let normal = Normal::new(0.0, 60.0).expect("positive std");
        let dx: f64 = normal.sample(&mut rng);
        let dy: f64 = normal.sample(&mut rng);
        let x = ((w as f64 / 2.0 + dx).round().max(0.0) as u32).min(w - 1);
        let y = ((h as f64 / 2.0 + dy).round().max(0.0) as u32).min(h - 1);
        let step = PlanStep {
            reasoning: format!(
                "No labeled control matches '{instruction}'; probing the workspace."
            ),
            description: "Probe the workspace for a matching control.".to_string(),
            call: ToolCall::coord("Click", x, y),
        };
        let call = step.call.clone();
        (step, call)
    }
}

fn substitute_function(call: ToolCall) -> ToolCall {
    match call {
        ToolCall::Known { name, args } => match name.as_str() {
            "Click" => ToolCall::Known { name: "MoveTo".into(), args },
            "Type" => ToolCall::known("Key", vec![ArgValue::Key("enter".into())]),
            _ => ToolCall::Known { name, args },
        },
        other => other,
    }
}

impl PolicyClient for ScriptedPolicy {
    fn respond(&self, ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
        let step_index = ctx.history.len();
        let (plan_step, call) = match plan_for_instruction(&self.domain, &ctx.query) {
            Some((_config, plan)) => {
                let idx = step_index.min(plan.len() - 1);
                let plan_step = plan[idx].clone();
                let call = self.perturb(&ctx.query, step_index, plan_step.call.clone());
                (plan_step, call)
            }
            None => self.explore_step(&ctx.query, step_index),
        };
        let reasoning = format!("Step {}: {}", step_index + 1, plan_step.reasoning);
        Ok(AgentResponse::new(&reasoning, &plan_step.description, vec![call], &self.format))
    }

    fn policy_id(&self) -> String {
        format!(
            "scripted(domain={},noise={},wrong_fn={},seed={})",
            self.domain.domain_id,
            self.config.coord_noise_px,
            self.config.wrong_function_prob,
            self.config.seed
        )
    }
}
