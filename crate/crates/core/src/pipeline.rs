//! Hermetic pipeline assembly over the simulated desktop.
//!
//! Wires the generation loop, preference construction, and adapter training
//! together with scripted policies, the programmatic verifier, and
//! deterministic stand-ins for the chat and embedding endpoints — the whole
//! two-stage pipeline runs end to end with no network. The same seams accept
//! gateway-backed handles for real model servers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::action::{ActionRegistry, AgentResponse, ArgValue, CoordMetric, DiffKind, ToolCall};
use crate::dpo::{
    masked_score, train_adapter, AdapterRegistry, ByteTokenizer, SpanTag, TokenizedPair,
    Tokenizer, ToyPolicy, TrainConfig, VOCAB_SIZE,
};
use crate::gateway::{
    ChatEndpoint, ChatTransport, FnChat, HashProjectionEmbedder, Message,
    ScreenshotResolver,
};
use crate::prefs::{
    build_mask, persist_pref, replay_teacher, MaskMode, MaskVector, PreferencePair,
};
use crate::sim::{
    enumerate_instructions, parse_instruction, plan_for_instruction, verify_sim, ScriptedPolicy,
    ScriptedPolicyConfig, SimDomain, SimEnvironment, WidgetKind,
};
use crate::trajectory::{
    run_rollout, PolicyClient, PolicyError, Role, ScreenshotStore, StepContext, Trajectory,
    TrajectoryStatus, VerificationResult,
};
use crate::weakness::{
    dataset_stats, filter_tasks, run_generation_loop, DatasetStats, DomainMetadata, EpisodeRunner,
    FilterRule, LoopHandles, LoopOptions, LoopSummary, PipelineError, PromptTemplates, QuerySpec,
};

/// Text payloads used by the scripted generator for field instructions.
pub const GENERATOR_TEXTS: [&str; 3] = ["alpha", "beta", "gamma"];
/// Disjoint payloads for held-out evaluation tasks.
pub const HOLDOUT_TEXTS: [&str; 2] = ["omega", "sigma"];
/// Labels the scripted generator uses for intentionally unsatisfiable tasks.
const TRAP_LABELS: [&str; 6] = ["warpdrive", "hyperspace", "chronometer", "nebula", "flux", "quasar"];

/// Resolves screenshot references against one domain's store subtree.
pub struct StoreResolver {
    pub store: Arc<ScreenshotStore>,
    pub domain_id: String,
}

impl ScreenshotResolver for StoreResolver {
    fn resolve(&self, screenshot_ref: &str) -> Option<Vec<u8>> {
        self.store.get(&self.domain_id, screenshot_ref).ok()
    }
}

/// Episode runner backed by the simulator: fresh session per episode,
/// programmatic verification of the final state.
pub struct SimEpisodeRunner {
    pub domain: Arc<SimDomain>,
    pub store: Arc<ScreenshotStore>,
    pub max_steps: u32,
}

impl EpisodeRunner for SimEpisodeRunner {
    fn run_and_verify(
        &self,
        query: &QuerySpec,
        policy: &dyn PolicyClient,
        role: Role,
    ) -> (Trajectory, Option<VerificationResult>) {
        let mut env = match SimEnvironment::new(&self.domain, &query.config_id, Arc::clone(&self.store))
        {
            Ok(env) => env,
            Err(e) => {
                let traj = Trajectory {
                    query_id: query.query_id.clone(),
                    instruction: query.instruction.clone(),
                    role,
                    policy_id: policy.policy_id(),
                    steps: vec![],
                    horizon_cap: self.max_steps,
                    status: TrajectoryStatus::Invalid { reason: e.to_string() },
                };
                return (traj, None);
            }
        };
        let traj = run_rollout(
            policy,
            &mut env,
            &query.query_id,
            &query.instruction,
            role,
            self.max_steps,
        );
        if !traj.is_valid() {
            return (traj, None);
        }
        let config = self.domain.config(&query.config_id).expect("session construction checked");
        let task = parse_instruction(config, &query.instruction);
        let verdict = verify_sim(&task, env.state(), &traj);
        (traj, Some(verdict))
    }
}

// ---------------------------------------------------------------------------
// Deterministic stand-in chat services
// ---------------------------------------------------------------------------

fn context_of(messages: &[Message]) -> Result<serde_json::Value, String> {
    let text = messages[0].text();
    crate::weakness::prompts::machine_context(&text).ok_or_else(|| "no machine context".into())
}

/// Stand-in weakness summarizer: groups failure analyses by the control class
/// named in the verifier's analysis sentence.
pub fn sim_summarizer_transport() -> Arc<dyn ChatTransport> {
    Arc::new(FnChat(|messages: &[Message]| {
        let ctx = context_of(messages)?;
        let cases = ctx["cases"].as_array().ok_or("cases missing")?;
        let mut by_kind: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for case in cases {
            let analysis =
                case["student_agent_failure_analysis"].as_str().unwrap_or_default();
            let kind = extract_kind(analysis).unwrap_or("unknown control").to_string();
            let label = extract_label(analysis).unwrap_or_default();
            by_kind.entry(kind).or_default().push(label);
        }
        let categories: Vec<serde_json::Value> = by_kind
            .iter()
            .map(|(kind, labels)| {
                let mut unique: Vec<&String> = labels.iter().collect();
                unique.sort();
                unique.dedup();
                json!({
                    "category": format!("{kind} operations"),
                    "what_student_cannot_do": format!(
                        "Reliably operate {kind} controls to complete the requested change."
                    ),
                    "likely_failed_features_or_operations": unique,
                })
            })
            .collect();
        let summary = format!(
            "Student failures concentrate on {} control class(es): {}.",
            by_kind.len(),
            by_kind.keys().cloned().collect::<Vec<_>>().join(", ")
        );
        Ok(json!({"overall_summary": summary, "failure_categories": categories}).to_string())
    }))
}

fn extract_kind(analysis: &str) -> Option<&str> {
    let at = analysis.find("operate the ")? + "operate the ".len();
    let rest = &analysis[at..];
    let end = rest.find(" named ")?;
    Some(&rest[..end])
}

fn extract_label(analysis: &str) -> Option<String> {
    let at = analysis.find(" named '")? + " named '".len();
    let rest = &analysis[at..];
    let end = rest.find('\'')?;
    Some(rest[..end].to_string())
}

/// Stand-in screenshot reranker: keeps the diversity pre-filter's order.
pub fn sim_reranker_transport() -> Arc<dyn ChatTransport> {
    Arc::new(FnChat(|messages: &[Message]| {
        let ctx = context_of(messages)?;
        let k = ctx["k"].as_u64().ok_or("k missing")? as usize;
        let indices: Vec<usize> = (0..k).collect();
        let reasons: Vec<serde_json::Value> = indices
            .iter()
            .map(|i| json!({"index": i, "reason": "distinct layout state"}))
            .collect();
        Ok(json!({"selected_indices": indices, "reasons": reasons}).to_string())
    }))
}

/// Stand-in query generator: walks the domain's instruction templates,
/// skipping prior instructions, preferring operations named in the weakness
/// categories when present, and salting each exploration round with one
/// unsatisfiable "trap" instruction per configuration so infeasible tasks
/// flow through the pipeline the way they would with a real generator.
pub fn sim_generator_transport(domain: Arc<SimDomain>) -> Arc<dyn ChatTransport> {
    Arc::new(FnChat(move |messages: &[Message]| {
        let ctx = context_of(messages)?;
        let config_id = ctx["config_id"].as_str().ok_or("config_id missing")?;
        let count = ctx["count"].as_u64().ok_or("count missing")? as usize;
        let call = ctx["call"].as_u64().unwrap_or(0);
        let iteration = ctx["iteration"].as_u64().unwrap_or(0);
        let weak = ctx["mode"].as_str() == Some("weak");
        let prior: Vec<String> = ctx["prior_instructions"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str())
                    .map(crate::weakness::normalize_instruction)
                    .collect()
            })
            .unwrap_or_default();
        let categories: Vec<String> = ctx["weakness_categories"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default();

        let config = domain.config(config_id).map_err(|e| e.to_string())?;
        let config_index =
            domain.configs.iter().position(|c| c.config_id == config_id).unwrap_or(0);
        let templates = enumerate_instructions(config, &GENERATOR_TEXTS);

        // Weak mode prefers templates touching a control class named in the
        // weakness categories.
        let matches_weakness = |ops: &[(WidgetKind, String)]| {
            ops.iter().any(|(kind, _)| categories.iter().any(|c| c.contains(kind.noun())))
        };
        let mut ordered: Vec<&crate::sim::TaskTemplate> = Vec::new();
        if weak && !categories.is_empty() {
            ordered.extend(templates.iter().filter(|t| matches_weakness(&t.ops)));
            ordered.extend(templates.iter().filter(|t| !matches_weakness(&t.ops)));
        } else {
            ordered.extend(templates.iter());
        }

        let mut instructions: Vec<(String, Vec<String>)> = Vec::new();
        for template in ordered {
            if instructions.len() >= count {
                break;
            }
            let normalized = crate::weakness::normalize_instruction(&template.instruction);
            if prior.contains(&normalized) {
                continue;
            }
            let gaps: Vec<String> = if weak {
                categories
                    .iter()
                    .filter(|c| template.ops.iter().any(|(kind, _)| c.contains(kind.noun())))
                    .cloned()
                    .collect()
            } else {
                vec![]
            };
            instructions.push((template.instruction.clone(), gaps));
        }

        // One trap per configuration per exploration round: a template-shaped
        // instruction over a control that does not exist.
        if !weak && call == 0 && !instructions.is_empty() {
            for rotation in 0..TRAP_LABELS.len() {
                let label = TRAP_LABELS
                    [(iteration as usize + config_index + rotation) % TRAP_LABELS.len()];
                let trap = format!("Press the {label} button.");
                if !prior.contains(&crate::weakness::normalize_instruction(&trap)) {
                    let last = instructions.len() - 1;
                    instructions[last] = (trap, vec![]);
                    break;
                }
            }
        }

        let queries: Vec<serde_json::Value> = instructions
            .into_iter()
            .map(|(instruction, gaps)| {
                json!({
                    "reference_config_id": config_id,
                    "instruction": instruction,
                    "targets_student_gaps": gaps,
                    "rationale": "template over the configuration's controls",
                })
            })
            .collect();
        Ok(json!({"queries": queries}).to_string())
    }))
}

// ---------------------------------------------------------------------------
// Seed and held-out task construction
// ---------------------------------------------------------------------------

/// Ten deterministic seed queries over the domain's configurations: the first
/// template of every configuration, then a second template from the earliest
/// configurations until ten are collected.
pub fn builtin_seed_queries(domain: &SimDomain) -> Vec<QuerySpec> {
    let mut seeds = Vec::new();
    let per_config: Vec<Vec<String>> = domain
        .configs
        .iter()
        .map(|c| {
            enumerate_instructions(c, &["alpha"])
                .into_iter()
                .map(|t| t.instruction)
                .collect()
        })
        .collect();
    for depth in 0.. {
        for (ci, config) in domain.configs.iter().enumerate() {
            if seeds.len() >= 10 {
                return seeds;
            }
            if let Some(instruction) = per_config[ci].get(depth) {
                seeds.push(QuerySpec::seed(seeds.len(), &config.config_id, instruction));
            }
        }
    }
    seeds
}

/// Held-out evaluation tasks: template instructions (with payload texts
/// disjoint from the generator's) that never appeared in the archive,
/// taken round-robin across configurations.
pub fn holdout_tasks(domain: &SimDomain, used_instructions: &[String], n: usize) -> Vec<QuerySpec> {
    let used: std::collections::BTreeSet<String> = used_instructions
        .iter()
        .map(|i| crate::weakness::normalize_instruction(i))
        .collect();
    let per_config: Vec<Vec<String>> = domain
        .configs
        .iter()
        .map(|c| {
            enumerate_instructions(c, &HOLDOUT_TEXTS)
                .into_iter()
                .map(|t| t.instruction)
                .filter(|i| !used.contains(&crate::weakness::normalize_instruction(i)))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for depth in 0..per_config.iter().map(Vec::len).max().unwrap_or(0) {
        for (ci, config) in domain.configs.iter().enumerate() {
            if out.len() >= n {
                return out;
            }
            if let Some(instruction) = per_config[ci].get(depth) {
                out.push(QuerySpec {
                    query_id: format!("eval-{:03}", out.len()),
                    config_id: config.config_id.clone(),
                    instruction: instruction.clone(),
                    mode: crate::weakness::QueryMode::Explore,
                    iteration: 0,
                    target_gaps: vec![],
                    rationale: "held-out evaluation task".into(),
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Rescored student: candidate selection under the trained scorer
// ---------------------------------------------------------------------------

/// The specialized student: the base scripted student proposes an action and
/// two refinements of it (its own noise scaled by 0.5 and 0), and the
/// composed toy policy picks the candidate whose execution span scores
/// highest. With a neutral adapter every candidate ties and the original
/// proposal wins, reproducing the base student exactly.
pub struct RescoredStudentPolicy {
    inner: ScriptedPolicy,
    domain: Arc<SimDomain>,
    scorer: ToyPolicy,
    scorer_tag: String,
}

const CANDIDATE_SCALES: [f64; 3] = [1.0, 0.5, 0.0];
/// Score improvements below this threshold count as ties (first candidate
/// wins), keeping the untrained scorer exactly behavior-preserving.
const SCORE_TIE_EPS: f64 = 1e-9;

impl RescoredStudentPolicy {
    pub fn new(
        domain: Arc<SimDomain>,
        student_config: ScriptedPolicyConfig,
        scorer: ToyPolicy,
        scorer_tag: &str,
    ) -> Self {
        let inner = ScriptedPolicy::new(Arc::clone(&domain), student_config);
        RescoredStudentPolicy { inner, domain, scorer, scorer_tag: scorer_tag.to_string() }
    }

    fn mean_execution_score(&self, ctx: &StepContext, response: &AgentResponse) -> f64 {
        let tokenizer = ByteTokenizer;
        let context = tokenizer.tokenize_context(ctx);
        let tokens = tokenizer.tokenize_response(response).expect("canonical response");
        let weights: Vec<u8> =
            tokens.tags.iter().map(|t| u8::from(*t == SpanTag::Execution)).collect();
        let mask = MaskVector { weights };
        let total = masked_score(&self.scorer, &context, &tokens, &mask).expect("aligned mask");
        total / mask.weight_sum().max(1) as f64
    }
}

impl PolicyClient for RescoredStudentPolicy {
    fn respond(&self, ctx: &StepContext) -> Result<AgentResponse, PolicyError> {
        let proposal = self.inner.respond(ctx)?;
        if proposal.is_terminal() {
            return Ok(proposal);
        }
        let Some((_, plan)) = plan_for_instruction(&self.domain, &ctx.query) else {
            return Ok(proposal);
        };
        let idx = ctx.history.len().min(plan.len() - 1);
        let planned = &plan[idx].call;
        let (planned_coords, proposal_coords) = match (planned, &proposal.executions[0]) {
            (
                ToolCall::Known { name: pn, args: pa },
                ToolCall::Known { name: qn, args: qa },
            ) if pn == qn => {
                let coords = |args: &[ArgValue]| -> Vec<u32> {
                    args.iter()
                        .filter_map(|a| match a {
                            ArgValue::Coord(c) => Some(*c),
                            _ => None,
                        })
                        .collect()
                };
                (coords(pa), coords(qa))
            }
            _ => return Ok(proposal),
        };
        if planned_coords.is_empty() || planned_coords.len() != proposal_coords.len() {
            return Ok(proposal);
        }

        let name = planned.name().to_string();
        let extent = self.inner.format().screen_extent;
        let candidates: Vec<AgentResponse> = CANDIDATE_SCALES
            .iter()
            .map(|scale| {
                let args: Vec<ArgValue> = planned_coords
                    .iter()
                    .zip(&proposal_coords)
                    .enumerate()
                    .map(|(i, (p, q))| {
                        let offset = *q as f64 - *p as f64;
                        let v = (*p as f64 + scale * offset).round().max(0.0) as u32;
                        let bound = if i % 2 == 0 { extent.0 } else { extent.1 };
                        ArgValue::Coord(v.min(bound - 1))
                    })
                    .collect();
                AgentResponse::new(
                    &proposal.reasoning,
                    &proposal.description,
                    vec![ToolCall::Known { name: name.clone(), args }],
                    self.inner.format(),
                )
            })
            .collect();

        let mut best = 0usize;
        let mut best_score = self.mean_execution_score(ctx, &candidates[0]);
        for (i, candidate) in candidates.iter().enumerate().skip(1) {
            let score = self.mean_execution_score(ctx, candidate);
            if score > best_score + SCORE_TIE_EPS {
                best = i;
                best_score = score;
            }
        }
        Ok(candidates[best].clone())
    }

    fn policy_id(&self) -> String {
        format!("rescored({},scorer={})", self.inner.policy_id(), self.scorer_tag)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Success and replay-divergence measurements for one policy on one task set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: u64,
    pub successes: u64,
    pub replay_steps: u64,
    pub exec_error_steps: u64,
    pub plan_error_steps: u64,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.tasks == 0 {
            return 0.0;
        }
        self.successes as f64 / self.tasks as f64
    }

    pub fn exec_error_rate(&self) -> f64 {
        if self.replay_steps == 0 {
            return 0.0;
        }
        self.exec_error_steps as f64 / self.replay_steps as f64
    }
}

/// Evaluate a student policy on held-out tasks: rollout success rate, plus
/// step divergence when replayed at fresh teacher contexts.
pub fn evaluate_student(
    domain: &Arc<SimDomain>,
    store: &Arc<ScreenshotStore>,
    teacher: &dyn PolicyClient,
    student: &dyn PolicyClient,
    tasks: &[QuerySpec],
    max_steps: u32,
    tolerance_px: u32,
    registry: &ActionRegistry,
    metric: CoordMetric,
) -> EvalReport {
    let runner = SimEpisodeRunner {
        domain: Arc::clone(domain),
        store: Arc::clone(store),
        max_steps,
    };
    let per_task: Vec<(bool, u64, u64, u64)> = crate::par::map_collect(tasks, |task| {
        let (_straj, sverdict) = runner.run_and_verify(task, student, Role::Student);
        let success = sverdict.map(|v| v.passed).unwrap_or(false);

        let (teacher_traj, _tverdict) = runner.run_and_verify(task, teacher, Role::Teacher);
        let outcome = replay_teacher(&teacher_traj, student, tolerance_px, registry, metric);
        let steps = teacher_traj.steps.len() as u64;
        let exec = outcome
            .pairs
            .iter()
            .filter(|p| p.error_type == DiffKind::ExecError)
            .count() as u64;
        let plan = outcome.pairs.len() as u64 - exec;
        (success, steps, exec, plan)
    });
    let mut report = EvalReport {
        tasks: tasks.len() as u64,
        successes: 0,
        replay_steps: 0,
        exec_error_steps: 0,
        plan_error_steps: 0,
    };
    for (success, steps, exec, plan) in per_task {
        report.successes += u64::from(success);
        report.replay_steps += steps;
        report.exec_error_steps += exec;
        report.plan_error_steps += plan;
    }
    report
}

// ---------------------------------------------------------------------------
// End-to-end hermetic run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2eConfig {
    pub seed: u64,
    pub loop_options: LoopOptions,
    pub coord_noise_px: f64,
    pub tolerance_px: u32,
    pub coord_metric: CoordMetric,
    pub mask_mode: MaskMode,
    pub train: TrainConfig,
    pub holdout_count: usize,
    pub max_steps: u32,
    pub embed_dim: usize,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            seed: 7,
            loop_options: LoopOptions::default(),
            coord_noise_px: 8.0,
            tolerance_px: 20,
            coord_metric: CoordMetric::Euclidean,
            mask_mode: MaskMode::ThreeSpan,
            train: TrainConfig { steps: 300, lr: 0.5, beta: 0.1, rank: 4, seed: 0 },
            holdout_count: 60,
            max_steps: 50,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2eReport {
    pub domain_id: String,
    pub seed: u64,
    pub generation_rounds: u32,
    pub per_round_generated: Vec<u64>,
    pub total_generated: u64,
    pub failure_cases: u64,
    pub pairs_filtered: u64,
    pub pairs_unfiltered_pool: u64,
    pub filtered_final_loss: f64,
    pub unfiltered_final_loss: f64,
    pub before: EvalReport,
    pub after: EvalReport,
    /// Relative drop in the replayed student's execution-error step rate.
    pub exec_error_reduction: f64,
    pub stats: DatasetStats,
}

impl E2eReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("domain: {} (seed {})\n", self.domain_id, self.seed));
        out.push_str(&format!(
            "generation rounds: {} (per round: {:?}, total {})\n",
            self.generation_rounds, self.per_round_generated, self.total_generated
        ));
        out.push_str(&format!(
            "failure cases: {}  preference pairs: {} filtered / {} unfiltered pool\n",
            self.failure_cases, self.pairs_filtered, self.pairs_unfiltered_pool
        ));
        out.push_str(&format!(
            "final loss: {:.6} filtered vs {:.6} unfiltered (equal size)\n",
            self.filtered_final_loss, self.unfiltered_final_loss
        ));
        out.push_str(&format!(
            "student sim success rate: before {:.1}% -> after {:.1}%\n",
            100.0 * self.before.success_rate(),
            100.0 * self.after.success_rate()
        ));
        out.push_str(&format!(
            "replayed exec-error step rate: before {:.4} ({}/{}) -> after {:.4} ({}/{}), \
             relative reduction {:.1}%\n",
            self.before.exec_error_rate(),
            self.before.exec_error_steps,
            self.before.replay_steps,
            self.after.exec_error_rate(),
            self.after.exec_error_steps,
            self.after.replay_steps,
            100.0 * self.exec_error_reduction
        ));
        out
    }
}

/// Collect every archived trajectory by id.
pub fn load_all_trajectories(out_dir: &Path) -> Result<BTreeMap<String, Trajectory>, PipelineError> {
    let mut map = BTreeMap::new();
    let iter_root = out_dir.join("iterations");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&iter_root)
        .map_err(|e| PipelineError::Io { path: iter_root.clone(), source: e })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("trajectories.jsonl");
        if !path.exists() {
            continue;
        }
        let outcome = crate::trajectory::load_trajectories(&path, true)?;
        for traj in outcome.trajectories {
            map.insert(traj.id(), traj);
        }
    }
    Ok(map)
}

/// Replay the archived teacher trajectories for the tasks a filter rule
/// selects, through the fixed student snapshot.
pub fn replay_by_rule(
    summary: &LoopSummary,
    trajectories: &BTreeMap<String, Trajectory>,
    student: &dyn PolicyClient,
    rule: FilterRule,
    tolerance_px: u32,
    registry: &ActionRegistry,
    metric: CoordMetric,
) -> Vec<PreferencePair> {
    let selected = filter_tasks(&summary.bookkeeping, rule);
    let mut pairs = Vec::new();
    for query_id in selected {
        let record = summary
            .bookkeeping
            .records
            .iter()
            .find(|r| r.query.query_id == query_id)
            .expect("filter returns known ids");
        let Some(teacher_traj) = trajectories.get(&record.teacher_traj_id) else {
            continue;
        };
        let outcome = replay_teacher(teacher_traj, student, tolerance_px, registry, metric);
        pairs.extend(outcome.pairs);
    }
    pairs
}

fn tokenize_pairs(
    pairs: &[PreferencePair],
    mode: MaskMode,
    tokenizer: &ByteTokenizer,
) -> Result<Vec<TokenizedPair>, PipelineError> {
    pairs
        .iter()
        .map(|pair| {
            let chosen_mask = build_mask(&pair.chosen, pair.error_type, mode, tokenizer)
                .map_err(|e| PipelineError::CorruptArchive {
                    path: PathBuf::from("<pairs>"),
                    reason: e.to_string(),
                })?;
            let rejected_mask = build_mask(&pair.rejected, pair.error_type, mode, tokenizer)
                .map_err(|e| PipelineError::CorruptArchive {
                    path: PathBuf::from("<pairs>"),
                    reason: e.to_string(),
                })?;
            let chosen = tokenizer.tokenize_response(&pair.chosen).expect("canonical");
            let rejected = tokenizer.tokenize_response(&pair.rejected).expect("canonical");
            Ok(TokenizedPair {
                context: tokenizer.tokenize_context(&pair.context),
                chosen,
                rejected,
                chosen_mask,
                rejected_mask,
            })
        })
        .collect()
}

/// Evenly-spaced subsample of `pairs` down to `n` elements, preserving order.
fn subsample_pairs(pairs: &[PreferencePair], n: usize) -> Vec<PreferencePair> {
    if pairs.len() <= n {
        return pairs.to_vec();
    }
    (0..n).map(|i| pairs[i * pairs.len() / n].clone()).collect()
}

fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<(), PipelineError> {
    let text: String = curve.iter().map(|v| format!("{v:.12}\n")).collect();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

/// One hermetic pipeline assembly: simulator domain, scripted policies,
/// stand-in model services, and the episode runner, all seeded from one
/// value. The CLI and the end-to-end entry point both build on this.
pub struct HermeticPipeline {
    pub domain: Arc<SimDomain>,
    pub store: Arc<ScreenshotStore>,
    pub teacher: ScriptedPolicy,
    pub student: ScriptedPolicy,
    pub student_config: ScriptedPolicyConfig,
    pub summarizer: ChatEndpoint,
    pub generator: ChatEndpoint,
    pub reranker: ChatEndpoint,
    pub embedder: HashProjectionEmbedder,
    pub resolver: StoreResolver,
    pub runner: SimEpisodeRunner,
    config_info: Box<dyn Fn(&str) -> String + Send + Sync>,
}

impl HermeticPipeline {
    pub fn new(
        domain: Arc<SimDomain>,
        store_root: &Path,
        seed: u64,
        student_config: ScriptedPolicyConfig,
        max_steps: u32,
        embed_dim: usize,
    ) -> Self {
        let store = Arc::new(ScreenshotStore::new(store_root));
        let teacher =
            ScriptedPolicy::new(Arc::clone(&domain), ScriptedPolicyConfig::teacher(seed + 1));
        let student = ScriptedPolicy::new(Arc::clone(&domain), student_config);
        let summarizer = ChatEndpoint::scripted(sim_summarizer_transport());
        let generator = ChatEndpoint::scripted(sim_generator_transport(Arc::clone(&domain)));
        let reranker = ChatEndpoint::scripted(sim_reranker_transport());
        let embedder = HashProjectionEmbedder::new(embed_dim, seed);
        let resolver =
            StoreResolver { store: Arc::clone(&store), domain_id: domain.domain_id.clone() };
        let runner = SimEpisodeRunner {
            domain: Arc::clone(&domain),
            store: Arc::clone(&store),
            max_steps,
        };
        let domain_for_info = Arc::clone(&domain);
        let config_info = Box::new(move |config_id: &str| -> String {
            match domain_for_info.config(config_id) {
                Ok(c) => {
                    let controls: Vec<String> = c
                        .widgets
                        .iter()
                        .map(|w| format!("{} '{}'", w.kind.noun(), w.label))
                        .collect();
                    format!("Available controls: {}.", controls.join(", "))
                }
                Err(_) => String::new(),
            }
        });
        HermeticPipeline {
            domain,
            store,
            teacher,
            student,
            student_config,
            summarizer,
            generator,
            reranker,
            embedder,
            resolver,
            runner,
            config_info,
        }
    }

    /// Standard student derivation from one base seed: teacher gets seed+1,
    /// student seed+2.
    pub fn student_seed(seed: u64) -> u64 {
        seed + 2
    }

    pub fn handles(&self) -> LoopHandles<'_> {
        LoopHandles {
            teacher: &self.teacher,
            student: &self.student,
            runner: &self.runner,
            summarizer: &self.summarizer,
            generator: &self.generator,
            reranker: &self.reranker,
            embedder: &self.embedder,
            resolver: &self.resolver,
            config_info: self.config_info.as_ref(),
        }
    }
}

/// Run the whole pipeline hermetically on the built-in simulated domain:
/// seeded generation loop, preference construction under the main filter
/// rule, adapter training at the configured temperature, and held-out
/// re-evaluation of the student before and after specialization.
pub fn run_e2e_sim(config: &E2eConfig, out_dir: &Path) -> Result<E2eReport, PipelineError> {
    let domain = Arc::new(SimDomain::builtin());
    let registry = ActionRegistry::default();
    let tokenizer = ByteTokenizer;

    let pipeline = HermeticPipeline::new(
        Arc::clone(&domain),
        &out_dir.join("screenshots"),
        config.seed,
        ScriptedPolicyConfig::noisy_student(
            config.coord_noise_px,
            HermeticPipeline::student_seed(config.seed),
        ),
        config.max_steps,
        config.embed_dim,
    );
    let student = &pipeline.student;
    let teacher = &pipeline.teacher;
    let student: &dyn PolicyClient = student;
    let teacher: &dyn PolicyClient = teacher;
    let store = Arc::clone(&pipeline.store);

    let metadata = DomainMetadata::from_sim(&domain);
    let seeds = builtin_seed_queries(&domain);
    let templates = PromptTemplates::builtin();

    let gen_dir = out_dir.join("gen");
    let summary = run_generation_loop(
        &metadata,
        &seeds,
        &pipeline.handles(),
        &config.loop_options,
        &templates,
        &gen_dir,
        true,
    )?;

    // Preference construction: the main rule's pairs become the dataset; the
    // unfiltered pool exists for the equal-budget comparison.
    let trajectories = load_all_trajectories(&gen_dir)?;
    let pairs_filtered = replay_by_rule(
        &summary,
        &trajectories,
        student,
        FilterRule::TeacherPassStudentFail,
        config.tolerance_px,
        &registry,
        config.coord_metric,
    );
    let pairs_all = replay_by_rule(
        &summary,
        &trajectories,
        student,
        FilterRule::All,
        config.tolerance_px,
        &registry,
        config.coord_metric,
    );
    assert!(
        !pairs_filtered.is_empty(),
        "the seeded run produced no preference pairs; the noise level cannot exercise training"
    );
    persist_pref(
        &out_dir.join("prefs.jsonl"),
        &pairs_filtered,
        &tokenizer,
        config.mask_mode,
        config.tolerance_px,
    )
    .map_err(|e| PipelineError::CorruptArchive {
        path: out_dir.join("prefs.jsonl"),
        reason: e.to_string(),
    })?;

    // Adapter training on the filtered set, plus the equal-size unfiltered
    // comparison.
    let base = ToyPolicy::uniform(VOCAB_SIZE);
    let filtered_tokens = tokenize_pairs(&pairs_filtered, config.mask_mode, &tokenizer)?;
    let unfiltered_sample = subsample_pairs(&pairs_all, pairs_filtered.len());
    let unfiltered_tokens = tokenize_pairs(&unfiltered_sample, config.mask_mode, &tokenizer)?;

    let filtered_run = train_adapter(&filtered_tokens, &base, &domain.domain_id, &config.train)
        .map_err(|e| PipelineError::CorruptArchive {
            path: out_dir.join("train"),
            reason: e.to_string(),
        })?;
    let unfiltered_run =
        train_adapter(&unfiltered_tokens, &base, "unfiltered-comparison", &config.train).map_err(
            |e| PipelineError::CorruptArchive {
                path: out_dir.join("train"),
                reason: e.to_string(),
            },
        )?;
    write_loss_curve(&out_dir.join("train/loss_filtered.txt"), &filtered_run.loss_curve)?;
    write_loss_curve(&out_dir.join("train/loss_unfiltered.txt"), &unfiltered_run.loss_curve)?;

    let mut adapters = AdapterRegistry::new();
    adapters.register(filtered_run.adapter.clone());
    adapters.save_dir(&out_dir.join("adapters")).map_err(|e| PipelineError::CorruptArchive {
        path: out_dir.join("adapters"),
        reason: e.to_string(),
    })?;

    // Held-out evaluation: before = the raw noisy student; after = the same
    // student restricted by the trained scorer.
    let used: Vec<String> = summary
        .bookkeeping
        .records
        .iter()
        .map(|r| r.query.instruction.clone())
        .collect();
    let holdout = holdout_tasks(&domain, &used, config.holdout_count);
    let specialized = adapters
        .activate(&base, &domain.domain_id)
        .expect("adapter registered above");
    let after_policy = RescoredStudentPolicy::new(
        Arc::clone(&domain),
        ScriptedPolicyConfig::noisy_student(config.coord_noise_px, config.seed + 2),
        specialized,
        &domain.domain_id,
    );

    let before = evaluate_student(
        &domain,
        &store,
        teacher,
        student,
        &holdout,
        config.max_steps,
        config.tolerance_px,
        &registry,
        config.coord_metric,
    );
    let after = evaluate_student(
        &domain,
        &store,
        teacher,
        &after_policy,
        &holdout,
        config.max_steps,
        config.tolerance_px,
        &registry,
        config.coord_metric,
    );

    let exec_error_reduction = if before.exec_error_steps > 0 {
        1.0 - (after.exec_error_rate() / before.exec_error_rate())
    } else {
        0.0
    };

    let stats = dataset_stats(&domain.domain_id, &summary.bookkeeping, &pairs_filtered);
    let report = E2eReport {
        domain_id: domain.domain_id.clone(),
        seed: config.seed,
        generation_rounds: summary.generation_rounds,
        per_round_generated: summary.per_round_generated.clone(),
        total_generated: summary.total_generated,
        failure_cases: summary.failure_count,
        pairs_filtered: pairs_filtered.len() as u64,
        pairs_unfiltered_pool: pairs_all.len() as u64,
        filtered_final_loss: filtered_run.final_loss,
        unfiltered_final_loss: unfiltered_run.final_loss,
        before,
        after,
        exec_error_reduction,
        stats,
    };

    let report_path = out_dir.join("e2e_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| PipelineError::Io { path: report_path, source: e })?;
    let stats_path = out_dir.join("stats.txt");
    fs::write(&stats_path, format!("{}\n", report.stats))
        .map_err(|e| PipelineError::Io { path: stats_path, source: e })?;
    Ok(report)
}

fn format_kind(kind: WidgetKind) -> &'static str {
    kind.noun()
}
