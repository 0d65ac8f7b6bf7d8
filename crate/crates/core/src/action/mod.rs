//! Structured agent action format: parsing, serialization, normalization, and
//! step-level comparison.
//!
//! An agent step has three parts: free-text reasoning, a natural-language
//! description of the intended action, and one or more executable tool calls.
//! The tool-call DSL is `Name(arg1,arg2,...)`, one call per line, with `DONE`
//! and `FAIL` as bare zero-argument terminals. Step comparison distinguishes
//! planning-level divergence (different function names or call counts) from
//! execution-level divergence (same functions, parameters differing beyond a
//! pixel tolerance).

mod diff;
mod parse;
#[cfg(test)]
mod tests;

pub use diff::{
    calls_equivalent, calls_equivalent_with, classify_step_diff, classify_step_diff_with,
    normalize_executions, CoordMetric, EquivalenceError,
};
pub use parse::parse_response;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Terminal call that ends a trajectory claiming success.
pub const DONE: &str = "DONE";
/// Terminal call that ends a trajectory conceding failure.
pub const FAIL: &str = "FAIL";

/// One typed argument of a tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArgValue {
    /// Pixel coordinate component. Always paired x,y in signatures.
    Coord(u32),
    /// Free text, e.g. the payload of `Type(...)`.
    Text(String),
    /// Single key name, lowercased (`enter`, `esc`).
    Key(String),
    /// Chord of key names, lowercased (`ctrl,shift,end`).
    Keys(Vec<String>),
    /// No-op duration in seconds.
    Seconds(f64),
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Coord(c) => write!(f, "{c}"),
            ArgValue::Text(t) => write!(f, "\"{}\"", escape_text(t)),
            ArgValue::Key(k) => write!(f, "{k}"),
            ArgValue::Keys(ks) => write!(f, "{}", ks.join(",")),
            ArgValue::Seconds(s) => write!(f, "{s}"),
        }
    }
}

fn escape_text(t: &str) -> String {
    t.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

pub(crate) fn unescape_text(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// A single tool call. Unknown function names are preserved verbatim in the
/// `Quarantined` variant instead of failing the parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToolCall {
    Known { name: String, args: Vec<ArgValue> },
    Quarantined { name: String, raw_args: String },
}

impl ToolCall {
    pub fn known(name: &str, args: Vec<ArgValue>) -> Self {
        ToolCall::Known { name: name.to_string(), args }
    }

    /// Convenience constructor for coordinate-pair calls like `Click(x,y)`.
    pub fn coord(name: &str, x: u32, y: u32) -> Self {
        ToolCall::known(name, vec![ArgValue::Coord(x), ArgValue::Coord(y)])
    }

    pub fn name(&self) -> &str {
        match self {
            ToolCall::Known { name, .. } | ToolCall::Quarantined { name, .. } => name,
        }
    }

    /// `DONE` and `FAIL` always terminate a trajectory.
    pub fn is_terminal(&self) -> bool {
        matches!(self.name(), DONE | FAIL)
    }

    pub fn is_wait(&self, registry: &ActionRegistry) -> bool {
        registry.get(self.name()).map(|sig| sig.wait_class).unwrap_or(false)
    }

    /// Canonical DSL rendering, one line per call.
    pub fn render(&self) -> String {
        match self {
            ToolCall::Known { name, args } => {
                if args.is_empty() {
                    name.clone()
                } else {
                    let rendered: Vec<String> = args.iter().map(|a| a.to_string()).collect();
                    format!("{name}({})", rendered.join(","))
                }
            }
            ToolCall::Quarantined { name, raw_args } => {
                if raw_args.is_empty() {
                    name.clone()
                } else {
                    format!("{name}({raw_args})")
                }
            }
        }
    }
}

/// Argument layout of a registered action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgSpec {
    /// Two non-negative integers, interpreted as an x,y pixel pair.
    CoordPair,
    /// A single free-text argument (the whole call body).
    Text,
    /// A single key name.
    Key,
    /// One or more key names forming a chord.
    KeyList,
    /// A single non-negative duration in seconds.
    Seconds,
    /// No arguments.
    None,
}

/// Signature and classification flags for one registered action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSig {
    pub arg_spec: ArgSpec,
    /// Wait-class calls are stripped before step comparison.
    pub wait_class: bool,
}

/// Extensible vocabulary of action names. Names not present here parse into
/// [`ToolCall::Quarantined`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRegistry {
    actions: BTreeMap<String, ActionSig>,
}

impl ActionRegistry {
    pub fn empty() -> Self {
        ActionRegistry { actions: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, arg_spec: ArgSpec, wait_class: bool) {
        self.actions.insert(name.to_string(), ActionSig { arg_spec, wait_class });
    }

    pub fn get(&self, name: &str) -> Option<&ActionSig> {
        self.actions.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.actions.keys().map(|s| s.as_str())
    }
}

impl Default for ActionRegistry {
    fn default() -> Self {
        let mut r = ActionRegistry::empty();
        for name in ["Click", "DoubleClick", "RightClick", "MoveTo", "DragTo"] {
            r.register(name, ArgSpec::CoordPair, false);
        }
        r.register("Type", ArgSpec::Text, false);
        r.register("Key", ArgSpec::Key, false);
        r.register("KeyDown", ArgSpec::Key, false);
        r.register("KeyUp", ArgSpec::Key, false);
        r.register("HotKey", ArgSpec::KeyList, false);
        r.register("wait", ArgSpec::Seconds, true);
        r.register(DONE, ArgSpec::None, false);
        r.register(FAIL, ArgSpec::None, false);
        r
    }
}

/// Half-open byte range into a response's raw text.
pub type Span = std::ops::Range<usize>;

/// Locations of the reasoning / description / execution spans within a raw
/// response. Ranges are disjoint and ordered; delimiter text between them is
/// covered by none of the three.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMap {
    pub reasoning: Span,
    pub description: Span,
    pub execution: Span,
}

impl SpanMap {
    /// Validates range bounds, ordering, and disjointness against `raw`.
    pub fn validate(&self, raw: &str) -> Result<(), ParseError> {
        let len = raw.len();
        for (label, span) in [
            ("reasoning", &self.reasoning),
            ("description", &self.description),
            ("execution", &self.execution),
        ] {
            if span.start > span.end || span.end > len {
                return Err(ParseError::InvalidSpan(format!(
                    "{label} span {}..{} out of bounds for text of length {len}",
                    span.start, span.end
                )));
            }
        }
        if self.reasoning.end > self.description.start && !self.description.is_empty()
            || self.description.end > self.execution.start
            || self.reasoning.end > self.execution.start
        {
            return Err(ParseError::InvalidSpan("spans overlap or are out of order".into()));
        }
        Ok(())
    }
}

/// One structured agent step: reasoning, action description, and the tool
/// executions, plus the byte spans locating each part in `raw_text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub raw_text: String,
    pub reasoning: String,
    pub description: String,
    pub executions: Vec<ToolCall>,
    pub span_map: SpanMap,
}

impl AgentResponse {
    /// Builds a response in canonical layout for `config`, so that
    /// `parse_response(serialize(...))` round-trips exactly. Text fields are
    /// trimmed of surrounding whitespace as part of canonicalization.
    pub fn new(
        reasoning: &str,
        description: &str,
        executions: Vec<ToolCall>,
        config: &FormatConfig,
    ) -> Self {
        let reasoning = reasoning.trim();
        let description = description.trim();
        let (raw_text, span_map) =
            render_canonical(reasoning, description, &executions, config);
        AgentResponse {
            raw_text,
            reasoning: reasoning.to_string(),
            description: description.to_string(),
            executions,
            span_map,
        }
    }

    /// Canonical serialization of the structured fields.
    pub fn serialize(&self, config: &FormatConfig) -> String {
        render_canonical(&self.reasoning, &self.description, &self.executions, config).0
    }

    /// True when the step's final call terminates the trajectory.
    pub fn is_terminal(&self) -> bool {
        self.executions.last().map(ToolCall::is_terminal).unwrap_or(false)
    }
}

fn render_canonical(
    reasoning: &str,
    description: &str,
    executions: &[ToolCall],
    config: &FormatConfig,
) -> (String, SpanMap) {
    let mut out = String::new();
    out.push_str(&config.reasoning_marker);
    if !reasoning.is_empty() {
        out.push(' ');
    }
    let r_start = out.len();
    out.push_str(reasoning);
    let r_end = out.len();
    out.push('\n');

    let (d_start, d_end) = if let Some(marker) = &config.description_marker {
        out.push_str(marker);
        if !description.is_empty() {
            out.push(' ');
        }
        let start = out.len();
        out.push_str(description);
        let end = out.len();
        out.push('\n');
        (start, end)
    } else {
        (r_end, r_end)
    };

    out.push_str(&config.execution_marker);
    out.push('\n');
    let e_start = out.len();
    let rendered: Vec<String> = executions.iter().map(ToolCall::render).collect();
    out.push_str(&rendered.join("\n"));
    let e_end = out.len();

    (
        out,
        SpanMap {
            reasoning: r_start..r_end,
            description: d_start..d_end,
            execution: e_start..e_end,
        },
    )
}

/// Delimiter configuration for one model family's raw output layout.
///
/// Markers are matched literally at line starts; no regex. A `None`
/// description marker selects the two-span layout used by model families
/// without a separate action-description component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatConfig {
    pub reasoning_marker: String,
    pub description_marker: Option<String>,
    pub execution_marker: String,
    /// Exclusive upper bounds for coordinate arguments (width, height).
    pub screen_extent: (u32, u32),
    pub registry: ActionRegistry,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            reasoning_marker: "Reasoning:".to_string(),
            description_marker: Some("Action:".to_string()),
            execution_marker: "Execution:".to_string(),
            screen_extent: (1280, 800),
            registry: ActionRegistry::default(),
        }
    }
}

impl FormatConfig {
    /// Two-span layout: reasoning followed directly by executions.
    pub fn two_span() -> Self {
        FormatConfig { description_marker: None, ..FormatConfig::default() }
    }
}

/// Errors from parsing raw agent output.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed action line {line:?}: {reason}")]
    MalformedAction { line: String, reason: String },
    #[error("no execution span found: {0}")]
    MissingExecutionSpan(String),
    #[error("invalid span layout: {0}")]
    InvalidSpan(String),
    #[error("empty input")]
    EmptyInput,
}

/// How one student step relates to the teacher step at the same context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffKind {
    /// Same functions, all parameters within tolerance.
    Match,
    /// Function-name sequences differ by name or by count.
    PlanError,
    /// Same functions and counts, at least one parameter beyond tolerance.
    ExecError,
}

impl fmt::Display for DiffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiffKind::Match => "match",
            DiffKind::PlanError => "plan_error",
            DiffKind::ExecError => "exec_error",
        };
        f.write_str(s)
    }
}

/// Classification of a teacher/student step pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDiff {
    pub kind: DiffKind,
    pub detail: String,
    pub tolerance_px: u32,
}
