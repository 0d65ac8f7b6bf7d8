//! Raw-text parser for the structured response layout.
//!
//! Two layouts are accepted. In marker mode the configured marker strings
//! locate the reasoning / description / execution spans. When no execution
//! marker is present the parser falls back to treating the contiguous suffix
//! of call-shaped lines as the execution span and everything before it as
//! reasoning, which covers model families that emit a bare trailing
//! `Click(455,75)` style action.

use super::{
    unescape_text, ActionRegistry, AgentResponse, ArgSpec, ArgValue, FormatConfig, ParseError,
    SpanMap, ToolCall,
};

/// Parse raw agent output into a structured response with populated spans.
pub fn parse_response(raw: &str, config: &FormatConfig) -> Result<AgentResponse, ParseError> {
    if raw.is_empty() {
        return Err(ParseError::EmptyInput);
    }

    let response = match find_marker(raw, &config.execution_marker, 0) {
        Some(exec_pos) => parse_with_markers(raw, config, exec_pos)?,
        None => parse_fallback(raw, config)?,
    };
    response.span_map.validate(&response.raw_text)?;
    Ok(response)
}

/// Byte position of the first occurrence of `marker` at a line start, at or
/// after `from`.
fn find_marker(raw: &str, marker: &str, from: usize) -> Option<usize> {
    let mut search = from;
    while let Some(rel) = raw[search..].find(marker) {
        let pos = search + rel;
        if pos == 0 || raw.as_bytes()[pos - 1] == b'\n' {
            return Some(pos);
        }
        search = pos + 1;
    }
    None
}

/// Content span following a marker: skips at most one space after the marker
/// and trims trailing `\r`/space/tab from the end bound.
fn content_span(raw: &str, marker_pos: usize, marker_len: usize, hard_end: usize) -> (usize, usize) {
    let mut start = marker_pos + marker_len;
    if raw.as_bytes().get(start) == Some(&b' ') {
        start += 1;
    }
    let mut end = hard_end.max(start);
    while end > start && matches!(raw.as_bytes()[end - 1], b'\r' | b' ' | b'\t') {
        end -= 1;
    }
    (start, end)
}

fn parse_with_markers(
    raw: &str,
    config: &FormatConfig,
    exec_pos: usize,
) -> Result<AgentResponse, ParseError> {
    let desc_pos = config
        .description_marker
        .as_deref()
        .and_then(|m| find_marker(raw, m, 0))
        .filter(|&p| p < exec_pos);

    let reasoning_pos = find_marker(raw, &config.reasoning_marker, 0)
        .filter(|&p| p < desc_pos.unwrap_or(exec_pos));

    let r_hard_end = desc_pos.unwrap_or(exec_pos).saturating_sub(1);
    let (r_start, r_end) = match reasoning_pos {
        Some(p) => content_span(raw, p, config.reasoning_marker.len(), r_hard_end),
        None => content_span(raw, 0, 0, r_hard_end),
    };

    let (d_start, d_end) = match desc_pos {
        Some(p) => {
            let marker_len = config.description_marker.as_deref().unwrap().len();
            content_span(raw, p, marker_len, exec_pos.saturating_sub(1))
        }
        None => (r_end, r_end),
    };

    // Execution content starts after the marker's own line.
    let marker_line_end = raw[exec_pos..].find('\n').map(|i| exec_pos + i + 1);
    let (e_start, e_end) = match marker_line_end {
        Some(start) => {
            let mut end = raw.len();
            while end > start && raw.as_bytes()[end - 1].is_ascii_whitespace() {
                end -= 1;
            }
            (start, end)
        }
        None => (raw.len(), raw.len()),
    };
    if e_start >= e_end {
        return Err(ParseError::MissingExecutionSpan(
            "execution marker present but no calls follow it".into(),
        ));
    }

    let mut executions = Vec::new();
    for (line, _, _) in lines_with_spans(&raw[e_start..e_end]) {
        if line.trim().is_empty() {
            continue;
        }
        match scan_line(line, config)? {
            LineParse::Call(call) => executions.push(call),
            LineParse::Bare(name) => executions.push(resolve_bare(&name, &config.registry)?),
            LineParse::NotCall => {
                return Err(ParseError::MalformedAction {
                    line: line.to_string(),
                    reason: "line in execution span is not a tool call".into(),
                })
            }
        }
    }
    if executions.is_empty() {
        return Err(ParseError::MissingExecutionSpan("execution span holds no calls".into()));
    }

    Ok(AgentResponse {
        raw_text: raw.to_string(),
        reasoning: raw[r_start..r_end].to_string(),
        description: raw[d_start..d_end].to_string(),
        executions,
        span_map: SpanMap {
            reasoning: r_start..r_end,
            description: d_start..d_end,
            execution: e_start..e_end,
        },
    })
}

fn parse_fallback(raw: &str, config: &FormatConfig) -> Result<AgentResponse, ParseError> {
    let lines: Vec<(&str, usize, usize)> = lines_with_spans(raw).collect();

    // Walk backwards over trailing blanks, then collect the contiguous suffix
    // of call lines.
    let mut idx = lines.len();
    while idx > 0 && lines[idx - 1].0.trim().is_empty() {
        idx -= 1;
    }
    let mut first_call = idx;
    let mut executions_rev: Vec<ToolCall> = Vec::new();
    while first_call > 0 {
        let (line, _, _) = lines[first_call - 1];
        match scan_line(line, config)? {
            LineParse::Call(call) => {
                executions_rev.push(call);
                first_call -= 1;
            }
            // A bare name only counts as a call here when registered zero-arg
            // (DONE/FAIL); ordinary single-word prose lines stay reasoning.
            LineParse::Bare(name)
                if config.registry.get(&name).map(|s| s.arg_spec == ArgSpec::None)
                    == Some(true) =>
            {
                executions_rev.push(ToolCall::Known { name, args: vec![] });
                first_call -= 1;
            }
            _ => break,
        }
    }
    if executions_rev.is_empty() || first_call >= idx {
        return Err(ParseError::MissingExecutionSpan(
            "no trailing tool-call lines and no execution marker".into(),
        ));
    }
    let executions: Vec<ToolCall> = executions_rev.into_iter().rev().collect();

    let e_start = lines[first_call].1;
    let e_end = lines[idx - 1].2;

    // Everything before the call suffix is reasoning; strip a leading
    // reasoning marker when present.
    let r_hard_end = e_start.saturating_sub(1);
    let (r_start, r_end) = match find_marker(raw, &config.reasoning_marker, 0)
        .filter(|&p| p < e_start)
    {
        Some(p) => content_span(raw, p, config.reasoning_marker.len(), r_hard_end),
        None => content_span(raw, 0, 0, r_hard_end),
    };
    let r_end = r_end.max(r_start);

    Ok(AgentResponse {
        raw_text: raw.to_string(),
        reasoning: raw[r_start..r_end].to_string(),
        description: String::new(),
        executions,
        span_map: SpanMap {
            reasoning: r_start..r_end,
            description: r_end..r_end,
            execution: e_start..e_end,
        },
    })
}

/// Iterates `(line, start, end)` with byte offsets; `end` excludes the newline.
fn lines_with_spans(text: &str) -> impl Iterator<Item = (&str, usize, usize)> {
    let mut start = 0usize;
    let bytes_len = text.len();
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        match text[start..].find('\n') {
            Some(rel) => {
                let end = start + rel;
                let item = (&text[start..end], start, end);
                start = end + 1;
                Some(item)
            }
            None => {
                done = true;
                Some((&text[start..], start, bytes_len))
            }
        }
    })
}

enum LineParse {
    Call(ToolCall),
    Bare(String),
    NotCall,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn scan_line(line: &str, config: &FormatConfig) -> Result<LineParse, ParseError> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(LineParse::NotCall);
    }
    let Some(paren) = trimmed.find('(') else {
        return if is_identifier(trimmed) {
            Ok(LineParse::Bare(trimmed.to_string()))
        } else {
            Ok(LineParse::NotCall)
        };
    };
    let name = trimmed[..paren].trim_end();
    if !is_identifier(name) {
        return Ok(LineParse::NotCall);
    }
    let rest = &trimmed[paren + 1..];
    let Some(close) = rest.rfind(')') else {
        return Err(ParseError::MalformedAction {
            line: line.to_string(),
            reason: "unbalanced parentheses".into(),
        });
    };
    if !rest[close + 1..].trim().is_empty() {
        return Err(ParseError::MalformedAction {
            line: line.to_string(),
            reason: "trailing text after closing parenthesis".into(),
        });
    }
    let inner = &rest[..close];
    let call = parse_call(name, inner, config).map_err(|reason| ParseError::MalformedAction {
        line: line.to_string(),
        reason,
    })?;
    Ok(LineParse::Call(call))
}

fn resolve_bare(name: &str, registry: &ActionRegistry) -> Result<ToolCall, ParseError> {
    match registry.get(name) {
        Some(sig) if sig.arg_spec == ArgSpec::None => {
            Ok(ToolCall::Known { name: name.to_string(), args: vec![] })
        }
        Some(_) => Err(ParseError::MalformedAction {
            line: name.to_string(),
            reason: "registered action is missing its arguments".into(),
        }),
        None => Ok(ToolCall::Quarantined { name: name.to_string(), raw_args: String::new() }),
    }
}

fn parse_call(name: &str, inner: &str, config: &FormatConfig) -> Result<ToolCall, String> {
    let Some(sig) = config.registry.get(name) else {
        return Ok(ToolCall::Quarantined {
            name: name.to_string(),
            raw_args: inner.trim().to_string(),
        });
    };
    let args = match sig.arg_spec {
        ArgSpec::None => {
            if !inner.trim().is_empty() {
                return Err(format!("{name} takes no arguments"));
            }
            vec![]
        }
        ArgSpec::CoordPair => {
            let parts: Vec<&str> = inner.split(',').collect();
            if parts.len() != 2 {
                return Err(format!("{name} expects exactly two coordinates"));
            }
            let x = parse_coord(parts[0], config.screen_extent.0, "x")?;
            let y = parse_coord(parts[1], config.screen_extent.1, "y")?;
            vec![ArgValue::Coord(x), ArgValue::Coord(y)]
        }
        ArgSpec::Text => vec![ArgValue::Text(parse_text(inner))],
        ArgSpec::Key => vec![ArgValue::Key(parse_key(inner)?)],
        ArgSpec::KeyList => {
            let keys: Result<Vec<String>, String> =
                inner.split(',').map(parse_key).collect();
            let keys = keys?;
            if keys.is_empty() {
                return Err(format!("{name} expects at least one key"));
            }
            vec![ArgValue::Keys(keys)]
        }
        ArgSpec::Seconds => {
            let s: f64 = inner
                .trim()
                .parse()
                .map_err(|_| format!("cannot parse {inner:?} as seconds"))?;
            if !s.is_finite() || s < 0.0 {
                return Err(format!("duration {inner:?} must be finite and non-negative"));
            }
            vec![ArgValue::Seconds(s)]
        }
    };
    Ok(ToolCall::Known { name: name.to_string(), args })
}

fn parse_coord(raw: &str, bound: u32, axis: &str) -> Result<u32, String> {
    let v: i64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse {raw:?} as an integer coordinate"))?;
    if v < 0 {
        return Err(format!("{axis} coordinate {v} is negative"));
    }
    if v >= bound as i64 {
        return Err(format!("{axis} coordinate {v} exceeds screen extent {bound}"));
    }
    Ok(v as u32)
}

fn parse_text(inner: &str) -> String {
    let t = inner.trim();
    if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
        unescape_text(&t[1..t.len() - 1])
    } else {
        t.to_string()
    }
}

fn parse_key(raw: &str) -> Result<String, String> {
    let k = raw.trim().to_ascii_lowercase();
    if k.is_empty() {
        return Err("empty key name".into());
    }
    if k.chars().any(|c| c.is_whitespace() || c == ',' || c == '(' || c == ')') {
        return Err(format!("invalid key name {k:?}"));
    }
    Ok(k)
}
