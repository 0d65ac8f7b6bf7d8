use proptest::prelude::*;

use super::*;

fn cfg() -> FormatConfig {
    FormatConfig::default()
}

fn resp(calls: Vec<ToolCall>) -> AgentResponse {
    AgentResponse::new("thinking", "doing", calls, &cfg())
}

#[test]
fn parses_bare_trailing_click() {
    let r = parse_response("I will click the sort button now.\nClick(455,75)", &cfg()).unwrap();
    assert_eq!(r.executions, vec![ToolCall::coord("Click", 455, 75)]);
    assert_eq!(r.reasoning, "I will click the sort button now.");
    assert!(r.description.is_empty());
}

#[test]
fn parses_hotkey_with_spaces() {
    let r = parse_response("select to end\nHotKey(ctrl, shift, end)", &cfg()).unwrap();
    assert_eq!(
        r.executions,
        vec![ToolCall::known(
            "HotKey",
            vec![ArgValue::Keys(vec!["ctrl".into(), "shift".into(), "end".into()])]
        )]
    );
    assert_eq!(r.executions[0].render(), "HotKey(ctrl,shift,end)");
}

#[test]
fn parses_bare_done_terminal() {
    let r = parse_response("The task is complete.\nDONE", &cfg()).unwrap();
    assert_eq!(r.executions, vec![ToolCall::known(DONE, vec![])]);
    assert!(r.executions[0].is_terminal());
}

#[test]
fn parses_marker_layout_with_spans() {
    let raw = "Reasoning: look at the field\nAction: type into it\nExecution:\nClick(10,20)\nType(\"hi\")";
    let r = parse_response(raw, &cfg()).unwrap();
    assert_eq!(r.reasoning, "look at the field");
    assert_eq!(r.description, "type into it");
    assert_eq!(r.executions.len(), 2);
    assert_eq!(&raw[r.span_map.reasoning.clone()], "look at the field");
    assert_eq!(&raw[r.span_map.description.clone()], "type into it");
    assert_eq!(&raw[r.span_map.execution.clone()], "Click(10,20)\nType(\"hi\")");
}

#[test]
fn unknown_action_goes_to_quarantine() {
    let r = parse_response("hm\nWarpTo(3,4)", &cfg()).unwrap();
    assert_eq!(
        r.executions,
        vec![ToolCall::Quarantined { name: "WarpTo".into(), raw_args: "3,4".into() }]
    );
}

#[test]
fn unbalanced_parens_is_malformed() {
    let err = parse_response("x\nClick(455,75", &cfg()).unwrap_err();
    assert!(matches!(err, ParseError::MalformedAction { .. }), "{err}");
}

#[test]
fn prose_only_input_has_no_execution_span() {
    let err = parse_response("just thinking aloud here", &cfg()).unwrap_err();
    assert!(matches!(err, ParseError::MissingExecutionSpan(_)), "{err}");
}

#[test]
fn coordinates_are_bounded_by_extent() {
    let err = parse_response("x\nClick(5000,75)", &cfg()).unwrap_err();
    assert!(matches!(err, ParseError::MalformedAction { .. }));
}

#[test]
fn single_word_prose_line_is_not_swallowed() {
    let r = parse_response("Proceed\nClick(3,4)", &cfg()).unwrap();
    assert_eq!(r.reasoning, "Proceed");
    assert_eq!(r.executions.len(), 1);
}

#[test]
fn normalize_removes_waits() {
    let reg = ActionRegistry::default();
    let calls = vec![
        ToolCall::coord("Click", 10, 10),
        ToolCall::known("wait", vec![ArgValue::Seconds(2.0)]),
    ];
    assert_eq!(normalize_executions(&calls, &reg), vec![ToolCall::coord("Click", 10, 10)]);
    assert_eq!(normalize_executions(&[], &reg), vec![]);
    let all_wait = vec![
        ToolCall::known("wait", vec![ArgValue::Seconds(1.0)]),
        ToolCall::known("wait", vec![ArgValue::Seconds(3.0)]),
    ];
    assert_eq!(normalize_executions(&all_wait, &reg), vec![]);
}

#[test]
fn tolerance_rule_euclidean() {
    let a = ToolCall::coord("Click", 100, 100);
    assert!(calls_equivalent(&a, &ToolCall::coord("Click", 100, 119), 20).unwrap());
    // Distance exactly 20.0 over the integer grid: sqrt(12^2 + 16^2).
    assert!(calls_equivalent(&a, &ToolCall::coord("Click", 112, 116), 20).unwrap());
    assert!(!calls_equivalent(&a, &ToolCall::coord("Click", 100, 121), 20).unwrap());
    let t1 = ToolCall::known("Type", vec![ArgValue::Text("abc".into())]);
    let t2 = ToolCall::known("Type", vec![ArgValue::Text("abd".into())]);
    assert!(!calls_equivalent(&t1, &t2, 1000).unwrap());
}

#[test]
fn chebyshev_metric_differs_from_euclidean() {
    let a = ToolCall::coord("Click", 0, 0);
    let b = ToolCall::coord("Click", 20, 20);
    assert!(!calls_equivalent(&a, &b, 20).unwrap());
    assert!(calls_equivalent_with(&a, &b, 20, CoordMetric::Chebyshev).unwrap());
}

#[test]
fn classify_plan_error_on_function_swap() {
    let reg = ActionRegistry::default();
    let t = resp(vec![ToolCall::coord("Click", 455, 75)]);
    let s = resp(vec![ToolCall::known("Type", vec![ArgValue::Text("x".into())])]);
    assert_eq!(classify_step_diff(&t, &s, 20, &reg).kind, DiffKind::PlanError);
}

#[test]
fn classify_exec_error_on_far_click() {
    let reg = ActionRegistry::default();
    let t = resp(vec![ToolCall::coord("Click", 100, 100)]);
    let s = resp(vec![ToolCall::coord("Click", 200, 200)]);
    assert_eq!(classify_step_diff(&t, &s, 20, &reg).kind, DiffKind::ExecError);
}

#[test]
fn classify_plan_error_on_tool_count() {
    let reg = ActionRegistry::default();
    let t = resp(vec![
        ToolCall::coord("Click", 1, 1),
        ToolCall::known("Key", vec![ArgValue::Key("enter".into())]),
    ]);
    let s = resp(vec![ToolCall::coord("Click", 1, 1)]);
    assert_eq!(classify_step_diff(&t, &s, 20, &reg).kind, DiffKind::PlanError);
}

#[test]
fn wait_only_difference_is_match() {
    let reg = ActionRegistry::default();
    let t = resp(vec![
        ToolCall::coord("Click", 5, 5),
        ToolCall::known("wait", vec![ArgValue::Seconds(2.0)]),
    ]);
    let s = resp(vec![ToolCall::coord("Click", 5, 5)]);
    assert_eq!(classify_step_diff(&t, &s, 0, &reg).kind, DiffKind::Match);
}

#[test]
fn quarantined_calls_match_only_verbatim() {
    let reg = ActionRegistry::default();
    let q1 = resp(vec![ToolCall::Quarantined { name: "Zap".into(), raw_args: "1".into() }]);
    let q2 = resp(vec![ToolCall::Quarantined { name: "Zap".into(), raw_args: "2".into() }]);
    assert_eq!(classify_step_diff(&q1, &q1, 0, &reg).kind, DiffKind::Match);
    assert_eq!(classify_step_diff(&q1, &q2, 0, &reg).kind, DiffKind::PlanError);
}

// Brute-force three-case classifier used as the small-grid oracle: plan error
// iff name sequences differ (by name or count), exec error iff names agree
// but some call pair is not equivalent, match otherwise.
fn oracle_classify(t: &[ToolCall], s: &[ToolCall], tol: u32, reg: &ActionRegistry) -> DiffKind {
    let tn: Vec<ToolCall> = normalize_executions(t, reg);
    let sn: Vec<ToolCall> = normalize_executions(s, reg);
    let t_names: Vec<&str> = tn.iter().map(|c| c.name()).collect();
    let s_names: Vec<&str> = sn.iter().map(|c| c.name()).collect();
    if t_names != s_names {
        return DiffKind::PlanError;
    }
    for (a, b) in tn.iter().zip(&sn) {
        let equivalent = match (a, b) {
            (ToolCall::Known { args: aa, .. }, ToolCall::Known { args: ab, .. }) => {
                aa.len() == ab.len() && {
                    let coords = |args: &[ArgValue]| -> Vec<u32> {
                        args.iter()
                            .filter_map(|v| if let ArgValue::Coord(c) = v { Some(*c) } else { None })
                            .collect()
                    };
                    let (ca, cb) = (coords(aa), coords(ab));
                    let coord_ok = ca
                        .chunks(2)
                        .zip(cb.chunks(2))
                        .all(|(pa, pb)| match (pa, pb) {
                            ([x1, y1], [x2, y2]) => {
                                let dx = (*x1 as f64) - (*x2 as f64);
                                let dy = (*y1 as f64) - (*y2 as f64);
                                dx.hypot(dy) <= tol as f64
                            }
                            ([x1], [x2]) => (*x1 as f64 - *x2 as f64).abs() <= tol as f64,
                            _ => false,
                        });
                    let others_ok = aa
                        .iter()
                        .zip(ab)
                        .filter(|(v, _)| !matches!(v, ArgValue::Coord(_)))
                        .all(|(v, w)| match (v, w) {
                            (ArgValue::Text(x), ArgValue::Text(y)) => x.trim_end() == y.trim_end(),
                            (x, y) => x == y,
                        });
                    coord_ok && others_ok
                }
            }
            (ToolCall::Quarantined { raw_args: ra, .. }, ToolCall::Quarantined { raw_args: rb, .. }) => {
                ra == rb
            }
            _ => false,
        };
        if !equivalent {
            return DiffKind::ExecError;
        }
    }
    DiffKind::Match
}

fn small_grid_calls() -> Vec<ToolCall> {
    let mut calls = Vec::new();
    for name in ["Click", "MoveTo"] {
        for x in 0..5u32 {
            for y in 0..5u32 {
                calls.push(ToolCall::coord(name, x, y));
            }
        }
    }
    for text in ["a", "b"] {
        calls.push(ToolCall::known("Type", vec![ArgValue::Text(text.into())]));
    }
    calls.push(ToolCall::known(DONE, vec![]));
    calls
}

#[test]
fn small_grid_matches_oracle() {
    let reg = ActionRegistry::default();
    let calls = small_grid_calls();
    let mut disagreements = 0;
    for tol in [0u32, 2] {
        for a in &calls {
            for b in &calls {
                let t = resp(vec![a.clone()]);
                let s = resp(vec![b.clone()]);
                let got = classify_step_diff(&t, &s, tol, &reg).kind;
                let want = oracle_classify(
                    std::slice::from_ref(a),
                    std::slice::from_ref(b),
                    tol,
                    &reg,
                );
                if got != want {
                    disagreements += 1;
                }
            }
        }
    }
    assert_eq!(disagreements, 0);
}

fn arb_call() -> impl Strategy<Value = ToolCall> {
    prop_oneof![
        (0u32..1280, 0u32..800).prop_map(|(x, y)| ToolCall::coord("Click", x, y)),
        (0u32..1280, 0u32..800).prop_map(|(x, y)| ToolCall::coord("DragTo", x, y)),
        "[a-zA-Z0-9 ,.!?_-]{0,20}"
            .prop_map(|t| ToolCall::known("Type", vec![ArgValue::Text(t)])),
        prop_oneof![Just("enter"), Just("esc"), Just("tab")]
            .prop_map(|k| ToolCall::known("Key", vec![ArgValue::Key(k.into())])),
        proptest::collection::vec(prop_oneof![Just("ctrl"), Just("shift"), Just("end")], 1..3)
            .prop_map(|ks| ToolCall::known(
                "HotKey",
                vec![ArgValue::Keys(ks.into_iter().map(String::from).collect())]
            )),
        (0u32..10).prop_map(|s| ToolCall::known("wait", vec![ArgValue::Seconds(s as f64)])),
        Just(ToolCall::known(DONE, vec![])),
    ]
}

fn arb_response() -> impl Strategy<Value = AgentResponse> {
    (
        "[a-zA-Z0-9 ,.]{1,40}",
        "[a-zA-Z0-9 ,.]{0,30}",
        proptest::collection::vec(arb_call(), 1..4),
    )
        .prop_map(|(r, d, calls)| AgentResponse::new(&r, &d, calls, &cfg()))
}

proptest! {
    #[test]
    fn canonical_roundtrip(resp in arb_response()) {
        let serialized = resp.serialize(&cfg());
        let parsed = parse_response(&serialized, &cfg()).unwrap();
        prop_assert_eq!(&parsed, &resp);
        prop_assert_eq!(parsed.serialize(&cfg()), serialized);
    }

    #[test]
    fn normalize_is_idempotent(calls in proptest::collection::vec(arb_call(), 0..6)) {
        let reg = ActionRegistry::default();
        let once = normalize_executions(&calls, &reg);
        prop_assert_eq!(normalize_executions(&once, &reg), once.clone());
    }

    #[test]
    fn classify_reflexive_and_symmetric(
        a in arb_response(),
        b in arb_response(),
        tol in 0u32..40,
    ) {
        let reg = ActionRegistry::default();
        prop_assert_eq!(classify_step_diff(&a, &a, tol, &reg).kind, DiffKind::Match);
        let ab = classify_step_diff(&a, &b, tol, &reg).kind;
        let ba = classify_step_diff(&b, &a, tol, &reg).kind;
        prop_assert_eq!(ab, ba);
    }
}
