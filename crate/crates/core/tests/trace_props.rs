use eager_core::trace::{
    parse_traces, segment_by_agent, validate_trace, write_traces_to, FailureType, ReasoningStep,
    ReasoningTrace, StepKind, SystemProfile, TraceLabel,
};
use proptest::prelude::*;

const KINDS: [StepKind; 5] = [
    StepKind::Thought,
    StepKind::ToolCall,
    StepKind::ToolResult,
    StepKind::Message,
    StepKind::FinalAnswer,
];

fn step_strategy() -> impl Strategy<Value = (String, StepKind, String, u32, i64)> {
    (
        prop::sample::select(vec!["planner", "executor", "verifier", "a-1", "b_2"])
            .prop_map(String::from),
        prop::sample::select(KINDS.to_vec()),
        "[a-z]{1,8}( [a-z0-9]{1,8}){0,4}",
        1u32..4,
        -1_000i64..1_000_000,
    )
}

fn label_strategy() -> impl Strategy<Value = Option<TraceLabel>> {
    prop_oneof![
        Just(None),
        Just(Some(TraceLabel::clean())),
        (
            prop::sample::select(FailureType::ALL.to_vec()),
            any::<bool>(),
            0u32..5
        )
            .prop_map(|(t, culprit, ord)| {
                Some(TraceLabel {
                    failed: true,
                    failure_type: Some(t),
                    culprit_agent_role: culprit.then(|| "executor".to_string()),
                    culprit_segment_ordinal: culprit.then_some(ord),
                })
            }),
    ]
}

fn trace_strategy() -> impl Strategy<Value = ReasoningTrace> {
    (
        "[a-z0-9]{1,12}",
        prop::collection::vec(step_strategy(), 1..25),
        label_strategy(),
        proptest::option::of("[a-z ]{1,20}"),
    )
        .prop_map(|(id, raw, label, answer)| {
            let mut index = 0;
            let steps = raw
                .into_iter()
                .map(|(role, kind, text, gap, ts)| {
                    index += gap;
                    ReasoningStep {
                        index,
                        agent_role: role,
                        kind,
                        text,
                        timestamp_ms: ts,
                    }
                })
                .collect();
            ReasoningTrace {
                trace_id: id,
                question: "why".into(),
                base_question_id: None,
                variant_id: None,
                system_profile: SystemProfile::Synthetic,
                steps,
                final_answer: answer,
                label,
            }
        })
}

#[derive(Debug, Clone, Copy)]
enum Mutation {
    RepeatIndex,
    BadRole,
    EmptyText,
    CleanWithType,
    NoSteps,
    EmptyId,
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn segments_partition_steps(trace in trace_strategy()) {
        prop_assert!(validate_trace(&trace).is_valid());
        let segments = segment_by_agent(&trace).unwrap();
        let flat: Vec<&ReasoningStep> = segments.iter().flat_map(|s| &s.steps).collect();
        prop_assert_eq!(flat.len(), trace.steps.len());
        for (a, b) in flat.iter().zip(&trace.steps) {
            prop_assert_eq!(*a, b);
        }
        for (i, seg) in segments.iter().enumerate() {
            prop_assert_eq!(seg.segment_ordinal as usize, i);
            prop_assert!(!seg.steps.is_empty());
            prop_assert!(seg.steps.iter().all(|s| s.agent_role == seg.agent_role));
            if i > 0 {
                prop_assert_ne!(&segments[i - 1].agent_role, &seg.agent_role);
            }
        }
    }

    #[test]
    fn jsonl_round_trip(traces in prop::collection::vec(trace_strategy(), 0..6)) {
        let mut traces = traces;
        for (i, t) in traces.iter_mut().enumerate() {
            t.trace_id = format!("{}-{i}", t.trace_id);
        }
        let mut buf = Vec::new();
        write_traces_to(&mut buf, &traces).unwrap();
        prop_assert_eq!(parse_traces(buf.as_slice()).unwrap(), traces);
    }

    #[test]
    fn validation_flags_every_mutation(
        trace in trace_strategy(),
        mutation in prop::sample::select(vec![
            Mutation::RepeatIndex,
            Mutation::BadRole,
            Mutation::EmptyText,
            Mutation::CleanWithType,
            Mutation::NoSteps,
            Mutation::EmptyId,
        ]),
        pick in any::<prop::sample::Index>(),
    ) {
        prop_assert!(validate_trace(&trace).is_valid());
        let mut t = trace;
        let pos = pick.index(t.steps.len());
        match mutation {
            Mutation::RepeatIndex => {
                if t.steps.len() < 2 {
                    t.steps.push(t.steps[0].clone());
                } else {
                    let p = pos.max(1);
                    t.steps[p].index = t.steps[p - 1].index;
                }
            }
            Mutation::BadRole => t.steps[pos].agent_role = "Planner".into(),
            Mutation::EmptyText => {
                t.steps[pos].kind = StepKind::Thought;
                t.steps[pos].text.clear();
            }
            Mutation::CleanWithType => {
                t.label = Some(TraceLabel {
                    failure_type: Some(FailureType::IncorrectCode),
                    ..TraceLabel::clean()
                })
            }
            Mutation::NoSteps => t.steps.clear(),
            Mutation::EmptyId => t.trace_id.clear(),
        }
        prop_assert!(!validate_trace(&t).is_valid(), "{:?} not flagged", mutation);
    }
}
