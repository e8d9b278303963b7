mod common;

use std::collections::BTreeSet;

use common::oracle;
use eager_core::evalkit::{
    default_profile, generate, mrr_at_k, ndcg_at_k, recall_at_k, GeneratorConfig, RankedQuery,
};
use eager_core::trace::{segment_by_agent, validate_trace, write_traces_to, SystemProfile};
use proptest::prelude::*;

fn query() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::btree_set(0..n, 1..=n.min(8)),
        )
            .prop_map(|(ranking, relevant)| (ranking, relevant.into_iter().collect()))
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ir_metrics_match_brute_force(queries in prop::collection::vec(query(), 1..5), k in 1usize..15) {
        let ranked: Vec<RankedQuery> = queries
            .iter()
            .map(|(r, rel)| RankedQuery { ranking: r.clone(), relevant: rel.iter().copied().collect() })
            .collect();
        let n = queries.len() as f64;
        let mean = |f: fn(&[usize], &[usize], usize) -> f64| queries.iter().map(|(r, rel)| f(r, rel, k)).sum::<f64>() / n;
        prop_assert!(close(recall_at_k(&ranked, k).unwrap(), mean(oracle::recall_at_k)));
        prop_assert!(close(ndcg_at_k(&ranked, k).unwrap(), mean(oracle::ndcg_at_k)));
        prop_assert!(close(mrr_at_k(&ranked, k).unwrap(), mean(oracle::mrr_at_k)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_is_deterministic_and_labels_are_consistent(
        seed in any::<u64>(),
        profile in prop::sample::select(vec![
            SystemProfile::AutogenCode,
            SystemProfile::Rclagent,
            SystemProfile::SweAgent,
            SystemProfile::Synthetic,
        ]),
        rate in 0.0f64..=1.0,
    ) {
        let cfg = GeneratorConfig { failure_rate: rate, seed, ..GeneratorConfig::for_profile(profile) };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let bytes = |c: &[eager_core::evalkit::GeneratedTrace]| {
            let traces: Vec<_> = c.iter().flat_map(|g| [g.trace.clone(), g.clean.clone()]).collect();
            let mut out = Vec::new();
            write_traces_to(&mut out, &traces).unwrap();
            out
        };
        prop_assert_eq!(bytes(&a), bytes(&b));
        let allowed: BTreeSet<_> = default_profile(profile).into_keys().collect();
        let ids: BTreeSet<_> = a.iter().map(|g| g.trace.trace_id.clone()).collect();
        prop_assert_eq!(ids.len(), a.len());
        for g in &a {
            prop_assert!(validate_trace(&g.trace).is_valid());
            let label = g.trace.label.as_ref().unwrap();
            let sa = segment_by_agent(&g.trace).unwrap();
            let sb = segment_by_agent(&g.clean).unwrap();
            let differing: Vec<u32> = (0..sa.len())
                .filter(|&i| sa[i].steps.iter().map(|s| &s.text).ne(sb[i].steps.iter().map(|s| &s.text)))
                .map(|i| i as u32)
                .collect();
            if label.failed {
                prop_assert!(allowed.contains(&label.failure_type.unwrap()));
                prop_assert_eq!(differing, vec![label.culprit_segment_ordinal.unwrap()]);
                let o = label.culprit_segment_ordinal.unwrap() as usize;
                prop_assert_eq!(label.culprit_agent_role.as_deref(), Some(sa[o].agent_role.as_str()));
            } else {
                prop_assert!(differing.is_empty());
                prop_assert_eq!(&g.trace, &g.clean);
            }
        }
    }
}
