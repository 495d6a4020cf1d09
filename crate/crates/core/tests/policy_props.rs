//! Property tests for the stress-score formulas and the resolver's
//! safety rule.

use ovzsim_core::policy::{
    mem_overload_check, mem_resolve, mem_score, ClusterView, ContainerView, NodeView, PolicyState,
    ResolverOutcome, Verdict,
};
use ovzsim_core::ubc::{mib_to_pages, Bound, MemoryProfile, ParamId, UbcTable};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn table(
    oom_held: u64,
    oom_barrier: u64,
    priv_held: u64,
    priv_barrier: u64,
    oom_failcnt: u64,
    priv_failcnt: u64,
) -> UbcTable {
    let mut t = UbcTable::new();
    let oom = t.get_mut(ParamId::Oomguarpages);
    oom.held = oom_held;
    oom.barrier = Bound::Finite(oom_barrier);
    oom.failcnt = oom_failcnt;
    let priv_vm = t.get_mut(ParamId::Privvmpages);
    priv_vm.held = priv_held;
    priv_vm.barrier = Bound::Finite(priv_barrier);
    priv_vm.failcnt = priv_failcnt;
    t
}

proptest! {
    #[test]
    fn components_stay_in_range_and_overall_is_max(
        oom_held in 0u64..200_000,
        oom_barrier in 1u64..100_000,
        priv_held in 0u64..200_000,
        priv_barrier in 1u64..100_000,
        prev_oom_fail in 0u64..5,
        d_oom_fail in 0u64..5,
        prev_priv_fail in 0u64..5,
        d_priv_fail in 0u64..5,
    ) {
        let prev = table(0, oom_barrier, 0, priv_barrier, prev_oom_fail, prev_priv_fail);
        let curr = table(
            oom_held,
            oom_barrier,
            priv_held,
            priv_barrier,
            prev_oom_fail + d_oom_fail,
            prev_priv_fail + d_priv_fail,
        );
        let score = mem_score("ct", &prev, &curr).unwrap();
        for component in &score.components[..2] {
            prop_assert!(component.normalized == 0.0 || component.normalized == 1.0);
        }
        for component in &score.components[2..] {
            prop_assert!((0.0..=1.0).contains(&component.normalized));
        }
        let max = score
            .components
            .iter()
            .map(|c| c.normalized)
            .fold(0.0f64, f64::max);
        prop_assert_eq!(score.overall, max);
        prop_assert_eq!(score.components[0].normalized == 1.0, d_oom_fail > 0);
        prop_assert_eq!(score.components[1].normalized == 1.0, d_priv_fail > 0);
    }

    #[test]
    fn overload_check_is_monotone_in_overall(
        overall_low in 0.0f64..1.0,
        bump in 0.0f64..1.0,
        threshold in 0.0f64..1.0,
    ) {
        let prev = table(0, 1000, 0, 1000, 0, 0);
        let curr = table(0, 1000, 0, 1000, 0, 0);
        let mut low = mem_score("ct", &prev, &curr).unwrap();
        let mut high = low.clone();
        low.overall = overall_low;
        high.overall = (overall_low + bump).min(1.0);
        let state = PolicyState::with_threshold(threshold);
        let low_verdict = mem_overload_check(&low, &state).unwrap();
        let high_verdict = mem_overload_check(&high, &state).unwrap();
        if low_verdict == Verdict::Stressed {
            prop_assert_eq!(high_verdict, Verdict::Stressed);
        }
    }

    #[test]
    fn raise_keeps_committed_guarantees_within_capacity(
        capacity_mib in 256u64..8192,
        filler_mib in 0u64..8192,
        usage_mib in 40u64..60,
    ) {
        let ladder = vec![
            MemoryProfile::from_mib("64", 60, 64, 64, 66),
            MemoryProfile::from_mib("128", 100, 128, 128, 132),
        ];
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "host".to_string(),
            NodeView {
                ram_pages: mib_to_pages(capacity_mib / 2),
                swap_pages: mib_to_pages(capacity_mib - capacity_mib / 2),
                resident_pages: 0,
                busy_with_transfer: false,
            },
        );
        let mut containers = BTreeMap::new();
        containers.insert(
            "ct".to_string(),
            ContainerView {
                host: "host".to_string(),
                profile: "64".to_string(),
                guarantee_pages: mib_to_pages(64),
                oom_usage_pages: mib_to_pages(usage_mib),
                oom_barrier_pages: mib_to_pages(60),
                resident_pages: mib_to_pages(usage_mib),
                replica_group: None,
            },
        );
        let filler_guarantee = mib_to_pages(filler_mib);
        if filler_mib > 0 {
            containers.insert(
                "filler".to_string(),
                ContainerView {
                    host: "host".to_string(),
                    profile: "static".to_string(),
                    guarantee_pages: filler_guarantee,
                    oom_usage_pages: 0,
                    oom_barrier_pages: filler_guarantee,
                    resident_pages: 0,
                    replica_group: None,
                },
            );
        }
        let view = ClusterView {
            nodes,
            containers,
            ladder,
            replication_enabled: false,
            replication_threshold: 0.75,
        };
        let outcome = mem_resolve("ct", &view, &PolicyState::with_threshold(0.8));
        if let ResolverOutcome::RaisedLimits { .. } = outcome {
            let committed_after = mib_to_pages(128) + filler_guarantee;
            prop_assert!(committed_after <= mib_to_pages(capacity_mib));
        }
    }
}
