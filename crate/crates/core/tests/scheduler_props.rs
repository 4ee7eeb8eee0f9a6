use std::net::TcpListener;
use std::sync::Arc;

use proptest::prelude::*;
use rollsim_core::dgds::wire::{serve, RemoteDraftService};
use rollsim_core::dgds::{DraftServer, ShardMap};
use rollsim_core::kvpool::KvParams;
use rollsim_core::scheduler::{run_iteration, MetricsReport, PolicySpec, SimParams};
use rollsim_core::workload::{generate_workload, PromptGroup, WorkloadConfig};

const POLICIES: [&str; 7] =
    ["group-baseline", "divided-only", "context-aware", "oracle-lfs", "full", "no-adapt", "no-group-context"];

fn workload(seed: u64) -> Vec<PromptGroup> {
    let mut c = WorkloadConfig { num_groups: 10, group_size: 4, max_tokens: 768, seed, ..Default::default() };
    c.length_model.location = 5.0;
    c.pattern_similarity = 0.8;
    generate_workload(&c).unwrap()
}

/// Two small instances, tight enough that grouped admission must preempt.
fn params(seed: u64) -> SimParams {
    SimParams {
        instances: 2,
        kv: KvParams {
            instance_capacity_tokens: 3_000,
            dram_capacity_tokens: 20_000,
            ssd_capacity_tokens: 200_000,
            ..KvParams::default()
        },
        chunk_size: 128,
        seed,
        ..SimParams::default()
    }
}

fn run(groups: &[PromptGroup], policy: &str, p: &SimParams) -> MetricsReport {
    run_iteration(groups, &PolicySpec::parse(policy).unwrap(), p, 0, None).unwrap()
}

fn check_invariants(groups: &[PromptGroup], r: &MetricsReport) {
    let n: usize = groups.iter().map(|g| g.outputs.len()).sum();
    let tokens: u64 = groups.iter().flat_map(|g| g.outputs.iter()).map(|o| o.len() as u64).sum();
    assert_eq!(r.requests, n, "{}", r.policy);
    assert_eq!(r.output_tokens, tokens, "{}", r.policy);
    assert_eq!(r.completion_times.len(), n);
    assert!(r.completion_times.iter().all(|&t| t > 0.0 && t <= r.completion_time), "{}", r.policy);
    assert_eq!(r.fidelity_mismatches, 0, "{}", r.policy);
    assert_eq!(r.kv_violations, 0, "{}", r.policy);
    assert!(r.kv_conserved, "{}", r.policy);
    assert!(r.max_kv_utilization <= 1.0 + 1e-12, "{}", r.policy);
    assert!(r.accepted_tokens <= r.drafted_tokens);
}

#[test]
fn every_policy_finishes_every_request_faithfully() {
    let groups = workload(1);
    for policy in POLICIES {
        let r = run(&groups, policy, &params(1));
        check_invariants(&groups, &r);
        let sched = PolicySpec::parse(policy).unwrap().sched;
        if sched.is_divided() {
            assert_eq!(r.preemption_count, 0, "{policy} preempted");
        }
        if policy == "group-baseline" {
            assert!(r.preemption_count > 0, "workload does not stress the baseline");
        }
        // own-history drafts may find nothing on short outputs
        if ["full", "no-adapt"].contains(&policy) {
            assert!(r.drafted_tokens > 0, "{policy} drafted nothing");
        } else if policy != "no-group-context" {
            assert_eq!(r.drafted_tokens, 0);
        }
    }
}

#[test]
fn same_inputs_give_identical_reports() {
    let groups = workload(2);
    for policy in ["group-baseline", "context-aware", "full"] {
        let a = run(&groups, policy, &params(3));
        let b = run(&groups, policy, &params(3));
        assert_eq!(a, b, "{policy}");
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        MetricsReport::write_summary_csv(&[a], &mut csv_a).unwrap();
        MetricsReport::write_summary_csv(&[b], &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }
}

#[test]
fn remote_draft_service_matches_in_process() {
    let groups = workload(4);
    let p = params(4);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = Arc::new(DraftServer::new(ShardMap::new(p.dgds.shards)));
    std::thread::spawn(move || serve(listener, server));
    let remote = RemoteDraftService::connect(addr).unwrap();
    let policy = PolicySpec::parse("full").unwrap();
    let via_tcp = run_iteration(&groups, &policy, &p, 0, Some(&remote)).unwrap();
    let local = run_iteration(&groups, &policy, &p, 0, None).unwrap();
    assert_eq!(via_tcp.summary_row(), local.summary_row());
}

#[test]
fn fingerprint_ignores_seed_only() {
    let (a, b) = (params(1), params(2));
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = SimParams { chunk_size: 64, ..params(1) };
    assert_ne!(a.fingerprint(), c.fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn invariants_hold_across_seeds(seed in 0u64..10_000, policy in 0usize..POLICIES.len()) {
        let groups = workload(seed);
        let r = run(&groups, POLICIES[policy], &params(seed));
        check_invariants(&groups, &r);
    }
}
