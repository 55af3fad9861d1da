use geobft_sim::engine::{run, RunOptions};
use geobft_sim::Scenario;

fn scenario(z: u16, n: u16, f: u16, batches: u64, extra: &str) -> Scenario {
    Scenario::parse(&format!(
        r#"
        [system]
        z = {z}
        n = {n}
        f = {f}
        batch_size = 10
        base_timeout = 1000
        checkpoint_period = 1000000
        seed = 7

        [workload]
        batches = {batches}
        clients = 2
        depth = 2

        {extra}
        "#
    ))
    .unwrap()
}

#[test]
fn single_cluster_executes_every_batch() {
    let out = run(&scenario(1, 4, 1, 10, ""), &RunOptions::default()).unwrap();
    println!("{}", out.metrics.to_record());
    assert!(out.metrics.completed);
    assert!(out.is_live());
    assert!(out.safety.is_safe());
    for r in &out.replicas {
        assert_eq!(r.replica.executed_round().0, 10);
    }
}

#[test]
fn geo_run_is_safe_and_live() {
    let out = run(&scenario(2, 4, 1, 20, ""), &RunOptions::default()).unwrap();
    println!("{}", out.metrics.to_record());
    assert!(out.is_live());
    assert!(out.safety.is_safe(), "{:?}", out.safety);
}

#[test]
fn identical_seeds_give_identical_traces() {
    let s = scenario(2, 4, 1, 5, "");
    let a = run(&s, &RunOptions::full()).unwrap();
    let b = run(&s, &RunOptions::full()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.metrics, b.metrics);
    let c = run(&s.with_seed(8), &RunOptions::default()).unwrap();
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn flat_baseline_runs_one_instance() {
    let out = run(
        &scenario(2, 4, 1, 6, "[mode]\nprotocol = \"flat-pbft\""),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(out.is_live());
    assert!(out.safety.is_safe());
    assert_eq!(out.logical.z, 1);
    assert_eq!(out.logical.n, 8);
    assert_eq!(out.logical.f, 2);
    assert_eq!(out.metrics.by_kind.get("global.share"), None);
}

#[test]
fn failure_free_global_count_is_exact() {
    let out = run(
        &scenario(2, 4, 1, 8, "[latency]\njitter_pct = 0.0"),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(out.metrics.rounds_executed, 8);
    assert_eq!(out.metrics.global_msgs, 2 * 2 * 8);
    assert_eq!(out.metrics.local_msgs + out.metrics.global_msgs, out.metrics.total_msgs);
}

#[test]
fn withheld_shares_force_a_view_change() {
    let out = run(
        &scenario(2, 4, 1, 5, "[[faults]]\nkind = \"withhold-global-share\"\ncluster = 2"),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(out.is_live());
    assert!(out.safety.is_safe());
    assert!(out.metrics.view_changes_remote >= 1);
    assert!(out.metrics.view_changes_remote <= out.metrics.max_honored_v.unwrap() + 1);
}

#[test]
fn crashed_backup_does_not_stop_progress() {
    let out = run(
        &scenario(2, 4, 1, 8, "[[faults]]\nkind = \"crash\"\nreplica = [1, 3]\nat_ms = 10"),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(out.is_live());
    assert!(out.safety.is_safe());
    assert_eq!(out.non_faulty().count(), 7);
}

#[test]
fn over_budget_faults_are_rejected() {
    let text = r#"
        [system]
        z = 1
        n = 4
        f = 1
        batch_size = 10
        base_timeout = 1000
        checkpoint_period = 100
        seed = 1
        [workload]
        batches = 1
        clients = 1
        depth = 1
        [[faults]]
        kind = "crash"
        replica = [1, 2]
        [[faults]]
        kind = "crash"
        replica = [1, 3]
    "#;
    assert!(Scenario::parse(text).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
    #[test]
    fn seeded_crashes_stay_safe(seed in 0u64..1000, cluster in 1u16..=2, local in 1u16..=4, at_ms in 0u64..60) {
        let extra = format!("[[faults]]\nkind = \"crash\"\nreplica = [{cluster}, {local}]\nat_ms = {at_ms}");
        let out = run(&scenario(2, 4, 1, 6, &extra).with_seed(seed), &RunOptions::default()).unwrap();
        proptest::prop_assert!(out.safety.is_safe(), "{:?}", out.safety);
        proptest::prop_assert!(out.is_live());
    }
}
