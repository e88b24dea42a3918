use std::collections::BTreeSet;

use giskard::netsim::{run, simulate, DeliveryRule, NetworkModel, Partition, Profile, RuleAction, SimConfig};
use giskard::protocol::{MessageKind, NodeId, ProtocolParams};
use giskard::trace::RecordKind;

fn base(views: u64) -> SimConfig {
    SimConfig::new(ProtocolParams::new(4, 3, 40), views)
}

#[test]
fn reliable_network_loses_nothing_in_flight() {
    let t = run(&base(3), 1).unwrap();
    let drops: Vec<_> = t.records.iter().filter(|r| r.kind == RecordKind::Drop).collect();
    assert!(drops.iter().all(|r| r.detail_str("reason") == Some("run-ended")));
    assert!(t.records.iter().all(|r| r.kind != RecordKind::Timeout));
    assert!(t.records.iter().any(|r| r.kind == RecordKind::Deliver));
}

#[test]
fn seeds_matter_only_when_the_network_is_random() {
    let cfg = base(3);
    assert_eq!(run(&cfg, 1).unwrap().records, run(&cfg, 2).unwrap().records);
    let mut lossy = base(3);
    lossy.network = NetworkModel::lossy(1, 4, 0.1);
    assert_ne!(run(&lossy, 1).unwrap().records, run(&lossy, 2).unwrap().records);
}

#[test]
fn partition_drops_cross_traffic_only_while_active() {
    let mut cfg = base(4);
    let side: BTreeSet<NodeId> = [NodeId(0)].into_iter().collect();
    cfg.network.partitions.push(Partition { start: 0, end: 30, side: side.clone() });
    let t = run(&cfg, 0).unwrap();
    let cut: Vec<_> = t.records.iter().filter(|r| r.detail_str("reason") == Some("partition")).collect();
    assert!(!cut.is_empty());
    for r in &cut {
        let m = r.msg.as_ref().unwrap();
        assert!(side.contains(&m.sender) != side.contains(&r.node));
        assert!(r.time < 30);
    }
}

#[test]
fn scripted_rules_apply_first_match_and_spare_loopback() {
    let mut cfg = base(1);
    cfg.network.profile = Profile::Scripted;
    cfg.network.rules.push(DeliveryRule { kind: Some(MessageKind::PrepareVote), action: RuleAction::Drop, ..Default::default() });
    let t = run(&cfg, 0).unwrap();
    let votes_sent = t.records.iter().filter(|r| r.kind == RecordKind::Send && r.msg.as_ref().unwrap().kind == MessageKind::PrepareVote).count();
    assert!(votes_sent > 0);
    // each node still hears its own votes
    for r in t.records.iter().filter(|r| r.kind == RecordKind::Deliver) {
        let m = r.msg.as_ref().unwrap();
        if m.kind == MessageKind::PrepareVote {
            assert_eq!(m.sender, r.node);
        }
    }
    assert!(t.records.iter().any(|r| r.kind == RecordKind::Timeout));
}

#[test]
fn delay_rule_postpones_delivery() {
    let mut cfg = base(3);
    cfg.network.profile = Profile::Scripted;
    cfg.network.rules.push(DeliveryRule { to: Some(NodeId(3)), kind: Some(MessageKind::PrepareBlock), action: RuleAction::Delay, delay: 7, ..Default::default() });
    let t = run(&cfg, 0).unwrap();
    let first = t
        .records
        .iter()
        .find(|r| r.kind == RecordKind::Deliver && r.node == NodeId(3) && r.msg.as_ref().unwrap().kind == MessageKind::PrepareBlock)
        .unwrap();
    assert_eq!(first.time, 1 + 7);
}

#[test]
fn invalid_configs_are_refused() {
    let mut cfg = base(1);
    cfg.network.jitter = 3;
    assert!(run(&cfg, 0).is_err());
    let mut cfg = base(1);
    cfg.network.rules.push(DeliveryRule::default());
    assert!(run(&cfg, 0).is_err());
    let mut cfg = base(1);
    cfg.protocol = ProtocolParams::new(4, 0, 40);
    assert!(run(&cfg, 0).is_err());
    assert!(run(&base(0), 0).is_err());
}

#[test]
fn step_budget_stops_the_run() {
    let mut cfg = base(50);
    cfg.max_steps = 200;
    let w = simulate(&cfg, 0).unwrap();
    assert!(w.nodes().all(|n| n.view < 50));
    assert!(!w.into_trace().records.is_empty());
}

#[test]
fn every_node_ends_at_or_past_the_target_view() {
    let mut cfg = base(5);
    cfg.initial_view = 3;
    let w = simulate(&cfg, 0).unwrap();
    assert!(w.nodes().all(|n| n.view >= 8), "{:?}", w.nodes().map(|n| n.view).collect::<Vec<_>>());
}
