use std::collections::VecDeque;
use std::sync::Arc;

use giskard::adversary::sibling_of;
use giskard::protocol::{Block, ConsensusMessage, MessageKind, NodeId, ProtocolParams};
use giskard::state::{Msg, NodeState, ViewChangeMode};
use giskard::transitions::{
    handle_prepare_block, on_timeout, start, step, InputEvent, NodeEvent, RejectReason, TransitionOutput,
};

fn params() -> ProtocolParams {
    ProtocolParams::new(4, 3, 50)
}

fn node(i: u16) -> NodeState {
    NodeState::new(NodeId(i), params(), 0)
}

fn kinds(out: &TransitionOutput) -> Vec<MessageKind> {
    out.broadcasts.iter().map(|m| m.kind).collect()
}

fn rejected(out: &TransitionOutput) -> Option<RejectReason> {
    out.events.iter().find_map(|e| match e {
        NodeEvent::Rejected { reason, .. } => Some(*reason),
        _ => None,
    })
}

fn proposals(out: &TransitionOutput) -> Vec<Msg> {
    out.broadcasts.iter().filter(|m| m.kind == MessageKind::PrepareBlock).cloned().collect()
}

/// Delivers every broadcast to every node in send order until all nodes
/// reach `target` or nothing is left.
fn lockstep(mut nodes: Vec<NodeState>, target: u64, max_msgs: usize) -> Vec<NodeState> {
    let mut queue: VecDeque<Msg> = VecDeque::new();
    for n in nodes.iter_mut() {
        let s = std::mem::replace(n, node(0));
        let out = start(s).unwrap();
        queue.extend(out.broadcasts);
        *n = out.next_state;
    }
    let mut delivered = 0;
    while let Some(m) = queue.pop_front() {
        if nodes.iter().all(|n| n.view >= target) {
            break;
        }
        delivered += 1;
        assert!(delivered <= max_msgs, "no quiescence");
        for n in nodes.iter_mut() {
            let s = std::mem::replace(n, node(0));
            let mut out = step(s, InputEvent::Deliver(m.clone())).unwrap();
            queue.extend(out.broadcasts.drain(..));
            if out.view_changed {
                let again = step(out.next_state, InputEvent::ViewEntered).unwrap();
                queue.extend(again.broadcasts);
                *n = again.next_state;
            } else {
                *n = out.next_state;
            }
        }
    }
    nodes
}

#[test]
fn proposer_opens_view_with_full_pipeline() {
    let out = start(node(0)).unwrap();
    let blocks = proposals(&out);
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks.iter().map(|m| m.block.height).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(blocks[1].block.parent_hash, blocks[0].block.hash);
    assert!(kinds(&out).contains(&MessageKind::PrepareVote));
    assert!(out.events.iter().any(|e| matches!(e, NodeEvent::EnteredView { view: 0, .. })));
}

#[test]
fn non_proposer_waits() {
    let out = start(node(2)).unwrap();
    assert!(out.broadcasts.is_empty());
}

#[test]
fn honest_lockstep_makes_progress() {
    let nodes = lockstep((0..4).map(node).collect(), 2, 100_000);
    for n in &nodes {
        assert!(n.view >= 2, "{} stuck in view {}", n.id, n.view);
    }
    // every node agrees on what it prepared in view 0
    let first: Vec<_> = nodes[0].known_blocks().values().filter(|b| b.view_produced == 0 && !b.is_genesis()).map(|b| b.hash).collect();
    assert_eq!(first.len(), 3);
    for n in &nodes {
        for h in &first {
            assert!(n.prepare_stage(*h));
        }
    }
    // with no timeouts nobody asks for a view change
    assert!(nodes.iter().all(|n| n.l_out().iter().all(|m| m.kind != MessageKind::ViewChange)));
}

#[test]
fn proposal_from_wrong_node_is_rejected() {
    let a = start(node(0)).unwrap();
    let good = proposals(&a)[0].clone();
    let mut forged = (*good).clone();
    forged.sender = NodeId(1);
    let out = step(node(2), InputEvent::Deliver(Arc::new(forged))).unwrap();
    assert_eq!(rejected(&out), Some(RejectReason::WrongProposer));
    // the raw handler trusts its caller
    let raw = handle_prepare_block(node(2), good).unwrap();
    assert!(rejected(&raw).is_none());
}

#[test]
fn invalid_payload_is_rejected() {
    let a = start(node(0)).unwrap();
    let good = &proposals(&a)[0];
    let g = Block::genesis();
    let bad = Block::new(1, 1, NodeId(0), 0, g.hash, false, 0);
    let msg = ConsensusMessage::prepare_block(good.epoch, 0, NodeId(0), bad, good.parent_qc.clone(), None);
    let out = step(node(2), InputEvent::Deliver(Arc::new(msg))).unwrap();
    assert_eq!(rejected(&out), Some(RejectReason::InvalidBlock));
}

#[test]
fn duplicate_delivery_counts_once() {
    let a = start(node(0)).unwrap();
    let m = proposals(&a)[0].clone();
    let once = step(node(2), InputEvent::Deliver(m.clone())).unwrap();
    let votes = once.broadcasts.len();
    assert!(votes > 0);
    let twice = step(once.next_state, InputEvent::Deliver(m)).unwrap();
    assert!(twice.broadcasts.is_empty());
    assert_eq!(rejected(&twice), Some(RejectReason::Duplicate));
}

#[test]
fn second_block_at_same_height_is_discarded() {
    let a = start(node(0)).unwrap();
    let m = proposals(&a)[0].clone();
    let first = step(node(2), InputEvent::Deliver(m.clone())).unwrap();
    let mut fork = (*m).clone();
    fork.block = sibling_of(&m.block);
    let second = step(first.next_state, InputEvent::Deliver(Arc::new(fork.clone()))).unwrap();
    assert!(second
        .events
        .iter()
        .any(|e| matches!(e, NodeEvent::Processed { discarded: true, msg, .. } if msg.block.hash == fork.block.hash)));
    assert!(second.broadcasts.iter().all(|b| b.block.hash != fork.block.hash));
}

#[test]
fn timeout_requests_view_change() {
    let out = on_timeout(node(3)).unwrap();
    let vc: Vec<_> = out.broadcasts.iter().filter(|m| m.kind == MessageKind::ViewChange).collect();
    assert_eq!(vc.len(), 1);
    assert_eq!(vc[0].view, 0);
    assert!(vc[0].block.is_genesis());
    assert_eq!(out.next_state.view, 0, "timeout alone does not change the view");
}

#[test]
fn view_change_quorum_enters_next_view_abnormally() {
    let mut states: Vec<NodeState> = Vec::new();
    let mut vcs = Vec::new();
    for i in 0..4 {
        let out = on_timeout(node(i)).unwrap();
        vcs.extend(out.broadcasts.iter().filter(|m| m.kind == MessageKind::ViewChange).cloned());
        states.push(out.next_state);
    }
    let mut s = states.remove(1);
    let mut entered = None;
    let mut sent = Vec::new();
    for m in vcs {
        let out = step(s, InputEvent::Deliver(m)).unwrap();
        sent.extend(out.broadcasts.iter().cloned());
        for e in &out.events {
            if let NodeEvent::EnteredView { view, mode } = e {
                entered = Some((*view, *mode));
            }
        }
        s = out.next_state;
    }
    assert_eq!(entered, Some((1, ViewChangeMode::Abnormal)));
    assert_eq!(s.view, 1);
    assert!(sent.iter().any(|m| m.kind == MessageKind::ViewChangeQC));
    // B proposes view 1 and its first block extends genesis
    let p: Vec<_> = sent.iter().filter(|m| m.kind == MessageKind::PrepareBlock).collect();
    assert_eq!(p.len(), 3);
    assert_eq!(p[0].block.parent_hash, Block::genesis().hash);
    assert!(p[0].view_change_qc.is_some());
}
