//! The honest-node protocol as pure transition functions.
//!
//! Every entry point takes a [`NodeState`] by value and returns the next
//! state together with the messages to broadcast. Nothing here touches the
//! network: the simulator delivers broadcasts, including the loopback copy
//! of a node's own messages.

use std::sync::Arc;

use thiserror::Error;

use crate::protocol::{
    certificate_signers_ok, is_last_block, Block, BlockHash, ConsensusMessage, MessageKind, NodeId,
    QcKind, QuorumCertificate, View,
};
use crate::state::{prefer_block, Msg, NodeState, ViewChangeMode};

#[derive(Clone, Debug)]
pub enum InputEvent {
    Deliver(Msg),
    TimeoutFired { view: View },
    /// Sent by the driver right after a view change so parked messages of
    /// the new view get processed.
    ViewEntered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    Malformed,
    WrongEpoch,
    UnknownSender,
    BadCertificate,
    InvalidBlock,
    WrongProposer,
    Duplicate,
    Stale,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::WrongEpoch => "wrong-epoch",
            RejectReason::UnknownSender => "unknown-sender",
            RejectReason::BadCertificate => "bad-certificate",
            RejectReason::InvalidBlock => "invalid-block",
            RejectReason::WrongProposer => "wrong-proposer",
            RejectReason::Duplicate => "duplicate",
            RejectReason::Stale => "stale",
        }
    }
}

/// Observable side effects of a transition, in order. The simulator turns
/// these into trace records.
#[derive(Clone, Debug)]
pub enum NodeEvent {
    /// Moved into `l_counting`. `carried` marks certificates extracted from
    /// a carrying message; `discarded` marks a `PrepareBlock` dropped by the
    /// same-height rule.
    Processed { msg: Msg, carried: bool, discarded: bool },
    Parked(Msg),
    Rejected { msg: Msg, reason: RejectReason },
    /// Removed from `l_in` or `l_pending` because its view has passed.
    Expired(Msg),
    TimedOut { view: View },
    EnteredView { view: View, mode: ViewChangeMode },
}

#[derive(Debug)]
pub struct TransitionOutput {
    pub next_state: NodeState,
    pub broadcasts: Vec<Msg>,
    pub view_changed: bool,
    pub events: Vec<NodeEvent>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransitionError {
    #[error("node {node}: no carryover block for view {view}")]
    NoCarryover { node: NodeId, view: View },
    #[error("node {node}: no prepare certificate for carryover block {block} in view {view}")]
    NoCarryoverCertificate { node: NodeId, view: View, block: BlockHash },
}

type Result<T> = std::result::Result<T, TransitionError>;

struct Step {
    state: NodeState,
    start_view: View,
    broadcasts: Vec<Msg>,
    events: Vec<NodeEvent>,
}

impl Step {
    fn new(state: NodeState) -> Self {
        let start_view = state.view;
        Step { state, start_view, broadcasts: Vec::new(), events: Vec::new() }
    }

    fn view_changed(&self) -> bool {
        self.state.view != self.start_view
    }

    fn broadcast(&mut self, msg: ConsensusMessage) {
        let m = Arc::new(msg);
        self.state.push_out(m.clone());
        self.broadcasts.push(m);
    }

    fn count(&mut self, msg: Msg, carried: bool, discarded: bool) {
        if self.state.push_counting(msg.clone()) {
            self.events.push(NodeEvent::Processed { msg, carried, discarded });
        }
    }

    fn finish(self) -> TransitionOutput {
        let view_changed = self.state.view == self.start_view + 1;
        TransitionOutput {
            next_state: self.state,
            broadcasts: self.broadcasts,
            view_changed,
            events: self.events,
        }
    }
}

/// Applies one input event.
pub fn step(state: NodeState, event: InputEvent) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    match event {
        InputEvent::Deliver(msg) => deliver(&mut s, msg)?,
        InputEvent::TimeoutFired { view } => timeout(&mut s, view)?,
        InputEvent::ViewEntered => drain_parked(&mut s)?,
    }
    Ok(s.finish())
}

/// Initial entry into the configured starting view.
pub fn start(state: NodeState) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    let view = s.state.view;
    let mode = s.state.last_change;
    s.events.push(NodeEvent::EnteredView { view, mode });
    enter(&mut s)?;
    Ok(s.finish())
}

/// Proposer duties on entering a view; validators do nothing.
pub fn view_entry(state: NodeState) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    enter(&mut s)?;
    Ok(s.finish())
}

/// Emits the view's block pipeline. Caller must be the view's proposer.
pub fn propose_view_blocks(state: NodeState) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    propose(&mut s)?;
    Ok(s.finish())
}

pub fn handle_prepare_block(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    prepare_block(&mut s, msg);
    Ok(s.finish())
}

pub fn handle_prepare_vote(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    prepare_vote(&mut s, msg)?;
    Ok(s.finish())
}

pub fn handle_prepare_qc(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    prepare_qc(&mut s, msg)?;
    Ok(s.finish())
}

pub fn on_timeout(state: NodeState) -> Result<TransitionOutput> {
    let view = state.view;
    let mut s = Step::new(state);
    timeout(&mut s, view)?;
    Ok(s.finish())
}

pub fn handle_view_change(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    view_change(&mut s, msg)?;
    Ok(s.finish())
}

pub fn handle_view_change_qc(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    if msg.view == s.state.view && s.state.timed_out {
        view_change_qc(&mut s, msg)?;
    }
    Ok(s.finish())
}

pub fn handle_prepare_qc_timeout(state: NodeState, msg: Msg) -> Result<TransitionOutput> {
    let mut s = Step::new(state);
    prepare_qc_timeout(&mut s, msg)?;
    Ok(s.finish())
}

/// The block the current view's pipeline extends: the prepared last block
/// of the previous view after a normal change, the `ViewChangeQC` block
/// after a timeout, genesis in the starting view.
pub fn carryover_block(state: &NodeState) -> Result<Block> {
    let missing = || TransitionError::NoCarryover { node: state.id, view: state.view };
    match state.last_change {
        ViewChangeMode::Initial => Ok(state.genesis().clone()),
        ViewChangeMode::Normal => {
            let prev = state.view.checked_sub(1).ok_or_else(missing)?;
            state
                .known_blocks()
                .values()
                .filter(|b| {
                    b.view_produced == prev
                        && is_last_block(b, state.params())
                        && state.prepare_stage(b.hash)
                })
                .min_by_key(|b| b.hash)
                .cloned()
                .ok_or_else(missing)
        }
        ViewChangeMode::Abnormal => {
            let prev = state.view.checked_sub(1).ok_or_else(missing)?;
            state.view_change_qc_for(prev).map(|m| m.block.clone()).ok_or_else(missing)
        }
    }
}

/// A pipeline of `count` blocks rooted at the carryover block, proposed by
/// `proposer` in the node's current view. Returns the `PrepareBlock`
/// messages and the proposer's vote for the first block.
pub fn build_pipeline(
    state: &NodeState,
    proposer: NodeId,
    payload_tag: u32,
    count: u32,
) -> Result<(Vec<ConsensusMessage>, ConsensusMessage)> {
    let view = state.view;
    let carry = carryover_block(state)?;
    let vcqc_msg = match state.last_change {
        ViewChangeMode::Abnormal => state.view_change_qc_for(view - 1),
        _ => None,
    };
    let carry_qc = vcqc_msg
        .and_then(|m| m.parent_qc.clone())
        .filter(|qc| qc.block.hash == carry.hash)
        .or_else(|| state.certificate_for(carry.hash))
        .ok_or(TransitionError::NoCarryoverCertificate { node: state.id, view, block: carry.hash })?;
    let vc_cert = vcqc_msg.and_then(|m| m.certificate.clone());

    let mut blocks = Vec::with_capacity(count as usize);
    let mut parent = carry;
    for index in 1..=count {
        let b = parent.child(index, proposer, view, payload_tag);
        parent = b.clone();
        blocks.push(b);
    }
    let first = blocks[0].clone();
    let proposals = blocks
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let pqc = if i == 0 { Some(carry_qc.clone()) } else { None };
            ConsensusMessage::prepare_block(state.epoch, view, state.id, b, pqc, vc_cert.clone())
        })
        .collect();
    let vote = ConsensusMessage::prepare_vote(state.epoch, view, state.id, first, Some(carry_qc));
    Ok((proposals, vote))
}

/// Door checks applied to every delivered message: structure, sender,
/// certificates, block validity and proposer identity.
pub fn validate_message(state: &NodeState, msg: &ConsensusMessage) -> std::result::Result<(), RejectReason> {
    if !msg.is_well_formed() {
        return Err(RejectReason::Malformed);
    }
    if msg.epoch != state.epoch {
        return Err(RejectReason::WrongEpoch);
    }
    let roster = state.roster();
    if !roster.contains(msg.sender) {
        return Err(RejectReason::UnknownSender);
    }
    for qc in msg.certificates() {
        let genesis_ok = qc.block.is_genesis() && qc.kind == QcKind::Prepare;
        if !certificate_signers_ok(qc, roster, state.params())
            || !digest_ok(state, &qc.block)
            || !(genesis_ok || block_is_valid(state, &qc.block))
            || (qc.kind == QcKind::Prepare && !qc.block.is_genesis() && qc.view != qc.block.view_produced)
        {
            return Err(RejectReason::BadCertificate);
        }
    }
    if let Some(qc) = &msg.parent_qc {
        if qc.view > msg.view {
            return Err(RejectReason::BadCertificate);
        }
    }
    let may_carry_genesis = matches!(msg.kind, MessageKind::ViewChange | MessageKind::ViewChangeQC);
    if !(may_carry_genesis && msg.block.is_genesis()) && !block_is_valid(state, &msg.block) {
        return Err(RejectReason::InvalidBlock);
    }
    match msg.kind {
        MessageKind::PrepareBlock => {
            if msg.sender != roster.proposer_for_view(msg.view) || msg.block.proposer != msg.sender {
                return Err(RejectReason::WrongProposer);
            }
            if msg.block.view_produced != msg.view {
                return Err(RejectReason::InvalidBlock);
            }
        }
        MessageKind::PrepareVote => {
            if msg.block.view_produced != msg.view {
                return Err(RejectReason::InvalidBlock);
            }
        }
        MessageKind::ViewChangeQC => {
            if msg.parent_qc.is_none() {
                return Err(RejectReason::BadCertificate);
            }
        }
        MessageKind::PrepareQC | MessageKind::ViewChange => {}
    }
    Ok(())
}

/// Structural block validity; stands in for executing the payload.
pub fn block_is_valid(state: &NodeState, block: &Block) -> bool {
    let params = state.params();
    if !block.payload_valid || !digest_ok(state, block) || block.is_genesis() {
        return false;
    }
    if block.index_in_view == 0 || block.index_in_view > params.blocks_per_view {
        return false;
    }
    if block.proposer != state.roster().proposer_for_view(block.view_produced) {
        return false;
    }
    match state.block(block.parent_hash) {
        Some(parent) => parent.height + 1 == block.height,
        None => block.height >= 1,
    }
}

/// Digest check, skipped for blocks already known in identical form.
fn digest_ok(state: &NodeState, block: &Block) -> bool {
    state.block(block.hash) == Some(block) || block.hash_is_consistent()
}

fn eligible(state: &NodeState, msg: &ConsensusMessage) -> bool {
    use MessageKind::*;
    if state.timed_out {
        matches!(msg.kind, ViewChange | ViewChangeQC | PrepareQC)
    } else {
        matches!(msg.kind, PrepareBlock | PrepareVote | PrepareQC)
    }
}

fn deliver(s: &mut Step, msg: Msg) -> Result<()> {
    if let Err(reason) = validate_message(&s.state, &msg) {
        s.events.push(NodeEvent::Rejected { msg, reason });
        return Ok(());
    }
    let key = msg.dedup_key();
    if s.state.is_counted(&key) || s.state.is_parked(&key) {
        s.events.push(NodeEvent::Rejected { msg, reason: RejectReason::Duplicate });
        return Ok(());
    }
    if msg.view < s.state.view {
        s.events.push(NodeEvent::Rejected { msg, reason: RejectReason::Stale });
        return Ok(());
    }
    if msg.view > s.state.view || !eligible(&s.state, &msg) {
        if s.state.park(msg.clone()) {
            s.events.push(NodeEvent::Parked(msg));
        }
        return Ok(());
    }
    dispatch(s, msg)
}

fn dispatch(s: &mut Step, msg: Msg) -> Result<()> {
    match msg.kind {
        MessageKind::PrepareBlock => {
            prepare_block(s, msg);
            Ok(())
        }
        MessageKind::PrepareVote => prepare_vote(s, msg),
        MessageKind::PrepareQC if s.state.timed_out => prepare_qc_timeout(s, msg),
        MessageKind::PrepareQC => prepare_qc(s, msg),
        MessageKind::ViewChange => view_change(s, msg),
        MessageKind::ViewChangeQC => view_change_qc(s, msg),
    }
}

/// Processes parked messages that became eligible, in arrival order, until
/// none remain or the view changes.
fn drain_parked(s: &mut Step) -> Result<()> {
    loop {
        if s.view_changed() {
            return Ok(());
        }
        let view = s.state.view;
        for m in s.state.unpark_where(|m| m.view < view) {
            s.events.push(NodeEvent::Expired(m));
        }
        let next = s.state.l_in().iter().position(|m| m.view == view && eligible(&s.state, m));
        let Some(pos) = next else { return Ok(()) };
        let target = s.state.l_in()[pos].dedup_key();
        let mut taken = s.state.unpark_where(|m| m.dedup_key() == target);
        let msg = taken.remove(0);
        if s.state.is_counted(&target) {
            s.events.push(NodeEvent::Rejected { msg, reason: RejectReason::Duplicate });
            continue;
        }
        dispatch(s, msg)?;
    }
}

/// Moves a carried prepare certificate into `l_counting` as a `PrepareQC`
/// from the carrier.
fn extract_carried(s: &mut Step, msg: &ConsensusMessage) {
    let Some(qc) = &msg.parent_qc else { return };
    if qc.kind != QcKind::Prepare || qc.block.is_genesis() || qc.view > s.state.view {
        return;
    }
    let synth = ConsensusMessage::prepare_qc(msg.epoch, msg.view, msg.sender, qc.clone());
    s.count(Arc::new(synth), true, false);
}

fn enter(s: &mut Step) -> Result<()> {
    if s.state.roster().proposer_for_view(s.state.view) == s.state.id {
        propose(s)?;
    }
    Ok(())
}

fn propose(s: &mut Step) -> Result<()> {
    let bpv = s.state.params().blocks_per_view;
    let (proposals, vote) = build_pipeline(&s.state, s.state.id, 0, bpv)?;
    for m in proposals {
        s.broadcast(m);
    }
    s.broadcast(vote);
    Ok(())
}

fn advance_view(s: &mut Step, mode: ViewChangeMode) -> Result<()> {
    s.state.view += 1;
    s.state.timed_out = false;
    s.state.last_change = mode;
    let view = s.state.view;
    for m in s.state.clear_pending() {
        s.events.push(NodeEvent::Expired(m));
    }
    for m in s.state.unpark_where(|m| m.view < view) {
        s.events.push(NodeEvent::Expired(m));
    }
    s.events.push(NodeEvent::EnteredView { view, mode });
    enter(s)
}

fn parent_prepared(state: &NodeState, block: &Block) -> bool {
    state.prepare_stage(block.parent_hash)
}

fn cast_vote(s: &mut Step, block: Block) {
    let parent_qc = s.state.certificate_for(block.parent_hash);
    let m = ConsensusMessage::prepare_vote(s.state.epoch, s.state.view, s.state.id, block, parent_qc);
    s.broadcast(m);
}

/// Sends every pending vote whose parent has reached prepare stage.
fn release_pending(s: &mut Step) {
    if s.state.timed_out {
        return;
    }
    let view = s.state.view;
    let ready: Vec<BlockHash> = s
        .state
        .l_pending()
        .iter()
        .filter(|m| m.view == view && parent_prepared(&s.state, &m.block))
        .map(|m| m.block.hash)
        .collect();
    if ready.is_empty() {
        return;
    }
    for m in s.state.take_pending_where(|m| ready.contains(&m.block.hash)) {
        cast_vote(s, m.block.clone());
    }
}

fn prepare_block(s: &mut Step, msg: Msg) {
    let view = s.state.view;
    let block = msg.block.clone();
    if !s.state.params().mutations.skip_duplicate_height_discard
        && s.state.seen_at_height(view, block.height).any(|h| h != block.hash)
    {
        s.count(msg, false, true);
        return;
    }
    extract_carried(s, &msg);
    s.count(msg, false, false);
    if !s.state.has_voted_for(&block, view) {
        if parent_prepared(&s.state, &block) {
            cast_vote(s, block);
        } else {
            let pending =
                ConsensusMessage::prepare_vote(s.state.epoch, view, s.state.id, block, None);
            s.state.push_pending(Arc::new(pending));
        }
    }
    release_pending(s);
}

fn prepare_vote(s: &mut Step, msg: Msg) -> Result<()> {
    let view = s.state.view;
    let block = msg.block.clone();
    extract_carried(s, &msg);
    s.count(msg, false, false);

    // Reciprocal vote, refused if it would conflict with one of our own
    // votes at the same height in this view.
    let conflicting = s.state.own_votes_at(view, block.height).any(|h| h != block.hash);
    if !s.state.has_voted_for(&block, view) && !conflicting && parent_prepared(&s.state, &block) {
        cast_vote(s, block.clone());
    }

    if s.state.count_votes(block.hash, view) == s.state.quorum() {
        let qc = QuorumCertificate::new(QcKind::Prepare, block.clone(), view, s.state.vote_senders(block.hash, view));
        let m = ConsensusMessage::prepare_qc(s.state.epoch, view, s.state.id, qc);
        s.broadcast(m);
        if is_last_block(&block, s.state.params()) {
            return advance_view(s, ViewChangeMode::Normal);
        }
    }
    release_pending(s);
    Ok(())
}

fn prepare_qc(s: &mut Step, msg: Msg) -> Result<()> {
    let view = s.state.view;
    let block = msg.block.clone();
    let evidence_view = msg.evidence_view();
    s.count(msg, false, false);
    if is_last_block(&block, s.state.params()) && block.view_produced == view && evidence_view == view {
        return advance_view(s, ViewChangeMode::Normal);
    }
    release_pending(s);
    Ok(())
}

fn timeout(s: &mut Step, view: View) -> Result<()> {
    if s.state.timed_out || view != s.state.view {
        return Ok(());
    }
    s.state.timed_out = true;
    s.events.push(NodeEvent::TimedOut { view });
    let highest = s.state.highest_local_prepare_block();
    // Prepared blocks always have local evidence (or are genesis).
    let cert = s
        .state
        .certificate_for(highest.hash)
        .expect("prepared block without certificate");
    let epoch = s.state.epoch;
    let id = s.state.id;
    s.broadcast(ConsensusMessage::view_change(epoch, view, id, cert.clone()));
    if !highest.is_genesis() {
        s.broadcast(ConsensusMessage::prepare_qc(epoch, view, id, cert));
    }
    drain_parked(s)
}

fn view_change(s: &mut Step, msg: Msg) -> Result<()> {
    extract_carried(s, &msg);
    s.count(msg, false, false);
    maybe_complete_view_change(s)
}

fn prepare_qc_timeout(s: &mut Step, msg: Msg) -> Result<()> {
    s.count(msg, false, false);
    maybe_complete_view_change(s)
}

/// On reaching a view-change quorum: aggregate the highest reported block
/// into a `ViewChangeQC`, broadcast it and move to the next view.
fn maybe_complete_view_change(s: &mut Step) -> Result<()> {
    let view = s.state.view;
    if !s.state.timed_out || s.state.count_view_changes(view) < s.state.quorum() {
        return Ok(());
    }
    let mut best: Option<&Msg> = None;
    for m in s.state.view_change_messages(view) {
        if best.map_or(true, |b| prefer_block(&m.block, &b.block)) {
            best = Some(m);
        }
    }
    let best = best.expect("quorum implies at least one message");
    let prepare_qc = match best.kind {
        MessageKind::ViewChange => best.parent_qc.clone(),
        _ => best.certificate.clone(),
    }
    .expect("view-change contributions carry a prepare certificate");
    let signers = s.state.view_change_senders(view);
    let qc = QuorumCertificate::new(QcKind::ViewChange, best.block.clone(), view, signers);
    let m = Arc::new(ConsensusMessage::view_change_qc(s.state.epoch, view, s.state.id, qc, prepare_qc));
    s.state.push_out(m.clone());
    s.broadcast_existing(m.clone());
    s.count(m, false, false);
    advance_view(s, ViewChangeMode::Abnormal)
}

impl Step {
    fn broadcast_existing(&mut self, m: Msg) {
        self.broadcasts.push(m);
    }
}

fn view_change_qc(s: &mut Step, msg: Msg) -> Result<()> {
    extract_carried(s, &msg);
    s.count(msg, false, false);
    advance_view(s, ViewChangeMode::Abnormal)
}
