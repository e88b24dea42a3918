//! One node's view state and the block-stage predicates over it.
//!
//! The four message buffers are the source of truth. The indexes kept next
//! to them are pure functions of buffer contents, maintained on insert so
//! that stage queries stay cheap on long runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::{
    is_last_block, Block, BlockHash, ConsensusMessage, DedupKey, Height, MessageKind, NodeId,
    ProtocolParams, QcKind, QuorumCertificate, Roster, View,
};

pub type Msg = Arc<ConsensusMessage>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageName {
    PrepareInView,
    Prepare,
    Precommit,
    Commit,
}

impl StageName {
    pub fn name(self) -> &'static str {
        match self {
            StageName::PrepareInView => "prepare_in_view",
            StageName::Prepare => "prepare",
            StageName::Precommit => "precommit",
            StageName::Commit => "commit",
        }
    }

    pub fn parse(s: &str) -> Option<StageName> {
        match s {
            "prepare_in_view" => Some(StageName::PrepareInView),
            "prepare" => Some(StageName::Prepare),
            "precommit" => Some(StageName::Precommit),
            "commit" => Some(StageName::Commit),
            _ => None,
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the node entered its current view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewChangeMode {
    Initial,
    Normal,
    Abnormal,
}

impl ViewChangeMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewChangeMode::Initial => "initial",
            ViewChangeMode::Normal => "normal",
            ViewChangeMode::Abnormal => "abnormal",
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Indexes {
    counting_keys: BTreeSet<DedupKey>,
    in_keys: BTreeSet<DedupKey>,
    votes: BTreeMap<(BlockHash, View), BTreeSet<NodeId>>,
    qcs: BTreeMap<(BlockHash, View), usize>,
    // ViewChange and last-block PrepareQC messages, by view.
    view_change: BTreeMap<View, Vec<usize>>,
    view_change_qcs: BTreeMap<View, usize>,
    seen_heights: BTreeMap<(View, Height), BTreeSet<BlockHash>>,
    own_votes: BTreeMap<(View, Height), BTreeSet<BlockHash>>,
    children: BTreeMap<BlockHash, BTreeSet<BlockHash>>,
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub epoch: u64,
    pub view: View,
    pub id: NodeId,
    pub clock: u64,
    pub timed_out: bool,
    pub last_change: ViewChangeMode,
    l_in: Vec<Msg>,
    l_pending: Vec<Msg>,
    l_counting: Vec<Msg>,
    l_out: Vec<Msg>,
    known_blocks: BTreeMap<BlockHash, Block>,
    params: ProtocolParams,
    roster: Roster,
    genesis: Block,
    idx: Indexes,
}

impl NodeState {
    pub fn new(id: NodeId, params: ProtocolParams, initial_view: View) -> Self {
        let genesis = Block::genesis();
        let roster = Roster::new(params.node_count);
        let mut known_blocks = BTreeMap::new();
        known_blocks.insert(genesis.hash, genesis.clone());
        NodeState {
            epoch: 0,
            view: initial_view,
            id,
            clock: 0,
            timed_out: false,
            last_change: ViewChangeMode::Initial,
            l_in: Vec::new(),
            l_pending: Vec::new(),
            l_counting: Vec::new(),
            l_out: Vec::new(),
            known_blocks,
            params,
            roster,
            genesis,
            idx: Indexes::default(),
        }
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn l_in(&self) -> &[Msg] {
        &self.l_in
    }

    pub fn l_pending(&self) -> &[Msg] {
        &self.l_pending
    }

    pub fn l_counting(&self) -> &[Msg] {
        &self.l_counting
    }

    pub fn l_out(&self) -> &[Msg] {
        &self.l_out
    }

    pub fn known_blocks(&self) -> &BTreeMap<BlockHash, Block> {
        &self.known_blocks
    }

    pub fn block(&self, hash: BlockHash) -> Option<&Block> {
        self.known_blocks.get(&hash)
    }

    pub fn children_of(&self, hash: BlockHash) -> impl Iterator<Item = BlockHash> + '_ {
        self.idx.children.get(&hash).into_iter().flatten().copied()
    }

    pub fn is_counted(&self, key: &DedupKey) -> bool {
        self.idx.counting_keys.contains(key)
    }

    pub fn is_parked(&self, key: &DedupKey) -> bool {
        self.idx.in_keys.contains(key)
    }

    // ---- buffer mutation (crate-internal) ----

    pub(crate) fn learn_block(&mut self, block: &Block) {
        if self.known_blocks.contains_key(&block.hash) {
            return;
        }
        self.known_blocks.insert(block.hash, block.clone());
        if !block.is_genesis() {
            self.idx.children.entry(block.parent_hash).or_default().insert(block.hash);
        }
    }

    fn learn_message_blocks(&mut self, msg: &ConsensusMessage) {
        self.learn_block(&msg.block);
        for qc in msg.certificates() {
            self.learn_block(&qc.block);
        }
    }

    fn note_seen_height(&mut self, msg: &ConsensusMessage) {
        let carries_block = matches!(
            msg.kind,
            MessageKind::PrepareBlock | MessageKind::PrepareVote | MessageKind::PrepareQC
        );
        if carries_block && msg.block.view_produced == msg.evidence_view() {
            self.idx
                .seen_heights
                .entry((msg.block.view_produced, msg.block.height))
                .or_default()
                .insert(msg.block.hash);
        }
    }

    /// Appends to `l_counting`. Returns false if an equal message (by dedup
    /// key) was already counted.
    pub(crate) fn push_counting(&mut self, msg: Msg) -> bool {
        let key = msg.dedup_key();
        if !self.idx.counting_keys.insert(key) {
            return false;
        }
        self.learn_message_blocks(&msg);
        self.note_seen_height(&msg);
        let pos = self.l_counting.len();
        match msg.kind {
            MessageKind::PrepareVote => {
                self.idx.votes.entry((msg.block.hash, msg.view)).or_default().insert(msg.sender);
            }
            MessageKind::PrepareQC => {
                let v = msg.evidence_view();
                self.idx.qcs.entry((msg.block.hash, v)).or_insert(pos);
                if is_last_block(&msg.block, &self.params) && msg.block.view_produced == v {
                    self.idx.view_change.entry(v).or_default().push(pos);
                }
            }
            MessageKind::ViewChange => {
                self.idx.view_change.entry(msg.view).or_default().push(pos);
            }
            MessageKind::ViewChangeQC => {
                self.idx.view_change_qcs.entry(msg.view).or_insert(pos);
            }
            MessageKind::PrepareBlock => {}
        }
        self.l_counting.push(msg);
        true
    }

    pub(crate) fn park(&mut self, msg: Msg) -> bool {
        if !self.idx.in_keys.insert(msg.dedup_key()) {
            return false;
        }
        self.learn_message_blocks(&msg);
        self.l_in.push(msg);
        true
    }

    /// Removes and returns the parked messages selected by `take`, keeping
    /// the rest in order.
    pub(crate) fn unpark_where(&mut self, mut take: impl FnMut(&ConsensusMessage) -> bool) -> Vec<Msg> {
        let mut taken = Vec::new();
        let mut kept = Vec::with_capacity(self.l_in.len());
        for m in self.l_in.drain(..) {
            if take(&m) {
                taken.push(m);
            } else {
                kept.push(m);
            }
        }
        self.l_in = kept;
        for m in &taken {
            self.idx.in_keys.remove(&m.dedup_key());
        }
        taken
    }

    fn note_own_vote(&mut self, msg: &ConsensusMessage) {
        if msg.kind == MessageKind::PrepareVote {
            self.idx
                .own_votes
                .entry((msg.view, msg.block.height))
                .or_default()
                .insert(msg.block.hash);
        }
    }

    pub(crate) fn push_out(&mut self, msg: Msg) {
        self.learn_message_blocks(&msg);
        self.note_seen_height(&msg);
        self.note_own_vote(&msg);
        self.l_out.push(msg);
    }

    pub(crate) fn push_pending(&mut self, msg: Msg) {
        self.learn_message_blocks(&msg);
        self.note_seen_height(&msg);
        self.note_own_vote(&msg);
        self.l_pending.push(msg);
    }

    pub(crate) fn take_pending_where(&mut self, mut take: impl FnMut(&ConsensusMessage) -> bool) -> Vec<Msg> {
        let (taken, kept): (Vec<Msg>, Vec<Msg>) = self.l_pending.drain(..).partition(|m| take(m));
        self.l_pending = kept;
        taken
    }

    /// Drops every pending vote; they are view-stamped and cannot survive a
    /// view change. The own-vote index keeps them: same-height conflicts are
    /// judged per view, so stale entries are harmless.
    pub(crate) fn clear_pending(&mut self) -> Vec<Msg> {
        std::mem::take(&mut self.l_pending)
    }

    // ---- queries ----

    pub fn quorum(&self) -> usize {
        self.params.quorum()
    }

    fn is_genesis(&self, block: BlockHash) -> bool {
        block == self.genesis.hash
    }

    /// Distinct senders of `PrepareVote(block, view)` in `l_counting`.
    pub fn count_votes(&self, block: BlockHash, view: View) -> usize {
        self.idx.votes.get(&(block, view)).map_or(0, |s| s.len())
    }

    pub fn vote_senders(&self, block: BlockHash, view: View) -> impl Iterator<Item = NodeId> + '_ {
        self.idx.votes.get(&(block, view)).into_iter().flatten().copied()
    }

    pub fn has_prepare_qc(&self, block: BlockHash, view: View) -> bool {
        self.idx.qcs.contains_key(&(block, view))
    }

    /// `VoteQuorum(b, v)` or `QC(b, v)` over `l_counting`.
    pub fn prepare_in_view(&self, block: BlockHash, view: View) -> bool {
        self.count_votes(block, view) >= self.quorum() || self.has_prepare_qc(block, view)
    }

    /// Views in which `block` has any recorded vote or certificate.
    pub fn evidence_views(&self, block: BlockHash) -> BTreeSet<View> {
        let lo = (block, View::MIN);
        let hi = (block, View::MAX);
        self.idx
            .votes
            .range(lo..=hi)
            .map(|((_, v), _)| *v)
            .chain(self.idx.qcs.range(lo..=hi).map(|((_, v), _)| *v))
            .collect()
    }

    /// Views `v' <= current view` in which the block reached prepare stage.
    pub fn prepare_views(&self, block: BlockHash) -> Vec<View> {
        self.evidence_views(block)
            .into_iter()
            .filter(|v| *v <= self.view && self.prepare_in_view(block, *v))
            .collect()
    }

    pub fn prepare_stage(&self, block: BlockHash) -> bool {
        self.is_genesis(block) || !self.prepare_views(block).is_empty()
    }

    pub fn precommit_stage(&self, block: BlockHash) -> bool {
        self.prepare_stage(block) && self.children_of(block).any(|c| self.prepare_stage(c))
    }

    pub fn commit_stage(&self, block: BlockHash) -> bool {
        self.precommit_stage(block) && self.children_of(block).any(|c| self.precommit_stage(c))
    }

    /// Distinct senders of `ViewChange(_, view)` plus senders of
    /// `PrepareQC` for the last block of `view`.
    pub fn count_view_changes(&self, view: View) -> usize {
        self.view_change_senders(view).len()
    }

    pub fn view_change_senders(&self, view: View) -> BTreeSet<NodeId> {
        self.view_change_messages(view).map(|m| m.sender).collect()
    }

    pub fn view_change_messages(&self, view: View) -> impl Iterator<Item = &Msg> + '_ {
        self.idx
            .view_change
            .get(&view)
            .into_iter()
            .flatten()
            .map(move |&i| &self.l_counting[i])
    }

    pub fn view_change_qc_for(&self, view: View) -> Option<&Msg> {
        self.idx.view_change_qcs.get(&view).map(|&i| &self.l_counting[i])
    }

    /// Hashes of other blocks at `height` seen in `view` across
    /// `l_counting`, `l_pending` and `l_out`.
    pub fn seen_at_height(&self, view: View, height: Height) -> impl Iterator<Item = BlockHash> + '_ {
        self.idx.seen_heights.get(&(view, height)).into_iter().flatten().copied()
    }

    /// Blocks this node has voted for (sent or pending) at `height` in `view`.
    pub fn own_votes_at(&self, view: View, height: Height) -> impl Iterator<Item = BlockHash> + '_ {
        self.idx.own_votes.get(&(view, height)).into_iter().flatten().copied()
    }

    pub fn has_voted_for(&self, block: &Block, view: View) -> bool {
        self.own_votes_at(view, block.height).any(|h| h == block.hash)
    }

    pub fn pending_vote_for(&self, block: BlockHash) -> Option<&Msg> {
        self.l_pending.iter().find(|m| m.block.hash == block)
    }

    /// Highest prepared block. Height ties go to the most recently produced
    /// block, then the lowest digest.
    pub fn highest_local_prepare_block(&self) -> Block {
        let mut best = &self.genesis;
        for b in self.known_blocks.values() {
            if b.height < best.height || !self.prepare_stage(b.hash) {
                continue;
            }
            if prefer_block(b, best) {
                best = b;
            }
        }
        best.clone()
    }

    /// A prepare certificate for `block` from local evidence: a counted
    /// `PrepareQC`, else one minted from counted votes. Uses the earliest
    /// qualifying view.
    pub fn certificate_for(&self, block: BlockHash) -> Option<QuorumCertificate> {
        if self.is_genesis(block) {
            return Some(QuorumCertificate::genesis(&self.roster));
        }
        let b = self.known_blocks.get(&block)?;
        for v in self.prepare_views(block) {
            if let Some(&i) = self.idx.qcs.get(&(block, v)) {
                if let Some(qc) = &self.l_counting[i].certificate {
                    return Some(qc.clone());
                }
            }
            if self.count_votes(block, v) >= self.quorum() {
                return Some(QuorumCertificate::new(
                    QcKind::Prepare,
                    b.clone(),
                    v,
                    self.vote_senders(block, v),
                ));
            }
        }
        None
    }

    /// Stable digest of (epoch, view, sorted counting keys, sorted out keys).
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("e={};v={};", self.epoch, self.view).as_bytes());
        for k in &self.idx.counting_keys {
            h.update(format!("c:{:?}:{}:{}:{};", k.kind, k.sender.0, k.block, k.view).as_bytes());
        }
        let mut out: Vec<DedupKey> = self.l_out.iter().map(|m| m.dedup_key()).collect();
        out.sort();
        for k in out {
            h.update(format!("o:{:?}:{}:{}:{};", k.kind, k.sender.0, k.block, k.view).as_bytes());
        }
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordering used for "highest" block choices: greater height, then later
/// view, then lower digest.
pub fn prefer_block(candidate: &Block, incumbent: &Block) -> bool {
    (candidate.height, candidate.view_produced, std::cmp::Reverse(candidate.hash))
        > (incumbent.height, incumbent.view_produced, std::cmp::Reverse(incumbent.hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::QuorumCertificate;

    fn params() -> ProtocolParams {
        ProtocolParams::new(4, 3, 100)
    }

    fn vote(sender: u16, block: &Block, view: View) -> Msg {
        Arc::new(ConsensusMessage::prepare_vote(0, view, NodeId(sender), block.clone(), None))
    }

    fn qc_msg(sender: u16, block: &Block, view: View) -> Msg {
        let qc = QuorumCertificate::new(QcKind::Prepare, block.clone(), view, [NodeId(0), NodeId(1), NodeId(2)]);
        Arc::new(ConsensusMessage::prepare_qc(0, view, NodeId(sender), qc))
    }

    fn chain() -> (Block, Block, Block, Block) {
        let g = Block::genesis();
        let b = g.child(1, NodeId(0), 0, 0);
        let c = b.child(2, NodeId(0), 0, 0);
        let d = c.child(3, NodeId(0), 0, 0);
        (g, b, c, d)
    }

    #[test]
    fn vote_quorum_prepares() {
        let (_, b, _, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        for n in 0..3 {
            s.push_counting(vote(n, &b, 0));
        }
        assert!(s.prepare_in_view(b.hash, 0));
    }

    #[test]
    fn qc_alone_prepares() {
        let (_, b, _, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        s.push_counting(qc_msg(0, &b, 0));
        assert!(s.prepare_in_view(b.hash, 0));
    }

    #[test]
    fn duplicate_votes_count_once() {
        let (_, b, _, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        assert!(s.push_counting(vote(0, &b, 0)));
        assert!(s.push_counting(vote(1, &b, 0)));
        assert!(!s.push_counting(vote(0, &b, 0)));
        // Oracle: distinct senders by set construction.
        let distinct: BTreeSet<NodeId> = s
            .l_counting()
            .iter()
            .filter(|m| m.kind == MessageKind::PrepareVote && m.block.hash == b.hash)
            .map(|m| m.sender)
            .collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(s.count_votes(b.hash, 0), 2);
        assert!(!s.prepare_in_view(b.hash, 0));
    }

    #[test]
    fn prepare_stage_needs_past_or_current_view() {
        let g = Block::genesis();
        let b = g.child(1, NodeId(2), 2, 0);
        let mut s = NodeState::new(NodeId(3), params(), 5);
        for n in 0..3 {
            s.push_counting(vote(n, &b, 2));
        }
        assert!(s.prepare_stage(b.hash));

        let late = g.child(1, NodeId(2), 6, 0);
        let mut s = NodeState::new(NodeId(3), params(), 5);
        for n in 0..3 {
            s.push_counting(vote(n, &late, 6));
        }
        assert!(!s.prepare_stage(late.hash));
        assert!(s.prepare_stage(g.hash));
    }

    #[test]
    fn precommit_and_commit() {
        let (g, b, c, d) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        s.push_counting(qc_msg(0, &b, 0));
        assert!(!s.precommit_stage(b.hash));
        s.push_counting(qc_msg(0, &c, 0));
        assert!(s.precommit_stage(b.hash));
        assert!(!s.commit_stage(b.hash));
        // Genesis with two prepared descendants in a line.
        assert!(s.commit_stage(g.hash));
        s.push_counting(qc_msg(0, &d, 0));
        assert!(s.commit_stage(b.hash));
        assert!(s.commit_stage(b.hash) && s.precommit_stage(b.hash) && s.prepare_stage(b.hash));
    }

    #[test]
    fn child_prepared_without_parent_is_not_precommit() {
        let (_, b, c, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        s.learn_block(&b);
        s.push_counting(qc_msg(0, &c, 0));
        assert!(s.prepare_stage(c.hash));
        assert!(!s.prepare_stage(b.hash));
        assert!(!s.precommit_stage(b.hash));
    }

    #[test]
    fn counts() {
        let (_, b, _, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        assert_eq!(s.count_votes(b.hash, 0), 0);
        assert_eq!(s.count_view_changes(0), 0);
        let gqc = QuorumCertificate::genesis(s.roster());
        for sender in [0, 1, 2, 0] {
            s.push_counting(Arc::new(ConsensusMessage::view_change(0, 0, NodeId(sender), gqc.clone())));
        }
        assert_eq!(s.count_view_changes(0), 3);
        let mut s = NodeState::new(NodeId(3), params(), 0);
        s.push_counting(Arc::new(ConsensusMessage::view_change(0, 0, NodeId(0), gqc.clone())));
        s.push_counting(Arc::new(ConsensusMessage::view_change(0, 0, NodeId(0), gqc)));
        assert_eq!(s.count_view_changes(0), 1);
    }

    #[test]
    fn highest_prepared() {
        let (g, b, c, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        assert_eq!(s.highest_local_prepare_block(), g);
        s.push_counting(qc_msg(0, &b, 0));
        s.push_counting(qc_msg(0, &c, 0));
        assert_eq!(s.highest_local_prepare_block(), c);
    }

    #[test]
    fn highest_prepared_tie_break_is_total() {
        let g = Block::genesis();
        let mut s = NodeState::new(NodeId(3), params(), 2);
        let x = g.child(1, NodeId(0), 0, 0);
        let y = g.child(1, NodeId(0), 0, 1);
        let z = g.child(1, NodeId(1), 1, 0);
        for blk in [&x, &y] {
            s.push_counting(qc_msg(0, blk, 0));
        }
        let lo = if x.hash < y.hash { &x } else { &y };
        assert_eq!(&s.highest_local_prepare_block(), lo);
        s.push_counting(qc_msg(0, &z, 1));
        assert_eq!(s.highest_local_prepare_block(), z);
        // Insertion order must not matter.
        let mut t = NodeState::new(NodeId(3), params(), 2);
        for blk in [&z, &y, &x] {
            t.push_counting(qc_msg(0, blk, blk.view_produced));
        }
        assert_eq!(t.highest_local_prepare_block(), z);
    }

    #[test]
    fn certificate_minted_from_votes() {
        let (_, b, _, _) = chain();
        let mut s = NodeState::new(NodeId(3), params(), 0);
        for n in [2, 0, 1] {
            s.push_counting(vote(n, &b, 0));
        }
        let qc = s.certificate_for(b.hash).unwrap();
        assert_eq!(qc.view, 0);
        assert_eq!(qc.signers.len(), 3);
        assert!(crate::protocol::validate_certificate(&qc, s.roster(), s.params()));
    }
}
