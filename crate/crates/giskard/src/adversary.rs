//! Byzantine strategies.
//!
//! A Byzantine node runs the honest core (so its local state and stage
//! facts evolve like any other node's) and the strategy adds or suppresses
//! outgoing messages. Extra messages never enter the core's `l_out`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::protocol::{Block, BlockHash, ConsensusMessage, MessageKind, View};
use crate::state::{Msg, NodeState};
use crate::transitions::{
    build_pipeline, carryover_block, NodeEvent, TransitionError, TransitionOutput,
};

/// Extra blocks sent past the per-view limit by [`StrategyKind::OverPropose`].
pub const OVER_PROPOSE_EXTRA: u32 = 5;

/// Payload tag of fork blocks and fabricated siblings.
pub const FORK_TAG: u32 = 1;

/// Payload tag of phantom blocks voted for without a proposal.
pub const PHANTOM_TAG: u32 = 0xdead;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Silent,
    DoublePropose,
    SameHeightDoubleVote,
    VoteWithoutProposal,
    OutOfTurnPropose,
    OverPropose,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Silent,
        StrategyKind::DoublePropose,
        StrategyKind::SameHeightDoubleVote,
        StrategyKind::VoteWithoutProposal,
        StrategyKind::OutOfTurnPropose,
        StrategyKind::OverPropose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Silent => "silent",
            StrategyKind::DoublePropose => "double-propose",
            StrategyKind::SameHeightDoubleVote => "same-height-double-vote",
            StrategyKind::VoteWithoutProposal => "vote-without-proposal",
            StrategyKind::OutOfTurnPropose => "out-of-turn-propose",
            StrategyKind::OverPropose => "over-propose",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Views in which a strategy is active. Serialized as `"all"` or a list.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum TargetViews {
    #[default]
    All,
    Views(BTreeSet<View>),
}

impl TargetViews {
    pub fn contains(&self, view: View) -> bool {
        match self {
            TargetViews::All => true,
            TargetViews::Views(vs) => vs.contains(&view),
        }
    }
}

impl Serialize for TargetViews {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TargetViews::All => s.serialize_str("all"),
            TargetViews::Views(vs) => vs.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TargetViews {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(BTreeSet<View>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(TargetViews::All),
            Raw::Word(w) => Err(de::Error::custom(format!("expected \"all\" or a list of views, got {w:?}"))),
            Raw::List(vs) => Ok(TargetViews::Views(vs)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryStrategy {
    pub strategy: StrategyKind,
    #[serde(default)]
    pub target_views: TargetViews,
}

impl AdversaryStrategy {
    pub fn new(strategy: StrategyKind, target_views: TargetViews) -> Self {
        AdversaryStrategy { strategy, target_views }
    }

    /// True when the node ignores events entirely in its current view.
    pub fn is_silent(&self, state: &NodeState) -> bool {
        self.strategy == StrategyKind::Silent && self.target_views.contains(state.view)
    }

    /// Adds the strategy's messages to an honest transition's output.
    pub fn augment(&self, mut out: TransitionOutput) -> TransitionOutput {
        let extra = match self.strategy {
            StrategyKind::Silent => Vec::new(),
            StrategyKind::DoublePropose => self.extra_double_propose(&out),
            StrategyKind::OverPropose => self.extra_over_propose(&out),
            StrategyKind::SameHeightDoubleVote => self.extra_double_votes(&out),
            StrategyKind::OutOfTurnPropose => self.on_entries(&out, byz_out_of_turn_propose),
            StrategyKind::VoteWithoutProposal => self.on_entries(&out, |s, v| {
                let phantom = phantom_block(s, v);
                byz_vote_without_proposal(s, phantom, v)
            }),
        };
        out.broadcasts.extend(extra.into_iter().map(Arc::new));
        out
    }

    fn own_proposal_views(&self, out: &TransitionOutput) -> BTreeSet<View> {
        out.broadcasts
            .iter()
            .filter(|m| m.kind == MessageKind::PrepareBlock && self.target_views.contains(m.view))
            .map(|m| m.view)
            .collect()
    }

    fn extra_double_propose(&self, out: &TransitionOutput) -> Vec<ConsensusMessage> {
        self.own_proposal_views(out)
            .into_iter()
            .filter(|&v| v == out.next_state.view)
            .flat_map(|v| byz_double_propose(&out.next_state, v))
            .collect()
    }

    fn extra_over_propose(&self, out: &TransitionOutput) -> Vec<ConsensusMessage> {
        let views = self.own_proposal_views(out);
        let mut extra = Vec::new();
        for v in views {
            let last = out
                .broadcasts
                .iter()
                .filter(|m| m.kind == MessageKind::PrepareBlock && m.view == v)
                .max_by_key(|m| m.block.index_in_view);
            let Some(last) = last else { continue };
            let mut parent = last.block.clone();
            let state = &out.next_state;
            for i in 1..=OVER_PROPOSE_EXTRA {
                let b = parent.child(parent.index_in_view + 1, state.id, v, 0);
                debug_assert_eq!(b.index_in_view, state.params().blocks_per_view + i);
                parent = b.clone();
                extra.push(ConsensusMessage::prepare_block(state.epoch, v, state.id, b, None, None));
            }
        }
        extra
    }

    fn extra_double_votes(&self, out: &TransitionOutput) -> Vec<ConsensusMessage> {
        out.broadcasts
            .iter()
            .filter(|m| m.kind == MessageKind::PrepareVote && self.target_views.contains(m.view))
            .flat_map(|m| {
                let sibling = sibling_of(&m.block);
                byz_equivocate_vote(&out.next_state, m, &sibling)
            })
            .collect()
    }

    fn on_entries(
        &self,
        out: &TransitionOutput,
        f: impl Fn(&NodeState, View) -> Vec<ConsensusMessage>,
    ) -> Vec<ConsensusMessage> {
        let entered = out.events.iter().filter_map(|e| match e {
            NodeEvent::EnteredView { view, .. } => Some(*view),
            _ => None,
        });
        let mut extra = Vec::new();
        for v in entered {
            if v == out.next_state.view && self.target_views.contains(v) {
                extra.extend(f(&out.next_state, v));
            }
        }
        extra
    }
}

/// A second pipeline from the same carryover block with a different
/// payload, plus a vote for its first block.
pub fn byz_double_propose(state: &NodeState, view: View) -> Vec<ConsensusMessage> {
    if state.view != view {
        return Vec::new();
    }
    match build_pipeline(state, state.id, FORK_TAG, state.params().blocks_per_view) {
        Ok((mut msgs, vote)) => {
            msgs.push(vote);
            msgs
        }
        Err(_) => Vec::new(),
    }
}

/// A vote for `conflicting`, a different block at the height of `vote`.
pub fn byz_equivocate_vote(state: &NodeState, vote: &ConsensusMessage, conflicting: &Block) -> Vec<ConsensusMessage> {
    if conflicting.height != vote.block.height || conflicting.hash == vote.block.hash {
        return Vec::new();
    }
    vec![ConsensusMessage::prepare_vote(
        state.epoch,
        vote.view,
        state.id,
        conflicting.clone(),
        vote.parent_qc.clone(),
    )]
}

/// A vote for a block the node never received a proposal for.
pub fn byz_vote_without_proposal(state: &NodeState, fabricated: Block, view: View) -> Vec<ConsensusMessage> {
    vec![ConsensusMessage::prepare_vote(state.epoch, view, state.id, fabricated, None)]
}

/// A full pipeline proposed by a node that is not the view's proposer.
pub fn byz_out_of_turn_propose(state: &NodeState, view: View) -> Vec<ConsensusMessage> {
    if state.view != view || state.roster().proposer_for_view(view) == state.id {
        return Vec::new();
    }
    match build_pipeline(state, state.id, 0, state.params().blocks_per_view) {
        Ok((mut msgs, vote)) => {
            msgs.push(vote);
            msgs
        }
        Err(_) => Vec::new(),
    }
}

/// Same position and parent, different payload.
pub fn sibling_of(block: &Block) -> Block {
    let tag = if block.payload_tag == 0 { FORK_TAG } else { 0 };
    Block::new(
        block.height,
        block.index_in_view,
        block.proposer,
        block.view_produced,
        block.parent_hash,
        true,
        tag,
    )
}

/// A block of `view` at the next height after the carryover, hanging off a
/// parent digest nobody knows.
pub fn phantom_block(state: &NodeState, view: View) -> Block {
    let base = carryover_block(state)
        .map(|b| b.height)
        .unwrap_or_else(|_: TransitionError| state.highest_local_prepare_block().height);
    let unknown_parent = BlockHash(u64::from(PHANTOM_TAG) ^ view.rotate_left(17));
    Block::new(
        base + 1,
        1,
        state.roster().proposer_for_view(view),
        view,
        unknown_parent,
        true,
        PHANTOM_TAG,
    )
}

/// Extra messages emitted so far are not recorded; this helper lets tests
/// tell strategy output apart from core output.
pub fn is_core_message(state: &NodeState, msg: &Msg) -> bool {
    state.l_out().iter().any(|m| Arc::ptr_eq(m, msg))
}
