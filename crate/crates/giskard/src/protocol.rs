//! Identities, blocks, messages, certificates and quorum arithmetic.
//!
//! Everything here is an immutable value. Signatures are modelled as
//! explicit signer sets: a certificate is valid when its signers are
//! distinct roster members and there are at least `quorum_threshold` of
//! them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type View = u64;
pub type Height = u64;

/// Position of a node in the epoch roster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    /// Nodes print as `A`, `B`, ... for the first 26 roster slots.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 26 {
            write!(f, "{}", (b'A' + self.0 as u8) as char)
        } else {
            write!(f, "n{}", self.0)
        }
    }
}

impl FromStr for NodeId {
    type Err = ProtocolError;

    /// Accepts a roster index (`"3"`), a letter (`"D"`), or `n<index>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(i) = s.parse::<u16>() {
            return Ok(NodeId(i));
        }
        if let Some(rest) = s.strip_prefix('n') {
            if let Ok(i) = rest.parse::<u16>() {
                return Ok(NodeId(i));
            }
        }
        let bytes = s.as_bytes();
        if bytes.len() == 1 && bytes[0].is_ascii_uppercase() {
            return Ok(NodeId((bytes[0] - b'A') as u16));
        }
        Err(ProtocolError::BadNodeName(s.to_string()))
    }
}

/// 64-bit block digest. Serialized as 16 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockHash(pub u64);

impl BlockHash {
    /// Parent digest reserved for the genesis block.
    pub const GENESIS_PARENT: BlockHash = BlockHash(0);
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for BlockHash {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 {
            return Err(ProtocolError::BadDigest(s.to_string()));
        }
        u64::from_str_radix(s, 16)
            .map(BlockHash)
            .map_err(|_| ProtocolError::BadDigest(s.to_string()))
    }
}

impl Serialize for BlockHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("not a node name: {0:?}")]
    BadNodeName(String),
    #[error("not a 16-digit hex digest: {0:?}")]
    BadDigest(String),
}

/// Deliberate protocol bugs, used only to measure checker sensitivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mutations {
    /// Vote for every valid `PrepareBlock`, even when a different block of
    /// the same height was already seen in the view.
    pub skip_duplicate_height_discard: bool,
}

impl Mutations {
    pub fn any(&self) -> bool {
        self.skip_duplicate_height_discard
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub node_count: usize,
    pub fault_bound: usize,
    pub blocks_per_view: u32,
    pub timeout_per_view: u64,
    #[serde(default, skip_serializing_if = "is_default_mutations")]
    pub mutations: Mutations,
}

fn is_default_mutations(m: &Mutations) -> bool {
    !m.any()
}

impl ProtocolParams {
    /// Parameters for `node_count` nodes tolerating the maximal
    /// `floor((k - 1) / 3)` faults.
    pub fn new(node_count: usize, blocks_per_view: u32, timeout_per_view: u64) -> Self {
        ProtocolParams {
            node_count,
            fault_bound: max_faults(node_count),
            blocks_per_view,
            timeout_per_view,
            mutations: Mutations::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.node_count == 0 {
            return Err(ProtocolError::InvalidParams("node_count must be >= 1".into()));
        }
        if self.node_count > u16::MAX as usize {
            return Err(ProtocolError::InvalidParams("node_count too large".into()));
        }
        if self.node_count < 3 * self.fault_bound + 1 {
            return Err(ProtocolError::InvalidParams(format!(
                "node_count {} < 3 * fault_bound {} + 1",
                self.node_count, self.fault_bound
            )));
        }
        if self.blocks_per_view == 0 {
            return Err(ProtocolError::InvalidParams("blocks_per_view must be >= 1".into()));
        }
        if self.timeout_per_view == 0 {
            return Err(ProtocolError::InvalidParams("timeout_per_view must be >= 1".into()));
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        quorum_threshold(self.node_count)
    }
}

pub const DEFAULT_BLOCKS_PER_VIEW: u32 = 10;

/// Largest `f` with `k >= 3f + 1`.
pub fn max_faults(k: usize) -> usize {
    k.saturating_sub(1) / 3
}

/// `k - f` with `f = floor((k - 1) / 3)`.
pub fn quorum_threshold(k: usize) -> usize {
    k - max_faults(k)
}

/// The epoch roster. Node `i` sits at position `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Roster {
    members: Vec<NodeId>,
}

impl Roster {
    pub fn new(k: usize) -> Self {
        Roster { members: (0..k as u16).map(NodeId).collect() }
    }

    pub fn from_members(members: Vec<NodeId>) -> Self {
        assert!(!members.is_empty(), "roster must be nonempty");
        Roster { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.members.contains(&n)
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn proposer_for_view(&self, view: View) -> NodeId {
        block_proposer_for_view(&self.members, view)
    }
}

/// `roster[view mod k]`.
pub fn block_proposer_for_view(roster: &[NodeId], view: View) -> NodeId {
    assert!(!roster.is_empty(), "roster must be nonempty");
    roster[(view % roster.len() as u64) as usize]
}

/// Digest over the canonical serialization
/// `block|height|index|proposer|view|parent|valid|tag`.
pub fn compute_block_hash(
    height: Height,
    index_in_view: u32,
    proposer: NodeId,
    view_produced: View,
    parent_hash: BlockHash,
    payload_valid: bool,
    payload_tag: u32,
) -> BlockHash {
    let canonical = format!(
        "block|{height}|{index_in_view}|{}|{view_produced}|{parent_hash}|{}|{payload_tag}",
        proposer.0, payload_valid as u8
    );
    let digest = Sha256::digest(canonical.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    BlockHash(u64::from_be_bytes(first))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub hash: BlockHash,
    pub height: Height,
    pub index_in_view: u32,
    pub proposer: NodeId,
    pub view_produced: View,
    pub parent_hash: BlockHash,
    pub payload_valid: bool,
    /// Distinguishes otherwise identical proposals; honest blocks use 0.
    #[serde(default)]
    pub payload_tag: u32,
}

impl Block {
    pub fn new(
        height: Height,
        index_in_view: u32,
        proposer: NodeId,
        view_produced: View,
        parent_hash: BlockHash,
        payload_valid: bool,
        payload_tag: u32,
    ) -> Self {
        Block {
            hash: compute_block_hash(
                height,
                index_in_view,
                proposer,
                view_produced,
                parent_hash,
                payload_valid,
                payload_tag,
            ),
            height,
            index_in_view,
            proposer,
            view_produced,
            parent_hash,
            payload_valid,
            payload_tag,
        }
    }

    pub fn genesis() -> Self {
        Block::new(0, 0, NodeId(0), 0, BlockHash::GENESIS_PARENT, true, 0)
    }

    pub fn is_genesis(&self) -> bool {
        self.height == 0 && self.parent_hash == BlockHash::GENESIS_PARENT
    }

    /// A valid child of `self` at the given pipeline position.
    pub fn child(&self, index_in_view: u32, proposer: NodeId, view: View, payload_tag: u32) -> Block {
        Block::new(self.height + 1, index_in_view, proposer, view, self.hash, true, payload_tag)
    }

    /// Whether the stored digest matches the fields.
    pub fn hash_is_consistent(&self) -> bool {
        self.hash
            == compute_block_hash(
                self.height,
                self.index_in_view,
                self.proposer,
                self.view_produced,
                self.parent_hash,
                self.payload_valid,
                self.payload_tag,
            )
    }
}

/// True iff the block's index is the last pipeline slot of its view.
pub fn is_last_block(block: &Block, params: &ProtocolParams) -> bool {
    block.index_in_view == params.blocks_per_view
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QcKind {
    Prepare,
    ViewChange,
}

/// Aggregate evidence: the set of nodes that signed `kind` messages for
/// `block` in `view`. The certified block header travels with the
/// certificate so receivers can place it in their block tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub kind: QcKind,
    pub block: Block,
    pub view: View,
    pub signers: BTreeSet<NodeId>,
}

impl QuorumCertificate {
    pub fn new(
        kind: QcKind,
        block: Block,
        view: View,
        signers: impl IntoIterator<Item = NodeId>,
    ) -> Self {
        QuorumCertificate { kind, block, view, signers: signers.into_iter().collect() }
    }

    /// The pre-agreed certificate for genesis, signed by the whole roster.
    pub fn genesis(roster: &Roster) -> Self {
        QuorumCertificate::new(QcKind::Prepare, Block::genesis(), 0, roster.members().iter().copied())
    }

    pub fn block_hash(&self) -> BlockHash {
        self.block.hash
    }
}

/// Signers are distinct roster members, at least a quorum of them.
pub fn validate_certificate(qc: &QuorumCertificate, roster: &Roster, params: &ProtocolParams) -> bool {
    certificate_signers_ok(qc, roster, params) && qc.block.hash_is_consistent()
}

/// The signer half of [`validate_certificate`].
pub fn certificate_signers_ok(qc: &QuorumCertificate, roster: &Roster, params: &ProtocolParams) -> bool {
    // BTreeSet already collapses duplicates.
    qc.signers.iter().all(|s| roster.contains(*s)) && qc.signers.len() >= params.quorum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PrepareBlock,
    PrepareVote,
    ViewChange,
    PrepareQC,
    ViewChangeQC,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::PrepareBlock,
        MessageKind::PrepareVote,
        MessageKind::ViewChange,
        MessageKind::PrepareQC,
        MessageKind::ViewChangeQC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PrepareBlock => "PrepareBlock",
            MessageKind::PrepareVote => "PrepareVote",
            MessageKind::ViewChange => "ViewChange",
            MessageKind::PrepareQC => "PrepareQC",
            MessageKind::ViewChangeQC => "ViewChangeQC",
        }
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown message kind {s:?}"))
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One consensus message.
///
/// `parent_qc` and `view_change_qc` are carried evidence. `certificate` is
/// the aggregate a `PrepareQC` or `ViewChangeQC` message itself stands for.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsensusMessage {
    pub kind: MessageKind,
    pub epoch: u64,
    pub view: View,
    pub sender: NodeId,
    pub block: Block,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_qc: Option<QuorumCertificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_change_qc: Option<QuorumCertificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<QuorumCertificate>,
}

/// Buffer identity of a message: the protocol's "distinct" counts are by
/// sender within (kind, block, view).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DedupKey {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub block: BlockHash,
    pub view: View,
}

impl ConsensusMessage {
    pub fn prepare_block(
        epoch: u64,
        view: View,
        sender: NodeId,
        block: Block,
        parent_qc: Option<QuorumCertificate>,
        view_change_qc: Option<QuorumCertificate>,
    ) -> Self {
        ConsensusMessage {
            kind: MessageKind::PrepareBlock,
            epoch,
            view,
            sender,
            block,
            parent_qc,
            view_change_qc,
            certificate: None,
        }
    }

    pub fn prepare_vote(
        epoch: u64,
        view: View,
        sender: NodeId,
        block: Block,
        parent_qc: Option<QuorumCertificate>,
    ) -> Self {
        ConsensusMessage {
            kind: MessageKind::PrepareVote,
            epoch,
            view,
            sender,
            block,
            parent_qc,
            view_change_qc: None,
            certificate: None,
        }
    }

    pub fn prepare_qc(epoch: u64, view: View, sender: NodeId, qc: QuorumCertificate) -> Self {
        ConsensusMessage {
            kind: MessageKind::PrepareQC,
            epoch,
            view,
            sender,
            block: qc.block.clone(),
            parent_qc: None,
            view_change_qc: None,
            certificate: Some(qc),
        }
    }

    pub fn view_change(epoch: u64, view: View, sender: NodeId, prepare_qc: QuorumCertificate) -> Self {
        ConsensusMessage {
            kind: MessageKind::ViewChange,
            epoch,
            view,
            sender,
            block: prepare_qc.block.clone(),
            parent_qc: Some(prepare_qc),
            view_change_qc: None,
            certificate: None,
        }
    }

    /// `ViewChangeQC(b_max, sender, view)` together with the accompanying
    /// prepare certificate of `b_max`.
    pub fn view_change_qc(
        epoch: u64,
        view: View,
        sender: NodeId,
        qc: QuorumCertificate,
        prepare_qc: QuorumCertificate,
    ) -> Self {
        ConsensusMessage {
            kind: MessageKind::ViewChangeQC,
            epoch,
            view,
            sender,
            block: qc.block.clone(),
            parent_qc: Some(prepare_qc),
            view_change_qc: None,
            certificate: Some(qc),
        }
    }

    /// The view a message testifies about. For `PrepareQC` this is the view
    /// in which the certified votes were cast, which may precede the
    /// envelope view.
    pub fn evidence_view(&self) -> View {
        match (self.kind, &self.certificate) {
            (MessageKind::PrepareQC, Some(qc)) => qc.view,
            _ => self.view,
        }
    }

    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            kind: self.kind,
            sender: self.sender,
            block: self.block.hash,
            view: self.evidence_view(),
        }
    }

    /// Structural carrying rules per message kind.
    pub fn is_well_formed(&self) -> bool {
        use MessageKind::*;
        match self.kind {
            PrepareBlock => {
                self.certificate.is_none()
                    && (self.block.index_in_view <= 1 || self.parent_qc.is_none())
                    && self.parent_qc.as_ref().map_or(true, |qc| {
                        qc.kind == QcKind::Prepare && qc.block.hash == self.block.parent_hash
                    })
                    && self
                        .view_change_qc
                        .as_ref()
                        .map_or(true, |qc| qc.kind == QcKind::ViewChange)
            }
            PrepareVote => {
                self.certificate.is_none()
                    && self.view_change_qc.is_none()
                    && self.parent_qc.as_ref().map_or(true, |qc| {
                        qc.kind == QcKind::Prepare && qc.block.hash == self.block.parent_hash
                    })
            }
            ViewChange => {
                self.certificate.is_none()
                    && self.view_change_qc.is_none()
                    && self.parent_qc.as_ref().map_or(true, |qc| {
                        qc.kind == QcKind::Prepare && qc.block.hash == self.block.hash
                    })
            }
            PrepareQC => {
                self.parent_qc.is_none()
                    && self.view_change_qc.is_none()
                    && self.certificate.as_ref().map_or(false, |qc| {
                        qc.kind == QcKind::Prepare && qc.block == self.block && qc.view <= self.view
                    })
            }
            ViewChangeQC => {
                self.view_change_qc.is_none()
                    && self.certificate.as_ref().map_or(false, |qc| {
                        qc.kind == QcKind::ViewChange && qc.block == self.block && qc.view == self.view
                    })
                    && self.parent_qc.as_ref().map_or(true, |qc| {
                        qc.kind == QcKind::Prepare && qc.block.hash == self.block.hash
                    })
            }
        }
    }

    /// Every certificate the message carries or stands for.
    pub fn certificates(&self) -> impl Iterator<Item = &QuorumCertificate> {
        self.parent_qc
            .iter()
            .chain(self.view_change_qc.iter())
            .chain(self.certificate.iter())
    }
}

impl fmt::Display for ConsensusMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(b={} h={} i={}, v={}, n={})",
            self.kind, self.block.hash, self.block.height, self.block.index_in_view, self.view, self.sender
        )
    }
}
