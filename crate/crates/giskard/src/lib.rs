//! Giskard consensus as a deterministic state machine, a seeded
//! discrete-event network simulator with Byzantine fault injection, and an
//! offline trace checker for the protocol's safety properties.
//!
//! Layout:
//!
//! - [`protocol`]: identities, blocks, messages, certificates, quorum math.
//! - [`state`]: one node's view state and the block-stage predicates.
//! - [`transitions`]: the honest-node protocol as pure transition functions.
//! - [`adversary`]: Byzantine strategies layered over the honest core.
//! - [`netsim`]: the event loop, network model and trace recording.
//! - [`checker`]: stage-fact extraction and the safety/lemma checks.
//! - [`scenario`] and [`trace`]: configuration files, scenario library,
//!   trace persistence, replay and the suites behind the CLI.

pub mod adversary;
pub mod checker;
pub mod netsim;
pub mod protocol;
pub mod scenario;
pub mod state;
pub mod trace;
pub mod transitions;

pub use protocol::{
    Block, BlockHash, ConsensusMessage, MessageKind, NodeId, ProtocolParams, QcKind,
    QuorumCertificate, Roster,
};
pub use state::{NodeState, StageName};
