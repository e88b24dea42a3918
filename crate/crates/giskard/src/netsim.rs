//! Seeded discrete-event network simulator.
//!
//! Events run in (time, kind priority, enqueue sequence) order; timeouts
//! sort before view-entry bookkeeping, which sorts before deliveries at the
//! same instant. All randomness comes from one ChaCha stream seeded by the
//! run seed, so a (config, seed) pair fixes the trace byte for byte.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adversary::{AdversaryStrategy, StrategyKind, TargetViews};
use crate::protocol::{BlockHash, MessageKind, NodeId, ProtocolError, ProtocolParams, View};
use crate::state::{Msg, NodeState, StageName};
use crate::trace::{sha256_hex, RecordKind, TraceFile, TraceHeader, TraceRecord, TRACE_FORMAT};
use crate::transitions::{self, InputEvent, NodeEvent, TransitionError, TransitionOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Reliable,
    Lossy,
    Scripted,
}

/// While active, messages crossing between `side` and the rest are lost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub side: BTreeSet<NodeId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleAction {
    #[default]
    Deliver,
    Drop,
    Delay,
}

/// A scripted delivery rule. Unset selectors match anything; the first
/// matching rule decides a (message, recipient) pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeliveryRule {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<MessageKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<u32>,
    pub action: RuleAction,
    /// Extra ticks for `delay`.
    pub delay: u64,
}

impl DeliveryRule {
    pub fn matches(&self, msg: &Msg, to: NodeId) -> bool {
        self.from.map_or(true, |f| f == msg.sender)
            && self.to.map_or(true, |t| t == to)
            && self.kind.map_or(true, |k| k == msg.kind)
            && self.view.map_or(true, |v| v == msg.view)
            && self.index.map_or(true, |i| i == msg.block.index_in_view)
            && self.height.map_or(true, |h| h == msg.block.height)
            && self.tag.map_or(true, |t| t == msg.block.payload_tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkModel {
    pub profile: Profile,
    pub base_delay: u64,
    /// Uniform extra delay in `0..=jitter`, lossy profile only.
    pub jitter: u64,
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub partitions: Vec<Partition>,
    pub rules: Vec<DeliveryRule>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            profile: Profile::Reliable,
            base_delay: 1,
            jitter: 0,
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            partitions: Vec::new(),
            rules: Vec::new(),
        }
    }
}

impl NetworkModel {
    pub fn reliable(base_delay: u64) -> Self {
        NetworkModel { base_delay, ..NetworkModel::default() }
    }

    pub fn lossy(base_delay: u64, jitter: u64, drop_probability: f64) -> Self {
        NetworkModel { profile: Profile::Lossy, base_delay, jitter, drop_probability, ..NetworkModel::default() }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(format!("network.{m}")));
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return bad("drop_probability must be within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.duplicate_probability) {
            return bad("duplicate_probability must be within [0, 1]");
        }
        if self.profile != Profile::Lossy && (self.drop_probability > 0.0 || self.jitter > 0) {
            return bad("drop_probability and jitter require profile = \"lossy\"");
        }
        if self.profile != Profile::Scripted && !self.rules.is_empty() {
            return bad("rules require profile = \"scripted\"");
        }
        for p in &self.partitions {
            if p.start > p.end {
                return bad("partitions: start must not exceed end");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByzantineAssignment {
    pub node: NodeId,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub target_views: TargetViews,
}

/// Everything a run depends on apart from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub protocol: ProtocolParams,
    pub initial_view: View,
    pub views_to_run: u64,
    pub max_steps: u64,
    pub max_time: u64,
    pub network: NetworkModel,
    #[serde(default)]
    pub byzantine: Vec<ByzantineAssignment>,
}

impl SimConfig {
    pub fn new(protocol: ProtocolParams, views_to_run: u64) -> Self {
        let max_time = (views_to_run + 2) * protocol.timeout_per_view;
        SimConfig {
            protocol,
            initial_view: 0,
            views_to_run,
            max_steps: 2_000_000,
            max_time,
            network: NetworkModel::default(),
            byzantine: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.protocol.validate()?;
        self.network.validate()?;
        let k = self.protocol.node_count;
        let mut seen = BTreeSet::new();
        for b in &self.byzantine {
            if b.node.index() >= k {
                return Err(SimError::Config(format!("byzantine.node {} is outside the roster", b.node)));
            }
            if !seen.insert(b.node) {
                return Err(SimError::Config(format!("byzantine.node {} listed twice", b.node)));
            }
        }
        for p in &self.network.partitions {
            if p.side.iter().any(|n| n.index() >= k) {
                return Err(SimError::Config("network.partitions.side names a node outside the roster".into()));
            }
        }
        if self.views_to_run == 0 {
            return Err(SimError::Config("views_to_run must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn is_byzantine(&self, node: NodeId) -> bool {
        self.byzantine.iter().any(|b| b.node == node)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Params(#[from] ProtocolError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Clone, Debug)]
enum Event {
    ViewTimeout { view: View },
    NodeTimeout { node: NodeId, view: View },
    ViewEntered { node: NodeId },
    Deliver { to: NodeId, msg: Msg, send_step: u64 },
}

impl Event {
    fn priority(&self) -> u8 {
        match self {
            Event::ViewTimeout { .. } | Event::NodeTimeout { .. } => 0,
            Event::ViewEntered { .. } => 1,
            Event::Deliver { .. } => 2,
        }
    }
}

#[derive(Debug)]
struct Queued {
    time: u64,
    priority: u8,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.priority, self.seq) == (other.time, other.priority, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.priority, self.seq).cmp(&(other.time, other.priority, other.seq))
    }
}

type StageKey = (BlockHash, StageName, Option<View>);

/// The simulated world: node states, the event queue and the trace so far.
pub struct World {
    config: SimConfig,
    seed: u64,
    nodes: Vec<Option<NodeState>>,
    roles: Vec<Option<AdversaryStrategy>>,
    queue: BinaryHeap<Reverse<Queued>>,
    rng: ChaCha8Rng,
    clock: u64,
    next_seq: u64,
    events_run: u64,
    records: Vec<TraceRecord>,
    deadlines: BTreeMap<View, u64>,
    stages: Vec<BTreeSet<StageKey>>,
}

impl World {
    pub fn new(config: SimConfig, seed: u64) -> Result<World, SimError> {
        config.validate()?;
        let k = config.protocol.node_count;
        let nodes = (0..k)
            .map(|i| Some(NodeState::new(NodeId(i as u16), config.protocol.clone(), config.initial_view)))
            .collect();
        let mut roles = vec![None; k];
        for b in &config.byzantine {
            roles[b.node.index()] = Some(AdversaryStrategy::new(b.strategy, b.target_views.clone()));
        }
        Ok(World {
            seed,
            nodes,
            roles,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock: 0,
            next_seq: 0,
            events_run: 0,
            records: Vec::new(),
            deadlines: BTreeMap::new(),
            stages: vec![BTreeSet::new(); k],
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        self.nodes[id.index()].as_ref().expect("node present between steps")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.iter().map(|n| n.as_ref().expect("node present between steps"))
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn push_event(&mut self, time: u64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued { time, priority: event.priority(), seq, event }));
    }

    fn record(
        &mut self,
        kind: RecordKind,
        node: NodeId,
        msg: Option<Msg>,
        detail: BTreeMap<String, Value>,
    ) -> u64 {
        let step = self.records.len() as u64;
        self.records.push(TraceRecord { step, time: self.clock, kind, node, msg, detail });
        step
    }

    /// Genesis facts and every node's entry into the initial view.
    pub fn bootstrap(&mut self) -> Result<(), SimError> {
        let k = self.nodes.len();
        let initial = self.config.initial_view;
        for i in 0..k {
            let id = NodeId(i as u16);
            let genesis = self.node(id).genesis().clone();
            self.stages[i].insert((genesis.hash, StageName::Prepare, None));
            self.record(RecordKind::Stage, id, None, stage_detail(genesis.hash, StageName::Prepare, None, 0));
        }
        let deadline = self.clock + self.config.protocol.timeout_per_view;
        self.deadlines.insert(initial, deadline);
        self.push_event(deadline, Event::ViewTimeout { view: initial });
        for i in 0..k {
            let id = NodeId(i as u16);
            if self.is_silent(id) {
                continue;
            }
            let state = self.nodes[i].take().expect("node present");
            let out = transitions::start(state)?;
            self.absorb(id, out)?;
        }
        Ok(())
    }

    fn is_silent(&self, id: NodeId) -> bool {
        self.roles[id.index()].as_ref().map_or(false, |r| r.is_silent(self.node(id)))
    }

    fn done(&self) -> bool {
        let target = self.config.initial_view + self.config.views_to_run;
        self.nodes()
            .filter(|n| !self.config.is_byzantine(n.id))
            .all(|n| n.view >= target)
    }

    /// Runs one event. Returns false when the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.events_run >= self.config.max_steps || self.done() {
            return Ok(false);
        }
        let Some(Reverse(next)) = self.queue.peek() else { return Ok(false) };
        if next.time > self.config.max_time {
            return Ok(false);
        }
        let Reverse(q) = self.queue.pop().expect("peeked");
        self.clock = q.time;
        self.events_run += 1;
        match q.event {
            Event::Deliver { to, msg, send_step } => {
                let mut d = BTreeMap::new();
                d.insert("send_step".into(), json!(send_step));
                self.record(RecordKind::Deliver, to, Some(msg.clone()), d);
                self.apply(to, InputEvent::Deliver(msg))?;
            }
            Event::ViewTimeout { view } => {
                for i in 0..self.nodes.len() {
                    self.fire_timeout(NodeId(i as u16), view, false)?;
                }
            }
            Event::NodeTimeout { node, view } => self.fire_timeout(node, view, true)?,
            Event::ViewEntered { node } => self.apply(node, InputEvent::ViewEntered)?,
        }
        Ok(true)
    }

    fn fire_timeout(&mut self, id: NodeId, view: View, late: bool) -> Result<(), SimError> {
        let n = self.node(id);
        if n.view != view || n.timed_out || self.is_silent(id) {
            return Ok(());
        }
        let mut d = BTreeMap::new();
        d.insert("view".into(), json!(view));
        if late {
            d.insert("late".into(), json!(true));
        }
        self.record(RecordKind::Timeout, id, None, d);
        self.apply(id, InputEvent::TimeoutFired { view })
    }

    fn apply(&mut self, id: NodeId, input: InputEvent) -> Result<(), SimError> {
        if self.is_silent(id) {
            return Ok(());
        }
        let state = self.nodes[id.index()].take().expect("node present");
        let out = transitions::step(state, input)?;
        self.absorb(id, out)
    }

    fn absorb(&mut self, id: NodeId, out: TransitionOutput) -> Result<(), SimError> {
        let out = match &self.roles[id.index()] {
            Some(strategy) => strategy.augment(out),
            None => out,
        };
        let TransitionOutput { next_state, broadcasts, view_changed, events } = out;
        let mut digest: Option<String> = None;
        let mut candidates: Vec<BlockHash> = Vec::new();
        let mut entered: Vec<View> = Vec::new();
        for e in events {
            match e {
                NodeEvent::Processed { msg, carried, discarded } => {
                    candidates.push(msg.block.hash);
                    let mut d = BTreeMap::new();
                    if carried {
                        d.insert("carried".into(), json!(true));
                    }
                    if discarded {
                        d.insert("discarded".into(), json!(true));
                    }
                    self.record(RecordKind::Process, id, Some(msg), d);
                }
                NodeEvent::Rejected { msg, reason } => {
                    let mut d = BTreeMap::new();
                    d.insert("reason".into(), json!(reason.name()));
                    self.record(RecordKind::Reject, id, Some(msg), d);
                }
                NodeEvent::Expired(msg) => {
                    let mut d = BTreeMap::new();
                    d.insert("reason".into(), json!("expired"));
                    self.record(RecordKind::Reject, id, Some(msg), d);
                }
                NodeEvent::Parked(_) | NodeEvent::TimedOut { .. } => {}
                NodeEvent::EnteredView { view, mode } => {
                    entered.push(view);
                    let mut d = BTreeMap::new();
                    d.insert("view".into(), json!(view));
                    d.insert("mode".into(), json!(mode.name()));
                    let digest = digest.get_or_insert_with(|| next_state.state_digest());
                    d.insert("digest".into(), json!(digest));
                    self.record(RecordKind::ViewEntry, id, None, d);
                }
            }
        }
        self.diff_stages(id, &next_state, &candidates);
        self.nodes[id.index()] = Some(next_state);
        for m in broadcasts {
            self.broadcast(id, m);
        }
        let first_entry = self.config.initial_view;
        for v in entered {
            if v != first_entry || view_changed {
                self.note_entry(id, v);
            }
        }
        if view_changed {
            self.push_event(self.clock, Event::ViewEntered { node: id });
        }
        Ok(())
    }

    fn note_entry(&mut self, id: NodeId, view: View) {
        match self.deadlines.get(&view) {
            None => {
                let deadline = self.clock + self.config.protocol.timeout_per_view;
                self.deadlines.insert(view, deadline);
                self.push_event(deadline, Event::ViewTimeout { view });
            }
            Some(&deadline) if deadline <= self.clock => {
                self.push_event(self.clock, Event::NodeTimeout { node: id, view });
            }
            Some(_) => {}
        }
    }

    /// Emits stage records for facts that newly hold among the processed
    /// blocks, their parents and grandparents.
    fn diff_stages(&mut self, id: NodeId, state: &NodeState, processed: &[BlockHash]) {
        let mut blocks = BTreeSet::new();
        for &h in processed {
            let mut cur = Some(h);
            for _ in 0..3 {
                let Some(hash) = cur else { break };
                blocks.insert(hash);
                cur = state.block(hash).filter(|b| !b.is_genesis()).map(|b| b.parent_hash);
            }
        }
        // Parents before children keeps the record order stable and
        // readable: ascending height, then digest.
        let mut ordered: Vec<_> = blocks
            .into_iter()
            .filter_map(|h| state.block(h).map(|b| (b.height, h)))
            .collect();
        ordered.sort();
        for (height, hash) in ordered {
            let mut facts: Vec<StageKey> = state
                .prepare_views(hash)
                .into_iter()
                .map(|v| (hash, StageName::PrepareInView, Some(v)))
                .collect();
            if state.prepare_stage(hash) {
                facts.push((hash, StageName::Prepare, None));
            }
            if state.precommit_stage(hash) {
                facts.push((hash, StageName::Precommit, None));
            }
            if state.commit_stage(hash) {
                facts.push((hash, StageName::Commit, None));
            }
            for f in facts {
                if self.stages[id.index()].insert(f) {
                    self.record(RecordKind::Stage, id, None, stage_detail(f.0, f.1, f.2, height));
                }
            }
        }
    }

    fn broadcast(&mut self, sender: NodeId, msg: Msg) {
        let send_step = self.record(RecordKind::Send, sender, Some(msg.clone()), BTreeMap::new());
        let now = self.clock;
        let net = &self.config.network;
        let base = net.base_delay;
        for i in 0..self.nodes.len() {
            let to = NodeId(i as u16);
            if to == sender {
                self.push_event(now + base, Event::Deliver { to, msg: msg.clone(), send_step });
                continue;
            }
            let net = &self.config.network;
            let mut extra = 0;
            let mut dropped: Option<&'static str> = None;
            if net.profile == Profile::Scripted {
                if let Some(rule) = net.rules.iter().find(|r| r.matches(&msg, to)) {
                    match rule.action {
                        RuleAction::Deliver => {}
                        RuleAction::Drop => dropped = Some("script"),
                        RuleAction::Delay => extra = rule.delay,
                    }
                }
            }
            if dropped.is_none()
                && net.partitions.iter().any(|p| {
                    now >= p.start && now < p.end && (p.side.contains(&sender) != p.side.contains(&to))
                })
            {
                dropped = Some("partition");
            }
            let mut duplicate = false;
            if net.profile == Profile::Lossy {
                let (drop_p, jitter, dup_p) = (net.drop_probability, net.jitter, net.duplicate_probability);
                let lost = self.rng.gen_bool(drop_p);
                let j = if jitter > 0 { self.rng.gen_range(0..=jitter) } else { 0 };
                if dup_p > 0.0 {
                    duplicate = self.rng.gen_bool(dup_p);
                }
                if dropped.is_none() && lost {
                    dropped = Some("loss");
                }
                extra += j;
            }
            match dropped {
                Some(reason) => {
                    let mut d = BTreeMap::new();
                    d.insert("send_step".into(), json!(send_step));
                    d.insert("reason".into(), json!(reason));
                    self.record(RecordKind::Drop, to, Some(msg.clone()), d);
                }
                None => {
                    let at = now + base + extra;
                    self.push_event(at, Event::Deliver { to, msg: msg.clone(), send_step });
                    if duplicate {
                        self.push_event(at + 1, Event::Deliver { to, msg: msg.clone(), send_step });
                    }
                }
            }
        }
    }

    /// Remaining in-flight messages become `run-ended` drops.
    fn flush(&mut self) {
        let mut pending: Vec<Queued> = std::mem::take(&mut self.queue).into_iter().map(|r| r.0).collect();
        pending.sort();
        for q in pending {
            if let Event::Deliver { to, msg, send_step } = q.event {
                let mut d = BTreeMap::new();
                d.insert("send_step".into(), json!(send_step));
                d.insert("reason".into(), json!("run-ended"));
                self.record(RecordKind::Drop, to, Some(msg), d);
            }
        }
    }

    pub fn into_trace(mut self) -> TraceFile {
        self.flush();
        let header = TraceHeader {
            kind: "header".into(),
            format: TRACE_FORMAT.into(),
            seed: self.seed,
            config_digest: self.config.digest(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
        };
        TraceFile { header, records: self.records }
    }
}

fn stage_detail(block: BlockHash, stage: StageName, view: Option<View>, height: u64) -> BTreeMap<String, Value> {
    let mut d = BTreeMap::new();
    d.insert("block".into(), json!(block.to_string()));
    d.insert("stage".into(), json!(stage.name()));
    d.insert("height".into(), json!(height));
    if let Some(v) = view {
        d.insert("view".into(), json!(v));
    }
    d
}

/// Runs a configuration to completion and returns the world, for callers
/// that want to inspect final node states.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<World, SimError> {
    let mut world = World::new(config.clone(), seed)?;
    world.bootstrap()?;
    while world.step()? {}
    Ok(world)
}

/// Runs a configuration and returns its trace.
pub fn run(config: &SimConfig, seed: u64) -> Result<TraceFile, SimError> {
    Ok(simulate(config, seed)?.into_trace())
}

/// Shorthand used by callers building messages for injection tests.
pub fn shared(msg: crate::protocol::ConsensusMessage) -> Msg {
    Arc::new(msg)
}
