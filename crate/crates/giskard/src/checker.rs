//! Offline safety checker.
//!
//! Stage facts are rebuilt from the `process` and `view_entry` records of a
//! trace by a second, self-contained implementation of the stage
//! predicates; node-side `stage` records are only used for
//! cross-validation. The property checks then run over those facts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::netsim::SimConfig;
use crate::protocol::{Block, BlockHash, MessageKind, NodeId, QcKind, View};
use crate::state::StageName;
use crate::trace::{RecordKind, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    Theorem1,
    Theorem2,
    Theorem3,
    Lemma1,
    Lemma3,
    HonestEquivocation,
    CertificateForgery,
    StageMismatch,
    TraceIntegrity,
}

impl Property {
    pub const ALL: [Property; 9] = [
        Property::Theorem1,
        Property::Theorem2,
        Property::Theorem3,
        Property::Lemma1,
        Property::Lemma3,
        Property::HonestEquivocation,
        Property::CertificateForgery,
        Property::StageMismatch,
        Property::TraceIntegrity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Theorem1 => "Theorem1",
            Property::Theorem2 => "Theorem2",
            Property::Theorem3 => "Theorem3",
            Property::Lemma1 => "Lemma1",
            Property::Lemma3 => "Lemma3",
            Property::HonestEquivocation => "HonestEquivocation",
            Property::CertificateForgery => "CertificateForgery",
            Property::StageMismatch => "StageMismatch",
            Property::TraceIntegrity => "TraceIntegrity",
        }
    }

    pub fn parse(s: &str) -> Option<Property> {
        Property::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFact {
    pub node: NodeId,
    pub block: Block,
    pub stage: StageName,
    /// Set for `PrepareInView` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    pub first_step: u64,
    /// False for facts held by a Byzantine node's honest core.
    pub honest: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub property: Property,
    /// Trace steps (or fact first-steps) that witness the violation.
    pub witnesses: Vec<u64>,
    pub nodes: Vec<NodeId>,
    pub blocks: Vec<BlockHash>,
    pub explanation: String,
}

impl Violation {
    fn new(property: Property, explanation: String) -> Self {
        Violation { property, witnesses: Vec::new(), nodes: Vec::new(), blocks: Vec::new(), explanation }
    }

    fn fact(mut self, f: &StageFact) -> Self {
        self.witnesses.push(f.first_step);
        if !self.nodes.contains(&f.node) {
            self.nodes.push(f.node);
        }
        if !self.blocks.contains(&f.block.hash) {
            self.blocks.push(f.block.hash);
        }
        self
    }

    fn record(mut self, r: &TraceRecord) -> Self {
        self.witnesses.push(r.step);
        if !self.nodes.contains(&r.node) {
            self.nodes.push(r.node);
        }
        if let Some(m) = &r.msg {
            if !self.blocks.contains(&m.block.hash) {
                self.blocks.push(m.block.hash);
            }
        }
        self
    }
}

/// What the checker needs to know about the run besides the records.
#[derive(Clone, Debug)]
pub struct CheckContext {
    pub node_count: usize,
    pub blocks_per_view: u32,
    pub initial_view: View,
    pub byzantine: BTreeSet<NodeId>,
}

impl CheckContext {
    pub fn from_config(config: &SimConfig) -> Self {
        CheckContext {
            node_count: config.protocol.node_count,
            blocks_per_view: config.protocol.blocks_per_view,
            initial_view: config.initial_view,
            byzantine: config.byzantine.iter().map(|b| b.node).collect(),
        }
    }

    fn faults(&self) -> usize {
        (self.node_count - 1) / 3
    }

    fn quorum(&self) -> usize {
        self.node_count - self.faults()
    }

    fn proposer(&self, view: View) -> NodeId {
        NodeId((view % self.node_count as u64) as u16)
    }

    fn honest(&self, n: NodeId) -> bool {
        !self.byzantine.contains(&n)
    }
}

#[derive(Default)]
struct Replay {
    view: View,
    counted: HashSet<(MessageKind, NodeId, BlockHash, View)>,
    votes: HashMap<(BlockHash, View), BTreeSet<NodeId>>,
    blocks: HashMap<BlockHash, Block>,
    children: HashMap<BlockHash, Vec<BlockHash>>,
    piv: HashSet<(BlockHash, View)>,
    future_piv: Vec<(BlockHash, View)>,
    prepared: HashSet<BlockHash>,
    precommit: HashSet<BlockHash>,
    commit: HashSet<BlockHash>,
}

impl Replay {
    fn learn(&mut self, b: &Block) {
        if self.blocks.insert(b.hash, b.clone()).is_none() && b.height > 0 {
            self.children.entry(b.parent_hash).or_default().push(b.hash);
        }
    }

    fn has_child_in(&self, b: BlockHash, set: &HashSet<BlockHash>) -> bool {
        self.children.get(&b).map_or(false, |cs| cs.iter().any(|c| set.contains(c)))
    }
}

struct FactSink<'a> {
    node: NodeId,
    honest: bool,
    step: u64,
    out: &'a mut Vec<StageFact>,
}

impl FactSink<'_> {
    fn emit(&mut self, block: &Block, stage: StageName, view: Option<View>) {
        self.out.push(StageFact {
            node: self.node,
            block: block.clone(),
            stage,
            view,
            first_step: self.step,
            honest: self.honest,
        });
    }
}

fn note_piv(r: &mut Replay, sink: &mut FactSink<'_>, b: BlockHash, v: View) {
    if v > r.view {
        r.future_piv.push((b, v));
        return;
    }
    if !r.piv.insert((b, v)) {
        return;
    }
    let block = r.blocks[&b].clone();
    sink.emit(&block, StageName::PrepareInView, Some(v));
    if r.prepared.insert(b) {
        sink.emit(&block, StageName::Prepare, None);
        let mut precommit_candidates = vec![b];
        if block.height > 0 {
            precommit_candidates.push(block.parent_hash);
        }
        for p in precommit_candidates {
            if r.prepared.contains(&p) && !r.precommit.contains(&p) && r.has_child_in(p, &r.prepared) {
                r.precommit.insert(p);
                let pb = r.blocks[&p].clone();
                sink.emit(&pb, StageName::Precommit, None);
                let mut commit_candidates = vec![p];
                if pb.height > 0 {
                    commit_candidates.push(pb.parent_hash);
                }
                for c in commit_candidates {
                    if r.precommit.contains(&c) && !r.commit.contains(&c) && r.has_child_in(c, &r.precommit) {
                        r.commit.insert(c);
                        let cb = r.blocks[&c].clone();
                        sink.emit(&cb, StageName::Commit, None);
                    }
                }
            }
        }
    }
}

/// Replays every node's counted messages and returns each stage fact with
/// the step at which it first held. Genesis facts come first.
pub fn extract_stage_facts(records: &[TraceRecord], ctx: &CheckContext) -> Vec<StageFact> {
    let genesis = Block::genesis();
    let quorum = ctx.quorum();
    let mut facts = Vec::new();
    let mut nodes: Vec<Replay> = (0..ctx.node_count)
        .map(|i| {
            let mut r = Replay { view: ctx.initial_view, ..Replay::default() };
            r.learn(&genesis);
            r.prepared.insert(genesis.hash);
            facts.push(StageFact {
                node: NodeId(i as u16),
                block: genesis.clone(),
                stage: StageName::Prepare,
                view: None,
                first_step: 0,
                honest: ctx.honest(NodeId(i as u16)),
            });
            r
        })
        .collect();

    for rec in records {
        let Some(r) = nodes.get_mut(rec.node.index()) else { continue };
        let mut sink = FactSink { node: rec.node, honest: ctx.honest(rec.node), step: rec.step, out: &mut facts };
        match rec.kind {
            RecordKind::ViewEntry => {
                if let Some(v) = rec.detail_u64("view") {
                    r.view = r.view.max(v);
                    let ready: Vec<_> = r.future_piv.iter().copied().filter(|(_, fv)| *fv <= r.view).collect();
                    r.future_piv.retain(|(_, fv)| *fv > r.view);
                    for (b, fv) in ready {
                        note_piv(r, &mut sink, b, fv);
                    }
                }
            }
            RecordKind::Process => {
                let Some(m) = &rec.msg else { continue };
                let evidence = match (m.kind, &m.certificate) {
                    (MessageKind::PrepareQC, Some(qc)) => qc.view,
                    _ => m.view,
                };
                if !r.counted.insert((m.kind, m.sender, m.block.hash, evidence)) {
                    continue;
                }
                r.learn(&m.block);
                for qc in [&m.parent_qc, &m.view_change_qc, &m.certificate].into_iter().flatten() {
                    r.learn(&qc.block);
                }
                match m.kind {
                    MessageKind::PrepareVote => {
                        let voters = r.votes.entry((m.block.hash, m.view)).or_default();
                        voters.insert(m.sender);
                        if voters.len() >= quorum {
                            note_piv(r, &mut sink, m.block.hash, m.view);
                        }
                    }
                    MessageKind::PrepareQC => note_piv(r, &mut sink, m.block.hash, evidence),
                    _ => {}
                }
            }
            _ => {}
        }
    }
    facts
}

fn honest_facts(facts: &[StageFact], stage: StageName) -> impl Iterator<Item = &StageFact> {
    facts.iter().filter(move |f| f.honest && f.stage == stage)
}

/// Same-height blocks grouped by `key`; one violation per extra block.
fn injectivity<'a, K: Ord>(
    facts: impl Iterator<Item = (K, &'a StageFact)>,
    property: Property,
    what: impl Fn(&K) -> String,
) -> Vec<Violation> {
    let mut groups: BTreeMap<K, Vec<&StageFact>> = BTreeMap::new();
    for (k, f) in facts {
        let g = groups.entry(k).or_default();
        if !g.iter().any(|x| x.block.hash == f.block.hash) {
            g.push(f);
        }
    }
    let mut out = Vec::new();
    for (k, g) in groups {
        for other in &g[1..] {
            out.push(
                Violation::new(
                    property,
                    format!(
                        "{}: {} at {} and {} at {}",
                        what(&k),
                        g[0].block.hash,
                        g[0].node,
                        other.block.hash,
                        other.node
                    ),
                )
                .fact(g[0])
                .fact(other),
            );
        }
    }
    out
}

/// Distinct blocks of equal height in prepare stage in the same view.
pub fn check_theorem1(facts: &[StageFact]) -> Vec<Violation> {
    injectivity(
        honest_facts(facts, StageName::PrepareInView).map(|f| ((f.view.unwrap_or(0), f.block.height), f)),
        Property::Theorem1,
        |(v, h)| format!("two blocks prepared at height {h} in view {v}"),
    )
}

/// Distinct blocks of equal height in precommit stage.
pub fn check_theorem2(facts: &[StageFact]) -> Vec<Violation> {
    injectivity(
        honest_facts(facts, StageName::Precommit).map(|f| (f.block.height, f)),
        Property::Theorem2,
        |h| format!("two blocks precommitted at height {h}"),
    )
}

/// Distinct blocks of equal height in commit stage. Every such height must
/// also carry a precommit violation.
pub fn check_theorem3(facts: &[StageFact]) -> Vec<Violation> {
    let mut out = injectivity(
        honest_facts(facts, StageName::Commit).map(|f| (f.block.height, f)),
        Property::Theorem3,
        |h| format!("two blocks committed at height {h}"),
    );
    let precommit_heights: BTreeSet<u64> = check_theorem2(facts)
        .iter()
        .filter_map(|v| facts.iter().find(|f| Some(&f.block.hash) == v.blocks.first()).map(|f| f.block.height))
        .collect();
    let unmatched: Vec<Violation> = out
        .iter()
        .filter(|v| {
            let h = facts.iter().find(|f| Some(&f.block.hash) == v.blocks.first()).map(|f| f.block.height);
            h.map_or(false, |h| !precommit_heights.contains(&h))
        })
        .map(|v| {
            let mut w = v.clone();
            w.explanation = format!("commit conflict without precommit conflict ({})", v.explanation);
            w
        })
        .collect();
    out.extend(unmatched);
    out
}

/// Every `ViewChangeQC(b, v)` aggregates a block of height `MaxHeight(v)`
/// or `MaxHeight(v) - 1`, with `MaxHeight(v)` taken over prepare facts in
/// views up to `v` that held when the certificate was sent.
pub fn check_lemma1(records: &[TraceRecord], facts: &[StageFact]) -> Vec<Violation> {
    let mut piv: Vec<&StageFact> = facts.iter().filter(|f| f.stage == StageName::PrepareInView).collect();
    piv.sort_by_key(|f| f.first_step);
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Send) {
        let Some(m) = &r.msg else { continue };
        if m.kind != MessageKind::ViewChangeQC {
            continue;
        }
        let v = m.view;
        let max = piv
            .iter()
            .take_while(|f| f.first_step <= r.step)
            .filter(|f| f.view.map_or(false, |fv| fv <= v))
            .map(|f| f.block.height)
            .max()
            .unwrap_or(0);
        let h = m.block.height;
        if h != max && h + 1 != max {
            out.push(
                Violation::new(
                    Property::Lemma1,
                    format!("ViewChangeQC for view {v} carries height {h}, MaxHeight is {max}"),
                )
                .record(r),
            );
        }
    }
    out
}

/// Prepare heights never decrease with the view; equal heights across
/// views pair the highest block of the earlier view with the lowest block
/// of the later one.
pub fn check_lemma3_monotonicity(facts: &[StageFact]) -> Vec<Violation> {
    // Per view: (min height fact, max height fact).
    let mut per_view: BTreeMap<View, (&StageFact, &StageFact)> = BTreeMap::new();
    let mut by_view_height: BTreeMap<(View, u64), Vec<&StageFact>> = BTreeMap::new();
    for f in honest_facts(facts, StageName::PrepareInView) {
        let v = f.view.unwrap_or(0);
        let e = per_view.entry(v).or_insert((f, f));
        if f.block.height < e.0.block.height {
            e.0 = f;
        }
        if f.block.height > e.1.block.height {
            e.1 = f;
        }
        let g = by_view_height.entry((v, f.block.height)).or_default();
        if !g.iter().any(|x| x.block.hash == f.block.hash) {
            g.push(f);
        }
    }
    let mut out = Vec::new();
    let views: Vec<View> = per_view.keys().copied().collect();
    // Monotonicity: the highest block of any earlier view must not exceed
    // the lowest block of a later view.
    let mut running_max: Option<&StageFact> = None;
    for &v in &views {
        let (lo, hi) = per_view[&v];
        if let Some(m) = running_max {
            if m.block.height > lo.block.height {
                out.push(
                    Violation::new(
                        Property::Lemma3,
                        format!(
                            "height {} prepared in view {} exceeds height {} prepared in later view {v}",
                            m.block.height,
                            m.view.unwrap_or(0),
                            lo.block.height
                        ),
                    )
                    .fact(m)
                    .fact(lo),
                );
            }
        }
        if running_max.map_or(true, |m| hi.block.height > m.block.height) {
            running_max = Some(hi);
        }
    }
    // Refinement on equal heights across views.
    for (i, &v) in views.iter().enumerate() {
        for &w in &views[i + 1..] {
            let (_, hi_v) = per_view[&v];
            let (lo_w, _) = per_view[&w];
            for (&(_, h), bs) in by_view_height.range((v, 0)..=(v, u64::MAX)) {
                let Some(later) = by_view_height.get(&(w, h)) else { continue };
                for b in bs {
                    for b2 in later {
                        if b.block.height != hi_v.block.height || b2.block.height != lo_w.block.height {
                            out.push(
                                Violation::new(
                                    Property::Lemma3,
                                    format!(
                                        "equal height {h} in views {v} and {w} is not highest-of-{v} / lowest-of-{w}"
                                    ),
                                )
                                .fact(b)
                                .fact(b2),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// Honest nodes never double-vote at a height within a view, propose out
/// of turn, over-propose, send two proposals for one slot, or vote for a
/// block whose parent they had not prepared.
pub fn check_honest_discipline(records: &[TraceRecord], facts: &[StageFact], ctx: &CheckContext) -> Vec<Violation> {
    let mut prepared_at: HashMap<(NodeId, BlockHash), u64> = HashMap::new();
    for f in facts.iter().filter(|f| f.stage == StageName::Prepare) {
        prepared_at.entry((f.node, f.block.hash)).or_insert(f.first_step);
    }
    let mut votes: HashMap<(NodeId, View, u64), (BlockHash, &TraceRecord)> = HashMap::new();
    let mut proposals: HashMap<(NodeId, View, u32), (BlockHash, &TraceRecord)> = HashMap::new();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Send && ctx.honest(r.node)) {
        let Some(m) = &r.msg else { continue };
        let b = &m.block;
        match m.kind {
            MessageKind::PrepareVote => {
                match votes.get(&(r.node, m.view, b.height)) {
                    Some((other, first)) if *other != b.hash => out.push(
                        Violation::new(
                            Property::HonestEquivocation,
                            format!("{} voted for two blocks at height {} in view {}", r.node, b.height, m.view),
                        )
                        .record(first)
                        .record(r),
                    ),
                    Some(_) => {}
                    None => {
                        votes.insert((r.node, m.view, b.height), (b.hash, r));
                    }
                }
                let justified = prepared_at.get(&(r.node, b.parent_hash)).map_or(false, |&s| s <= r.step);
                if !justified {
                    out.push(
                        Violation::new(
                            Property::HonestEquivocation,
                            format!("{} voted for {} without its parent in prepare stage", r.node, b.hash),
                        )
                        .record(r),
                    );
                }
            }
            MessageKind::PrepareBlock => {
                if ctx.proposer(m.view) != r.node || b.proposer != r.node {
                    out.push(
                        Violation::new(
                            Property::HonestEquivocation,
                            format!("{} proposed out of turn in view {}", r.node, m.view),
                        )
                        .record(r),
                    );
                }
                if b.index_in_view == 0 || b.index_in_view > ctx.blocks_per_view {
                    out.push(
                        Violation::new(
                            Property::HonestEquivocation,
                            format!("{} proposed block index {} in view {}", r.node, b.index_in_view, m.view),
                        )
                        .record(r),
                    );
                }
                match proposals.get(&(r.node, m.view, b.index_in_view)) {
                    Some((other, first)) if *other != b.hash => out.push(
                        Violation::new(
                            Property::HonestEquivocation,
                            format!("{} sent two proposals for slot {} of view {}", r.node, b.index_in_view, m.view),
                        )
                        .record(first)
                        .record(r),
                    ),
                    Some(_) => {}
                    None => {
                        proposals.insert((r.node, m.view, b.index_in_view), (b.hash, r));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Every signer of a sent certificate previously sent the matching vote
/// (prepare certificates) or view-change contribution.
pub fn check_certificates(records: &[TraceRecord]) -> Vec<Violation> {
    let genesis = Block::genesis().hash;
    let mut sent_votes: HashSet<(NodeId, BlockHash, View)> = HashSet::new();
    let mut sent_vc: HashSet<(NodeId, View)> = HashSet::new();
    let mut checked: HashSet<(QcKind, BlockHash, View, Vec<NodeId>)> = HashSet::new();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Send) {
        let Some(m) = &r.msg else { continue };
        for qc in [&m.parent_qc, &m.view_change_qc, &m.certificate].into_iter().flatten() {
            if qc.block.hash == genesis && qc.kind == QcKind::Prepare {
                continue;
            }
            let key = (qc.kind, qc.block.hash, qc.view, qc.signers.iter().copied().collect::<Vec<_>>());
            if checked.contains(&key) {
                continue;
            }
            let missing: Vec<NodeId> = qc
                .signers
                .iter()
                .copied()
                .filter(|s| match qc.kind {
                    QcKind::Prepare => !sent_votes.contains(&(*s, qc.block.hash, qc.view)),
                    QcKind::ViewChange => !sent_vc.contains(&(*s, qc.view)),
                })
                .collect();
            if missing.is_empty() {
                checked.insert(key);
            } else {
                let names: Vec<String> = missing.iter().map(|n| n.to_string()).collect();
                out.push(
                    Violation::new(
                        Property::CertificateForgery,
                        format!("certificate for {} in view {} names non-signers {}", qc.block.hash, qc.view, names.join(",")),
                    )
                    .record(r),
                );
            }
        }
        match m.kind {
            MessageKind::PrepareVote => {
                sent_votes.insert((r.node, m.block.hash, m.view));
            }
            MessageKind::ViewChange => {
                sent_vc.insert((r.node, m.view));
            }
            MessageKind::PrepareQC => {
                if let Some(qc) = &m.certificate {
                    if m.block.view_produced == qc.view {
                        sent_vc.insert((r.node, qc.view));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Node-reported stage records must agree with the rebuilt facts.
pub fn check_stage_agreement(records: &[TraceRecord], facts: &[StageFact]) -> Vec<Violation> {
    type Key = (NodeId, BlockHash, StageName, Option<View>);
    let derived: BTreeSet<Key> = facts.iter().map(|f| (f.node, f.block.hash, f.stage, f.view)).collect();
    let mut reported: BTreeMap<Key, &TraceRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Stage) {
        let block = r.detail_str("block").and_then(|s| s.parse::<BlockHash>().ok());
        let stage = r.detail_str("stage").and_then(StageName::parse);
        let (Some(block), Some(stage)) = (block, stage) else {
            return vec![Violation::new(Property::TraceIntegrity, "malformed stage record".into()).record(r)];
        };
        let view = if stage == StageName::PrepareInView { r.detail_u64("view") } else { None };
        reported.entry((r.node, block, stage, view)).or_insert(r);
    }
    let mut out = Vec::new();
    for (k, r) in &reported {
        if !derived.contains(k) {
            out.push(
                Violation::new(Property::StageMismatch, format!("{} reported {} for {} but replay disagrees", k.0, k.2, k.1))
                    .record(r),
            );
        }
    }
    for f in facts {
        let k = (f.node, f.block.hash, f.stage, f.view);
        if !reported.contains_key(&k) {
            out.push(
                Violation::new(Property::StageMismatch, format!("replay derives {} for {} at {} but node never reported it", f.stage, f.block.hash, f.node))
                    .fact(f),
            );
        }
    }
    out
}

/// Causality and completeness: every delivery or drop refers to an earlier
/// send of the same message, and every send has exactly one delivery or
/// drop per roster member.
pub fn check_trace_shape(records: &[TraceRecord], ctx: &CheckContext) -> Vec<Violation> {
    let mut outcomes: BTreeMap<u64, usize> = BTreeMap::new();
    let mut out = Vec::new();
    let mut last_step = None;
    for r in records {
        if last_step.map_or(false, |s| r.step <= s) {
            out.push(Violation::new(Property::TraceIntegrity, "steps not strictly increasing".into()).record(r));
        }
        last_step = Some(r.step);
        match r.kind {
            RecordKind::Send => {
                outcomes.insert(r.step, 0);
            }
            RecordKind::Deliver | RecordKind::Drop => {
                let send = r.detail_u64("send_step");
                let origin = send.and_then(|s| records.get(s as usize)).filter(|s| {
                    s.kind == RecordKind::Send && s.msg == r.msg && s.time <= r.time
                });
                match origin {
                    Some(o) => *outcomes.entry(o.step).or_default() += 1,
                    None => out.push(
                        Violation::new(Property::TraceIntegrity, "delivery without matching send".into()).record(r),
                    ),
                }
            }
            _ => {}
        }
    }
    for (step, n) in outcomes {
        if n != ctx.node_count {
            let mut v = Violation::new(
                Property::TraceIntegrity,
                format!("send at step {step} has {n} deliveries or drops, expected {}", ctx.node_count),
            );
            v.witnesses.push(step);
            out.push(v);
        }
    }
    out
}

/// Outcome of enumerating every pair of `threshold`-sized subsets of a
/// `k`-node roster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QuorumOracle {
    pub k: usize,
    pub threshold: usize,
    pub required: usize,
    pub min_intersection: usize,
    pub pairs: u64,
    pub holds: bool,
}

/// Brute-force check that any two `threshold`-subsets of `k` nodes share
/// at least `f + 1` members, `f = floor((k - 1) / 3)`.
pub fn quorum_intersection_oracle(k: usize, threshold: usize) -> QuorumOracle {
    assert!((1..=12).contains(&k), "brute force is limited to 1..=12 nodes");
    assert!(threshold <= k);
    let required = (k - 1) / 3 + 1;
    let subsets: Vec<u32> = (0u32..(1 << k)).filter(|s| s.count_ones() as usize == threshold).collect();
    let mut min_intersection = usize::MAX;
    let mut pairs = 0u64;
    for (i, &a) in subsets.iter().enumerate() {
        for &b in &subsets[i..] {
            pairs += 1;
            min_intersection = min_intersection.min((a & b).count_ones() as usize);
        }
    }
    QuorumOracle {
        k,
        threshold,
        required,
        min_intersection,
        pairs,
        holds: min_intersection >= required,
    }
}

/// All checks over one trace.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub facts: usize,
    pub view_change_qcs: usize,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn count(&self, p: Property) -> usize {
        self.violations.iter().filter(|v| v.property == p).count()
    }

    pub fn counts(&self) -> BTreeMap<Property, usize> {
        let mut m = BTreeMap::new();
        for v in &self.violations {
            *m.entry(v.property).or_default() += 1;
        }
        m
    }

    /// Violations whose property is not in `expected`.
    pub fn unexpected<'a>(&'a self, expected: &'a BTreeSet<Property>) -> impl Iterator<Item = &'a Violation> {
        self.violations.iter().filter(move |v| !expected.contains(&v.property))
    }

    /// One JSON object per violation, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for v in &self.violations {
            s.push_str(&serde_json::to_string(v).expect("violations serialize"));
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} stage facts, {} view-change certificates\n", self.facts, self.view_change_qcs);
        let counts = self.counts();
        for p in Property::ALL {
            let n = counts.get(&p).copied().unwrap_or(0);
            s.push_str(&format!("  {:<20} {}\n", p.name(), if n == 0 { "ok".to_string() } else { format!("{n} violation(s)") }));
        }
        s
    }
}

pub fn check_all(records: &[TraceRecord], ctx: &CheckContext) -> CheckReport {
    let facts = extract_stage_facts(records, ctx);
    let mut violations = Vec::new();
    violations.extend(check_theorem1(&facts));
    violations.extend(check_theorem2(&facts));
    violations.extend(check_theorem3(&facts));
    violations.extend(check_lemma1(records, &facts));
    violations.extend(check_lemma3_monotonicity(&facts));
    violations.extend(check_honest_discipline(records, &facts, ctx));
    violations.extend(check_certificates(records));
    violations.extend(check_stage_agreement(records, &facts));
    violations.extend(check_trace_shape(records, ctx));
    let view_change_qcs = records
        .iter()
        .filter(|r| r.kind == RecordKind::Send && r.msg.as_ref().map_or(false, |m| m.kind == MessageKind::ViewChangeQC))
        .count();
    CheckReport { facts: facts.len(), view_change_qcs, violations }
}
