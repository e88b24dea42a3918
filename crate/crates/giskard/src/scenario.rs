//! Scenario files, embedded expectations, the on-disk scenario library and
//! the multi-seed suites.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{StrategyKind, TargetViews};
use crate::checker::{check_all, extract_stage_facts, CheckContext, CheckReport, Property, StageFact};
use crate::netsim::{
    self, ByzantineAssignment, DeliveryRule, NetworkModel, Partition, Profile, RuleAction, SimConfig, SimError,
};
use crate::protocol::{max_faults, Block, DEFAULT_BLOCKS_PER_VIEW, BlockHash, MessageKind, Mutations, NodeId, ProtocolParams, View};
use crate::state::StageName;
use crate::trace::{RecordKind, TraceFile, TraceRecord};

/// Environment variable overriding the scenario library root.
pub const SCENARIOS_ENV: &str = "GISKARD_SCENARIOS";
/// Environment variable for the default output directory.
pub const OUT_DIR_ENV: &str = "GISKARD_OUT_DIR";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {key}: {message}")]
    Invalid { path: String, key: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("unknown suite {0:?} (expected safety, lemmas, papers-examples or negative-controls)")]
    UnknownSuite(String),
}

/// A node written as a letter (`"D"`), `n<index>` or a bare index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef(pub NodeId);

impl<'de> Deserialize<'de> for NodeRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u16),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(NodeRef(NodeId(i))),
            Raw::Name(s) => s.parse().map(NodeRef).map_err(de::Error::custom),
        }
    }
}

impl Serialize for NodeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub k: usize,
    #[serde(default = "default_blocks_per_view")]
    pub blocks_per_view: u32,
    pub timeout_per_view: u64,
    #[serde(default)]
    pub initial_view: View,
    #[serde(default)]
    pub mutations: Mutations,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub views_to_run: u64,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub max_time: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub start: u64,
    pub end: u64,
    pub side: Vec<NodeRef>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSection {
    #[serde(default)]
    pub from: Option<NodeRef>,
    #[serde(default)]
    pub to: Option<NodeRef>,
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub view: Option<View>,
    #[serde(default)]
    pub index: Option<u32>,
    #[serde(default)]
    pub height: Option<u64>,
    #[serde(default)]
    pub tag: Option<u32>,
    pub action: RuleAction,
    #[serde(default)]
    pub delay: u64,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub profile: Profile,
    pub base_delay: Option<u64>,
    pub jitter: u64,
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub partitions: Vec<PartitionSection>,
    pub rules: Vec<RuleSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSection {
    pub node: NodeRef,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub target_views: TargetViews,
}

/// Picks one block out of a trace: `"genesis"` or a table of
/// `view`, `index`, optional `tag` and `proposer`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BlockSelector {
    Genesis,
    At { view: View, index: u32, tag: u32, proposer: Option<NodeRef> },
}

impl<'de> Deserialize<'de> for BlockSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct At {
            view: View,
            index: u32,
            #[serde(default)]
            tag: u32,
            #[serde(default)]
            proposer: Option<NodeRef>,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            At(At),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "genesis" => Ok(BlockSelector::Genesis),
            Raw::Word(w) => Err(de::Error::custom(format!("unknown block selector {w:?}"))),
            Raw::At(a) => Ok(BlockSelector::At { view: a.view, index: a.index, tag: a.tag, proposer: a.proposer }),
        }
    }
}

impl fmt::Display for BlockSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSelector::Genesis => write!(f, "genesis"),
            BlockSelector::At { view, index, tag, proposer } => {
                write!(f, "view {view} block {index}")?;
                if *tag != 0 {
                    write!(f, " tag {tag}")?;
                }
                if let Some(p) = proposer {
                    write!(f, " by {}", p.0)?;
                }
                Ok(())
            }
        }
    }
}

/// An assertion embedded in a scenario file, evaluated against the trace.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// A stage fact does (or does not) hold for a node by run end.
    Stage {
        node: NodeRef,
        block: BlockSelector,
        stage: String,
        #[serde(default)]
        view: Option<View>,
        #[serde(default = "yes")]
        holds: bool,
    },
    /// Number of sent messages of a kind, optionally per node and view.
    Sent {
        #[serde(default)]
        node: Option<NodeRef>,
        kind: String,
        #[serde(default)]
        view: Option<View>,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    /// The node entered `view` through the given kind of view change.
    ViewEntry { node: NodeRef, view: View, mode: String },
    /// Last view reached by each listed node (all nodes by default).
    FinalView {
        #[serde(default)]
        nodes: Vec<NodeRef>,
        #[serde(default)]
        min: Option<View>,
        #[serde(default)]
        equals: Option<View>,
    },
    Parent { block: BlockSelector, parent: BlockSelector },
    Height { block: BlockSelector, height: u64 },
    /// No honest node has a block in prepare stage in this view.
    NoPrepareInView { view: View },
    /// Every block proposed in `view` reaches commit on the listed nodes
    /// (all honest nodes by default).
    Committed {
        view: View,
        #[serde(default)]
        nodes: Vec<NodeRef>,
    },
    /// A `ViewChangeQC` for `view` aggregating `block` was sent (by `node`
    /// if given).
    ViewChangeQc {
        view: View,
        block: BlockSelector,
        #[serde(default)]
        node: Option<NodeRef>,
    },
    /// Checker violation count for a property.
    Checker {
        property: String,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
}

fn default_blocks_per_view() -> u32 {
    DEFAULT_BLOCKS_PER_VIEW
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Require {
    /// Every property in `expect_violations` must be observed.
    #[default]
    All,
    /// At least one of them must be observed.
    Any,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub negative_control: bool,
    #[serde(default)]
    pub expect_violations: Vec<String>,
    #[serde(default)]
    pub allow_violations: Vec<String>,
    #[serde(default)]
    pub require: Require,
    pub protocol: ProtocolSection,
    pub run: RunSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSection>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
    #[serde(skip)]
    pub source: String,
}

fn parse_properties(path: &str, key: &str, names: &[String]) -> Result<BTreeSet<Property>, ScenarioError> {
    names
        .iter()
        .map(|n| {
            Property::parse(n).ok_or_else(|| ScenarioError::Invalid {
                path: path.into(),
                key: key.into(),
                message: format!("unknown property {n:?}"),
            })
        })
        .collect()
}

fn parse_kind(path: &str, key: &str, s: &str) -> Result<MessageKind, ScenarioError> {
    s.parse().map_err(|m: String| ScenarioError::Invalid { path: path.into(), key: key.into(), message: m })
}

impl Scenario {
    pub fn parse(text: &str, source: &str) -> Result<Scenario, ScenarioError> {
        let mut s: Scenario = toml::from_str(text)
            .map_err(|e| ScenarioError::Parse { path: source.into(), message: e.to_string() })?;
        s.source = source.to_string();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), source: e })?;
        Scenario::parse(&text, &path.display().to_string())
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid { path: self.source.clone(), key: key.into(), message: message.into() }
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        self.expected()?;
        self.allowed()?;
        let f = max_faults(self.protocol.k);
        if self.byzantine.len() > f && !self.negative_control {
            return Err(self.invalid(
                "byzantine",
                format!("{} Byzantine nodes exceed f = {f}; mark negative_control = true", self.byzantine.len()),
            ));
        }
        if self.negative_control && self.expect_violations.is_empty() {
            return Err(self.invalid("expect_violations", "negative controls must declare expected violations"));
        }
        for (i, r) in self.network.rules.iter().enumerate() {
            if let Some(k) = &r.kind {
                parse_kind(&self.source, &format!("network.rules[{i}].kind"), k)?;
            }
        }
        for (i, e) in self.expect.iter().enumerate() {
            let key = format!("expect[{i}]");
            match e {
                Expectation::Stage { stage, .. } => {
                    StageName::parse(stage).ok_or_else(|| self.invalid(&format!("{key}.stage"), format!("unknown stage {stage:?}")))?;
                }
                Expectation::Sent { kind, .. } => {
                    parse_kind(&self.source, &format!("{key}.kind"), kind)?;
                }
                Expectation::ViewEntry { mode, .. } => {
                    if !["initial", "normal", "abnormal"].contains(&mode.as_str()) {
                        return Err(self.invalid(&format!("{key}.mode"), format!("unknown mode {mode:?}")));
                    }
                }
                Expectation::Checker { property, .. } => {
                    Property::parse(property)
                        .ok_or_else(|| self.invalid(&format!("{key}.property"), format!("unknown property {property:?}")))?;
                }
                _ => {}
            }
        }
        self.sim_config().validate().map_err(|e| self.invalid("config", e.to_string()))?;
        Ok(())
    }

    pub fn expected(&self) -> Result<BTreeSet<Property>, ScenarioError> {
        parse_properties(&self.source, "expect_violations", &self.expect_violations)
    }

    pub fn allowed(&self) -> Result<BTreeSet<Property>, ScenarioError> {
        parse_properties(&self.source, "allow_violations", &self.allow_violations)
    }

    pub fn seed(&self) -> u64 {
        self.run.seed
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut params = ProtocolParams::new(self.protocol.k, self.protocol.blocks_per_view, self.protocol.timeout_per_view);
        params.mutations = self.protocol.mutations;
        let mut cfg = SimConfig::new(params, self.run.views_to_run);
        cfg.initial_view = self.protocol.initial_view;
        if let Some(s) = self.run.max_steps {
            cfg.max_steps = s;
        }
        if let Some(t) = self.run.max_time {
            cfg.max_time = t;
        }
        let n = &self.network;
        cfg.network = NetworkModel {
            profile: n.profile,
            base_delay: n.base_delay.unwrap_or(1),
            jitter: n.jitter,
            drop_probability: n.drop_probability,
            duplicate_probability: n.duplicate_probability,
            partitions: n
                .partitions
                .iter()
                .map(|p| Partition { start: p.start, end: p.end, side: p.side.iter().map(|r| r.0).collect() })
                .collect(),
            rules: n
                .rules
                .iter()
                .map(|r| DeliveryRule {
                    from: r.from.map(|x| x.0),
                    to: r.to.map(|x| x.0),
                    kind: r.kind.as_deref().and_then(|k| k.parse().ok()),
                    view: r.view,
                    index: r.index,
                    height: r.height,
                    tag: r.tag,
                    action: r.action,
                    delay: r.delay,
                })
                .collect(),
        };
        cfg.byzantine = self
            .byzantine
            .iter()
            .map(|b| ByzantineAssignment { node: b.node.0, strategy: b.strategy, target_views: b.target_views.clone() })
            .collect();
        cfg
    }

    /// Runs the scenario with `seed` and evaluates everything it declares.
    pub fn execute(&self, seed: u64) -> Result<ScenarioOutcome, ScenarioError> {
        let config = self.sim_config();
        let trace = netsim::run(&config, seed)?;
        Ok(self.evaluate(&config, seed, trace))
    }

    /// Evaluates expectations and checker results over an existing trace.
    pub fn evaluate(&self, config: &SimConfig, seed: u64, trace: TraceFile) -> ScenarioOutcome {
        let ctx = CheckContext::from_config(config);
        let report = check_all(&trace.records, &ctx);
        let facts = extract_stage_facts(&trace.records, &ctx);
        let view = TraceView::new(&trace.records, &facts, config);
        let expectations: Vec<ExpectationResult> = self.expect.iter().map(|e| view.evaluate(e, &report)).collect();
        let expected = self.expected().unwrap_or_default();
        let allowed = self.allowed().unwrap_or_default();
        let tolerated: BTreeSet<Property> = expected.union(&allowed).copied().collect();
        let unexpected: Vec<Property> = report
            .unexpected(&tolerated)
            .map(|v| v.property)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let observed: BTreeSet<Property> = report.violations.iter().map(|v| v.property).collect();
        let expectation_met = match self.require {
            Require::All => expected.iter().all(|p| observed.contains(p)),
            Require::Any => expected.is_empty() || expected.iter().any(|p| observed.contains(p)),
        };
        let passed = unexpected.is_empty() && expectation_met && expectations.iter().all(|e| e.passed);
        ScenarioOutcome {
            name: self.name.clone(),
            seed,
            passed,
            expectation_met,
            unexpected,
            expectations,
            report,
            trace,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpectationResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    /// Declared violations were observed (trivially true when none are declared).
    pub expectation_met: bool,
    pub unexpected: Vec<Property>,
    pub expectations: Vec<ExpectationResult>,
    pub report: CheckReport,
    pub trace: TraceFile,
}

/// Indexes over one trace used to evaluate expectations.
struct TraceView<'a> {
    records: &'a [TraceRecord],
    facts: &'a [StageFact],
    config: &'a SimConfig,
    blocks: Vec<&'a Block>,
}

impl<'a> TraceView<'a> {
    fn new(records: &'a [TraceRecord], facts: &'a [StageFact], config: &'a SimConfig) -> Self {
        let mut seen = BTreeSet::new();
        let mut blocks = Vec::new();
        for r in records.iter().filter(|r| r.kind == RecordKind::Send) {
            if let Some(m) = &r.msg {
                if m.kind == MessageKind::PrepareBlock && seen.insert(m.block.hash) {
                    blocks.push(&m.block);
                }
            }
        }
        TraceView { records, facts, config, blocks }
    }

    fn resolve(&self, sel: &BlockSelector) -> Option<Block> {
        match sel {
            BlockSelector::Genesis => Some(Block::genesis()),
            BlockSelector::At { view, index, tag, proposer } => self
                .blocks
                .iter()
                .find(|b| {
                    b.view_produced == *view
                        && b.index_in_view == *index
                        && b.payload_tag == *tag
                        && proposer.map_or(true, |p| p.0 == b.proposer)
                })
                .map(|b| (*b).clone()),
        }
    }

    fn has_fact(&self, node: NodeId, block: BlockHash, stage: StageName, view: Option<View>) -> bool {
        self.facts.iter().any(|f| {
            f.node == node && f.block.hash == block && f.stage == stage && (view.is_none() || f.view == view)
        })
    }

    fn final_view(&self, node: NodeId) -> View {
        self.records
            .iter()
            .filter(|r| r.kind == RecordKind::ViewEntry && r.node == node)
            .filter_map(|r| r.detail_u64("view"))
            .max()
            .unwrap_or(self.config.initial_view)
    }

    fn evaluate(&self, e: &Expectation, report: &CheckReport) -> ExpectationResult {
        let (description, outcome) = self.evaluate_inner(e, report);
        match outcome {
            Ok(detail) => ExpectationResult { description, passed: true, detail },
            Err(detail) => ExpectationResult { description, passed: false, detail },
        }
    }

    fn evaluate_inner(&self, e: &Expectation, report: &CheckReport) -> (String, Result<String, String>) {
        let unresolved = |sel: &BlockSelector| Err(format!("no block matches {sel}"));
        match e {
            Expectation::Stage { node, block, stage, view, holds } => {
                let stage_name = StageName::parse(stage).unwrap_or(StageName::Prepare);
                let mut d = format!("{} {} {}", node.0, if *holds { "has" } else { "lacks" }, stage_name);
                if let Some(v) = view {
                    d.push_str(&format!("({v})"));
                }
                d.push_str(&format!(" for {block}"));
                let Some(b) = self.resolve(block) else { return (d, unresolved(block)) };
                let has = self.has_fact(node.0, b.hash, stage_name, *view);
                let res = if has == *holds { Ok(format!("{}", b.hash)) } else { Err(format!("fact for {} is {has}", b.hash)) };
                (d, res)
            }
            Expectation::Sent { node, kind, view, count, min, max } => {
                let k: MessageKind = kind.parse().unwrap_or(MessageKind::PrepareBlock);
                let n = self
                    .records
                    .iter()
                    .filter(|r| r.kind == RecordKind::Send)
                    .filter(|r| node.map_or(true, |x| x.0 == r.node))
                    .filter(|r| {
                        r.msg.as_ref().map_or(false, |m| m.kind == k && view.map_or(true, |v| v == m.view))
                    })
                    .count();
                let mut d = format!("sent {k}");
                if let Some(x) = node {
                    d.push_str(&format!(" by {}", x.0));
                }
                if let Some(v) = view {
                    d.push_str(&format!(" in view {v}"));
                }
                let ok = count.map_or(true, |c| n == c) && min.map_or(true, |m| n >= m) && max.map_or(true, |m| n <= m);
                (d, if ok { Ok(format!("{n}")) } else { Err(format!("observed {n}")) })
            }
            Expectation::ViewEntry { node, view, mode } => {
                let d = format!("{} entered view {view} ({mode})", node.0);
                let found = self.records.iter().find(|r| {
                    r.kind == RecordKind::ViewEntry && r.node == node.0 && r.detail_u64("view") == Some(*view)
                });
                let res = match found {
                    Some(r) if r.detail_str("mode") == Some(mode.as_str()) => Ok(format!("step {}", r.step)),
                    Some(r) => Err(format!("entered via {}", r.detail_str("mode").unwrap_or("?"))),
                    None => Err("never entered".into()),
                };
                (d, res)
            }
            Expectation::FinalView { nodes, min, equals } => {
                let ids: Vec<NodeId> = if nodes.is_empty() {
                    (0..self.config.protocol.node_count).map(|i| NodeId(i as u16)).collect()
                } else {
                    nodes.iter().map(|n| n.0).collect()
                };
                let views: Vec<View> = ids.iter().map(|&n| self.final_view(n)).collect();
                let ok = views.iter().all(|&v| min.map_or(true, |m| v >= m) && equals.map_or(true, |x| v == x));
                let d = format!("final views (min {min:?}, equals {equals:?})");
                (d, if ok { Ok(format!("{views:?}")) } else { Err(format!("{views:?}")) })
            }
            Expectation::Parent { block, parent } => {
                let d = format!("parent of {block} is {parent}");
                let (Some(b), Some(p)) = (self.resolve(block), self.resolve(parent)) else {
                    return (d, Err("unresolved block".into()));
                };
                (d, if b.parent_hash == p.hash { Ok(format!("{}", p.hash)) } else { Err(format!("parent is {}", b.parent_hash)) })
            }
            Expectation::Height { block, height } => {
                let d = format!("height of {block} is {height}");
                let Some(b) = self.resolve(block) else { return (d, unresolved(block)) };
                (d, if b.height == *height { Ok(String::new()) } else { Err(format!("height is {}", b.height)) })
            }
            Expectation::NoPrepareInView { view } => {
                let d = format!("no block prepared in view {view}");
                let hits: Vec<&StageFact> = self
                    .facts
                    .iter()
                    .filter(|f| f.honest && f.stage == StageName::PrepareInView && f.view == Some(*view))
                    .collect();
                (d, if hits.is_empty() { Ok(String::new()) } else { Err(format!("{} facts", hits.len())) })
            }
            Expectation::Committed { view, nodes } => {
                let ids: Vec<NodeId> = if nodes.is_empty() {
                    (0..self.config.protocol.node_count)
                        .map(|i| NodeId(i as u16))
                        .filter(|n| !self.config.is_byzantine(*n))
                        .collect()
                } else {
                    nodes.iter().map(|n| n.0).collect()
                };
                let d = format!("every block of view {view} committed");
                let blocks: Vec<&&Block> = self.blocks.iter().filter(|b| b.view_produced == *view).collect();
                if blocks.is_empty() {
                    return (d, Err("no blocks proposed".into()));
                }
                let missing: Vec<String> = blocks
                    .iter()
                    .flat_map(|b| ids.iter().map(move |&n| (n, b)))
                    .filter(|(n, b)| !self.has_fact(*n, b.hash, StageName::Commit, None))
                    .map(|(n, b)| format!("{n}:{}", b.index_in_view))
                    .collect();
                (d, if missing.is_empty() { Ok(format!("{} blocks", blocks.len())) } else { Err(format!("missing {}", missing.join(" "))) })
            }
            Expectation::ViewChangeQc { view, block, node } => {
                let mut d = format!("ViewChangeQC for view {view} aggregates {block}");
                if let Some(n) = node {
                    d.push_str(&format!(" at {}", n.0));
                }
                let Some(b) = self.resolve(block) else { return (d, unresolved(block)) };
                let sent: BTreeSet<BlockHash> = self
                    .records
                    .iter()
                    .filter(|r| r.kind == RecordKind::Send && node.map_or(true, |n| n.0 == r.node))
                    .filter_map(|r| r.msg.as_ref())
                    .filter(|m| m.kind == MessageKind::ViewChangeQC && m.view == *view)
                    .map(|m| m.block.hash)
                    .collect();
                let res = if sent.contains(&b.hash) {
                    Ok(format!("{}", b.hash))
                } else {
                    Err(format!("aggregated {:?}", sent))
                };
                (d, res)
            }
            Expectation::Checker { property, min, max } => {
                let p = Property::parse(property).unwrap_or(Property::TraceIntegrity);
                let n = report.count(p);
                let d = format!("checker {p} count (min {min:?}, max {max:?})");
                let ok = min.map_or(true, |m| n >= m) && max.map_or(true, |m| n <= m);
                (d, if ok { Ok(format!("{n}")) } else { Err(format!("observed {n}")) })
            }
        }
    }
}

// ---- library and suites ----

pub fn scenario_root() -> PathBuf {
    std::env::var_os(SCENARIOS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios"))
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("giskard-out"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Safety,
    Lemmas,
    PapersExamples,
    NegativeControls,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Safety, Suite::Lemmas, Suite::PapersExamples, Suite::NegativeControls];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Safety => "safety",
            Suite::Lemmas => "lemmas",
            Suite::PapersExamples => "papers-examples",
            Suite::NegativeControls => "negative-controls",
        }
    }

    pub fn parse(s: &str) -> Result<Suite, ScenarioError> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| ScenarioError::UnknownSuite(s.into()))
    }

    pub fn directory(self) -> &'static str {
        match self {
            Suite::Safety => "safety",
            Suite::Lemmas => "lemmas",
            Suite::PapersExamples => "examples",
            Suite::NegativeControls => "negative",
        }
    }

    /// Scripted suites run each scenario once with its own seed.
    pub fn is_seeded(self) -> bool {
        matches!(self, Suite::Safety | Suite::Lemmas)
    }
}

/// Loads every `.toml` scenario in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let entries = fs::read_dir(dir).map_err(|e| ScenarioError::Io { path: dir.display().to_string(), source: e })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

pub fn load_suite(suite: Suite) -> Result<Vec<Scenario>, ScenarioError> {
    load_dir(&scenario_root().join(suite.directory()))
}

/// Finds a library scenario by name across all suite directories.
pub fn find_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    for suite in Suite::ALL {
        let path = scenario_root().join(suite.directory()).join(format!("{name}.toml"));
        if path.exists() {
            return Scenario::load(&path);
        }
    }
    Err(ScenarioError::Invalid { path: scenario_root().display().to_string(), key: "name".into(), message: format!("no scenario named {name:?}") })
}

/// One (scenario, seed) result kept by a suite run; traces are dropped.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub violations: BTreeMap<Property, usize>,
    pub view_change_qcs: usize,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub runs: Vec<RunSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.passed)
    }

    pub fn total(&self, p: Property) -> usize {
        self.runs.iter().map(|r| r.violations.get(&p).copied().unwrap_or(0)).sum()
    }

    /// Per-scenario pass counts and violation totals.
    pub fn matrix(&self) -> String {
        let mut rows: BTreeMap<&str, (usize, usize, BTreeMap<Property, usize>, usize)> = BTreeMap::new();
        for r in &self.runs {
            let row = rows.entry(&r.scenario).or_default();
            row.0 += 1;
            if r.passed {
                row.1 += 1;
            }
            for (p, n) in &r.violations {
                *row.2.entry(*p).or_default() += n;
            }
            row.3 += r.view_change_qcs;
        }
        let mut s = format!("suite {}\n", self.suite);
        s.push_str(&format!("{:<36} {:>6} {:>6} {:>7}  violations\n", "scenario", "runs", "pass", "vcqc"));
        for (name, (runs, pass, v, vc)) in rows {
            let vs: Vec<String> = v.iter().map(|(p, n)| format!("{p}={n}")).collect();
            s.push_str(&format!(
                "{:<36} {:>6} {:>6} {:>7}  {}\n",
                name,
                runs,
                pass,
                vc,
                if vs.is_empty() { "-".to_string() } else { vs.join(" ") }
            ));
        }
        s.push_str(if self.passed() { "result: PASS\n" } else { "result: FAIL\n" });
        s
    }
}

fn summarize(o: &ScenarioOutcome) -> RunSummary {
    let mut failures: Vec<String> = o
        .expectations
        .iter()
        .filter(|e| !e.passed)
        .map(|e| format!("{}: {}", e.description, e.detail))
        .collect();
    if !o.unexpected.is_empty() {
        let names: Vec<&str> = o.unexpected.iter().map(|p| p.name()).collect();
        failures.push(format!("unexpected violations: {}", names.join(", ")));
    }
    if !o.expectation_met {
        failures.push("declared violations not observed".into());
    }
    RunSummary {
        scenario: o.name.clone(),
        seed: o.seed,
        passed: o.passed,
        violations: o.report.counts(),
        view_change_qcs: o.report.view_change_qcs,
        failures,
    }
}

/// Runs scenarios over seeds `base..base + seeds` (seeded suites) or once
/// each, in parallel on up to `jobs` threads. Results are sorted by
/// (scenario, seed).
pub fn run_scenarios(name: &str, scenarios: &[Scenario], seeded: bool, seeds: u64, jobs: usize) -> Result<SuiteReport, ScenarioError> {
    let mut work: Vec<(&Scenario, u64)> = Vec::new();
    for s in scenarios {
        if seeded {
            work.extend((0..seeds).map(|i| (s, s.seed() + i)));
        } else {
            work.push((s, s.seed()));
        }
    }
    let exec = || -> Result<Vec<RunSummary>, ScenarioError> {
        work.par_iter().map(|(s, seed)| s.execute(*seed).map(|o| summarize(&o))).collect()
    };
    let mut runs = if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ScenarioError::Parse { path: "jobs".into(), message: e.to_string() })?
            .install(exec)?
    } else {
        exec()?
    };
    runs.sort_by(|a, b| (&a.scenario, a.seed).cmp(&(&b.scenario, b.seed)));
    Ok(SuiteReport { suite: name.to_string(), runs })
}

pub fn run_suite(suite: Suite, seeds: u64, jobs: usize) -> Result<SuiteReport, ScenarioError> {
    let scenarios = load_suite(suite)?;
    run_scenarios(suite.name(), &scenarios, suite.is_seeded(), seeds, jobs)
}
