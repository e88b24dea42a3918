//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Each export takes and returns JSON strings. The plain `*_json`
//! functions hold the logic so they can be tested natively.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use giskard::adversary::{StrategyKind, TargetViews};
use giskard::checker::{check_all, quorum_intersection_oracle, CheckContext};
use giskard::netsim::{run, ByzantineAssignment, NetworkModel, SimConfig};
use giskard::protocol::{NodeId, ProtocolParams};
use giskard::scenario::Scenario;
use giskard::trace::{RecordKind, TraceRecord};

/// Library scenarios shipped with the page.
const SCENARIOS: &[(&str, &str)] = &[
    ("example1", include_str!("../../giskard/scenarios/examples/example1.toml")),
    ("example2-normal", include_str!("../../giskard/scenarios/examples/example2-normal.toml")),
    ("example2-timeout", include_str!("../../giskard/scenarios/examples/example2-timeout.toml")),
    ("fig1-case1", include_str!("../../giskard/scenarios/examples/fig1-case1.toml")),
    ("fig1-case2", include_str!("../../giskard/scenarios/examples/fig1-case2.toml")),
    ("fig1-case3", include_str!("../../giskard/scenarios/examples/fig1-case3.toml")),
    ("fig2-empty-view", include_str!("../../giskard/scenarios/examples/fig2-empty-view.toml")),
    ("double-vote-f-plus-1", include_str!("../../giskard/scenarios/negative/double-vote-f-plus-1.toml")),
    ("mutation-double-propose", include_str!("../../giskard/scenarios/negative/mutation-double-propose.toml")),
];

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub k: usize,
    pub blocks_per_view: u32,
    pub timeout: u64,
    pub views: u64,
    pub seed: u64,
    pub drop: f64,
    pub jitter: u64,
    pub byzantine: Vec<ByzantineParam>,
}

#[derive(Debug, Deserialize)]
pub struct ByzantineParam {
    pub node: u16,
    pub strategy: StrategyKind,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams { k: 4, blocks_per_view: 3, timeout: 40, views: 4, seed: 1, drop: 0.0, jitter: 0, byzantine: Vec::new() }
    }
}

#[derive(Serialize)]
struct NodeSummary {
    node: String,
    byzantine: bool,
    view: u64,
    prepared: usize,
    committed: usize,
}

fn summarize(cfg: &SimConfig, records: &[TraceRecord]) -> Value {
    let k = cfg.protocol.node_count;
    let mut nodes: Vec<NodeSummary> = (0..k)
        .map(|i| {
            let id = NodeId(i as u16);
            NodeSummary { node: id.to_string(), byzantine: cfg.is_byzantine(id), view: cfg.initial_view, prepared: 0, committed: 0 }
        })
        .collect();
    let mut sent: BTreeMap<String, usize> = BTreeMap::new();
    let mut entries = Vec::new();
    let mut dropped = 0;
    for r in records {
        let n = &mut nodes[r.node.index()];
        match r.kind {
            RecordKind::ViewEntry => {
                let v = r.detail_u64("view").unwrap_or(0);
                n.view = n.view.max(v);
                entries.push(json!({ "time": r.time, "node": r.node.to_string(), "view": v, "mode": r.detail_str("mode") }));
            }
            RecordKind::Stage => match r.detail_str("stage") {
                Some("prepare") => n.prepared += 1,
                Some("commit") => n.committed += 1,
                _ => {}
            },
            RecordKind::Send => {
                if let Some(m) = &r.msg {
                    *sent.entry(m.kind.to_string()).or_default() += 1;
                }
            }
            RecordKind::Drop => dropped += 1,
            _ => {}
        }
    }
    let report = check_all(records, &CheckContext::from_config(cfg));
    json!({
        "records": records.len(),
        "nodes": nodes,
        "sent": sent,
        "dropped": dropped,
        "view_entries": entries,
        "violations": report.counts().iter().map(|(p, n)| (p.name().to_string(), *n)).collect::<BTreeMap<_, _>>(),
        "witnesses": report.violations.iter().take(20).map(|v| &v.explanation).collect::<Vec<_>>(),
    })
}

pub fn simulate_json(params: &str) -> Result<String, String> {
    let p: SimulateParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let mut cfg = SimConfig::new(ProtocolParams::new(p.k, p.blocks_per_view, p.timeout), p.views);
    cfg.network = if p.drop > 0.0 || p.jitter > 0 { NetworkModel::lossy(1, p.jitter, p.drop) } else { NetworkModel::reliable(1) };
    cfg.byzantine = p
        .byzantine
        .iter()
        .map(|b| ByzantineAssignment { node: NodeId(b.node), strategy: b.strategy, target_views: TargetViews::All })
        .collect();
    cfg.validate().map_err(|e| e.to_string())?;
    let trace = run(&cfg, p.seed).map_err(|e| e.to_string())?;
    Ok(summarize(&cfg, &trace.records).to_string())
}

pub fn quorum_intersection_json(k: usize, threshold: usize) -> Result<String, String> {
    if !(1..=12).contains(&k) || threshold == 0 || threshold > k {
        return Err(format!("need 1 <= threshold <= k <= 12, got k = {k}, threshold = {threshold}"));
    }
    serde_json::to_string(&quorum_intersection_oracle(k, threshold)).map_err(|e| e.to_string())
}

pub fn run_scenario_json(name: &str) -> Result<String, String> {
    let text = SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| format!("unknown scenario {name:?}"))?;
    let s = Scenario::parse(text, name).map_err(|e| e.to_string())?;
    let o = s.execute(s.seed()).map_err(|e| e.to_string())?;
    Ok(json!({
        "name": o.name,
        "description": s.description,
        "seed": o.seed,
        "passed": o.passed,
        "negative_control": s.negative_control,
        "expected_violations": s.expect_violations,
        "expectation_met": o.expectation_met,
        "unexpected": o.unexpected.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "expectations": o.expectations,
        "summary": summarize(&s.sim_config(), &o.trace.records),
    })
    .to_string())
}

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|(n, _)| *n).collect()
}

#[wasm_bindgen]
pub fn simulate(params: &str) -> Result<String, JsValue> {
    simulate_json(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn quorum_intersection(k: usize, threshold: usize) -> Result<String, JsValue> {
    quorum_intersection_json(k, threshold).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn run_scenario(name: &str) -> Result<String, JsValue> {
    run_scenario_json(name).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn scenarios() -> String {
    serde_json::to_string(&scenario_names()).expect("names serialize")
}
