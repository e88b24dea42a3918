//! Acceptance run: prints one line per criterion and exits nonzero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use giskard::checker::{check_all, extract_stage_facts, quorum_intersection_oracle, CheckContext, Property};
use giskard::netsim::{run, simulate, NetworkModel, SimConfig};
use giskard::protocol::{MessageKind, NodeId, ProtocolParams};
use giskard::scenario::{find_scenario, load_suite, run_scenarios, run_suite, Suite, SuiteReport};
use giskard::state::StageName;
use giskard::trace::{RecordKind, TraceFile};

const SAFETY_SEEDS: u64 = 500;
const SAFETY_BUDGET: Duration = Duration::from_secs(120);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let started = Instant::now();
    let safety = run_suite(Suite::Safety, SAFETY_SEEDS, 0).expect("safety suite loads");
    let safety_time = started.elapsed();
    let lemmas = run_suite(Suite::Lemmas, 100, 0).expect("lemma suite loads");
    let examples = run_suite(Suite::PapersExamples, 1, 0).expect("example suite loads");

    let results = vec![
        ("1 safety suite", c1_safety(&safety, safety_time)),
        ("2 negative control", c2_negative_control()),
        ("3 quorum intersection", c3_quorum_oracle()),
        ("4 view-change height", c4_lemma1(&[&safety, &lemmas, &examples])),
        ("5 prepare height monotonicity", c5_lemma3(&[&safety, &lemmas, &examples])),
        ("6 scripted examples", c6_examples(&examples)),
        ("7 determinism", c7_determinism()),
        ("8 happy path", c8_happy_path()),
        ("9 mutation sensitivity", c9_mutation()),
    ];

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_safety(report: &SuiteReport, elapsed: Duration) -> Outcome {
    let mut want = BTreeSet::new();
    for k in [4, 7] {
        for s in ["silent", "double-propose", "same-height-double-vote", "vote-without-proposal", "out-of-turn-propose", "over-propose"] {
            want.insert(format!("k{k}-{s}"));
        }
    }
    let have: BTreeSet<String> = report.runs.iter().map(|r| r.scenario.clone()).collect();
    let missing: Vec<&String> = want.difference(&have).collect();
    let theorems: usize = [Property::Theorem1, Property::Theorem2, Property::Theorem3].iter().map(|p| report.total(*p)).sum();
    let per_scenario_ok = want.iter().all(|s| report.runs.iter().filter(|r| &r.scenario == s).count() as u64 == SAFETY_SEEDS);
    outcome(
        missing.is_empty() && per_scenario_ok && theorems == 0 && report.passed() && elapsed < SAFETY_BUDGET,
        format!(
            "{} runs, theorem violations {theorems}, all expectations {}, {:.1}s{}",
            report.runs.len(),
            if report.passed() { "met" } else { "NOT met" },
            elapsed.as_secs_f64(),
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") }
        ),
    )
}

fn c2_negative_control() -> Outcome {
    let s = find_scenario("double-vote-f-plus-1").expect("negative control exists");
    let o = s.execute(s.seed()).expect("runs");
    let t1: Vec<_> = o.report.violations.iter().filter(|v| v.property == Property::Theorem1).collect();
    let witnessed = t1.iter().all(|v| !v.witnesses.is_empty() && !v.nodes.is_empty() && v.blocks.len() >= 2);
    let cfg = s.sim_config();
    let honest_flagged = t1.iter().all(|v| v.nodes.iter().all(|n| !cfg.is_byzantine(*n)));

    // the same schedule with only f faulty voters stays safe
    let mut within = s.clone();
    within.negative_control = false;
    within.expect_violations.clear();
    within.allow_violations.clear();
    within.byzantine.truncate(1);
    let w = within.execute(within.seed()).expect("runs");
    let within_t1 = w.report.count(Property::Theorem1);

    outcome(
        !t1.is_empty() && witnessed && honest_flagged && o.passed && within_t1 == 0,
        format!("f+1 faulty: {} Theorem1 violations with witnesses; f faulty: {within_t1}", t1.len()),
    )
}

/// Independent enumeration: all pairs of `q`-combinations of `k`, by index lists.
fn min_pair_intersection(k: usize, q: usize) -> usize {
    fn combos(k: usize, q: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == q {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            combos(k, q, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    combos(k, q, 0, &mut Vec::new(), &mut all);
    let mut best = usize::MAX;
    for a in &all {
        for b in &all {
            best = best.min(a.iter().filter(|x| b.contains(x)).count());
        }
    }
    best
}

fn c3_quorum_oracle() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for k in [4usize, 7, 10] {
        let f = (k - 1) / 3;
        let q = 2 * f + 1;
        let o = quorum_intersection_oracle(k, q);
        let independent = min_pair_intersection(k, q);
        // 2(2f + 1) - (3f + 1) when k = 3f + 1
        let arithmetic = 2 * q - k;
        ok &= o.holds && o.min_intersection == independent && independent >= f + 1 && arithmetic == f + 1;
        notes.push(format!("k={k} min {} need {}", o.min_intersection, f + 1));
    }
    let tight = quorum_intersection_oracle(4, 2);
    let tight_independent = min_pair_intersection(4, 2);
    ok &= !tight.holds && tight.min_intersection == tight_independent;
    notes.push(format!("k=4 threshold 2 min {}", tight.min_intersection));
    outcome(ok, notes.join(", "))
}

fn c4_lemma1(reports: &[&SuiteReport]) -> Outcome {
    let violations: usize = reports.iter().map(|r| r.total(Property::Lemma1)).sum();
    let vcqcs: usize = reports.iter().flat_map(|r| &r.runs).map(|r| r.view_change_qcs).sum();
    let timeout_runs = reports.iter().flat_map(|r| &r.runs).filter(|r| r.view_change_qcs > 0).count();
    outcome(
        violations == 0 && vcqcs > 0,
        format!("{vcqcs} ViewChangeQCs over {timeout_runs} timeout runs, {violations} violations"),
    )
}

fn c5_lemma3(reports: &[&SuiteReport]) -> Outcome {
    let violations: usize = reports.iter().map(|r| r.total(Property::Lemma3)).sum();
    let runs: usize = reports.iter().map(|r| r.runs.len()).sum();
    outcome(violations == 0, format!("{runs} runs, {violations} violations"))
}

fn c6_examples(report: &SuiteReport) -> Outcome {
    let want = ["example1", "example2-normal", "example2-timeout", "fig1-case1", "fig1-case2", "fig1-case3", "fig2-empty-view"];
    let missing: Vec<&str> = want.iter().copied().filter(|w| !report.runs.iter().any(|r| r.scenario == *w)).collect();
    let failing: Vec<String> = report.runs.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.scenario, r.failures.join("; "))).collect();
    outcome(
        missing.is_empty() && failing.is_empty(),
        if failing.is_empty() && missing.is_empty() {
            format!("{} scenarios, all assertions hold", report.runs.len())
        } else {
            format!("missing {missing:?}, failing {failing:?}")
        },
    )
}

fn c7_determinism() -> Outcome {
    let mut pool = Vec::new();
    for suite in Suite::ALL {
        pool.extend(load_suite(suite).expect("library loads"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identical = 0;
    for _ in 0..20 {
        let s = &pool[rng.gen_range(0..pool.len())];
        let seed: u64 = rng.gen();
        let first = run(&s.sim_config(), seed).expect("runs").to_bytes();
        // replay from nothing but the file
        let parsed = TraceFile::parse(&first).expect("trace parses");
        let cfg: SimConfig = serde_json::from_value(parsed.header.config.clone()).expect("config embeds");
        let again = run(&cfg, parsed.header.seed).expect("replays").to_bytes();
        if first == again {
            identical += 1;
        }
    }
    outcome(identical == 20, format!("{identical}/20 byte-identical"))
}

fn c8_happy_path() -> Outcome {
    let mut cfg = SimConfig::new(ProtocolParams::new(4, 3, 50), 4);
    cfg.network = NetworkModel::reliable(1);
    let world = simulate(&cfg, 0).expect("runs");
    let final_views: Vec<u64> = world.nodes().map(|n| n.view).collect();
    let nodes: Vec<NodeId> = (0..4).map(NodeId).collect();
    let committed_in_state: Vec<_> = nodes.iter().map(|n| world.node(*n).clone()).collect();
    let trace = world.into_trace();
    let records = &trace.records;
    let view1: Vec<_> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Send)
        .filter_map(|r| r.msg.as_ref())
        .filter(|m| m.kind == MessageKind::PrepareBlock && m.view == 1)
        .map(|m| m.block.clone())
        .collect::<Vec<_>>();
    let mut hashes: Vec<_> = view1.iter().map(|b| b.hash).collect();
    hashes.dedup();
    let by_state = hashes.iter().all(|h| committed_in_state.iter().all(|st| st.commit_stage(*h)));
    let facts = extract_stage_facts(records, &CheckContext::from_config(&cfg));
    let by_replay = hashes.iter().all(|h| {
        nodes.iter().all(|n| facts.iter().any(|f| f.node == *n && f.block.hash == *h && f.stage == StageName::Commit))
    });
    let view_changes = records
        .iter()
        .filter(|r| r.kind == RecordKind::Send)
        .filter_map(|r| r.msg.as_ref())
        .filter(|m| matches!(m.kind, MessageKind::ViewChange | MessageKind::ViewChangeQC))
        .count();
    let clean = check_all(records, &CheckContext::from_config(&cfg)).violations.is_empty();
    outcome(
        hashes.len() == 3 && by_state && by_replay && view_changes == 0 && clean && final_views.iter().all(|v| *v >= 4),
        format!("{} view-1 blocks committed on all nodes: {by_state}/{by_replay}, ViewChange+QC sent {view_changes}, final views {final_views:?}", hashes.len()),
    )
}

fn c9_mutation() -> Outcome {
    let mut scenarios = Vec::new();
    for name in ["k4-double-propose", "k7-double-propose"] {
        let mut s = find_scenario(name).expect("safety scenario exists");
        s.protocol.mutations.skip_duplicate_height_discard = true;
        s.negative_control = true;
        s.expect_violations = vec!["HonestEquivocation".into(), "Theorem1".into()];
        s.require = giskard::scenario::Require::Any;
        s.allow_violations = Property::ALL.iter().map(|p| p.name().to_string()).collect();
        scenarios.push(s);
    }
    let report = run_scenarios("mutated-safety", &scenarios, true, 50, 0).expect("runs");
    let caught = report.total(Property::HonestEquivocation) + report.total(Property::Theorem1);
    let library = find_scenario("mutation-double-propose").expect("exists");
    let lib = library.execute(library.seed()).expect("runs");
    outcome(
        caught > 0 && lib.passed,
        format!(
            "{} runs with the discard disabled: {} honest-discipline, {} Theorem1 violations",
            report.runs.len(),
            report.total(Property::HonestEquivocation),
            report.total(Property::Theorem1)
        ),
    )
}
