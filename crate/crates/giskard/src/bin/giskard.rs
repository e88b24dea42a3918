use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use giskard::netsim::{run, SimConfig};
use giskard::scenario::{default_out_dir, run_suite, Scenario, Suite, OUT_DIR_ENV};
use giskard::trace::{first_difference, RecordKind, TraceFile, TraceHeader};

#[derive(Parser)]
#[command(name = "giskard", version, about = "Giskard consensus simulator and safety checker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace path; defaults to <out dir>/<name>-<seed>.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = OUT_DIR_ENV, hide_env_values = true)]
        out_dir: Option<PathBuf>,
    },
    /// Run every safety check over a trace and compare with the scenario's expectations.
    Check {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Violation report path; defaults to the trace path with `.report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-run the simulator from a trace's embedded config and compare bytes.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run a scenario suite across seeds.
    Suite {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, out_dir } => cmd_run(&config, seed, out, out_dir),
        Command::Check { trace, scenario, report } => cmd_check(&trace, &scenario, report),
        Command::Replay { trace } => cmd_replay(&trace),
        Command::Suite { suite, seeds, jobs } => cmd_suite(&suite, seeds, jobs),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CmdResult = Result<bool, Box<dyn std::error::Error>>;

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, out_dir: Option<PathBuf>) -> CmdResult {
    let scenario = Scenario::load(config)?;
    let seed = seed.unwrap_or(scenario.seed());
    let cfg = scenario.sim_config();
    cfg.validate()?;
    let trace = run(&cfg, seed)?;
    let path = out.unwrap_or_else(|| out_dir.unwrap_or_else(default_out_dir).join(format!("{}-{seed}.jsonl", scenario.name)));
    trace.write(&path)?;
    print!("{}", run_summary(&scenario.name, &cfg, &trace));
    println!("trace: {}", path.display());
    Ok(true)
}

fn run_summary(name: &str, cfg: &SimConfig, trace: &TraceFile) -> String {
    let k = cfg.protocol.node_count;
    let mut views = vec![cfg.initial_view; k];
    let mut committed = vec![0usize; k];
    let mut sent: BTreeMap<String, usize> = BTreeMap::new();
    let mut dropped = 0;
    for r in &trace.records {
        let i = r.node.index();
        match r.kind {
            RecordKind::ViewEntry => {
                if let Some(v) = r.detail_u64("view") {
                    views[i] = views[i].max(v);
                }
            }
            RecordKind::Stage if r.detail_str("stage") == Some("commit") => committed[i] += 1,
            RecordKind::Send => {
                if let Some(m) = &r.msg {
                    *sent.entry(m.kind.to_string()).or_default() += 1;
                }
            }
            RecordKind::Drop => dropped += 1,
            _ => {}
        }
    }
    let mut s = format!("scenario {name} seed {} ({} records)\n", trace.header.seed, trace.records.len());
    s.push_str("node  view  committed\n");
    for i in 0..k {
        let id = giskard::protocol::NodeId(i as u16);
        let byz = if cfg.is_byzantine(id) { " (byzantine)" } else { "" };
        s.push_str(&format!("{:<5} {:>4}  {:>9}{byz}\n", id.to_string(), views[i], committed[i]));
    }
    let counts: Vec<String> = sent.iter().map(|(k, n)| format!("{k}={n}")).collect();
    s.push_str(&format!("sent: {}\ndropped: {dropped}\n", counts.join(" ")));
    s
}

fn cmd_check(trace_path: &Path, scenario_path: &Path, report: Option<PathBuf>) -> CmdResult {
    let trace = TraceFile::read(trace_path)?;
    let scenario = Scenario::load(scenario_path)?;
    let cfg = scenario.sim_config();
    let digest = cfg.digest();
    if digest != trace.header.config_digest {
        return Err(format!(
            "trace was produced by a different config (trace {}, scenario {})",
            trace.header.config_digest, digest
        )
        .into());
    }
    let seed = trace.header.seed;
    let outcome = scenario.evaluate(&cfg, seed, trace);
    let report_path = report.unwrap_or_else(|| trace_path.with_extension("report.jsonl"));
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&report_path, outcome.report.to_jsonl())?;
    print!("{}", outcome.report.summary());
    for e in &outcome.expectations {
        println!("{} {}{}", if e.passed { "ok  " } else { "FAIL" }, e.description, if e.passed { String::new() } else { format!(": {}", e.detail) });
    }
    let expected = scenario.expected()?;
    if !expected.is_empty() {
        println!("{}", if outcome.expectation_met { "expected violation matched" } else { "expected violation NOT observed" });
    }
    if !outcome.unexpected.is_empty() {
        let names: Vec<&str> = outcome.unexpected.iter().map(|p| p.name()).collect();
        println!("unexpected violations: {}", names.join(", "));
    }
    println!("report: {}", report_path.display());
    Ok(outcome.passed)
}

fn cmd_replay(trace_path: &Path) -> CmdResult {
    // Only the header is trusted here: an edited body should show up as a
    // divergence, not as a digest error.
    let original = fs::read(trace_path)?;
    let first = original.split(|&c| c == b'\n').next().unwrap_or_default();
    let header: TraceHeader = serde_json::from_slice(first)?;
    let cfg: SimConfig = serde_json::from_value(header.config.clone())?;
    let again = run(&cfg, header.seed)?;
    let bytes = again.to_bytes();
    match first_difference(&original, &bytes) {
        None => {
            println!("identical: {} records, seed {}", again.records.len(), header.seed);
            Ok(true)
        }
        Some(line) => {
            // line 1 is the header, so record n sits on line n + 1
            match line.checked_sub(2).and_then(|i| again.records.get(i)) {
                Some(r) => println!("diverged at line {line} (step {})", r.step),
                None => println!("diverged at line {line}"),
            }
            Ok(false)
        }
    }
}

fn cmd_suite(name: &str, seeds: u64, jobs: usize) -> CmdResult {
    let suite = Suite::parse(name)?;
    let report = run_suite(suite, seeds, jobs)?;
    print!("{}", report.matrix());
    for r in report.runs.iter().filter(|r| !r.passed) {
        println!("{} seed {}: {}", r.scenario, r.seed, r.failures.join("; "));
    }
    Ok(report.passed())
}
