use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn giskard(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_giskard")).args(args).current_dir(cwd).output().unwrap()
}

fn scenario(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(rel).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_check_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("ex1.jsonl");
    let cfg = scenario("examples/example1.toml");
    let run = giskard(&["run", "--config", &cfg, "--out", trace.to_str().unwrap()], dir.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let out = stdout(&run);
    assert!(out.contains("committed") && out.contains("sent:"), "{out}");

    let check = giskard(&["check", "--trace", trace.to_str().unwrap(), "--scenario", &cfg], dir.path());
    assert!(check.status.success(), "{}", stdout(&check));
    let report = dir.path().join("ex1.report.jsonl");
    assert_eq!(fs::read_to_string(report).unwrap(), "");

    let replay = giskard(&["replay", "--trace", trace.to_str().unwrap()], dir.path());
    assert!(replay.status.success());
    assert!(stdout(&replay).starts_with("identical"));
}

#[test]
fn default_output_directory_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_giskard"))
        .args(["run", "--config", &scenario("examples/fig2-empty-view.toml"), "--seed", "9"])
        .env("GISKARD_OUT_DIR", dir.path().join("traces"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("traces/fig2-empty-view-9.jsonl").exists());
}

#[test]
fn bad_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"bad\"\n[protocol]\nk = 4\nblocks_per_view = 3\ntimeout_per_view = 10\nbogus = 1\n[run]\nviews_to_run = 1\n").unwrap();
    let trace = dir.path().join("t.jsonl");
    let o = giskard(&["run", "--config", cfg.to_str().unwrap(), "--out", trace.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert!(!trace.exists());
}

#[test]
fn negative_control_check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("neg.jsonl");
    let cfg = scenario("negative/double-vote-f-plus-1.toml");
    assert!(giskard(&["run", "--config", &cfg, "--out", trace.to_str().unwrap()], dir.path()).status.success());
    let report = dir.path().join("neg-report.jsonl");
    let check = giskard(
        &["check", "--trace", trace.to_str().unwrap(), "--scenario", &cfg, "--report", report.to_str().unwrap()],
        dir.path(),
    );
    assert!(check.status.success(), "{}", stdout(&check));
    assert!(stdout(&check).contains("expected violation matched"));
    assert!(fs::read_to_string(report).unwrap().lines().count() > 0);
}

#[test]
fn unexpected_violations_fail_check() {
    // check the negative-control trace against a scenario with the same
    // config but no declared violations
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("neg.jsonl");
    let cfg = scenario("negative/double-vote-f-plus-1.toml");
    assert!(giskard(&["run", "--config", &cfg, "--out", trace.to_str().unwrap()], dir.path()).status.success());
    let text = fs::read_to_string(&cfg).unwrap().replace("expect_violations = [\"Theorem1\"]", "expect_violations = [\"Lemma1\"]");
    let altered = dir.path().join("altered.toml");
    fs::write(&altered, text).unwrap();
    let check = giskard(&["check", "--trace", trace.to_str().unwrap(), "--scenario", altered.to_str().unwrap()], dir.path());
    assert_eq!(check.status.code(), Some(1), "{}", stdout(&check));
    assert!(stdout(&check).contains("unexpected violations: Theorem1"));
}

#[test]
fn config_mismatch_and_tampering_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("a.jsonl");
    assert!(giskard(&["run", "--config", &scenario("examples/example1.toml"), "--out", trace.to_str().unwrap()], dir.path()).status.success());

    let other = giskard(&["check", "--trace", trace.to_str().unwrap(), "--scenario", &scenario("examples/fig1-case1.toml")], dir.path());
    assert_eq!(other.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&other.stderr).contains("different config"));

    let text = fs::read_to_string(&trace).unwrap();
    let tampered = dir.path().join("b.jsonl");
    fs::write(&tampered, text.replacen("\"kind\":\"deliver\"", "\"kind\":\"drop\"", 1)).unwrap();
    let check = giskard(&["check", "--trace", tampered.to_str().unwrap(), "--scenario", &scenario("examples/example1.toml")], dir.path());
    assert_eq!(check.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&check.stderr).contains("digest"));
}

#[test]
fn replay_reports_first_edited_step() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("a.jsonl");
    assert!(giskard(&["run", "--config", &scenario("examples/example2-timeout.toml"), "--out", trace.to_str().unwrap()], dir.path()).status.success());
    let mut lines: Vec<String> = fs::read_to_string(&trace).unwrap().lines().map(String::from).collect();
    let target = lines.iter().position(|l| l.contains("\"kind\":\"deliver\"")).unwrap();
    let step: u64 = serde_json::from_str::<serde_json::Value>(&lines[target]).unwrap()["step"].as_u64().unwrap();
    lines[target] = lines[target].replace("\"kind\":\"deliver\"", "\"kind\":\"drop\"");
    fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let replay = giskard(&["replay", "--trace", trace.to_str().unwrap()], dir.path());
    assert_eq!(replay.status.code(), Some(1));
    assert!(stdout(&replay).contains(&format!("diverged at line {} (step {step})", target + 1)), "{}", stdout(&replay));
}

#[test]
fn suite_prints_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = giskard(&["suite", "--suite", "papers-examples", "--seeds", "1", "--jobs", "1"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("fig2-empty-view") && out.contains("result: PASS"), "{out}");
    let bad = giskard(&["suite", "--suite", "nope"], dir.path());
    assert!(!bad.status.success());
}
