use giskard::checker::Property;
use giskard::scenario::{find_scenario, load_suite, run_suite, Scenario, ScenarioError, Suite};

const MINIMAL: &str = r#"
name = "minimal"

[protocol]
k = 4
blocks_per_view = 3
timeout_per_view = 40

[run]
views_to_run = 2
"#;

fn with(extra: &str) -> Result<Scenario, ScenarioError> {
    Scenario::parse(&format!("{MINIMAL}\n{extra}"), "inline.toml")
}

fn invalid_key(r: Result<Scenario, ScenarioError>) -> String {
    match r {
        Err(ScenarioError::Invalid { key, .. }) => key,
        Err(e) => panic!("expected a validation error, got {e}"),
        Ok(_) => panic!("expected a validation error"),
    }
}

#[test]
fn minimal_scenario_runs_clean() {
    let s = with("").unwrap();
    let o = s.execute(3).unwrap();
    assert!(o.passed);
    assert!(o.report.violations.is_empty());
}

#[test]
fn unknown_keys_are_named() {
    let err = with("[network]\nprofle = \"lossy\"\n").unwrap_err().to_string();
    assert!(err.contains("profle"), "{err}");
    let err = Scenario::parse(&MINIMAL.replace("k = 4", "nodes = 4"), "x.toml").unwrap_err().to_string();
    assert!(err.contains("nodes") || err.contains("k"), "{err}");
}

#[test]
fn too_many_faults_need_a_negative_control() {
    let two = "[[byzantine]]\nnode = \"B\"\nstrategy = \"silent\"\n[[byzantine]]\nnode = 2\nstrategy = \"silent\"\n";
    assert_eq!(invalid_key(with(two)), "byzantine");
    let marked = two;
    let text = MINIMAL.replace("name = \"minimal\"", "name = \"m\"\nnegative_control = true");
    let r = Scenario::parse(&format!("{text}\n{marked}"), "inline.toml");
    assert_eq!(invalid_key(r), "expect_violations");
    let text = text.replace("negative_control = true", "negative_control = true\nexpect_violations = [\"Theorem1\"]");
    assert!(Scenario::parse(&format!("{text}\n{marked}"), "inline.toml").is_ok());
}

#[test]
fn bad_enumerations_are_rejected() {
    assert!(with("[[expect]]\ntype = \"stage\"\nnode = \"A\"\nblock = \"genesis\"\nstage = \"prepared\"\n").is_err());
    assert!(with("[[expect]]\ntype = \"checker\"\nproperty = \"Theorem9\"\nmax = 0\n").is_err());
    assert!(with("[[network.rules]]\nkind = \"Vote\"\naction = \"drop\"\n[network]\nprofile = \"scripted\"\n").is_err());
    assert!(with("[[byzantine]]\nnode = \"B\"\nstrategy = \"lie\"\n").is_err());
}

#[test]
fn network_parameters_must_match_profile() {
    assert_eq!(invalid_key(with("[network]\ndrop_probability = 0.1\n")), "config");
    assert_eq!(invalid_key(with("[[network.rules]]\nto = \"D\"\naction = \"drop\"\n")), "config");
    assert!(with("[network]\nprofile = \"lossy\"\ndrop_probability = 0.1\njitter = 2\n").is_ok());
}

#[test]
fn failed_expectation_fails_the_run() {
    let s = with("[[expect]]\ntype = \"final_view\"\nnodes = [\"A\"]\nmin = 50\n").unwrap();
    let o = s.execute(1).unwrap();
    assert!(!o.passed);
    assert!(!o.expectations[0].passed);
}

#[test]
fn declared_violation_that_does_not_happen_fails() {
    let text = MINIMAL.replace("name = \"minimal\"", "name = \"m\"\nexpect_violations = [\"Theorem1\"]");
    let s = Scenario::parse(&text, "inline.toml").unwrap();
    let o = s.execute(1).unwrap();
    assert!(!o.expectation_met);
    assert!(!o.passed);
}

#[test]
fn library_is_complete() {
    for name in ["example1", "example2-normal", "example2-timeout", "fig1-case1", "fig1-case2", "fig1-case3", "fig2-empty-view"] {
        find_scenario(name).unwrap();
    }
    for suite in Suite::ALL {
        assert!(!load_suite(suite).unwrap().is_empty(), "{}", suite.name());
    }
}

#[test]
fn example_and_negative_suites_pass() {
    for suite in [Suite::PapersExamples, Suite::NegativeControls] {
        let r = run_suite(suite, 1, 0).unwrap();
        assert!(r.passed(), "{}", r.matrix());
    }
}

#[test]
fn negative_controls_fire_across_seeds() {
    let s = find_scenario("mutation-double-propose").unwrap();
    let fired = (0..20).filter(|seed| s.execute(*seed).unwrap().expectation_met).count();
    assert!(fired >= 15, "{fired}/20");
}

#[test]
fn lemma_suite_is_clean() {
    let r = run_suite(Suite::Lemmas, 10, 0).unwrap();
    assert!(r.passed(), "{}", r.matrix());
    assert_eq!(r.total(Property::Lemma1), 0);
    assert!(r.runs.iter().map(|x| x.view_change_qcs).sum::<usize>() > 0);
}
