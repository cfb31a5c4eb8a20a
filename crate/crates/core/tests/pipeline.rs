mod common;

use std::fs;

use common::{audit_fixture, snapshot, N_IMAGES};
use trustorch::evaluation::{emit_report, DisagreementBundle, MetricsBundle};
use trustorch::model::Policy;
use trustorch::runlog::{RunLog, RUN_LOG_FILE};

#[test]
fn scripted_arbiter_reproduces_audit_counts() {
    let dir = tempfile::tempdir().unwrap();
    let fx = audit_fixture(dir.path(), true);
    let out = dir.path().join("run");
    let summary = fx.run(&fx.samples, &out);
    assert_eq!(summary.decided, N_IMAGES);
    assert_eq!(summary.reeval_triggered, N_IMAGES);

    emit_report(&out).unwrap();
    let audit: DisagreementBundle = serde_json::from_str(&fs::read_to_string(out.join("disagreements.json")).unwrap()).unwrap();
    let gpt = &audit.orchestrator_vs_agent["gpt"];
    assert_eq!((gpt.disagreements, gpt.orchestrator_correct, gpt.evaluated), (36, 16, 160));
    let behaviour = &audit.reeval_behavior["gpt"];
    assert_eq!(behaviour.overcorrections, 3);
    assert_eq!(behaviour.reaffirmations, 20);
    assert_eq!(behaviour.reaffirmed_correct, 3);
    assert_eq!(behaviour.corrections, 137);

    // the arbiter never sees pixels
    let log = RunLog::read(&out.join(RUN_LOG_FILE)).unwrap();
    assert!(log.traces.iter().all(|t| t.arbiter.as_ref().is_some_and(|a| !a.image_attached)));
    assert!(log.decisions.iter().all(|d| d.policy == Policy::TrustAwareRag));
}

#[test]
fn rule_arbiter_follows_retrieval_under_low_trust() {
    let dir = tempfile::tempdir().unwrap();
    let fx = audit_fixture(dir.path(), false);
    let out = dir.path().join("run");
    fx.run(&fx.samples, &out);
    let bundle: MetricsBundle = emit_report(&out).unwrap();
    // both agents sit below tau and the top vote always names the truth
    let orch = bundle.orchestrator.unwrap();
    assert_eq!(orch.accuracy, 1.0);
    let log = RunLog::read(&out.join(RUN_LOG_FILE)).unwrap();
    assert!(log.decisions.iter().all(|d| d.policy == Policy::RuleFallback && d.reeval_triggered));
    assert!(log.traces.iter().all(|t| t.votes[0].confidence > 0.99 && t.exemplars.len() == 5));
}

#[test]
fn interrupted_run_resumes_to_identical_log() {
    let dir = tempfile::tempdir().unwrap();
    let fx = audit_fixture(dir.path(), true);

    let whole = dir.path().join("whole");
    fx.run(&fx.samples, &whole);

    let halves = dir.path().join("halves");
    let first = fx.run(&fx.samples[..80], &halves);
    assert_eq!(first.decided, 80);
    // simulate a crash mid-write
    let log_path = halves.join(RUN_LOG_FILE);
    let mut bytes = fs::read(&log_path).unwrap();
    bytes.extend_from_slice(br#"{"type":"prediction","image_id":"img-0"#);
    fs::write(&log_path, bytes).unwrap();
    let second = fx.run(&fx.samples, &halves);
    assert_eq!((second.skipped, second.decided), (80, 80));

    assert_eq!(fs::read(whole.join(RUN_LOG_FILE)).unwrap(), fs::read(&log_path).unwrap());

    // a third pass has nothing to do
    let third = fx.run(&fx.samples, &halves);
    assert_eq!((third.skipped, third.decided), (160, 0));
}

#[test]
fn report_is_a_pure_function_of_the_logs() {
    let dir = tempfile::tempdir().unwrap();
    let fx = audit_fixture(dir.path(), true);
    let out = dir.path().join("run");
    fx.run(&fx.samples, &out);
    emit_report(&out).unwrap();
    let before = snapshot(&out);
    emit_report(&out).unwrap();
    assert_eq!(before, snapshot(&out));
    for f in ["metrics.json", "trust_profiles.csv", "disagreements.json", "latency.csv", "confusion_orchestrator.csv", "calibration_gpt.csv"] {
        assert!(before.contains_key(std::path::Path::new(f)), "{f} missing");
    }
    let latency = String::from_utf8(before[std::path::Path::new("latency.csv")].clone()).unwrap();
    assert!(latency.lines().next().unwrap().starts_with("agent,stage,n,"), "{latency}");
}

#[test]
fn missing_index_fails_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    let fx = audit_fixture(dir.path(), false);
    fs::remove_dir_all(dir.path().join("index")).unwrap();
    let err = trustorch::orchestrator::Orchestrator::from_config(
        fx.config.clone(),
        dir.path(),
        std::sync::Arc::new(trustorch::model::FixedClock(0)),
    );
    assert!(err.is_err());
    let mut cfg = fx.config.clone();
    cfg.index = None;
    let orch = trustorch::orchestrator::Orchestrator::from_config(cfg, dir.path(), std::sync::Arc::new(trustorch::model::FixedClock(0))).unwrap();
    let out = dir.path().join("run");
    assert!(matches!(
        orch.run_experiment(&fx.samples, &out),
        Err(trustorch::orchestrator::OrchestratorError::IndexUnavailable)
    ));
    assert!(!out.join(RUN_LOG_FILE).exists());
}
