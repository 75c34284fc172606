mod common;

use common::{serve, Reply};
use repinv::judge::{Dimension, Judge, JudgeConfig, JudgeMode};
use repinv::Error;

fn live(url: &str, key_env: &str) -> JudgeConfig {
    JudgeConfig {
        endpoint: url.to_string(),
        model: "judge-model".into(),
        credential_env: key_env.into(),
        timeout_secs: 5.0,
        max_retries: 2,
        backoff_ms: 1,
        max_in_flight: 1,
        mode: JudgeMode::Live,
        transcript: None,
    }
}

#[test]
fn request_body_and_auth() {
    std::env::set_var("REPINV_TEST_KEY_BODY", "sk-body-123");
    let srv = serve(vec![Reply::Content("[ANS] structure: 4/5".into())], None, 1);
    let j = Judge::new(live(&srv.url, "REPINV_TEST_KEY_BODY")).unwrap();
    let r = j
        .request_score(Dimension::Structure, "A cat sat.", "A dog sat.")
        .unwrap();
    assert_eq!(r.raw_score, 4);
    assert_eq!(r.normalized, 0.8);
    let seen = srv.requests();
    srv.join();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].header("authorization"), Some("Bearer sk-body-123"));
    assert_eq!(seen[0].body["model"], "judge-model");
    assert_eq!(seen[0].body["temperature"], 0);
    assert_eq!(seen[0].body["messages"][0]["role"], "user");
    assert_eq!(
        seen[0].prompt(),
        repinv::judge::render_prompt(Dimension::Structure, "A cat sat.", "A dog sat.")
    );
}

#[test]
fn retries_transport_and_parse_failures() {
    let srv = serve(
        vec![
            Reply::Status(500, "overloaded".into()),
            Reply::Content("I think it is about a 3.".into()),
            Reply::Content("reasoning\n[ANS] entity: 3/5".into()),
        ],
        None,
        3,
    );
    let j = Judge::new(live(&srv.url, "REPINV_TEST_KEY_UNSET")).unwrap();
    let r = j.request_score(Dimension::Entity, "a", "b").unwrap();
    assert_eq!(r.raw_score, 3);
    assert_eq!(j.requests_sent(), 3);
    srv.join();
}

#[test]
fn exhausted_retries_carry_the_last_cause() {
    let srv = serve(
        vec![
            Reply::Status(503, "busy".into()),
            Reply::Status(503, "busy".into()),
            Reply::Content("[ANS] topic: 9/5".into()),
        ],
        None,
        3,
    );
    let j = Judge::new(live(&srv.url, "REPINV_TEST_KEY_UNSET")).unwrap();
    match j.request_score(Dimension::Topic, "a", "b") {
        Err(Error::JudgeUnavailable { attempts, cause }) => {
            assert_eq!(attempts, 3);
            assert!(cause.contains("outside 0..=5"), "{cause}");
        }
        other => panic!("expected judge-unavailable, got {other:?}"),
    }
    srv.join();
}

#[test]
fn credentials_never_reach_the_transcript() {
    let key = "sk-secret-xyz";
    std::env::set_var("REPINV_TEST_KEY_REDACT", key);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let srv = serve(
        vec![
            Reply::Status(401, format!("bad key {key}")),
            Reply::Content(format!("echo {key}\n[ANS] topic: 2/5")),
        ],
        None,
        2,
    );
    let cfg = JudgeConfig {
        transcript: Some(path.clone()),
        ..live(&srv.url, "REPINV_TEST_KEY_REDACT")
    };
    let j = Judge::new(cfg).unwrap();
    let r = j.request_score(Dimension::Topic, "a", "b").unwrap();
    assert!(!r.raw_response.contains(key));
    srv.join();
    let t = std::fs::read_to_string(&path).unwrap();
    assert_eq!(t.lines().count(), 2);
    assert!(!t.contains(key));
    assert!(t.contains("[REDACTED]"));
}

#[test]
fn concurrent_scores_come_back_in_order() {
    let pairs: Vec<(String, String)> = (0..6)
        .map(|i| (format!("gt {i}"), format!("gen {i}")))
        .collect();
    // The score echoes the pair index so order is checkable.
    let responder = Box::new(|req: &common::Seen| {
        let p = req.prompt();
        let i: u8 = p.split("[GT]: gt ").nth(1).unwrap()[..1].parse().unwrap();
        let dim = ["structure", "entity", "topic"]
            .into_iter()
            .find(|d| p.contains(&format!("[ANS] {d}:")))
            .unwrap();
        Reply::Content(format!("[ANS] {dim}: {}/5", i % 6))
    });
    let srv = serve(vec![], Some(responder), 18);
    let cfg = JudgeConfig {
        max_in_flight: 4,
        ..live(&srv.url, "REPINV_TEST_KEY_UNSET")
    };
    let j = Judge::new(cfg).unwrap();
    let results = j.score_all(&pairs);
    srv.join();
    assert_eq!(j.requests_sent(), 18);
    for (i, r) in results.iter().enumerate() {
        let r = r.as_ref().unwrap();
        assert_eq!(r.each_ref().map(|x| x.dimension), Dimension::ALL);
        assert!(r.iter().all(|x| x.raw_score as usize == i % 6));
    }
}

#[test]
fn stub_mode_sends_nothing() {
    let j = Judge::new(JudgeConfig::default()).unwrap();
    let r = j.score_all(&[("the cat".into(), "the dog".into())]);
    assert_eq!(r[0].as_ref().unwrap()[0].raw_score, 3);
    assert_eq!(j.requests_sent(), 0);
}
