use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use ideal::nn::{Arch, Classifier};
use ideal::oracle::wire::{ErrorBody, ErrorCode, PredictRequest, PredictResponse, API_KEY_HEADER, REQUEST_ID_HEADER};
use ideal::oracle::{make_http_oracle, HardLabelOracle, HttpOracle, LocalOracle, RetryPolicy};
use ideal::service::{spawn, ServiceConfig, ServiceHandle};
use ideal::tensor::{SeededRng, Tensor};
use ideal::Error;

const KEY: &str = "k-test";

fn teacher_file(dir: &Path) -> (Classifier, PathBuf) {
    let net = Classifier::new(Arch::Mlp, [1, 28, 28], 10, &mut SeededRng::new(11, "svc-teacher")).unwrap();
    let path = dir.join("teacher.w");
    net.save(&path).unwrap();
    (net, path)
}

fn start(dir: &Path, budget: usize, usage_log: Option<PathBuf>) -> (Classifier, ServiceHandle) {
    let (net, path) = teacher_file(dir);
    let config = ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        teacher_weights: path,
        budgets: HashMap::from([(KEY.to_string(), budget)]),
        usage_log,
    };
    (net, spawn(config).unwrap())
}

fn images(n: usize, seed: u64) -> Tensor {
    SeededRng::new(seed, "svc-images").uniform(&[n, 1, 28, 28], -1.0, 1.0)
}

fn raw_agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn raw_predict(url: &str, key: Option<&str>, request_id: Option<&str>, body: &str) -> (u16, String) {
    let mut req = raw_agent().post(format!("{url}/v1/predict")).header("content-type", "application/json");
    if let Some(k) = key {
        req = req.header(API_KEY_HEADER, k);
    }
    if let Some(id) = request_id {
        req = req.header(REQUEST_ID_HEADER, id);
    }
    let mut resp = req.send(body).unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

fn error_code(body: &str) -> ErrorBody {
    serde_json::from_str(body).unwrap_or_else(|e| panic!("{e}: {body}"))
}

#[test]
fn happy_path_matches_local_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let (net, svc) = start(dir.path(), 100, None);
    let mut remote = make_http_oracle(&svc.url(), KEY).unwrap();
    assert_eq!(remote.remaining(), 100);
    let x = images(30, 1);
    let labels = remote.query(&x).unwrap();
    assert_eq!(labels, net.predict_labels(&x).unwrap());
    assert_eq!(remote.ledger().used(), 30);
    assert_eq!(remote.remaining(), 70);
}

#[test]
fn malformed_requests_get_400_and_cost_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 100, None);
    let (status, body) = raw_predict(&svc.url(), Some(KEY), None, "{not json");
    assert_eq!(status, 400);
    assert_eq!(error_code(&body).error, ErrorCode::BadRequest);

    let wrong_shape = serde_json::to_string(&PredictRequest::encode(&Tensor::zeros(&[2, 1, 14, 14]))).unwrap();
    let (status, body) = raw_predict(&svc.url(), Some(KEY), None, &wrong_shape);
    assert_eq!(status, 400, "{body}");

    let mut truncated = PredictRequest::encode(&images(2, 2));
    truncated.shape = vec![3, 1, 28, 28];
    let (status, _) = raw_predict(&svc.url(), Some(KEY), None, &serde_json::to_string(&truncated).unwrap());
    assert_eq!(status, 400);

    assert_eq!(make_http_oracle(&svc.url(), KEY).unwrap().remaining(), 100);
}

#[test]
fn unknown_or_missing_key_gets_401() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 100, None);
    let body = serde_json::to_string(&PredictRequest::encode(&images(1, 3))).unwrap();
    for key in [None, Some("wrong")] {
        let (status, text) = raw_predict(&svc.url(), key, None, &body);
        assert_eq!(status, 401);
        assert_eq!(error_code(&text).error, ErrorCode::Unauthorized);
    }
    assert!(matches!(make_http_oracle(&svc.url(), "wrong"), Err(Error::Unauthorized)));
}

#[test]
fn oversized_batch_gets_413() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 5000, None);
    let body = serde_json::to_string(&PredictRequest::encode(&Tensor::zeros(&[1025, 1, 28, 28]))).unwrap();
    let (status, text) = raw_predict(&svc.url(), Some(KEY), None, &body);
    assert_eq!(status, 413);
    assert_eq!(error_code(&text).error, ErrorCode::PayloadTooLarge);
    assert_eq!(make_http_oracle(&svc.url(), KEY).unwrap().remaining(), 5000);
}

#[test]
fn exhausted_budget_gets_429_with_remaining() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 50, None);
    let mut remote = make_http_oracle(&svc.url(), KEY).unwrap();
    remote.query(&images(40, 4)).unwrap();
    match remote.query(&images(20, 5)) {
        Err(Error::BudgetExhausted { remaining, .. }) => assert_eq!(remaining, 10),
        other => panic!("expected exhaustion, got {other:?}"),
    }
    let body = serde_json::to_string(&PredictRequest::encode(&images(11, 6))).unwrap();
    let (status, text) = raw_predict(&svc.url(), Some(KEY), None, &body);
    assert_eq!(status, 429);
    let e = error_code(&text);
    assert_eq!((e.error, e.remaining_budget), (ErrorCode::BudgetExhausted, Some(10)));
    assert_eq!(remote.query(&images(10, 7)).unwrap().len(), 10);
}

#[test]
fn concurrent_batches_never_overspend() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 100, None);
    let url = svc.url();
    let barrier = Arc::new(Barrier::new(2));
    let workers: Vec<_> = (0..2)
        .map(|i| {
            let (url, barrier) = (url.clone(), barrier.clone());
            thread::spawn(move || {
                let mut o = make_http_oracle(&url, KEY).unwrap();
                barrier.wait();
                o.query(&images(60, 10 + i))
            })
        })
        .collect();
    let results: Vec<_> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    let ok = results.iter().filter(|r| r.is_ok()).count();
    let refused = results
        .iter()
        .filter(|r| matches!(r, Err(Error::BudgetExhausted { remaining: 40, .. })))
        .count();
    assert_eq!((ok, refused), (1, 1), "{results:?}");
    assert_eq!(make_http_oracle(&url, KEY).unwrap().remaining(), 40);
}

#[test]
fn replayed_request_id_is_charged_once() {
    let dir = tempfile::tempdir().unwrap();
    let (net, svc) = start(dir.path(), 100, None);
    let x = images(25, 8);
    let body = serde_json::to_string(&PredictRequest::encode(&x)).unwrap();
    let mut answers = Vec::new();
    for _ in 0..3 {
        let (status, text) = raw_predict(&svc.url(), Some(KEY), Some("req-1"), &body);
        assert_eq!(status, 200, "{text}");
        answers.push(serde_json::from_str::<PredictResponse>(&text).unwrap());
    }
    assert!(answers.iter().all(|a| a.labels == net.predict_labels(&x).unwrap() && a.remaining_budget == 75));

    // Same id, different payload: a client bug, not a retry.
    let other = serde_json::to_string(&PredictRequest::encode(&images(25, 9))).unwrap();
    let (status, _) = raw_predict(&svc.url(), Some(KEY), Some("req-1"), &other);
    assert_eq!(status, 400);
    assert_eq!(make_http_oracle(&svc.url(), KEY).unwrap().remaining(), 75);
}

#[test]
fn usage_log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("usage.jsonl");
    {
        let (_, svc) = start(dir.path(), 100, Some(log.clone()));
        make_http_oracle(&svc.url(), KEY).unwrap().query(&images(30, 12)).unwrap();
        svc.stop();
    }
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(!text.contains(KEY), "usage log must not store keys in the clear");
    let (_, svc) = start(dir.path(), 100, Some(log));
    assert_eq!(make_http_oracle(&svc.url(), KEY).unwrap().remaining(), 70);
}

#[test]
fn stopped_server_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, svc) = start(dir.path(), 100, None);
    let url = svc.url();
    let policy = RetryPolicy {
        retries: 2,
        initial_backoff: Duration::from_millis(20),
        timeout: Duration::from_secs(5),
    };
    let mut remote = HttpOracle::connect(&url, KEY, policy).unwrap();
    svc.stop();
    assert!(matches!(remote.query(&images(5, 13)), Err(Error::Transport(_))));
    assert_eq!(remote.ledger().used(), 0);
}

#[test]
fn local_and_remote_oracles_agree_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (net, svc) = start(dir.path(), 1000, None);
    let mut local = LocalOracle::new(net, 1000);
    let mut remote = make_http_oracle(&svc.url(), KEY).unwrap();
    for seed in 0..4 {
        // Values right at argmax ties and extremes of the input range.
        let mut x = images(50, 100 + seed);
        x.data_mut()[..784].fill(-1.0);
        x.data_mut()[784..1568].fill(1.0);
        assert_eq!(local.query(&x).unwrap(), remote.query(&x).unwrap());
    }
    assert_eq!(local.ledger().used(), remote.ledger().used());
    assert_eq!(local.remaining(), remote.remaining());
}
