use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use ureq::Agent;

use super::wire::{
    BudgetResponse, ErrorBody, ErrorCode, PredictRequest, PredictResponse, API_KEY_HEADER, REQUEST_ID_HEADER,
};
use super::{HardLabelOracle, QueryLedger};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            initial_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
        }
    }
}

/// Client for the prediction service. The server's ledger is authoritative;
/// this side mirrors it from the `remaining_budget` of every response.
pub struct HttpOracle {
    agent: Agent,
    base: String,
    api_key: String,
    policy: RetryPolicy,
    id_prefix: String,
    next_id: u64,
    used: usize,
    remaining: usize,
}

enum Attempt<T> {
    Done(T),
    Retry(Error),
}

static CLIENTS: AtomicU64 = AtomicU64::new(0);

impl HttpOracle {
    /// Connects and reads the key's remaining budget.
    pub fn connect(endpoint: &str, api_key: &str, policy: RetryPolicy) -> Result<Self> {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(policy.timeout))
            .build()
            .into();
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let id_prefix = format!(
            "{:x}-{:x}-{:x}",
            std::process::id(),
            nanos,
            CLIENTS.fetch_add(1, Ordering::Relaxed)
        );
        let mut o = Self {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            policy,
            id_prefix,
            next_id: 0,
            used: 0,
            remaining: 0,
        };
        o.remaining = o.fetch_budget()?;
        Ok(o)
    }

    pub fn fetch_budget(&self) -> Result<usize> {
        let url = format!("{}/v1/budget", self.base);
        self.with_retries(|| {
            let resp = self.agent.get(&url).header(API_KEY_HEADER, &self.api_key).call();
            classify(resp, |body| {
                serde_json::from_str::<BudgetResponse>(body)
                    .map(|b| b.remaining_budget)
                    .map_err(|e| Error::Protocol(format!("budget response: {e}")))
            })
        })?
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Attempt<T>) -> Result<T> {
        let mut delay = self.policy.initial_backoff;
        let mut attempt = 0;
        loop {
            match f() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(e) if attempt < self.policy.retries => {
                    log::warn!("oracle request failed ({e}), retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Attempt::Retry(e) => return Err(e),
            }
        }
    }
}

/// Maps a raw response to a final result or a retryable failure.
fn classify<T>(
    resp: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    parse: impl FnOnce(&str) -> Result<T>,
) -> Attempt<Result<T>> {
    let mut resp = match resp {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
    };
    let status = resp.status().as_u16();
    let body = match resp.body_mut().read_to_string() {
        Ok(b) => b,
        Err(e) => return Attempt::Retry(Error::Transport(format!("reading response: {e}"))),
    };
    if status >= 500 {
        return Attempt::Retry(Error::Transport(format!("server error {status}: {body}")));
    }
    if status == 200 {
        return Attempt::Done(parse(&body));
    }
    let err = serde_json::from_str::<ErrorBody>(&body).ok();
    let e = match (status, err.as_ref().map(|b| b.error)) {
        (401, _) | (_, Some(ErrorCode::Unauthorized)) => Error::Unauthorized,
        (429, _) | (_, Some(ErrorCode::BudgetExhausted)) => Error::BudgetExhausted {
            requested: 0,
            remaining: err.and_then(|b| b.remaining_budget).unwrap_or(0),
        },
        _ => Error::Protocol(format!("status {status}: {body}")),
    };
    Attempt::Done(Err(e))
}

impl HardLabelOracle for HttpOracle {
    fn query(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let body = PredictRequest::encode(images);
        let request_id = format!("{}-{}", self.id_prefix, self.next_id);
        self.next_id += 1;
        let url = format!("{}/v1/predict", self.base);
        let result = self.with_retries(|| {
            let resp = self
                .agent
                .post(&url)
                .header(API_KEY_HEADER, &self.api_key)
                .header(REQUEST_ID_HEADER, &request_id)
                .send_json(&body);
            classify(resp, |text| {
                serde_json::from_str::<PredictResponse>(text).map_err(|e| Error::Protocol(format!("predict response: {e}")))
            })
        })?;
        match result {
            Ok(r) => {
                if r.labels.len() != n {
                    return Err(Error::Protocol(format!("{} labels for {n} images", r.labels.len())));
                }
                self.used += n;
                self.remaining = r.remaining_budget;
                Ok(r.labels)
            }
            Err(Error::BudgetExhausted { remaining, .. }) => {
                self.remaining = remaining;
                Err(Error::BudgetExhausted { requested: n, remaining })
            }
            Err(e) => Err(e),
        }
    }

    fn ledger(&self) -> QueryLedger {
        let mut l = QueryLedger::new(self.used + self.remaining);
        l.charge(self.used).expect("used fits its own budget");
        l
    }
}
