//! Client for a remote NLI scoring service.
//!
//! Wire protocol: a single `POST` endpoint.
//!
//! ```text
//! request:  {"pairs": [{"premise": "<evidence>", "hypothesis": "<condition>"}, ...]}
//! response: {"scores": [{"entail": p, "contradict": p, "neutral": p}, ...]}
//! ```
//!
//! Responses are in request order. A bearer token, if any, is taken from
//! the `ABSTAIN_SCORER_TOKEN` environment variable.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{ProbTriple, Scorer, ScorerError, ScoringPair};

pub const TOKEN_ENV: &str = "ABSTAIN_SCORER_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub pairs: Vec<NliPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<ProbTriple>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    /// The server rejected the request or answered with garbage.
    #[error("{0}")]
    Protocol(String),
}

/// Moves one request to the service and back.
pub trait Transport: Send + Sync {
    fn post(&self, request: &ScoreRequest) -> Result<ScoreResponse, TransportError>;

    fn endpoint(&self) -> &str;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, request: &ScoreRequest) -> Result<ScoreResponse, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError::Protocol(format!("HTTP {status}: {detail}")));
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| TransportError::Protocol(format!("bad response body: {e}")))
    }

    fn endpoint(&self) -> &str {
        &self.url
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(250),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

type CacheKey = [u8; 32];

fn cache_key(premise: &str, hypothesis: &str) -> CacheKey {
    let mut h = Sha256::new();
    h.update((premise.len() as u64).to_le_bytes());
    h.update(premise.as_bytes());
    h.update(hypothesis.as_bytes());
    h.finalize().into()
}

/// Batching, retrying, caching scorer over a [`Transport`].
pub struct RemoteScorer<T = HttpTransport> {
    transport: T,
    max_batch: usize,
    retry: RetryPolicy,
    cache: Mutex<HashMap<CacheKey, ProbTriple>>,
    requests: AtomicUsize,
}

impl<T: Transport> RemoteScorer<T> {
    pub fn new(transport: T, max_batch: usize, retry: RetryPolicy) -> Self {
        Self {
            transport,
            max_batch: max_batch.max(1),
            retry,
            cache: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        }
    }

    /// Requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn send(&self, request: &ScoreRequest) -> Result<Vec<ProbTriple>, ScorerError> {
        let mut delay = self.retry.base_delay;
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.transport.post(request) {
                Ok(resp) => {
                    if resp.scores.len() != request.pairs.len() {
                        return Err(ScorerError::Protocol(format!(
                            "sent {} pairs, got {} scores",
                            request.pairs.len(),
                            resp.scores.len()
                        )));
                    }
                    for t in &resp.scores {
                        t.validate()
                            .map_err(|e| ScorerError::Protocol(e.to_string()))?;
                    }
                    return Ok(resp.scores);
                }
                Err(TransportError::Transient(msg)) => last = msg,
                Err(TransportError::Protocol(msg)) => return Err(ScorerError::Protocol(msg)),
            }
        }
        Err(ScorerError::Unavailable(format!(
            "{} after {} attempts: {last}",
            self.transport.endpoint(),
            self.retry.max_attempts.max(1)
        )))
    }

    /// Scores `(hypothesis, premise)` pairs, i.e. `(condition, evidence)`,
    /// returning one triple per pair in order. Cached pairs are not resent;
    /// the rest go out in batches of at most `max_batch`.
    pub fn remote_score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<ProbTriple>, ScorerError> {
        let keys: Vec<CacheKey> = pairs.iter().map(|&(h, p)| cache_key(p, h)).collect();
        let mut pending: Vec<usize> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            let mut queued = std::collections::HashSet::new();
            for (i, k) in keys.iter().enumerate() {
                if !cache.contains_key(k) && queued.insert(*k) {
                    pending.push(i);
                }
            }
        }
        for chunk in pending.chunks(self.max_batch) {
            let request = ScoreRequest {
                pairs: chunk
                    .iter()
                    .map(|&i| NliPair {
                        premise: pairs[i].1.to_string(),
                        hypothesis: pairs[i].0.to_string(),
                    })
                    .collect(),
            };
            let scores = self.send(&request)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (&i, t) in chunk.iter().zip(scores) {
                cache.insert(keys[i], t);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(keys.iter().map(|k| cache[k]).collect())
    }
}

impl<T: Transport> Scorer for RemoteScorer<T> {
    fn score_pairs(&self, pairs: &[ScoringPair<'_>]) -> Result<Vec<ProbTriple>, ScorerError> {
        let texts: Vec<(&str, &str)> = pairs.iter().map(|p| (p.condition, p.evidence)).collect();
        self.remote_score_batch(&texts)
    }

    fn describe(&self) -> String {
        format!("remote_http({})", self.transport.endpoint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Answers from a function of the pair and counts calls; can fail the
    /// first `fail_first` calls with a transient error.
    struct Fake<F> {
        answer: F,
        fail_first: usize,
        calls: AtomicUsize,
        sizes: Mutex<Vec<usize>>,
    }

    impl<F> Fake<F> {
        fn new(answer: F, fail_first: usize) -> Self {
            Self {
                answer,
                fail_first,
                calls: AtomicUsize::new(0),
                sizes: Mutex::new(Vec::new()),
            }
        }
    }

    impl<F: Fn(&NliPair) -> ProbTriple + Send + Sync> Transport for Fake<F> {
        fn post(&self, request: &ScoreRequest) -> Result<ScoreResponse, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(TransportError::Transient("503".into()));
            }
            self.sizes.lock().unwrap().push(request.pairs.len());
            Ok(ScoreResponse {
                scores: request.pairs.iter().map(&self.answer).collect(),
            })
        }

        fn endpoint(&self) -> &str {
            "fake"
        }
    }

    fn by_length(p: &NliPair) -> ProbTriple {
        let e = (p.premise.len() % 10) as f64 / 10.0;
        ProbTriple::new(e, 0.0, 1.0 - e).unwrap()
    }

    fn no_wait(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn pairs(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("cond {i}"), "x".repeat(i))).collect()
    }

    fn refs(p: &[(String, String)]) -> Vec<(&str, &str)> {
        p.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
    }

    #[test]
    fn twelve_pairs_in_batches_of_eight() {
        let scorer = RemoteScorer::new(Fake::new(by_length, 0), 8, no_wait(1));
        let p = pairs(12);
        let out = scorer.remote_score_batch(&refs(&p)).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(scorer.requests_sent(), 2);
        assert_eq!(*scorer.transport.sizes.lock().unwrap(), vec![8, 4]);
        for (i, t) in out.iter().enumerate() {
            assert_eq!(t.entail, (i % 10) as f64 / 10.0);
        }
    }

    #[test]
    fn repeated_pair_served_from_cache() {
        let scorer = RemoteScorer::new(Fake::new(by_length, 0), 8, no_wait(1));
        let p = pairs(3);
        let first = scorer.remote_score_batch(&refs(&p)).unwrap();
        let again = scorer.remote_score_batch(&refs(&p)).unwrap();
        assert_eq!(first, again);
        assert_eq!(scorer.requests_sent(), 1);
    }

    #[test]
    fn duplicates_within_a_batch_sent_once() {
        let scorer = RemoteScorer::new(Fake::new(by_length, 0), 8, no_wait(1));
        let out = scorer
            .remote_score_batch(&[("h", "p"), ("h", "p"), ("h2", "p")])
            .unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(*scorer.transport.sizes.lock().unwrap(), vec![2]);
    }

    #[test]
    fn out_of_range_component_is_protocol_error() {
        let bad = |_: &NliPair| ProbTriple {
            entail: 1.3,
            contradict: 0.0,
            neutral: 0.0,
        };
        let scorer = RemoteScorer::new(Fake::new(bad, 0), 8, no_wait(3));
        assert!(matches!(
            scorer.remote_score_batch(&[("h", "p")]),
            Err(ScorerError::Protocol(_))
        ));
        assert_eq!(scorer.requests_sent(), 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let scorer = RemoteScorer::new(Fake::new(by_length, 2), 8, no_wait(3));
        assert!(scorer.remote_score_batch(&[("h", "p")]).is_ok());
        assert_eq!(scorer.requests_sent(), 3);
    }

    #[test]
    fn retry_budget_exhausted() {
        let scorer = RemoteScorer::new(Fake::new(by_length, 10), 8, no_wait(3));
        assert!(matches!(
            scorer.remote_score_batch(&[("h", "p")]),
            Err(ScorerError::Unavailable(_))
        ));
        assert_eq!(scorer.requests_sent(), 3);
    }

    #[test]
    fn cache_key_separates_fields() {
        assert_ne!(cache_key("ab", "c"), cache_key("a", "bc"));
    }
}
