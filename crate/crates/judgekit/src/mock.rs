//! Deterministic mock backend for pipeline tests.
//!
//! Resolution order for each request: explicit rules, fingerprint scripts,
//! the global sequence script, then the seeded generator. A miss with no
//! generator surfaces as a scripting error naming the fingerprint.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::client::{fingerprint, ChatRequest, ClientError, Endpoint, EndpointConfig, Transport};

type Rule = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

#[derive(Default)]
pub struct MockBackend {
    rules: Vec<Rule>,
    by_fingerprint: Mutex<HashMap<String, VecDeque<String>>>,
    sequence: Mutex<VecDeque<String>>,
    generator_seed: Option<u64>,
    always_fail: bool,
    latency: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Canned responses served in call order, regardless of request content.
    pub fn sequence(responses: Vec<String>) -> Self {
        let mock = Self::new();
        *mock.sequence.lock().unwrap() = responses.into();
        mock
    }

    /// Deterministic content-aware generator seeded with `seed`. Produces
    /// well-formed plans, executions, and judge CoTs so whole pipeline stages
    /// can run against it.
    pub fn seeded(seed: u64) -> Self {
        let mut mock = Self::new();
        mock.generator_seed = Some(seed);
        mock
    }

    /// Adds a rule consulted before any script; returning `None` falls through.
    pub fn with_rule<F>(mut self, rule: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        self.rules.push(Box::new(rule));
        self
    }

    /// Scripts responses for one request fingerprint, served in order; the
    /// last entry repeats once the queue drains.
    pub fn script_fingerprint(self, fp: impl Into<String>, responses: Vec<String>) -> Self {
        self.by_fingerprint
            .lock()
            .unwrap()
            .insert(fp.into(), responses.into());
        self
    }

    /// Scripts responses keyed by a request value rather than a raw hash.
    pub fn script_request(self, req: &ChatRequest, responses: Vec<String>) -> Self {
        let fp = fingerprint(req);
        self.script_fingerprint(fp, responses)
    }

    pub fn failing(mut self) -> Self {
        self.always_fail = true;
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Peak number of concurrently in-flight requests observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn into_endpoint(self) -> Endpoint {
        self.into_endpoint_with(EndpointConfig::new("mock://local", "mock-model"))
    }

    pub fn into_endpoint_with(self, config: EndpointConfig) -> Endpoint {
        Endpoint::from_transport(config, Arc::new(self))
    }

    fn generate(&self, seed: u64, req: &ChatRequest) -> String {
        let fp = fingerprint(req);
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(fp.as_bytes());
        let digest = hasher.finalize();
        let tag = hex::encode(&digest[..4]);
        let verdict = if digest[4] & 1 == 0 { "[[A]]" } else { "[[B]]" };
        let content = req.last_user_content();
        if content.contains("help us build an evaluation plan") {
            return format!(
                "[Start of Evaluation Plan]\nTo evaluate the response quality, check item {tag} \
                 against the question and compare completeness.\n[End of Evaluation Plan]"
            );
        }
        if content.contains("[The Start of Evaluation Plan]") {
            return format!(
                "Step 1: applied the plan to both answers (trace {tag}).\n\
                 Step 2: compared the outcomes.\nThe final verdict is: {verdict}"
            );
        }
        if content.contains("output your final verdict") {
            return format!(
                "[Start of Evaluation Plan]\nCheck correctness and completeness (recipe {tag}).\n\
                 [End of Evaluation Plan]\n\n[Start of Plan Execution]\nCompared both answers \
                 step by step (trace {tag}).\n[End of Plan Execution]\n\n[Final Verdict]\n{verdict}"
            );
        }
        format!("Generated text {tag}.\nThe answer is \\boxed{{{}}}", digest[5] % 10)
    }
}

impl Transport for MockBackend {
    fn send(&self, req: &ChatRequest, _model: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let result = self.resolve(req);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

impl MockBackend {
    fn resolve(&self, req: &ChatRequest) -> Result<String, ClientError> {
        if self.always_fail {
            return Err(ClientError::Retriable {
                attempts: 1,
                message: "mock configured to fail".into(),
            });
        }
        for rule in &self.rules {
            if let Some(text) = rule(req) {
                return Ok(text);
            }
        }
        let fp = fingerprint(req);
        {
            let mut scripts = self.by_fingerprint.lock().unwrap();
            if let Some(queue) = scripts.get_mut(&fp) {
                if queue.len() > 1 {
                    return Ok(queue.pop_front().unwrap());
                }
                if let Some(last) = queue.front() {
                    return Ok(last.clone());
                }
            }
        }
        if let Some(text) = self.sequence.lock().unwrap().pop_front() {
            return Ok(text);
        }
        if let Some(seed) = self.generator_seed {
            return Ok(self.generate(seed, req));
        }
        Err(ClientError::ScriptMiss { fingerprint: fp })
    }
}
