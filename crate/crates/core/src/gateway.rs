//! Chat-completions client with retries, a global in-flight limit, ordered
//! batching, transcripts and deterministic scripted transports.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum GatewayError {
    /// Network failure, timeout, rate limit or 5xx reply.
    #[error("transient service failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed service reply: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Transient(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    /// Client-side sampling seed forwarded to the service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn greedy(messages: Vec<Message>, max_tokens: usize) -> Self {
        Self { messages, temperature: 0.0, n_samples: 1, max_tokens, stop: None, seed: None }
    }

    pub fn sampled(messages: Vec<Message>, temperature: f64, n_samples: usize, max_tokens: usize) -> Self {
        Self { messages, temperature, n_samples, max_tokens, stop: None, seed: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Temperature zero admits a single sample.
    pub fn normalized(&self) -> Result<Self, GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Rejected("temperature must be finite and nonnegative".into()));
        }
        if self.n_samples == 0 || self.max_tokens == 0 {
            return Err(GatewayError::Rejected("n_samples and max_tokens must be positive".into()));
        }
        let mut req = self.clone();
        if req.temperature == 0.0 {
            req.n_samples = 1;
        }
        Ok(req)
    }

    fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub texts: Vec<String>,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Attempts beyond the first.
    pub retries: u32,
}

/// One wire exchange, without retries or limits.
pub trait Transport: Send + Sync {
    fn send(&self, req: &GenerationRequest) -> Result<(Vec<String>, Usage), GatewayError>;
}

impl<F> Transport for F
where
    F: Fn(&GenerationRequest) -> Result<(Vec<String>, Usage), GatewayError> + Send + Sync,
{
    fn send(&self, req: &GenerationRequest) -> Result<(Vec<String>, Usage), GatewayError> {
        self(req)
    }
}

/// Blocking generation contract used by the refinement procedures.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Delay before retry `k` (0-based): `base * 2^k`.
    pub fn delay(&self, k: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << k.min(16))
    }
}

/// Counting semaphore bounding concurrent sends.
#[derive(Debug)]
pub struct Limiter {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    request: &'a GenerationRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a GenerationResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Retrying, rate-limited front end over a transport. Shareable across threads.
pub struct Gateway<T> {
    transport: T,
    policy: RetryPolicy,
    limiter: Limiter,
    transcript: Option<Mutex<BufWriter<File>>>,
}

impl<T: Transport> Gateway<T> {
    pub fn new(transport: T, policy: RetryPolicy, limit: usize) -> Self {
        Self { transport, policy, limiter: Limiter::new(limit), transcript: None }
    }

    /// Appends one JSON line per request outcome to `path`.
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, GatewayError> {
        let file = File::create(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        self.transcript = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn limit(&self) -> usize {
        self.limiter.limit()
    }

    fn record(&self, req: &GenerationRequest, outcome: &Result<GenerationResponse, GatewayError>) {
        let Some(sink) = &self.transcript else { return };
        let line = TranscriptLine {
            request: req,
            response: outcome.as_ref().ok(),
            error: outcome.as_ref().err().map(ToString::to_string),
        };
        let mut w = sink.lock().expect("transcript poisoned");
        if let Ok(text) = serde_json::to_string(&line) {
            if writeln!(w, "{text}").and_then(|()| w.flush()).is_err() {
                log::warn!("transcript write failed");
            }
        }
    }

    fn attempt_all(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let req = req.normalized()?;
        let start = Instant::now();
        let mut retries = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.transport.send(&req)
            };
            match result {
                Ok((texts, usage)) => {
                    if texts.len() != req.n_samples {
                        return Err(GatewayError::Malformed(format!(
                            "expected {} texts, got {}",
                            req.n_samples,
                            texts.len()
                        )));
                    }
                    let latency_ms = u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX);
                    return Ok(GenerationResponse { texts, usage, latency_ms, retries });
                }
                Err(e) if e.is_transient() && retries + 1 < self.policy.max_attempts => {
                    log::debug!("retrying after {e}");
                    std::thread::sleep(self.policy.delay(retries));
                    retries += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(GatewayError::Exhausted { attempts: retries + 1, last: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs every request with at most `limit` in flight; output `i` answers request `i`.
    pub fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<Result<GenerationResponse, GatewayError>> {
        let slots: Vec<Mutex<Option<Result<GenerationResponse, GatewayError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.limit().min(reqs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= reqs.len() {
                        break;
                    }
                    let out = self.generate(&reqs[i]);
                    *slots[i].lock().expect("slot poisoned") = Some(out);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled")).collect()
    }
}

impl<T: Transport> TextGenerator for Gateway<T> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let out = self.attempt_all(req);
        self.record(req, &out);
        out
    }
}

/// Reply rule: the first rule whose `contains` occurs in the prompt answers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: String,
    pub texts: Vec<String>,
}

/// Deterministic offline transport. A request for `n` samples receives the
/// matching rule's texts in order, cycling when `n` exceeds them.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    rules: Vec<ScriptRule>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules, calls: AtomicUsize::new(0) }
    }

    /// Answers every request with `text`.
    pub fn echo(text: impl Into<String>) -> Self {
        Self::new(vec![ScriptRule { contains: String::new(), texts: vec![text.into()] }])
    }

    /// Reads one rule per nonblank line.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut rules = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Config(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Config(format!("script line {}: {e}", n + 1)))?;
            if rule.texts.is_empty() {
                return Err(GatewayError::Config(format!("script line {}: no texts", n + 1)));
            }
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, req: &GenerationRequest) -> Result<(Vec<String>, Usage), GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = req.prompt_text();
        let rule = self
            .rules
            .iter()
            .find(|r| prompt.contains(&r.contains))
            .ok_or_else(|| GatewayError::Rejected("no scripted reply matches the prompt".into()))?;
        let texts = rule.texts.iter().cycle().take(req.n_samples).cloned().collect();
        Ok((texts, Usage::default()))
    }
}

/// HTTP transport speaking the chat-completions JSON shape.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, endpoint: endpoint.into(), model: model.into(), api_key }
    }

    fn body(&self, req: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "n": req.n_samples,
            "max_tokens": req.max_tokens,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Extracts `choices[*].message.content` ordered by `index`, plus usage.
pub fn parse_chat_reply(reply: &Value) -> Result<(Vec<String>, Usage), GatewayError> {
    let choices = reply
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Malformed("no choices array".into()))?;
    let mut indexed = Vec::with_capacity(choices.len());
    for (pos, c) in choices.iter().enumerate() {
        let text = c
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed(format!("choice {pos} has no message content")))?;
        let index = c.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
        indexed.push((index, text.to_string()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    let usage = Usage {
        prompt_tokens: reply.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: reply.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok((indexed.into_iter().map(|(_, t)| t).collect(), usage))
}

impl Transport for HttpTransport {
    fn send(&self, req: &GenerationRequest) -> Result<(Vec<String>, Usage), GatewayError> {
        let mut call = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(self.body(req)).map_err(|e| GatewayError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(format!("status {status}"))),
            408 | 429 | 500..=599 => return Err(GatewayError::Transient(format!("status {status}"))),
            _ => return Err(GatewayError::Rejected(format!("status {status}: {text}"))),
        }
        let reply: Value = serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        parse_chat_reply(&reply)
    }
}

/// Service settings. `endpoint` and `model` may be overridden by
/// `ONTEX_ENDPOINT` and `ONTEX_MODEL`; the credential is read from the
/// variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub concurrency_limit: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_base_secs: f64,
    /// Scripted-reply file; when set, no network is used.
    pub mock_script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "default".into(),
            api_key_env: "ONTEX_API_KEY".into(),
            concurrency_limit: 4,
            timeout_secs: 120,
            max_attempts: 3,
            backoff_base_secs: 0.5,
            mock_script: None,
            transcript: None,
        }
    }
}

impl GatewayConfig {
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var("ONTEX_ENDPOINT") {
            self.endpoint = Some(v);
        }
        if let Ok(v) = std::env::var("ONTEX_MODEL") {
            self.model = v;
        }
        self
    }

    pub fn retry_policy(&self) -> Result<RetryPolicy, GatewayError> {
        if self.max_attempts == 0 {
            return Err(GatewayError::Config("max_attempts must be positive".into()));
        }
        let base = Duration::try_from_secs_f64(self.backoff_base_secs)
            .map_err(|_| GatewayError::Config("backoff_base_secs must be finite and nonnegative".into()))?;
        Ok(RetryPolicy { max_attempts: self.max_attempts, base_delay: base })
    }

    /// Builds a gateway over the scripted transport when `mock_script` is set,
    /// otherwise over HTTP.
    pub fn build(&self) -> Result<Box<dyn TextGenerator>, GatewayError> {
        let policy = self.retry_policy()?;
        if let Some(script) = &self.mock_script {
            let mut gw = Gateway::new(ScriptedTransport::from_path(script)?, policy, self.concurrency_limit);
            if let Some(t) = &self.transcript {
                gw = gw.with_transcript(t)?;
            }
            return Ok(Box::new(gw));
        }
        let endpoint = self.endpoint.clone().ok_or_else(|| GatewayError::Config("no endpoint configured".into()))?;
        let api_key = std::env::var(&self.api_key_env).ok();
        let transport = HttpTransport::new(endpoint, self.model.clone(), api_key, Duration::from_secs(self.timeout_secs));
        let mut gw = Gateway::new(transport, policy, self.concurrency_limit);
        if let Some(t) = &self.transcript {
            gw = gw.with_transcript(t)?;
        }
        Ok(Box::new(gw))
    }
}

impl<G: TextGenerator + ?Sized> TextGenerator for Box<G> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(req)
    }
}

impl<G: TextGenerator + ?Sized> TextGenerator for &G {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay: Duration::ZERO }
    }

    fn req(n: usize, temperature: f64) -> GenerationRequest {
        GenerationRequest::sampled(vec![Message::user("code this")], temperature, n, 64)
    }

    #[test]
    fn echo_returns_text_once() {
        let gw = Gateway::new(ScriptedTransport::echo("fixed"), fast(), 1);
        let r = gw.generate(&req(1, 0.0)).unwrap();
        assert_eq!(r.texts, ["fixed"]);
        assert_eq!(r.retries, 0);
    }

    #[test]
    fn scripted_samples_in_order() {
        let rule = ScriptRule { contains: "code".into(), texts: vec!["a".into(), "b".into(), "c".into()] };
        let gw = Gateway::new(ScriptedTransport::new(vec![rule]), fast(), 2);
        assert_eq!(gw.generate(&req(3, 0.7)).unwrap().texts, ["a", "b", "c"]);
        assert_eq!(gw.generate(&req(4, 0.7)).unwrap().texts, ["a", "b", "c", "a"]);
        assert_eq!(gw.generate(&req(3, 0.0)).unwrap().texts, ["a"]);
    }

    #[test]
    fn transient_failures_retry() {
        let failures = AtomicUsize::new(0);
        let flaky = move |_: &GenerationRequest| {
            if failures.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(GatewayError::Transient("503".into()))
            } else {
                Ok((vec!["ok".to_string()], Usage::default()))
            }
        };
        let r = Gateway::new(flaky, fast(), 1).generate(&req(1, 0.0)).unwrap();
        assert_eq!((r.texts[0].as_str(), r.retries), ("ok", 2));
    }

    #[test]
    fn retries_exhaust_and_skip_permanent_errors() {
        let calls = AtomicUsize::new(0);
        let down = |_: &GenerationRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(GatewayError::Transient("timeout".into()))
        };
        let err = Gateway::new(&down, fast(), 1).generate(&req(1, 0.0)).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let auth_calls = AtomicUsize::new(0);
        let denied = |_: &GenerationRequest| {
            auth_calls.fetch_add(1, Ordering::SeqCst);
            Err(GatewayError::Auth("401".into()))
        };
        assert!(matches!(Gateway::new(&denied, fast(), 1).generate(&req(1, 0.0)), Err(GatewayError::Auth(_))));
        assert_eq!(auth_calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(2000));
    }

    #[test]
    fn wrong_sample_count_is_malformed() {
        let short = |_: &GenerationRequest| Ok((vec!["only".to_string()], Usage::default()));
        assert!(matches!(Gateway::new(short, fast(), 1).generate(&req(2, 0.5)), Err(GatewayError::Malformed(_))));
    }

    #[test]
    fn chat_reply_parsing() {
        let reply = json!({
            "choices": [
                {"index": 1, "message": {"role": "assistant", "content": "second"}},
                {"index": 0, "message": {"role": "assistant", "content": "first"}}
            ],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        });
        let (texts, usage) = parse_chat_reply(&reply).unwrap();
        assert_eq!(texts, ["first", "second"]);
        assert_eq!(usage, Usage { prompt_tokens: 7, completion_tokens: 3 });
        assert!(parse_chat_reply(&json!({"choices": [{}]})).is_err());
    }

    #[test]
    fn script_file_format() {
        let text = "{\"contains\": \"verify\", \"texts\": [\"v\"]}\n\n{\"texts\": [\"d\"]}\n";
        let t = ScriptedTransport::from_reader(text.as_bytes()).unwrap();
        let gw = Gateway::new(t, fast(), 1);
        let ask = |s: &str| GenerationRequest::greedy(vec![Message::user(s)], 8);
        assert_eq!(gw.generate(&ask("please verify")).unwrap().texts, ["v"]);
        assert_eq!(gw.generate(&ask("other")).unwrap().texts, ["d"]);
        assert_eq!(gw.transport().calls(), 2);
        assert!(ScriptedTransport::from_reader("{\"texts\": []}".as_bytes()).is_err());
    }
}
