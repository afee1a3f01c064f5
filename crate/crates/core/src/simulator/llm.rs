//! Chat-completion client that turns the endpoint's log-probabilities for
//! the rating token into a rating distribution.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{expected_rating, Ctx, Predictor, RatingDistribution};
use crate::error::{Error, Result};
use crate::explain::Explanation;

/// The rating prompt, sent as the system message.
pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/simulation_prompt.txt");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: String,
    pub top_logprobs: u32,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    /// Response cache (line-delimited JSON), read at start and appended to.
    pub cache: Option<PathBuf>,
    /// Appends every exchanged request/response pair here.
    pub record: Option<PathBuf>,
    /// Serve responses from a recording instead of the network.
    pub replay: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "meta-llama/Meta-Llama-3-8B-Instruct".into(),
            token_env: "SRLAB_LLM_TOKEN".into(),
            top_logprobs: 20,
            max_retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
            timeout_secs: 60,
            cache: None,
            record: None,
            replay: None,
        }
    }
}

/// Sends one JSON request body and returns the response body.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &str, token: Option<&str>) -> Result<String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &str, token: Option<&str>) -> Result<String> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        match req.send_string(body) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| Error::Endpoint(format!("reading response: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                Err(Error::Endpoint(format!(
                    "HTTP {code}: {}",
                    text.chars().take(200).collect::<String>()
                )))
            }
            Err(e) => Err(Error::Endpoint(e.to_string())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Exchange {
    request: String,
    response: String,
}

/// Answers from a recording made with `LlmConfig::record`.
pub struct ReplayTransport {
    responses: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn load(path: &Path) -> Result<Self> {
        let mut responses = HashMap::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exchange = serde_json::from_str(&line)?;
            responses.insert(ex.request, ex.response);
        }
        Ok(Self { responses })
    }
}

impl Transport for ReplayTransport {
    fn post(&self, _: &str, body: &str, _: Option<&str>) -> Result<String> {
        self.responses
            .get(body)
            .cloned()
            .ok_or_else(|| Error::Endpoint("request not present in replay file".into()))
    }
}

/// Token ids separated by spaces, the last one wrapped in `<<` `>>`.
pub fn render_context(tokens: &[u32]) -> String {
    let mut parts: Vec<String> = tokens.iter().map(u32::to_string).collect();
    if let Some(last) = parts.last_mut() {
        *last = format!("<<{last}>>");
    }
    parts.join(" ")
}

/// Reads the digit distribution at the first completion position whose
/// top log-probabilities include a digit.
pub fn parse_rating_response(body: &str) -> Result<RatingDistribution> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("response carries no logprobs".into()))?;
    for pos in content {
        let alts: Vec<&Value> = match pos.get("top_logprobs").and_then(Value::as_array) {
            Some(a) if !a.is_empty() => a.iter().collect(),
            _ => vec![pos],
        };
        let mut probs = [0f64; 10];
        let mut found = false;
        for alt in alts {
            let tok = alt
                .get("token")
                .and_then(Value::as_str)
                .unwrap_or("")
                .trim();
            let lp = alt.get("logprob").and_then(Value::as_f64);
            if let (Some(d), Some(lp)) = (tok.parse::<usize>().ok().filter(|_| tok.len() == 1), lp)
            {
                probs[d] += lp.exp();
                found = true;
            }
        }
        if found {
            let mass: f64 = probs.iter().sum();
            if mass < 0.5 {
                warn!("digit tokens carry only {mass:.3} of the rating mass");
            }
            probs.iter_mut().for_each(|p| *p /= mass);
            return RatingDistribution::new(probs);
        }
    }
    Err(Error::Protocol(
        "no digit tokens in the returned logprobs".into(),
    ))
}

pub struct LlmClient {
    cfg: LlmConfig,
    transport: Box<dyn Transport>,
    token: Option<String>,
    cache: Mutex<HashMap<String, String>>,
    cache_file: Mutex<Option<File>>,
    record_file: Mutex<Option<File>>,
    in_flight: (Mutex<usize>, Condvar),
}

fn append_open(path: &Option<PathBuf>) -> Result<Option<File>> {
    path.as_ref()
        .map(|p| OpenOptions::new().create(true).append(true).open(p))
        .transpose()
        .map_err(Error::from)
}

impl LlmClient {
    /// Builds a client over HTTP, or over the replay file when one is set.
    pub fn new(cfg: LlmConfig) -> Result<Self> {
        let transport: Box<dyn Transport> = match &cfg.replay {
            Some(p) => Box::new(ReplayTransport::load(p)?),
            None => Box::new(HttpTransport::new(Duration::from_secs(cfg.timeout_secs))),
        };
        Self::with_transport(cfg, transport)
    }

    pub fn with_transport(cfg: LlmConfig, transport: Box<dyn Transport>) -> Result<Self> {
        let mut cache = HashMap::new();
        if let Some(p) = cfg.cache.as_ref().filter(|p| p.exists()) {
            for line in BufReader::new(File::open(p)?).lines() {
                let line = line?;
                if let Ok(ex) = serde_json::from_str::<Exchange>(&line) {
                    cache.insert(ex.request, ex.response);
                }
            }
        }
        Ok(Self {
            token: std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty()),
            cache_file: Mutex::new(append_open(&cfg.cache)?),
            record_file: Mutex::new(append_open(&cfg.record)?),
            cache: Mutex::new(cache),
            in_flight: (Mutex::new(0), Condvar::new()),
            transport,
            cfg,
        })
    }

    pub fn request_body(&self, context: &[u32], explanation: &str) -> String {
        let user = format!(
            "Explanation: {explanation}\n\nText: {}",
            render_context(context)
        );
        json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": PROMPT_TEMPLATE},
                {"role": "user", "content": user},
            ],
            "max_tokens": 4,
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": self.cfg.top_logprobs,
        })
        .to_string()
    }

    fn cache_key(body: &str) -> String {
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    fn send_with_retry(&self, body: &str) -> Result<String> {
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let (lock, cv) = &self.in_flight;
        {
            let mut n = lock.lock().unwrap();
            while *n >= self.cfg.max_in_flight.max(1) {
                n = cv.wait(n).unwrap();
            }
            *n += 1;
        }
        let mut attempt = 0;
        let result = loop {
            match self.transport.post(&url, body, self.token.as_deref()) {
                Err(Error::Endpoint(e)) if attempt < self.cfg.max_retries => {
                    warn!("endpoint error (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << attempt));
                    attempt += 1;
                }
                other => break other,
            }
        };
        *lock.lock().unwrap() -= 1;
        cv.notify_one();
        result
    }

    /// Rating distribution for the last token of `context`.
    pub fn rate(&self, context: &[u32], explanation: &str) -> Result<RatingDistribution> {
        let body = self.request_body(context, explanation);
        let key = Self::cache_key(&body);
        let cached = self.cache.lock().unwrap().get(&key).cloned();
        let response = match cached {
            Some(r) => r,
            None => {
                let r = self.send_with_retry(&body)?;
                let mut cache_file = self.cache_file.lock().unwrap();
                if let Some(f) = cache_file.as_mut() {
                    let line = serde_json::to_string(&Exchange {
                        request: key.clone(),
                        response: r.clone(),
                    })?;
                    writeln!(f, "{line}")?;
                }
                if let Some(f) = self.record_file.lock().unwrap().as_mut() {
                    let line = serde_json::to_string(&Exchange {
                        request: body.clone(),
                        response: r.clone(),
                    })?;
                    writeln!(f, "{line}")?;
                }
                self.cache.lock().unwrap().insert(key, r.clone());
                r
            }
        };
        parse_rating_response(&response)
    }
}

/// Predicts the expected rating from the endpoint. Failures after retries
/// become missing predictions.
pub struct LlmPredictor {
    client: LlmClient,
    texts: HashMap<u32, String>,
}

impl LlmPredictor {
    pub fn new(client: LlmClient, explanations: &[Explanation]) -> Self {
        Self {
            client,
            texts: explanations
                .iter()
                .map(|e| (e.latent, e.text.clone()))
                .collect(),
        }
    }

    /// Issues the requests for `jobs` concurrently, bounded by the client's
    /// in-flight limit, so that later `predict` calls hit the cache.
    pub fn prefetch(&self, jobs: &[(u32, Ctx)]) {
        let next = AtomicUsize::new(0);
        let workers = self.client.cfg.max_in_flight.max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((latent, ctx)) = jobs.get(i) else {
                        break;
                    };
                    if let Some(text) = self.texts.get(latent) {
                        let _ = self.client.rate(ctx.tokens, text);
                    }
                });
            }
        });
    }
}

impl Predictor for LlmPredictor {
    fn predict(&self, latent: u32, ctx: &Ctx) -> Result<Option<f64>> {
        let text = self
            .texts
            .get(&latent)
            .ok_or_else(|| Error::Configuration(format!("no explanation for latent {latent}")))?;
        match self.client.rate(ctx.tokens, text) {
            Ok(d) => Ok(Some(expected_rating(&d))),
            Err(e @ (Error::Endpoint(_) | Error::Protocol(_))) => {
                warn!("missing prediction for latent {latent}: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn response(alts: &[(&str, f64)]) -> String {
        let top: Vec<Value> = alts
            .iter()
            .map(|(t, p)| json!({"token": t, "logprob": p.ln()}))
            .collect();
        json!({"choices": [{"logprobs": {"content": [
            {"token": "[", "logprob": 0.0, "top_logprobs": [{"token": "[", "logprob": 0.0}]},
            {"token": alts[0].0, "logprob": alts[0].1.ln(), "top_logprobs": top},
        ]}}]})
        .to_string()
    }

    #[test]
    fn digit_mass_becomes_distribution() {
        let d = parse_rating_response(&response(&[("0", 0.9), ("3", 0.1)])).unwrap();
        assert!((d.probs()[0] - 0.9).abs() < 1e-12 && (d.probs()[3] - 0.1).abs() < 1e-12);
        assert!((expected_rating(&d) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn non_digit_tokens_are_renormalized_away() {
        let d =
            parse_rating_response(&response(&[("7", 0.3), ("seven", 0.6), ("2", 0.1)])).unwrap();
        assert!((d.probs()[7] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn protocol_errors() {
        let r = parse_rating_response(&response(&[("yes", 0.9), ("no", 0.1)]));
        assert!(matches!(r, Err(Error::Protocol(_))));
        let r = parse_rating_response(r#"{"choices":[{"message":{"content":"[3]"}}]}"#);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn context_rendering() {
        assert_eq!(render_context(&[4, 8, 15]), "4 8 <<15>>");
    }

    struct Flaky {
        failures: AtomicU32,
        calls: AtomicU32,
    }

    impl Transport for Flaky {
        fn post(&self, _: &str, _: &str, _: Option<&str>) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::Endpoint("unavailable".into()));
            }
            Ok(response(&[("5", 1.0)]))
        }
    }

    fn fast_cfg() -> LlmConfig {
        LlmConfig {
            backoff_ms: 1,
            max_retries: 2,
            ..Default::default()
        }
    }

    #[test]
    fn retries_then_caches() {
        let t = Flaky {
            failures: AtomicU32::new(2),
            calls: AtomicU32::new(0),
        };
        let client = LlmClient::with_transport(fast_cfg(), Box::new(t)).unwrap();
        assert_eq!(expected_rating(&client.rate(&[1, 2], "x").unwrap()), 5.0);
        assert_eq!(expected_rating(&client.rate(&[1, 2], "x").unwrap()), 5.0);
    }

    #[test]
    fn exhausted_retries_give_missing_prediction() {
        let t = Flaky {
            failures: AtomicU32::new(10),
            calls: AtomicU32::new(0),
        };
        let client = LlmClient::with_transport(fast_cfg(), Box::new(t)).unwrap();
        let e = Explanation {
            latent: 1,
            rule: crate::explain::TokenRule {
                current: vec![2],
                previous: None,
            },
            text: "Active on the token 2.".into(),
            contexts: vec![],
        };
        let p = LlmPredictor::new(client, &[e]);
        let ctx = Ctx {
            tokens: &[1, 2],
            truth: &[],
            key: 0,
        };
        assert_eq!(p.predict(1, &ctx).unwrap(), None);
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("rec.jsonl");
        let live = LlmClient::with_transport(
            LlmConfig {
                record: Some(rec.clone()),
                ..fast_cfg()
            },
            Box::new(Flaky {
                failures: AtomicU32::new(0),
                calls: AtomicU32::new(0),
            }),
        )
        .unwrap();
        let a = live.rate(&[3, 4], "Active on the token 4.").unwrap();
        drop(live);
        let replay = || {
            LlmClient::new(LlmConfig {
                replay: Some(rec.clone()),
                ..fast_cfg()
            })
            .unwrap()
        };
        assert_eq!(replay().rate(&[3, 4], "Active on the token 4.").unwrap(), a);
        assert_eq!(replay().rate(&[3, 4], "Active on the token 4.").unwrap(), a);
        assert!(replay().rate(&[9], "other").is_err());
    }
}
