//! Evaluator clients: a chat-completion HTTP client, the offline keyword
//! stub, and the on-disk response cache.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;

pub trait ChatClient {
    fn model_name(&self) -> &str;
    /// One completion request. Implementations handle their own bounded
    /// retries; an error here is final.
    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, EvalError>;
    /// Outbound requests actually sent (cache hits never reach the client).
    fn requests_sent(&self) -> u64;
}

/// Evaluator selection and connection settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    /// "stub" for the offline evaluator, "http" for a live endpoint.
    pub mode: String,
    pub model: String,
    pub base_url: String,
    /// Environment variable holding the API key; never stored in config.
    pub api_key_env: String,
    pub temperature: f64,
    pub runs: usize,
    pub timeout_secs: u64,
    pub retries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            mode: "stub".into(),
            model: "gpt-3.5-turbo-0301".into(),
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            runs: 1,
            timeout_secs: 60,
            retries: 2,
            max_tokens: None,
        }
    }
}

impl EvaluatorConfig {
    pub fn client(&self) -> Result<Box<dyn ChatClient>, EvalError> {
        match self.mode.as_str() {
            "stub" => Ok(Box::new(StubEvaluator::new())),
            "http" => {
                let key = std::env::var(&self.api_key_env).map_err(|_| {
                    EvalError::Config(format!(
                        "environment variable {} is not set",
                        self.api_key_env
                    ))
                })?;
                Ok(Box::new(HttpChatClient::new(
                    self.base_url.clone(),
                    self.model.clone(),
                    key,
                    self.timeout_secs,
                    self.retries,
                    self.max_tokens,
                )))
            }
            other => Err(EvalError::Config(format!("unknown evaluator mode '{other}'"))),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<ChatMessage<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Blocking chat-completions client. Each request is sent independently.
pub struct HttpChatClient {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: String,
    retries: usize,
    max_tokens: Option<u32>,
    requests: AtomicU64,
}

impl HttpChatClient {
    pub fn new(
        base_url: String,
        model: String,
        api_key: String,
        timeout_secs: u64,
        retries: usize,
        max_tokens: Option<u32>,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .expect("http client");
        Self {
            client,
            base_url,
            model,
            api_key,
            retries,
            max_tokens,
            requests: AtomicU64::new(0),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, EvalError> {
        let request = ChatRequest {
            model: &self.model,
            temperature,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            max_tokens: self.max_tokens,
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut last_error = String::new();
        for _attempt in 0..=self.retries {
            self.requests.fetch_add(1, Ordering::SeqCst);
            let outcome = self
                .client
                .post(&url)
                .bearer_auth(&self.api_key)
                .json(&request)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<ChatResponse>());
            match outcome {
                Ok(response) => {
                    return response
                        .choices
                        .first()
                        .map(|c| c.message.content.clone())
                        .ok_or_else(|| EvalError::Http("response has no choices".into()));
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(EvalError::Http(format!("{url}: {last_error}")))
    }

    fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Deterministic offline evaluator. It reads the target explanation (the
/// last "Explanation:" line of the prompt) and applies fixed keyword rules:
/// denial words map to B, doubt words to C, belief words to A, anything else
/// to D.
pub struct StubEvaluator {
    requests: AtomicU64,
}

impl StubEvaluator {
    pub fn new() -> Self {
        Self {
            requests: AtomicU64::new(0),
        }
    }

    fn rule(explanation: &str) -> &'static str {
        let text = explanation.to_lowercase();
        let any = |words: &[&str]| words.iter().any(|w| text.contains(w));
        if any(&["false", "deny", "denies", "disprove", "wrong", "fake"]) {
            "B"
        } else if any(&["unverified", "sceptical", "skeptical", "doubt", "unsure", "not confirm"]) {
            "C"
        } else if any(&["true", "believe", "confirm", "prove", "evidence"]) {
            "A"
        } else {
            "D"
        }
    }
}

impl Default for StubEvaluator {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatClient for StubEvaluator {
    fn model_name(&self) -> &str {
        "stub-evaluator"
    }

    fn complete(&self, prompt: &str, _temperature: f64) -> Result<String, EvalError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let explanation = prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Explanation: "))
            .unwrap_or("");
        Ok(format!("The answer is {}.", Self::rule(explanation)))
    }

    fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    format_version: u32,
    prompt_hash: String,
    model: String,
    temperature: f64,
    run: usize,
    response: String,
}

/// Directory of JSON records keyed by (model, temperature, prompt, run).
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn prompt_hash(prompt: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hex(&hasher.finalize())
    }

    fn key_path(&self, model: &str, temperature: f64, prompt_hash: &str, run: usize) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(format!("{model}\n{temperature}\n{run}\n{prompt_hash}").as_bytes());
        self.dir.join(format!("{}.json", hex(&hasher.finalize())))
    }

    pub fn get(
        &self,
        model: &str,
        temperature: f64,
        prompt_hash: &str,
        run: usize,
    ) -> Result<Option<String>, EvalError> {
        let path = self.key_path(model, temperature, prompt_hash, run);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| EvalError::Cache(e.to_string()))?;
        let record: CacheRecord =
            serde_json::from_str(&text).map_err(|e| EvalError::Cache(e.to_string()))?;
        if record.format_version != CACHE_FORMAT_VERSION || record.prompt_hash != prompt_hash {
            return Ok(None);
        }
        Ok(Some(record.response))
    }

    pub fn put(
        &self,
        model: &str,
        temperature: f64,
        prompt_hash: &str,
        run: usize,
        response: &str,
    ) -> Result<(), EvalError> {
        fs::create_dir_all(&self.dir).map_err(|e| EvalError::Cache(e.to_string()))?;
        let record = CacheRecord {
            format_version: CACHE_FORMAT_VERSION,
            prompt_hash: prompt_hash.to_string(),
            model: model.to_string(),
            temperature,
            run,
            response: response.to_string(),
        };
        let path = self.key_path(model, temperature, prompt_hash, run);
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_string_pretty(&record).map_err(|e| EvalError::Cache(e.to_string()))?;
        fs::write(&tmp, json).map_err(|e| EvalError::Cache(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| EvalError::Cache(e.to_string()))?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_keyword_rules() {
        assert_eq!(StubEvaluator::rule("this is false news"), "B");
        assert_eq!(StubEvaluator::rule("users doubt the claim"), "C");
        assert_eq!(StubEvaluator::rule("people believe it"), "A");
        assert_eq!(StubEvaluator::rule("nothing relevant here"), "D");
    }

    #[test]
    fn stub_reads_last_explanation_line() {
        let stub = StubEvaluator::new();
        let prompt = "Explanation: users believe it\nYour answer: A\n\nClaim: x\nExplanation: totally false\nYour answer:";
        let response = stub.complete(prompt, 0.0).unwrap();
        assert_eq!(response, "The answer is B.");
        assert_eq!(stub.requests_sent(), 1);
    }

    #[test]
    fn cache_round_trip_and_key_separation() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(tmp.path());
        let hash = ResponseCache::prompt_hash("prompt text");
        cache.put("m", 0.0, &hash, 0, "A").unwrap();
        assert_eq!(cache.get("m", 0.0, &hash, 0).unwrap(), Some("A".into()));
        assert_eq!(cache.get("m", 0.0, &hash, 1).unwrap(), None);
        assert_eq!(cache.get("m", 0.2, &hash, 0).unwrap(), None);
        assert_eq!(cache.get("other", 0.0, &hash, 0).unwrap(), None);
    }

    #[test]
    fn http_client_parses_chat_response() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let request = crate::testhttp::drain_request(&mut stream);
            assert!(request.contains("chat/completions"));
            assert!(request.contains("\"temperature\":0.0"));
            crate::testhttp::respond(
                &mut stream,
                200,
                r#"{"choices":[{"message":{"content":"The answer is C."}}]}"#,
            );
        });
        let client = HttpChatClient::new(
            format!("http://{addr}"),
            "test-model".into(),
            "key".into(),
            5,
            0,
            None,
        );
        let out = client.complete("prompt", 0.0).unwrap();
        assert_eq!(out, "The answer is C.");
        assert_eq!(client.requests_sent(), 1);
        handle.join().unwrap();
    }
}
