//! Summarization behind a service trait: an HTTP JSON client for external
//! summarizers plus deterministic in-repo stubs so the pipeline runs offline.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ExplainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarizerFlavor {
    /// Two-part template output: main story plus the majority opinion
    /// expressed in the thread.
    OpinionTemplate,
    /// Plain summarization of the whole input.
    Generic,
}

/// Where summaries come from and the input budget for one call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummarizerSpec {
    pub flavor: SummarizerFlavor,
    /// HTTP endpoint; `None` selects the deterministic stub.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_input_posts: usize,
    /// Total character budget for claim + posts; lowest-importance posts are
    /// dropped first.
    pub max_input_chars: usize,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl SummarizerSpec {
    pub fn stub(flavor: SummarizerFlavor) -> Self {
        Self {
            flavor,
            endpoint: None,
            max_input_posts: 64,
            max_input_chars: 2000,
            timeout_secs: 30,
            retries: 2,
        }
    }

    pub fn service(&self) -> Box<dyn SummarizeService> {
        match &self.endpoint {
            Some(endpoint) => Box::new(HttpSummarizer::new(
                endpoint.clone(),
                self.timeout_secs,
                self.retries,
            )),
            None => Box::new(StubSummarizer),
        }
    }
}

pub trait SummarizeService {
    /// Summarize `posts` (already cleaned, importance order) in the context
    /// of `claim`.
    fn summarize(
        &self,
        flavor: SummarizerFlavor,
        claim: &str,
        posts: &[String],
    ) -> Result<String, ExplainError>;
}

/// Deterministic extractive stand-in for the external summarizers.
pub struct StubSummarizer;

impl SummarizeService for StubSummarizer {
    fn summarize(
        &self,
        flavor: SummarizerFlavor,
        claim: &str,
        posts: &[String],
    ) -> Result<String, ExplainError> {
        Ok(match flavor {
            SummarizerFlavor::OpinionTemplate => {
                let top: Vec<&str> = posts.iter().take(2).map(String::as_str).collect();
                if top.is_empty() {
                    format!("Main story: {claim}")
                } else {
                    format!("Main story: {claim} Majority opinion: {}", top.join(" / "))
                }
            }
            SummarizerFlavor::Generic => {
                let mut parts: Vec<&str> = vec![claim];
                parts.extend(posts.iter().map(String::as_str));
                parts.truncate(3);
                parts.join(" ")
            }
        })
    }
}

#[derive(Serialize)]
struct SummarizeRequest<'a> {
    format_version: u32,
    flavor: SummarizerFlavor,
    claim: &'a str,
    posts: &'a [String],
}

#[derive(Deserialize)]
struct SummarizeResponse {
    summary: String,
}

/// Blocking HTTP JSON client: `POST endpoint {flavor, claim, posts[]}`
/// expecting `{summary}`. Failed calls are retried a bounded number of times.
pub struct HttpSummarizer {
    client: reqwest::blocking::Client,
    endpoint: String,
    retries: usize,
}

impl HttpSummarizer {
    pub fn new(endpoint: String, timeout_secs: u64, retries: usize) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .expect("http client");
        Self {
            client,
            endpoint,
            retries,
        }
    }
}

impl SummarizeService for HttpSummarizer {
    fn summarize(
        &self,
        flavor: SummarizerFlavor,
        claim: &str,
        posts: &[String],
    ) -> Result<String, ExplainError> {
        let request = SummarizeRequest {
            format_version: 1,
            flavor,
            claim,
            posts,
        };
        let mut last_error = String::new();
        for _attempt in 0..=self.retries {
            let outcome = self
                .client
                .post(&self.endpoint)
                .json(&request)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<SummarizeResponse>());
            match outcome {
                Ok(response) => return Ok(response.summary),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(ExplainError::Service {
            message: format!("summarizer at {}: {last_error}", self.endpoint),
            retryable: true,
        })
    }
}
