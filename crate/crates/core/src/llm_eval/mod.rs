//! LLM-based evaluation of explanation informativeness and faithfulness:
//! prompt rendering, evaluator clients with response caching, verdict
//! parsing/categorization, and the temperature-consistency probe.

mod client;
mod prompt;

pub use client::{
    ChatClient, EvaluatorConfig, HttpChatClient, ResponseCache, StubEvaluator,
    CACHE_FORMAT_VERSION,
};
pub use prompt::{
    categorize, parse_letter, render_prompt, Category, EvalPrompt, Letter, MappedAnswer,
    FEW_SHOT_COUNT, PROMPT_TEMPLATE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("evaluator configuration error: {0}")]
    Config(String),
    #[error("http error: {0}")]
    Http(String),
    #[error("cache error: {0}")]
    Cache(String),
}

/// One evaluator response. `letter` is `None` when no standalone option
/// token could be parsed; such verdicts are excluded from aggregation and
/// counted separately.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalVerdict {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letter: Option<Letter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapped: Option<MappedAnswer>,
    pub raw_response: String,
    pub model_name: String,
    pub temperature: f64,
    pub run: usize,
    pub cached: bool,
}

impl EvalVerdict {
    fn new(response: String, model: &str, temperature: f64, run: usize, cached: bool) -> Self {
        let letter = parse_letter(&response);
        Self {
            letter,
            mapped: letter.map(MappedAnswer::from),
            raw_response: response,
            model_name: model.to_string(),
            temperature,
            run,
            cached,
        }
    }

    /// Category against the verifier prediction; `None` when unparseable.
    pub fn category(&self, prediction: crate::ingest::VeracityLabel) -> Option<Category> {
        self.letter.map(|l| categorize(l, prediction))
    }
}

/// Query the evaluator `runs` times for one prompt. Responses are cached by
/// (model, temperature, prompt hash, run index); hits never reach the
/// client.
pub fn query_evaluator(
    client: &dyn ChatClient,
    cache: Option<&ResponseCache>,
    prompt: &EvalPrompt,
    temperature: f64,
    runs: usize,
) -> Result<Vec<EvalVerdict>, EvalError> {
    let hash = ResponseCache::prompt_hash(&prompt.rendered);
    let model = client.model_name().to_string();
    let mut verdicts = Vec::with_capacity(runs);
    for run in 0..runs {
        let cached = match cache {
            Some(c) => c.get(&model, temperature, &hash, run)?,
            None => None,
        };
        let (response, was_cached) = match cached {
            Some(r) => (r, true),
            None => {
                let response = client.complete(&prompt.rendered, temperature)?;
                if let Some(c) = cache {
                    c.put(&model, temperature, &hash, run, &response)?;
                }
                (response, false)
            }
        };
        verdicts.push(EvalVerdict::new(response, &model, temperature, run, was_cached));
    }
    Ok(verdicts)
}

/// Fraction of items whose letters are identical across runs, per
/// temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyTable {
    pub runs: usize,
    /// `(temperature, fraction consistent)` rows in grid order.
    pub per_temperature: Vec<(f64, f64)>,
    pub overall: f64,
}

/// Default probe grid: temperature 0 to 1 in steps of 0.2.
pub fn default_temperature_grid() -> Vec<f64> {
    (0..=5).map(|i| i as f64 * 0.2).collect()
}

/// Evaluate each (claim, explanation) item `runs` times at every temperature
/// and report how often the letters agree across runs.
pub fn consistency_probe(
    client: &dyn ChatClient,
    cache: Option<&ResponseCache>,
    items: &[(String, String)],
    temperatures: &[f64],
    runs: usize,
) -> Result<ConsistencyTable, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput("items"));
    }
    if runs == 0 {
        return Err(EvalError::EmptyInput("runs"));
    }
    let mut per_temperature = Vec::with_capacity(temperatures.len());
    let mut consistent_total = 0usize;
    for &temperature in temperatures {
        let mut consistent = 0usize;
        for (claim, explanation) in items {
            let prompt = render_prompt(claim, explanation)?;
            let verdicts = query_evaluator(client, cache, &prompt, temperature, runs)?;
            let first = verdicts[0].letter;
            if first.is_some() && verdicts.iter().all(|v| v.letter == first) {
                consistent += 1;
            }
        }
        consistent_total += consistent;
        per_temperature.push((temperature, consistent as f64 / items.len() as f64));
    }
    Ok(ConsistencyTable {
        runs,
        per_temperature,
        overall: consistent_total as f64 / (items.len() * temperatures.len()) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt() -> EvalPrompt {
        render_prompt("a claim", "users believe this is false").unwrap()
    }

    #[test]
    fn stub_evaluator_is_deterministic_b() {
        let stub = StubEvaluator::new();
        let verdicts = query_evaluator(&stub, None, &prompt(), 0.0, 3).unwrap();
        assert_eq!(verdicts.len(), 3);
        assert!(verdicts.iter().all(|v| v.letter == Some(Letter::B)));
        assert!(verdicts.iter().all(|v| v.mapped == Some(MappedAnswer::False)));
    }

    #[test]
    fn cache_hit_sends_zero_requests() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(tmp.path());
        let stub = StubEvaluator::new();
        let p = prompt();
        let first = query_evaluator(&stub, Some(&cache), &p, 0.0, 3).unwrap();
        assert_eq!(stub.requests_sent(), 3);
        assert!(first.iter().all(|v| !v.cached));

        let warm = StubEvaluator::new();
        let second = query_evaluator(&warm, Some(&cache), &p, 0.0, 3).unwrap();
        assert_eq!(warm.requests_sent(), 0);
        assert!(second.iter().all(|v| v.cached));
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.letter, b.letter);
            assert_eq!(a.raw_response, b.raw_response);
        }
    }

    #[test]
    fn unparseable_response_yields_letterless_verdict() {
        struct Mumbler;
        impl ChatClient for Mumbler {
            fn model_name(&self) -> &str {
                "mumbler"
            }
            fn complete(&self, _prompt: &str, _t: f64) -> Result<String, EvalError> {
                Ok("no letter here".into())
            }
            fn requests_sent(&self) -> u64 {
                0
            }
        }
        let verdicts = query_evaluator(&Mumbler, None, &prompt(), 0.0, 1).unwrap();
        assert_eq!(verdicts[0].letter, None);
        assert_eq!(verdicts[0].mapped, None);
        assert_eq!(verdicts[0].category(crate::ingest::VeracityLabel::True), None);
    }

    #[test]
    fn consistency_probe_is_full_marks_for_deterministic_stub() {
        let stub = StubEvaluator::new();
        let items = vec![
            ("claim one".to_string(), "this is false".to_string()),
            ("claim two".to_string(), "users believe it".to_string()),
            ("claim three".to_string(), "users doubt it".to_string()),
        ];
        let grid = default_temperature_grid();
        let table = consistency_probe(&stub, None, &items, &grid, 3).unwrap();
        assert_eq!(table.per_temperature.len(), 6);
        assert!(table.per_temperature.iter().all(|&(_, f)| f == 1.0));
        assert_eq!(table.overall, 1.0);
    }

    #[test]
    fn consistency_probe_detects_flapping() {
        use std::sync::atomic::{AtomicU64, Ordering};
        struct Flapper(AtomicU64);
        impl ChatClient for Flapper {
            fn model_name(&self) -> &str {
                "flapper"
            }
            fn complete(&self, _prompt: &str, _t: f64) -> Result<String, EvalError> {
                let n = self.0.fetch_add(1, Ordering::SeqCst);
                Ok(if n % 2 == 0 { "A".into() } else { "B".into() })
            }
            fn requests_sent(&self) -> u64 {
                self.0.load(Ordering::SeqCst)
            }
        }
        let items = vec![("c".to_string(), "e".to_string())];
        let table = consistency_probe(&Flapper(AtomicU64::new(0)), None, &items, &[0.0], 2).unwrap();
        assert_eq!(table.per_temperature[0].1, 0.0);
    }
}
