//! End-to-end pipeline for graph-based rumour verification with post-hoc
//! explanations: thread ingestion, a differentiable-computation core, the
//! verifier model, importance attribution (integrated gradients and Shapley
//! values), explanation candidate generation, LLM-judged evaluation, and the
//! supporting classification/agreement metrics.

pub mod attribution;
pub mod diffcore;
pub mod explainers;
pub mod ingest;
pub mod llm_eval;
pub mod metrics;
pub mod synth;
pub mod verifier;

#[cfg(test)]
pub(crate) mod testhttp;
