//! Post-hoc importance scoring: integrated gradients and Shapley values over
//! posts, the important set `I`, ranked subsets `I_k`, and the cumulative
//! importance accounting.
//!
//! Both methods attribute the pre-softmax logit of a target class. A post's
//! importance is the sum of its per-feature attributions; the important set
//! holds the strictly positive scores in descending order.

mod cache;
mod ig;
mod shapley;

pub use cache::{load_cached, store_cached, CachedAttribution, ATTRIBUTION_CACHE_VERSION};
pub use ig::{integrated_gradients, integrated_gradients_core, IgOutcome};
pub use shapley::{shapley_exact, shapley_exact_core, shapley_sampling, shapley_sampling_core};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Bindings, EvalContext, ExprGraph, NodeId, Tensor};
use crate::ingest::{EmbeddedThread, VeracityLabel};
use crate::verifier::{build_forward_expr, build_graphs, predict, ForwardMode, GraphPair, ModelParams};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Verifier(#[from] crate::verifier::VerifierError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("exact Shapley enumeration refused: {0} posts exceed the 12-post limit")]
    TooManyPosts(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    #[serde(rename = "ig")]
    IntegratedGradients,
    #[serde(rename = "sv")]
    ShapleyValues,
}

impl AttributionMethod {
    pub fn short_name(self) -> &'static str {
        match self {
            AttributionMethod::IntegratedGradients => "ig",
            AttributionMethod::ShapleyValues => "sv",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            AttributionMethod::IntegratedGradients => "IG",
            AttributionMethod::ShapleyValues => "SV",
        }
    }
}

impl std::str::FromStr for AttributionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ig" | "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients),
            "sv" | "shapley" | "shapley_values" => Ok(AttributionMethod::ShapleyValues),
            other => Err(format!("unknown attribution method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AttributionMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
    #[serde(default)]
    pub exact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub elapsed_seconds: f64,
    /// Target-class score at the input and at the all-masked/baseline point;
    /// lets consumers check completeness and efficiency without re-running.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_at_input: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_at_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributionResult {
    pub method: AttributionMethod,
    pub target_class: VeracityLabel,
    /// Per-feature attribution matrix `e` (integrated gradients only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_feature: Option<Vec<Vec<f64>>>,
    /// Per-post importance `f`.
    pub post_scores: Vec<f64>,
    /// All post indices sorted by score descending, ties by index ascending.
    pub ranking: Vec<usize>,
    /// Indices with strictly positive scores, by score descending.
    pub important_set: Vec<usize>,
    pub meta: AttributionMeta,
}

impl AttributionResult {
    pub(crate) fn from_scores(
        method: AttributionMethod,
        target_class: VeracityLabel,
        per_feature: Option<Vec<Vec<f64>>>,
        post_scores: Vec<f64>,
        meta: AttributionMeta,
    ) -> Self {
        let ranking = ranking_of(&post_scores);
        let important_set = important_set_of(&post_scores);
        Self {
            method,
            target_class,
            per_feature,
            post_scores,
            ranking,
            important_set,
            meta,
        }
    }
}

/// All indices sorted by score descending; ties broken by post index.
pub fn ranking_of(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// The important set: strictly positive scores, descending, ties by index.
pub fn important_set_of(scores: &[f64]) -> Vec<usize> {
    ranking_of(scores)
        .into_iter()
        .filter(|&i| scores[i] > 0.0)
        .collect()
}

/// The top k% of the important set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubsetSelection {
    /// Percentage in (0, 100].
    pub k: f64,
    /// Post indices, importance order.
    pub members: Vec<usize>,
    /// Fraction of the thread's total positive importance covered.
    pub cumulative_share: f64,
}

/// Select the top `ceil(k% * |I|)` members of the important set.
pub fn select_topk(result: &AttributionResult, k: f64) -> Result<SubsetSelection, AttributionError> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(AttributionError::Invalid(format!(
            "k = {k} outside (0, 100]"
        )));
    }
    let important = &result.important_set;
    let count = ((k * important.len() as f64) / 100.0).ceil() as usize;
    let members: Vec<usize> = important.iter().take(count).copied().collect();
    let total: f64 = important.iter().map(|&i| result.post_scores[i]).sum();
    let covered: f64 = members.iter().map(|&i| result.post_scores[i]).sum();
    let cumulative_share = if total > 0.0 { covered / total } else { 0.0 };
    Ok(SubsetSelection {
        k,
        members,
        cumulative_share,
    })
}

/// A target-class scorer: maps feature matrices to the target logit. The
/// attribution algorithms only see this surface, so they run unchanged
/// against the verifier or any test stub.
pub trait ScoreModel {
    fn n_posts(&self) -> usize;
    fn score(&self, embeddings: &Tensor, stance: &Tensor) -> Result<f64, AttributionError>;
    /// Score plus its gradient with respect to the embedding matrix.
    fn score_with_embedding_grad(
        &self,
        embeddings: &Tensor,
        stance: &Tensor,
    ) -> Result<(f64, Tensor), AttributionError>;
}

/// The verifier as a [`ScoreModel`] for one thread graph and target class.
/// Dropout is disabled: attribution always runs the inference path.
pub struct VerifierScorer<'a> {
    params: &'a ModelParams,
    graph: ExprGraph,
    target_logit: NodeId,
    n_posts: usize,
}

impl<'a> VerifierScorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        graph_pair: &GraphPair,
        target: VeracityLabel,
    ) -> Result<Self, AttributionError> {
        let expr = build_forward_expr(params, graph_pair, ForwardMode::Infer)?;
        let mut graph = expr.graph;
        let onehot = {
            let mut data = vec![0.0; 3];
            data[target.class_index()] = 1.0;
            Tensor::col_vector(data)
        };
        let pick = graph.constant(onehot);
        let target_logit = graph.matmul(expr.logits, pick)?;
        Ok(Self {
            params,
            graph,
            target_logit,
            n_posts: graph_pair.n_nodes,
        })
    }

    fn bindings(&self, embeddings: &Tensor, stance: &Tensor) -> Bindings {
        let mut bindings = Bindings::new();
        bindings.extend_from(&self.params.weights);
        bindings.bind("embeddings", embeddings.clone());
        bindings.bind("stance", stance.clone());
        bindings
    }
}

impl ScoreModel for VerifierScorer<'_> {
    fn n_posts(&self) -> usize {
        self.n_posts
    }

    fn score(&self, embeddings: &Tensor, stance: &Tensor) -> Result<f64, AttributionError> {
        let bindings = self.bindings(embeddings, stance);
        let value = self
            .graph
            .evaluate(self.target_logit, &bindings, &EvalContext::infer())?;
        Ok(value.scalar_value()?)
    }

    fn score_with_embedding_grad(
        &self,
        embeddings: &Tensor,
        stance: &Tensor,
    ) -> Result<(f64, Tensor), AttributionError> {
        let bindings = self.bindings(embeddings, stance);
        let ctx = EvalContext::infer();
        let value = self
            .graph
            .evaluate(self.target_logit, &bindings, &ctx)?
            .scalar_value()?;
        let mut grads = self.graph.gradient(self.target_logit, &bindings, &ctx)?;
        let grad = grads
            .remove("embeddings")
            .ok_or_else(|| AttributionError::Invalid("no embedding gradient".into()))?;
        Ok((value, grad))
    }
}

pub(crate) fn thread_features(thread: &EmbeddedThread) -> Result<(Tensor, Tensor), AttributionError> {
    if !thread.has_features() {
        return Err(AttributionError::Invalid(format!(
            "thread '{}' has no attached features",
            thread.thread_id
        )));
    }
    Ok((
        Tensor::from_rows(&thread.embeddings)?,
        Tensor::from_rows(&thread.stance)?,
    ))
}

/// Resolve the attribution target: the explicitly requested class, or the
/// model's own prediction.
pub fn resolve_target(
    params: &ModelParams,
    thread: &EmbeddedThread,
    requested: Option<VeracityLabel>,
) -> Result<VeracityLabel, AttributionError> {
    match requested {
        Some(label) => Ok(label),
        None => Ok(predict(params, thread)?.0),
    }
}

/// Dataset-level mean cumulative importance share per k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShareReport {
    pub method: AttributionMethod,
    pub threads: usize,
    /// `(k, mean cumulative share)` pairs in the order requested.
    pub mean_shares: Vec<(f64, f64)>,
}

/// Settings shared by the batch attribution entry points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionSettings {
    pub ig_steps: usize,
    pub sv_permutations: usize,
    pub seed: u64,
    /// Use exact enumeration instead of sampling when the thread is small
    /// enough.
    pub sv_exact_up_to: usize,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self {
            ig_steps: 512,
            sv_permutations: 2000,
            seed: 0,
            sv_exact_up_to: 0,
        }
    }
}

/// Attribute one thread with the given method, targeting the model's
/// prediction unless a class is requested.
pub fn attribute_thread(
    params: &ModelParams,
    thread: &EmbeddedThread,
    method: AttributionMethod,
    settings: &AttributionSettings,
    requested_target: Option<VeracityLabel>,
) -> Result<AttributionResult, AttributionError> {
    let target = resolve_target(params, thread, requested_target)?;
    match method {
        AttributionMethod::IntegratedGradients => {
            integrated_gradients(params, thread, target, settings.ig_steps, None)
        }
        AttributionMethod::ShapleyValues => {
            if thread.posts.len() <= settings.sv_exact_up_to {
                shapley_exact(params, thread, target)
            } else {
                shapley_sampling(params, thread, target, settings.sv_permutations, settings.seed)
            }
        }
    }
}

/// Mean cumulative importance share over a dataset for each requested k.
pub fn importance_share_report(
    dataset: &[EmbeddedThread],
    params: &ModelParams,
    method: AttributionMethod,
    settings: &AttributionSettings,
    ks: &[f64],
) -> Result<ShareReport, AttributionError> {
    let mut sums = vec![0.0; ks.len()];
    for thread in dataset {
        let result = attribute_thread(params, thread, method, settings, None)?;
        for (slot, &k) in sums.iter_mut().zip(ks) {
            *slot += select_topk(&result, k)?.cumulative_share;
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(ShareReport {
        method,
        threads: dataset.len(),
        mean_shares: ks.iter().zip(sums).map(|(&k, s)| (k, s / n)).collect(),
    })
}

pub(crate) fn verifier_scorer<'a>(
    params: &'a ModelParams,
    thread: &EmbeddedThread,
    target: VeracityLabel,
) -> Result<VerifierScorer<'a>, AttributionError> {
    let graph_pair = build_graphs(thread)?;
    VerifierScorer::new(params, &graph_pair, target)
}
