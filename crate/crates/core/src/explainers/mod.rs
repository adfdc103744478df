//! Explanation candidate generation: the two extractive baselines (most
//! important response, most claim-similar response) and the abstractive
//! summaries over important-post subsets, plus the model-independent
//! out-of-domain summary of the whole thread.

mod summarizer;

pub use summarizer::{
    HttpSummarizer, StubSummarizer, SummarizeService, SummarizerFlavor, SummarizerSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionMethod, AttributionResult, SubsetSelection};
use crate::ingest::EmbeddedThread;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("thread has no responses")]
    NoResponses,
    #[error("all embeddings have zero norm; cannot rank similarity")]
    AllZeroEmbeddings,
    #[error("thread '{0}' has no attached features")]
    MissingFeatures(String),
    #[error("no summary kind for k = {0}")]
    InvalidK(f64),
    #[error("no {0} attribution available")]
    MissingAttribution(&'static str),
    #[error("{0}")]
    BadSelection(String),
    #[error("summarizer failure ({retryable}): {message}", retryable = if *.retryable { "retryable" } else { "permanent" })]
    Service { message: String, retryable: bool },
}

/// The explanation candidate kinds, in Table-row order within their groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum CandidateKind {
    #[serde(rename = "important_response_ig")]
    ImportantResponseIg,
    #[serde(rename = "important_response_sv")]
    ImportantResponseSv,
    #[serde(rename = "similar_response")]
    SimilarResponse,
    #[serde(rename = "summary_I25")]
    SummaryI25,
    #[serde(rename = "summary_I50")]
    SummaryI50,
    #[serde(rename = "summary_I")]
    SummaryI,
    #[serde(rename = "out_of_domain_summary")]
    OutOfDomainSummary,
}

impl CandidateKind {
    pub fn summary_kind_for_k(k: f64) -> Result<Self, ExplainError> {
        if (k - 25.0).abs() < 1e-9 {
            Ok(CandidateKind::SummaryI25)
        } else if (k - 50.0).abs() < 1e-9 {
            Ok(CandidateKind::SummaryI50)
        } else if (k - 100.0).abs() < 1e-9 {
            Ok(CandidateKind::SummaryI)
        } else {
            Err(ExplainError::InvalidK(k))
        }
    }

    pub fn is_model_dependent(self) -> bool {
        !matches!(
            self,
            CandidateKind::SimilarResponse | CandidateKind::OutOfDomainSummary
        )
    }
}

/// One generated explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationCandidate {
    pub kind: CandidateKind,
    /// The attribution method behind a model-dependent candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<AttributionMethod>,
    pub text: String,
    /// Every post id fed to the summarizer (claim first), or the single
    /// quoted post for extractive kinds.
    pub source_post_ids: Vec<String>,
    pub model_dependent: bool,
    /// Set when an empty important set forced the out-of-domain fallback.
    #[serde(default)]
    pub fallback: bool,
}

impl ExplanationCandidate {
    /// Report row label, e.g. "Summary of I_50 (IG)".
    pub fn row_label(&self) -> String {
        row_label(self.kind, self.method)
    }
}

pub fn row_label(kind: CandidateKind, method: Option<AttributionMethod>) -> String {
    let suffix = |m: Option<AttributionMethod>| {
        m.map(|m| format!(" ({})", m.display_name())).unwrap_or_default()
    };
    match kind {
        CandidateKind::ImportantResponseIg => "Important Response (IG)".to_string(),
        CandidateKind::ImportantResponseSv => "Important Response (SV)".to_string(),
        CandidateKind::SimilarResponse => "Similar Response".to_string(),
        CandidateKind::SummaryI25 => format!("Summary of I_25{}", suffix(method)),
        CandidateKind::SummaryI50 => format!("Summary of I_50{}", suffix(method)),
        CandidateKind::SummaryI => format!("Summary of I{}", suffix(method)),
        CandidateKind::OutOfDomainSummary => "Out-of-domain Summary".to_string(),
    }
}

/// Row labels in report order.
pub fn table_row_order() -> Vec<String> {
    use AttributionMethod::{IntegratedGradients as Ig, ShapleyValues as Sv};
    vec![
        row_label(CandidateKind::ImportantResponseIg, Some(Ig)),
        row_label(CandidateKind::ImportantResponseSv, Some(Sv)),
        row_label(CandidateKind::SimilarResponse, None),
        row_label(CandidateKind::SummaryI25, Some(Ig)),
        row_label(CandidateKind::SummaryI25, Some(Sv)),
        row_label(CandidateKind::SummaryI50, Some(Ig)),
        row_label(CandidateKind::SummaryI50, Some(Sv)),
        row_label(CandidateKind::SummaryI, Some(Ig)),
        row_label(CandidateKind::SummaryI, Some(Sv)),
        row_label(CandidateKind::OutOfDomainSummary, None),
    ]
}

/// The response scored most important by the attribution method. The source
/// post never competes; ties go to the lower post index.
pub fn important_response(
    thread: &EmbeddedThread,
    attribution: &AttributionResult,
) -> Result<ExplanationCandidate, ExplainError> {
    if thread.posts.len() < 2 {
        return Err(ExplainError::NoResponses);
    }
    let mut best: Option<usize> = None;
    for idx in 1..thread.posts.len() {
        let score = attribution.post_scores[idx];
        match best {
            None => best = Some(idx),
            Some(b) if score > attribution.post_scores[b] => best = Some(idx),
            _ => {}
        }
    }
    let best = best.expect("at least one response");
    let kind = match attribution.method {
        AttributionMethod::IntegratedGradients => CandidateKind::ImportantResponseIg,
        AttributionMethod::ShapleyValues => CandidateKind::ImportantResponseSv,
    };
    Ok(ExplanationCandidate {
        kind,
        method: Some(attribution.method),
        text: thread.posts[best].clean_text.clone(),
        source_post_ids: vec![thread.posts[best].id.clone()],
        model_dependent: true,
        fallback: false,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// The response most semantically similar to the source claim by cosine over
/// the attached embeddings. Zero-norm rows are skipped.
pub fn similar_response(thread: &EmbeddedThread) -> Result<ExplanationCandidate, ExplainError> {
    if thread.posts.len() < 2 {
        return Err(ExplainError::NoResponses);
    }
    if !thread.has_features() {
        return Err(ExplainError::MissingFeatures(thread.thread_id.clone()));
    }
    let source = &thread.embeddings[0];
    let mut best: Option<(usize, f64)> = None;
    for idx in 1..thread.posts.len() {
        let Some(sim) = cosine(source, &thread.embeddings[idx]) else {
            continue;
        };
        match best {
            None => best = Some((idx, sim)),
            Some((_, s)) if sim > s => best = Some((idx, sim)),
            _ => {}
        }
    }
    let (best, _) = best.ok_or(ExplainError::AllZeroEmbeddings)?;
    Ok(ExplanationCandidate {
        kind: CandidateKind::SimilarResponse,
        method: None,
        text: thread.posts[best].clean_text.clone(),
        source_post_ids: vec![thread.posts[best].id.clone()],
        model_dependent: false,
        fallback: false,
    })
}

/// Claim plus selected posts under the spec's input budget. Posts arrive in
/// importance order; the lowest-importance ones are dropped first when over
/// budget.
fn budgeted_posts(
    thread: &EmbeddedThread,
    indices: &[usize],
    spec: &SummarizerSpec,
) -> (String, Vec<usize>, Vec<String>) {
    let mut claim = thread.source().clean_text.clone();
    claim.truncate(spec.max_input_chars);
    let mut kept_indices = Vec::new();
    let mut kept_texts = Vec::new();
    let mut total = claim.len();
    for &idx in indices {
        if kept_indices.len() >= spec.max_input_posts {
            break;
        }
        let text = &thread.posts[idx].clean_text;
        if text.is_empty() {
            continue;
        }
        if total + text.len() + 1 > spec.max_input_chars {
            break;
        }
        total += text.len() + 1;
        kept_indices.push(idx);
        kept_texts.push(text.clone());
    }
    (claim, kept_indices, kept_texts)
}

fn summary_candidate(
    thread: &EmbeddedThread,
    kind: CandidateKind,
    method: Option<AttributionMethod>,
    indices: &[usize],
    flavor: SummarizerFlavor,
    spec: &SummarizerSpec,
    service: &dyn SummarizeService,
    fallback: bool,
) -> Result<ExplanationCandidate, ExplainError> {
    let (claim, kept, posts) = budgeted_posts(thread, indices, spec);
    let text = service.summarize(flavor, &claim, &posts)?;
    let mut source_post_ids = vec![thread.source().id.clone()];
    source_post_ids.extend(kept.iter().map(|&i| thread.posts[i].id.clone()));
    Ok(ExplanationCandidate {
        kind,
        method,
        text,
        source_post_ids,
        model_dependent: kind.is_model_dependent(),
        fallback,
    })
}

/// Summarize an important-post subset with the opinion-guided flavor. An
/// empty selection falls back to summarizing the whole thread with the
/// generic flavor; the candidate is flagged and a warning logged.
pub fn summarize_subset(
    thread: &EmbeddedThread,
    selection: &SubsetSelection,
    method: AttributionMethod,
    spec: &SummarizerSpec,
    service: &dyn SummarizeService,
) -> Result<ExplanationCandidate, ExplainError> {
    let kind = CandidateKind::summary_kind_for_k(selection.k)?;
    if selection.members.is_empty() {
        log::warn!(
            "thread '{}': empty I_{} selection ({}), falling back to out-of-domain summary",
            thread.thread_id,
            selection.k,
            method.display_name()
        );
        let all: Vec<usize> = (1..thread.posts.len()).collect();
        return summary_candidate(
            thread,
            kind,
            Some(method),
            &all,
            SummarizerFlavor::Generic,
            spec,
            service,
            true,
        );
    }
    summary_candidate(
        thread,
        kind,
        Some(method),
        &selection.members,
        SummarizerFlavor::OpinionTemplate,
        spec,
        service,
        false,
    )
}

/// Summarize the entire thread (claim first, canonical order) with the
/// generic flavor; model-independent.
pub fn out_of_domain_summary(
    thread: &EmbeddedThread,
    spec: &SummarizerSpec,
    service: &dyn SummarizeService,
) -> Result<ExplanationCandidate, ExplainError> {
    let all: Vec<usize> = (1..thread.posts.len()).collect();
    summary_candidate(
        thread,
        CandidateKind::OutOfDomainSummary,
        None,
        &all,
        SummarizerFlavor::Generic,
        spec,
        service,
        false,
    )
}

/// A candidate that could not be generated, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSkip {
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CandidateBatch {
    pub candidates: Vec<ExplanationCandidate>,
    pub skips: Vec<CandidateSkip>,
}

/// Generate the full candidate set for one thread: Important Response per
/// method, Similar Response, the three importance summaries per method, and
/// the Out-of-domain Summary. Failures are recorded per candidate without
/// aborting the batch.
pub fn generate_all(
    thread: &EmbeddedThread,
    attributions: &[(AttributionMethod, AttributionResult)],
    spec: &SummarizerSpec,
    service: &dyn SummarizeService,
) -> CandidateBatch {
    use AttributionMethod::{IntegratedGradients as Ig, ShapleyValues as Sv};
    let mut batch = CandidateBatch::default();
    let find = |m: AttributionMethod| attributions.iter().find(|(am, _)| *am == m).map(|(_, r)| r);

    let mut push = |outcome: Result<ExplanationCandidate, ExplainError>, label: String| match outcome {
        Ok(candidate) => batch.candidates.push(candidate),
        Err(e) => batch.skips.push(CandidateSkip {
            label,
            reason: e.to_string(),
        }),
    };

    for (method, kind) in [(Ig, CandidateKind::ImportantResponseIg), (Sv, CandidateKind::ImportantResponseSv)] {
        let label = row_label(kind, Some(method));
        let outcome = find(method)
            .ok_or(ExplainError::MissingAttribution(method.display_name()))
            .and_then(|result| important_response(thread, result));
        push(outcome, label);
    }

    push(
        similar_response(thread),
        row_label(CandidateKind::SimilarResponse, None),
    );

    for k in [25.0, 50.0, 100.0] {
        for method in [Ig, Sv] {
            let kind = CandidateKind::summary_kind_for_k(k).expect("known k");
            let label = row_label(kind, Some(method));
            let outcome = find(method)
                .ok_or(ExplainError::MissingAttribution(method.display_name()))
                .and_then(|result| {
                    let selection = crate::attribution::select_topk(result, k)
                        .map_err(|e| ExplainError::BadSelection(e.to_string()))?;
                    summarize_subset(thread, &selection, method, spec, service)
                });
            push(outcome, label);
        }
    }

    push(
        out_of_domain_summary(thread, spec, service),
        row_label(CandidateKind::OutOfDomainSummary, None),
    );
    batch
}
