//! Training loop and leave-one-event-out evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, EvalContext, Tensor};
use crate::ingest::{EmbeddedThread, VeracityLabel};
use crate::metrics;

use super::forward::{build_forward_expr, build_graphs, predict, ForwardMode, GraphPair};
use super::model::{ModelConfig, ModelParams};
use super::VerifierError;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5431;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

struct PreparedThread {
    graph: GraphPair,
    embeddings: Tensor,
    stance: Tensor,
    target: usize,
}

fn prepare(
    dataset: &[EmbeddedThread],
    config: &ModelConfig,
) -> Result<Vec<PreparedThread>, VerifierError> {
    if dataset.is_empty() {
        return Err(VerifierError::Data("training dataset is empty".into()));
    }
    dataset
        .iter()
        .map(|thread| {
            let label = thread.gold_label.ok_or_else(|| {
                VerifierError::Data(format!("thread '{}' has no gold label", thread.thread_id))
            })?;
            if !thread.has_features() {
                return Err(VerifierError::Data(format!(
                    "thread '{}' has no attached features",
                    thread.thread_id
                )));
            }
            let embeddings = Tensor::from_rows(&thread.embeddings)?;
            let stance = Tensor::from_rows(&thread.stance)?;
            if embeddings.cols() != config.embed_dim || stance.cols() != config.stance_dim {
                return Err(VerifierError::Data(format!(
                    "thread '{}' dims ({}, {}) do not match config (n={}, s={})",
                    thread.thread_id,
                    embeddings.cols(),
                    stance.cols(),
                    config.embed_dim,
                    config.stance_dim
                )));
            }
            Ok(PreparedThread {
                graph: build_graphs(thread)?,
                embeddings,
                stance,
                target: label.class_index(),
            })
        })
        .collect()
}

fn thread_loss_and_grads(
    params: &ModelParams,
    item: &PreparedThread,
    dropout_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>), VerifierError> {
    let mode = if params.config.edge_dropout > 0.0 {
        ForwardMode::Train { seed: dropout_seed }
    } else {
        ForwardMode::Infer
    };
    let mut expr = build_forward_expr(params, &item.graph, mode)?;
    let loss = expr
        .graph
        .cross_entropy_with_logits(expr.logits, vec![item.target])?;
    let mut bindings = expr.bindings(params);
    bindings.bind("embeddings", item.embeddings.clone());
    bindings.bind("stance", item.stance.clone());
    let ctx = EvalContext::infer();
    let value = expr.graph.evaluate(loss, &bindings, &ctx)?.scalar_value()?;
    let grads = expr.graph.gradient(loss, &bindings, &ctx)?;
    Ok((value, grads))
}

/// Train the verifier. Deterministic for a fixed config seed: shuffling,
/// initialization, and edge-dropout streams are all derived from it.
pub fn train(dataset: &[EmbeddedThread], config: &ModelConfig) -> Result<TrainOutcome, VerifierError> {
    config.validate()?;
    let prepared = prepare(dataset, config)?;
    let mut params = ModelParams::init(config)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(config.seed ^ DROPOUT_SALT);
    let mut loss_history = Vec::with_capacity(config.epochs);

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(config.batch_size) {
            // Seeds are drawn sequentially so batch parallelism cannot
            // perturb the dropout stream.
            let seeded: Vec<(usize, u64)> = chunk
                .iter()
                .map(|&i| (i, dropout_rng.next_u64()))
                .collect();
            let results: Vec<(f64, BTreeMap<String, Tensor>)> = seeded
                .par_iter()
                .map(|&(i, seed)| thread_loss_and_grads(&params, &prepared[i], seed))
                .collect::<Result<_, _>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut batch_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (name, grad) in grads {
                    if !params.weights.contains_key(name) {
                        continue;
                    }
                    match batch_grads.get_mut(name) {
                        Some(acc) => acc.add_assign(grad)?,
                        None => {
                            batch_grads.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
            for grad in batch_grads.values_mut() {
                *grad = grad.scaled(scale);
            }
            adam.step(&mut params.weights, &batch_grads)?;
        }
        loss_history.push(epoch_loss / prepared.len() as f64);
    }

    Ok(TrainOutcome {
        params,
        loss_history,
    })
}

/// Training accuracy of a trained model over a labeled dataset.
pub fn training_accuracy(params: &ModelParams, dataset: &[EmbeddedThread]) -> Result<f64, VerifierError> {
    let mut correct = 0usize;
    for thread in dataset {
        let (label, _) = predict(params, thread)?;
        if Some(label) == thread.gold_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub event: String,
    pub macro_f1: f64,
    /// Rows = gold, columns = predicted, in label order.
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
}

/// Per-fold and overall scores for leave-one-event-out evaluation. Whether
/// "overall" pools predictions across folds or averages fold scores is a
/// reporting convention; both are emitted, labeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<FoldResult>,
    pub overall_mean_of_folds: f64,
    pub overall_micro_pooled: f64,
}

/// Leave-one-event-out cross-validation: for each event, train on the other
/// events and evaluate macro-F1 on the held-out one. Folds run in parallel;
/// each is deterministic in the config seed.
pub fn loco_cv(dataset: &[EmbeddedThread], config: &ModelConfig) -> Result<FoldReport, VerifierError> {
    let mut events: Vec<String> = dataset.iter().map(|t| t.event.clone()).collect();
    events.sort();
    events.dedup();
    if events.len() < 2 {
        return Err(VerifierError::Data(format!(
            "leave-one-event-out needs at least 2 events, found {}",
            events.len()
        )));
    }

    let per_fold: Vec<(FoldResult, Vec<(VeracityLabel, VeracityLabel)>)> = events
        .par_iter()
        .map(|event| -> Result<_, VerifierError> {
            let train_set: Vec<EmbeddedThread> = dataset
                .iter()
                .filter(|t| &t.event != event)
                .cloned()
                .collect();
            let test_set: Vec<&EmbeddedThread> =
                dataset.iter().filter(|t| &t.event == event).collect();
            let outcome = train(&train_set, config)?;

            let mut pairs = Vec::with_capacity(test_set.len());
            for thread in &test_set {
                let gold = thread.gold_label.ok_or_else(|| {
                    VerifierError::Data(format!("test thread '{}' has no gold label", thread.thread_id))
                })?;
                let (pred, _) = predict(&outcome.params, thread)?;
                pairs.push((pred, gold));
            }
            let preds: Vec<VeracityLabel> = pairs.iter().map(|p| p.0).collect();
            let golds: Vec<VeracityLabel> = pairs.iter().map(|p| p.1).collect();
            let score = metrics::macro_f1(&preds, &golds, &VeracityLabel::ALL)
                .map_err(|e| VerifierError::Data(e.to_string()))?;
            let confusion = metrics::confusion_matrix(&golds, &preds, &VeracityLabel::ALL)
                .map_err(|e| VerifierError::Data(e.to_string()))?;
            Ok((
                FoldResult {
                    event: event.clone(),
                    macro_f1: score,
                    confusion,
                    n_test: test_set.len(),
                },
                pairs,
            ))
        })
        .collect::<Result<_, _>>()?;

    let folds: Vec<FoldResult> = per_fold.iter().map(|(f, _)| f.clone()).collect();
    let overall_mean_of_folds =
        folds.iter().map(|f| f.macro_f1).sum::<f64>() / folds.len() as f64;
    let pooled: Vec<(VeracityLabel, VeracityLabel)> =
        per_fold.into_iter().flat_map(|(_, pairs)| pairs).collect();
    let preds: Vec<VeracityLabel> = pooled.iter().map(|p| p.0).collect();
    let golds: Vec<VeracityLabel> = pooled.iter().map(|p| p.1).collect();
    let overall_micro_pooled = metrics::macro_f1(&preds, &golds, &VeracityLabel::ALL)
        .map_err(|e| VerifierError::Data(e.to_string()))?;

    Ok(FoldReport {
        folds,
        overall_mean_of_folds,
        overall_micro_pooled,
    })
}
