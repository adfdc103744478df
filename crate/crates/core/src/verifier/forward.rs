//! Graph construction and the forward pass of the verifier.
//!
//! Each branch runs mean-aggregation layers (GraphSage style: the node's own
//! representation concatenated with the mean of its in-neighbors, projected
//! and passed through relu) followed by attention-weighted aggregation layers
//! over the same edges. Branch outputs are concatenated per node with the
//! stance projection, mean-pooled over nodes, and the two pooled vectors form
//! a 2-token sequence for multi-head attention; the attended tokens are
//! concatenated and mapped to 3 logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, EvalContext, ExprGraph, NodeId, Tensor};
use crate::ingest::{EmbeddedThread, VeracityLabel};

use super::model::ModelParams;
use super::VerifierError;

/// Mask value that zeroes a softmax entry: exp(x - max) underflows to zero
/// for any realistic score scale.
const NEG_MASK: f64 = -1e30;

/// Slope of the leaky-relu used in attention scoring.
const GAT_SLOPE: f64 = 0.2;

/// Propagation (parent -> child) and dispersion (child -> parent) edges over
/// a thread, indexed in canonical post order. Node 0 is the source post.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphPair {
    pub n_nodes: usize,
    pub prop_edges: Vec<(usize, usize)>,
    pub disp_edges: Vec<(usize, usize)>,
}

/// Build the propagation/dispersion pair from a thread's reply structure.
pub fn build_graphs(thread: &EmbeddedThread) -> Result<GraphPair, VerifierError> {
    let index = thread.post_index();
    let n_nodes = thread.posts.len();
    let mut prop_edges = Vec::with_capacity(n_nodes.saturating_sub(1));
    for (child_idx, post) in thread.posts.iter().enumerate() {
        if post.is_source {
            continue;
        }
        let parent = post.parent_id.as_deref().ok_or_else(|| {
            VerifierError::Graph(format!("post '{}' has no parent and is not the source", post.id))
        })?;
        let parent_idx = *index.get(parent).ok_or_else(|| {
            VerifierError::Graph(format!("post '{}' references unknown parent '{parent}'", post.id))
        })?;
        prop_edges.push((parent_idx, child_idx));
    }

    // The reply structure must be a tree rooted at node 0.
    let mut reached = vec![false; n_nodes];
    reached[0] = true;
    let mut frontier = vec![0usize];
    while let Some(node) = frontier.pop() {
        for &(p, c) in &prop_edges {
            if p == node && !reached[c] {
                reached[c] = true;
                frontier.push(c);
            }
        }
    }
    if reached.iter().any(|r| !r) {
        return Err(VerifierError::Graph(
            "reply structure is not a tree rooted at the source (cycle or disconnect)".into(),
        ));
    }

    let disp_edges = prop_edges.iter().map(|&(p, c)| (c, p)).collect();
    Ok(GraphPair {
        n_nodes,
        prop_edges,
        disp_edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Infer,
    /// Applies edge dropout with the mask drawn from this seed.
    Train { seed: u64 },
}

/// In-neighbor sets (with self-loops) for mean aggregation.
fn neighbor_sets(n_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..n_nodes).map(|i| vec![i]).collect();
    for &(src, dst) in edges {
        sets[dst].push(src);
    }
    sets
}

/// Dense additive attention mask: 0 on self-loops and in-edges, a large
/// negative constant elsewhere. Row = receiver, column = sender.
fn attention_mask(n_nodes: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut mask = Tensor::from_flat(
        n_nodes,
        n_nodes,
        vec![NEG_MASK; n_nodes * n_nodes],
    )
    .expect("mask shape");
    for i in 0..n_nodes {
        mask.set(i, i, 0.0);
    }
    for &(src, dst) in edges {
        mask.set(dst, src, 0.0);
    }
    mask
}

/// The built forward expression with handles to its interesting nodes.
pub struct ForwardExpr {
    pub graph: ExprGraph,
    pub logits: NodeId,
}

impl ForwardExpr {
    /// Bindings pre-loaded with the model weights; callers add `embeddings`
    /// and `stance`.
    pub fn bindings(&self, params: &ModelParams) -> Bindings {
        let mut bindings = Bindings::new();
        bindings.extend_from(&params.weights);
        bindings
    }
}

/// Build the logits expression for one thread graph. In train mode, edges
/// are dropped from both branches (mirrored) according to a Bernoulli keep
/// mask over the propagation edges, sampled once from the mode's seed.
pub fn build_forward_expr(
    params: &ModelParams,
    graph_pair: &GraphPair,
    mode: ForwardMode,
) -> Result<ForwardExpr, VerifierError> {
    let config = &params.config;
    let l = graph_pair.n_nodes;

    let (prop_edges, disp_edges) = match mode {
        ForwardMode::Infer => (graph_pair.prop_edges.clone(), graph_pair.disp_edges.clone()),
        ForwardMode::Train { seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let keep: Vec<bool> = graph_pair
                .prop_edges
                .iter()
                .map(|_| rng.gen::<f64>() >= config.edge_dropout)
                .collect();
            let prop: Vec<(usize, usize)> = graph_pair
                .prop_edges
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(&e, _)| e)
                .collect();
            let disp = prop.iter().map(|&(p, c)| (c, p)).collect();
            (prop, disp)
        }
    };

    let mut g = ExprGraph::new();
    let embeddings = g.input("embeddings", l, config.embed_dim)?;
    let stance = g.input("stance", l, config.stance_dim)?;

    let weight_node = {
        let mut nodes = std::collections::BTreeMap::new();
        for (name, tensor) in &params.weights {
            let id = g.param(name.clone(), tensor.rows(), tensor.cols())?;
            nodes.insert(name.clone(), id);
        }
        move |name: &str| -> NodeId { nodes[name] }
    };

    let branch = |g: &mut ExprGraph,
                      prefix: &str,
                      edges: &[(usize, usize)]|
     -> Result<NodeId, VerifierError> {
        let sets = neighbor_sets(l, edges);
        let mut h = embeddings;
        for i in 0..config.sage_layers {
            let agg = g.mean_rows_over_sets(h, sets.clone())?;
            let both = g.concat_cols(&[h, agg])?;
            let w = weight_node(&format!("{prefix}.sage{i}.w"));
            let b = weight_node(&format!("{prefix}.sage{i}.b"));
            let proj = g.matmul(both, w)?;
            let biased = g.add(proj, b)?;
            h = g.relu(biased);
        }
        if config.gat_layers > 0 {
            let mask = g.constant(attention_mask(l, edges));
            let zeros = g.constant(Tensor::zeros(l, l));
            for i in 0..config.gat_layers {
                let w = weight_node(&format!("{prefix}.gat{i}.w"));
                let a_src = weight_node(&format!("{prefix}.gat{i}.a_src"));
                let a_dst = weight_node(&format!("{prefix}.gat{i}.a_dst"));
                let hw = g.matmul(h, w)?;
                let s_src = g.matmul(hw, a_src)?;
                let s_dst = g.matmul(hw, a_dst)?;
                let s_src_row = g.transpose(s_src);
                let receiver = g.add(zeros, s_dst)?;
                let raw = g.add(receiver, s_src_row)?;
                let scored = g.leaky_relu(raw, GAT_SLOPE);
                let masked = g.add(scored, mask)?;
                let alpha = g.softmax_rows(masked);
                h = g.matmul(alpha, hw)?;
            }
        }
        Ok(h)
    };

    let prop_out = branch(&mut g, "prop", &prop_edges)?;
    let disp_out = branch(&mut g, "disp", &disp_edges)?;

    let stance_proj = {
        let w = weight_node("stance.w");
        let b = weight_node("stance.b");
        let proj = g.matmul(stance, w)?;
        let biased = g.add(proj, b)?;
        g.relu(biased)
    };

    let prop_star = g.concat_cols(&[prop_out, stance_proj])?;
    let disp_star = g.concat_cols(&[disp_out, stance_proj])?;

    let all_nodes: Vec<usize> = (0..l).collect();
    let pooled_prop = g.mean_rows_over_sets(prop_star, vec![all_nodes.clone()])?;
    let pooled_disp = g.mean_rows_over_sets(disp_star, vec![all_nodes])?;

    // Stack the two pooled vectors into a 2-token sequence. Row-major layout
    // makes the concat + reshape equivalent to stacking rows.
    let d_model = config.token_dim();
    let pair = g.concat_cols(&[pooled_prop, pooled_disp])?;
    let tokens = g.reshape(pair, 2, d_model)?;

    let d_head = d_model / config.attention_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(config.attention_heads);
    for hidx in 0..config.attention_heads {
        let wq = weight_node(&format!("mha.h{hidx}.wq"));
        let wk = weight_node(&format!("mha.h{hidx}.wk"));
        let wv = weight_node(&format!("mha.h{hidx}.wv"));
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt)?;
        let scaled = g.scalar_mul(scores, scale);
        let alpha = g.softmax_rows(scaled);
        heads.push(g.matmul(alpha, v)?);
    }
    let concat = g.concat_cols(&heads)?;
    let wo = weight_node("mha.wo");
    let bo = weight_node("mha.bo");
    let projected = g.matmul(concat, wo)?;
    let attended = g.add(projected, bo)?;

    let flat = g.reshape(attended, 1, 2 * d_model)?;
    let wc = weight_node("classifier.w");
    let bc = weight_node("classifier.b");
    let scored = g.matmul(flat, wc)?;
    let logits = g.add(scored, bc)?;

    Ok(ForwardExpr { graph: g, logits })
}

fn features_as_tensors(
    thread: &EmbeddedThread,
    params: &ModelParams,
) -> Result<(Tensor, Tensor), VerifierError> {
    if !thread.has_features() {
        return Err(VerifierError::Data(format!(
            "thread '{}' has no attached features",
            thread.thread_id
        )));
    }
    let emb = Tensor::from_rows(&thread.embeddings)?;
    let stance = Tensor::from_rows(&thread.stance)?;
    if emb.cols() != params.config.embed_dim || stance.cols() != params.config.stance_dim {
        return Err(VerifierError::Data(format!(
            "thread '{}' features are {}x{} / {}x{}, config expects n={} s={}",
            thread.thread_id,
            emb.rows(),
            emb.cols(),
            stance.rows(),
            stance.cols(),
            params.config.embed_dim,
            params.config.stance_dim
        )));
    }
    Ok((emb, stance))
}

/// Forward pass over explicit feature matrices.
pub fn forward(
    params: &ModelParams,
    graph_pair: &GraphPair,
    embeddings: &Tensor,
    stance: &Tensor,
    mode: ForwardMode,
) -> Result<Tensor, VerifierError> {
    if embeddings.rows() != graph_pair.n_nodes || stance.rows() != graph_pair.n_nodes {
        return Err(VerifierError::Data(format!(
            "feature rows ({}, {}) do not match node count {}",
            embeddings.rows(),
            stance.rows(),
            graph_pair.n_nodes
        )));
    }
    let expr = build_forward_expr(params, graph_pair, mode)?;
    let mut bindings = expr.bindings(params);
    bindings.bind("embeddings", embeddings.clone());
    bindings.bind("stance", stance.clone());
    let ctx = EvalContext::infer();
    Ok(expr.graph.evaluate(expr.logits, &bindings, &ctx)?)
}

/// Forward pass for a featured thread.
pub fn forward_thread(
    params: &ModelParams,
    thread: &EmbeddedThread,
    mode: ForwardMode,
) -> Result<Tensor, VerifierError> {
    let graph_pair = build_graphs(thread)?;
    let (emb, stance) = features_as_tensors(thread, params)?;
    forward(params, &graph_pair, &emb, &stance, mode)
}

pub fn softmax3(logits: &Tensor) -> [f64; 3] {
    let row = logits.row(0);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    [exps[0] / sum, exps[1] / sum, exps[2] / sum]
}

/// Argmax with ties broken in label order (true < false < unverified).
pub fn argmax_label(probs: &[f64; 3]) -> VeracityLabel {
    let mut best = 0usize;
    for i in 1..3 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    VeracityLabel::from_class_index(best).expect("class index in range")
}

/// Predict the veracity label and class probabilities for a thread.
pub fn predict(
    params: &ModelParams,
    thread: &EmbeddedThread,
) -> Result<(VeracityLabel, [f64; 3]), VerifierError> {
    let logits = forward_thread(params, thread, ForwardMode::Infer)?;
    let probs = softmax3(&logits);
    Ok((argmax_label(&probs), probs))
}
