//! The structure- and stance-aware rumour verification model: propagation and
//! dispersion branches over the reply tree, stance fusion, pooling, a
//! multi-head attention head over the two pooled tokens, and a 3-way
//! classifier, plus the training loop and leave-one-event-out harness.

mod forward;
mod model;
mod train;

pub use forward::{
    argmax_label, build_forward_expr, build_graphs, forward, forward_thread, predict, softmax3,
    ForwardExpr, ForwardMode, GraphPair,
};
pub use model::{ModelConfig, ModelParams, CHECKPOINT_FORMAT_VERSION};
pub use train::{loco_cv, train, training_accuracy, FoldReport, FoldResult, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{EvalContext, Tensor};
    use crate::ingest::{EmbeddedThread, RawPost, VeracityLabel};

    /// A thread with the given parent structure; post i's parent is
    /// `parents[i]` (None = source). Embeddings are seeded small values.
    pub(crate) fn toy_thread(id: &str, parents: &[Option<usize>], n: usize, s: usize) -> EmbeddedThread {
        let posts: Vec<RawPost> = parents
            .iter()
            .enumerate()
            .map(|(i, p)| RawPost {
                id: format!("p{i}"),
                text: format!("post number {i}"),
                parent_id: p.map(|pi| format!("p{pi}")),
                timestamp: Some(i as i64),
            })
            .collect();
        let (mut thread, warnings) =
            EmbeddedThread::from_raw_posts(id.into(), "ev".into(), Some(VeracityLabel::True), posts)
                .unwrap();
        assert!(warnings.is_empty());
        let l = thread.posts.len();
        thread.embeddings = (0..l)
            .map(|i| (0..n).map(|j| ((i * n + j) as f64 * 0.37).sin() * 0.5).collect())
            .collect();
        thread.stance = (0..l)
            .map(|i| (0..s).map(|j| if j == i % s { 1.0 } else { 0.0 }).collect())
            .collect();
        thread
    }

    #[test]
    fn build_graphs_chain() {
        let thread = toy_thread("t", &[None, Some(0), Some(1)], 4, 4);
        let g = build_graphs(&thread).unwrap();
        assert_eq!(g.prop_edges, vec![(0, 1), (1, 2)]);
        assert_eq!(g.disp_edges, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn build_graphs_star() {
        let thread = toy_thread("t", &[None, Some(0), Some(0), Some(0), Some(0)], 4, 4);
        let g = build_graphs(&thread).unwrap();
        assert_eq!(g.prop_edges.len(), 4);
        assert!(g.prop_edges.iter().all(|&(p, _)| p == 0));
    }

    #[test]
    fn build_graphs_single_post() {
        let thread = toy_thread("t", &[None], 4, 4);
        let g = build_graphs(&thread).unwrap();
        assert_eq!(g.n_nodes, 1);
        assert!(g.prop_edges.is_empty());
    }

    #[test]
    fn forward_yields_three_finite_logits() {
        let thread = toy_thread("t", &[None, Some(0), Some(0), Some(1)], 6, 4);
        let params = ModelParams::init(&ModelConfig::small(6, 4)).unwrap();
        let logits = forward_thread(&params, &thread, ForwardMode::Infer).unwrap();
        assert_eq!(logits.shape(), (1, 3));
        assert!(logits.is_finite());
        let probs = softmax3(&logits);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn infer_is_deterministic_and_train_dropout_is_seeded() {
        let thread = toy_thread("t", &[None, Some(0), Some(0), Some(1), Some(2)], 6, 4);
        let params = ModelParams::init(&ModelConfig::small(6, 4)).unwrap();
        let a = forward_thread(&params, &thread, ForwardMode::Infer).unwrap();
        let b = forward_thread(&params, &thread, ForwardMode::Infer).unwrap();
        assert_eq!(a, b);
        let t1 = forward_thread(&params, &thread, ForwardMode::Train { seed: 5 }).unwrap();
        let t2 = forward_thread(&params, &thread, ForwardMode::Train { seed: 5 }).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn sibling_permutation_leaves_infer_logits_unchanged() {
        // Same tree, two sibling orders; rows permuted accordingly.
        let a = toy_thread("t", &[None, Some(0), Some(0), Some(0)], 6, 4);
        let mut b = a.clone();
        // Swap the two sibling replies at indices 1 and 2 (and their rows).
        b.posts.swap(1, 2);
        b.embeddings.swap(1, 2);
        b.stance.swap(1, 2);
        let params = ModelParams::init(&ModelConfig::small(6, 4)).unwrap();

        let graph_a = build_graphs(&a).unwrap();
        let emb_a = Tensor::from_rows(&a.embeddings).unwrap();
        let st_a = Tensor::from_rows(&a.stance).unwrap();
        let la = forward(&params, &graph_a, &emb_a, &st_a, ForwardMode::Infer).unwrap();

        let mut prop = graph_a.prop_edges.clone();
        prop.swap(0, 1);
        let graph_b = GraphPair {
            n_nodes: 4,
            disp_edges: prop.iter().map(|&(p, c)| (c, p)).collect(),
            prop_edges: prop,
        };
        let emb_b = Tensor::from_rows(&b.embeddings).unwrap();
        let st_b = Tensor::from_rows(&b.stance).unwrap();
        let lb = forward(&params, &graph_b, &emb_b, &st_b, ForwardMode::Infer).unwrap();
        // Nodes 1 and 2 swapped roles but are symmetric siblings, so pooled
        // outputs agree.
        for (x, y) in la.data().iter().zip(lb.data()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_features_touch_only_the_bias_path() {
        let thread = toy_thread("t", &[None, Some(0)], 6, 4);
        let params = ModelParams::init(&ModelConfig::small(6, 4)).unwrap();
        let graph = build_graphs(&thread).unwrap();
        let zeros_e = Tensor::zeros(2, 6);
        let zeros_s = Tensor::zeros(2, 4);
        let logits = forward(&params, &graph, &zeros_e, &zeros_s, ForwardMode::Infer).unwrap();
        // With zero inputs and zero biases in the branches, logits reduce to
        // the classifier/attention bias path and must be identical across
        // calls and finite.
        assert!(logits.is_finite());
        let again = forward(&params, &graph, &zeros_e, &zeros_s, ForwardMode::Infer).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn predict_tie_breaks_in_label_order() {
        let probs = [1.0 / 3.0; 3];
        assert_eq!(argmax_label(&probs), VeracityLabel::True);
        let probs = [0.1, 0.45, 0.45];
        assert_eq!(argmax_label(&probs), VeracityLabel::False);
    }

    #[test]
    fn predict_softmax_matches_hand_computation() {
        // logits (2, 0, 0) -> p ~= (0.7869, 0.1065, 0.1065).
        let logits = Tensor::row_vector(vec![2.0, 0.0, 0.0]);
        let probs = softmax3(&logits);
        assert!((probs[0] - 0.78698604).abs() < 1e-6);
        assert!((probs[1] - 0.10650698).abs() < 1e-6);
        assert_eq!(argmax_label(&probs), VeracityLabel::True);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let thread = toy_thread("t", &[None, Some(0)], 6, 4);
        let params = ModelParams::init(&ModelConfig::small(8, 4)).unwrap();
        assert!(forward_thread(&params, &thread, ForwardMode::Infer).is_err());
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        // Relative error 1e-4 against central differences on a 5-post thread.
        let thread = toy_thread("t", &[None, Some(0), Some(0), Some(1), Some(3)], 5, 4);
        let mut config = ModelConfig::small(5, 4);
        config.edge_dropout = 0.0;
        let params = ModelParams::init(&config).unwrap();
        let graph = build_graphs(&thread).unwrap();
        let mut expr = build_forward_expr(&params, &graph, ForwardMode::Infer).unwrap();
        let loss = expr.graph.cross_entropy_with_logits(expr.logits, vec![1]).unwrap();
        let mut bindings = expr.bindings(&params);
        bindings.bind("embeddings", Tensor::from_rows(&thread.embeddings).unwrap());
        bindings.bind("stance", Tensor::from_rows(&thread.stance).unwrap());
        let ctx = EvalContext::infer();
        let grads = expr.graph.gradient(loss, &bindings, &ctx).unwrap();

        let h = 1e-5;
        for (name, base) in &params.weights {
            let grad = &grads[name];
            for i in 0..base.len() {
                let mut plus = bindings.clone();
                let mut t = base.clone();
                t.data_mut()[i] += h;
                plus.bind(name.clone(), t);
                let fp = expr.graph.evaluate(loss, &plus, &ctx).unwrap().scalar_value().unwrap();
                let mut minus = bindings.clone();
                let mut t = base.clone();
                t.data_mut()[i] -= h;
                minus.bind(name.clone(), t);
                let fm = expr.graph.evaluate(loss, &minus, &ctx).unwrap().scalar_value().unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grad.data()[i];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale <= 1e-4,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits_bitwise() {
        let thread = toy_thread("t", &[None, Some(0), Some(1)], 6, 4);
        let params = ModelParams::init(&ModelConfig::small(6, 4)).unwrap();
        let before = forward_thread(&params, &thread, ForwardMode::Infer).unwrap();
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        let loaded = ModelParams::load(buf.as_slice()).unwrap();
        let after = forward_thread(&loaded, &thread, ForwardMode::Infer).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn train_rejects_empty_and_unlabeled() {
        let config = ModelConfig::small(6, 4);
        assert!(train(&[], &config).is_err());
        let mut thread = toy_thread("t", &[None, Some(0)], 6, 4);
        thread.gold_label = None;
        assert!(train(&[thread], &config).is_err());
    }
}
