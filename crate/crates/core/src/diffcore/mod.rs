//! Minimal differentiable-computation core.
//!
//! Provides the tensor type, expression graphs with forward evaluation and
//! exact reverse-mode gradients, and the Adam optimizer. The primitive set is
//! exactly what the verifier model needs; there is no broadcasting beyond the
//! limited forms documented on [`ExprGraph::add`], no GPU path, and no
//! higher-order derivatives.

mod adam;
mod expr;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use expr::{Bindings, EvalContext, ExprGraph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_flat(rows, cols, data).unwrap()
    }

    /// Central finite differences on every leaf entry of a scalar expression.
    fn finite_difference(
        graph: &ExprGraph,
        root: NodeId,
        bindings: &Bindings,
        ctx: &EvalContext,
        leaf: &str,
        h: f64,
    ) -> Tensor {
        let base = bindings.get(leaf).unwrap().clone();
        let mut out = Tensor::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let mut plus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            plus.bind(leaf, t);
            let f_plus = graph.evaluate(root, &plus, ctx).unwrap().scalar_value().unwrap();

            let mut minus = bindings.clone();
            let mut t = base.clone();
            t.data_mut()[i] -= h;
            minus.bind(leaf, t);
            let f_minus = graph.evaluate(root, &minus, ctx).unwrap().scalar_value().unwrap();

            out.data_mut()[i] = (f_plus - f_minus) / (2.0 * h);
        }
        out
    }

    fn assert_close_rel(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-8);
            let rel = (a - n).abs() / scale;
            assert!(rel <= tol, "entry {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    /// Scalar reduction so any tensor-valued node can be gradient-checked:
    /// dot the node with a fixed random projection.
    fn reduce_to_scalar(
        graph: &mut ExprGraph,
        node: NodeId,
        rng: &mut ChaCha20Rng,
    ) -> NodeId {
        let (r, c) = graph.shape_of(node);
        let proj = random_tensor(rng, c, 1);
        let p = graph.constant(proj);
        let v = graph.matmul(node, p).unwrap();
        let ones = graph.constant(Tensor::row_vector(vec![1.0; r]));
        graph.matmul(ones, v).unwrap()
    }

    #[test]
    fn evaluate_matmul_constants() {
        let mut g = ExprGraph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let out = g.evaluate(c, &Bindings::new(), &EvalContext::infer()).unwrap();
        assert_eq!(out.shape(), (2, 1));
        assert_eq!(out.data(), &[6.0, 1.0]);
    }

    #[test]
    fn evaluate_relu() {
        let mut g = ExprGraph::new();
        let x = g.constant(Tensor::row_vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let out = g.evaluate(y, &Bindings::new(), &EvalContext::infer()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = ExprGraph::new();
        let x = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let y = g.softmax_rows(x);
        let out = g.evaluate(y, &Bindings::new(), &EvalContext::infer()).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut g = ExprGraph::new();
        let x = g.constant(random_tensor(&mut rng, 5, 9));
        let y = g.softmax_rows(x);
        let out = g.evaluate(y, &Bindings::new(), &EvalContext::infer()).unwrap();
        for r in 0..5 {
            let sum: f64 = out.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(out.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn linear_gradient_is_the_weight_vector() {
        let mut g = ExprGraph::new();
        let w = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let x = g.input("x", 2, 1).unwrap();
        let f = g.matmul(w, x).unwrap();
        let mut b = Bindings::new();
        b.bind("x", Tensor::col_vector(vec![5.0, -3.0]));
        let grads = g.gradient(f, &b, &EvalContext::infer()).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_gradient_gates_by_sign() {
        for (x_val, expect) in [(2.0, 1.0), (-2.0, 0.0)] {
            let mut g = ExprGraph::new();
            let x = g.input("x", 1, 1).unwrap();
            let f = g.relu(x);
            let mut b = Bindings::new();
            b.bind("x", Tensor::scalar(x_val));
            let grads = g.gradient(f, &b, &EvalContext::infer()).unwrap();
            assert_eq!(grads["x"].data()[0], expect);
        }
    }

    #[test]
    fn non_scalar_gradient_root_rejected() {
        let mut g = ExprGraph::new();
        let x = g.input("x", 2, 2).unwrap();
        let y = g.relu(x);
        let mut b = Bindings::new();
        b.bind("x", Tensor::zeros(2, 2));
        assert!(g.gradient(y, &b, &EvalContext::infer()).is_err());
    }

    #[test]
    fn unbound_leaf_is_an_error() {
        let mut g = ExprGraph::new();
        let x = g.input("x", 1, 1).unwrap();
        let y = g.relu(x);
        assert!(g.evaluate(y, &Bindings::new(), &EvalContext::infer()).is_err());
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut g = ExprGraph::new();
        g.input("x", 1, 1).unwrap();
        assert!(g.param("x", 1, 1).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut g = ExprGraph::new();
        let x = g.constant(Tensor::scalar(1e308));
        let y = g.scalar_mul(x, 1e10);
        assert!(matches!(
            g.evaluate(y, &Bindings::new(), &EvalContext::infer()),
            Err(DiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn mean_rows_invariant_to_index_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 6, 4);
        let mut g1 = ExprGraph::new();
        let a1 = g1.constant(t.clone());
        let m1 = g1.mean_rows_over_sets(a1, vec![vec![0, 2, 5], vec![1]]).unwrap();
        let out1 = g1.evaluate(m1, &Bindings::new(), &EvalContext::infer()).unwrap();

        let mut g2 = ExprGraph::new();
        let a2 = g2.constant(t);
        let m2 = g2.mean_rows_over_sets(a2, vec![vec![5, 0, 2], vec![1]]).unwrap();
        let out2 = g2.evaluate(m2, &Bindings::new(), &EvalContext::infer()).unwrap();
        for (a, b) in out1.data().iter().zip(out2.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn dropout_rows_deterministic_and_inactive_at_inference() {
        let mut g = ExprGraph::new();
        let x = g.constant(Tensor::from_flat(8, 2, vec![1.0; 16]).unwrap());
        let y = g.dropout_rows(x, 0.5).unwrap();
        let infer = g.evaluate(y, &Bindings::new(), &EvalContext::infer()).unwrap();
        assert!(infer.data().iter().all(|&v| v == 1.0));

        let t1 = g.evaluate(y, &Bindings::new(), &EvalContext::train(42)).unwrap();
        let t2 = g.evaluate(y, &Bindings::new(), &EvalContext::train(42)).unwrap();
        assert_eq!(t1, t2);
        let t3 = g.evaluate(y, &Bindings::new(), &EvalContext::train(43)).unwrap();
        assert_ne!(t1, t3);
        // Rows are zeroed whole.
        for r in 0..8 {
            let row = t1.row(r);
            assert!(row == [0.0, 0.0] || row == [1.0, 1.0]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_per_primitive() {
        // Every differentiable primitive, checked against central differences
        // on random small tensors: max relative error 1e-6 at h = 1e-5.
        let mut rng = ChaCha20Rng::seed_from_u64(991);
        let ctx = EvalContext::infer();
        let h = 1e-5;
        let tol = 1e-6;

        type Builder = fn(&mut ExprGraph, NodeId) -> NodeId;
        let cases: Vec<(&str, (usize, usize), Builder)> = vec![
            ("relu", (3, 4), |g, x| g.relu(x)),
            ("leaky-relu", (3, 4), |g, x| g.leaky_relu(x, 0.2)),
            ("softmax-rows", (3, 4), |g, x| g.softmax_rows(x)),
            ("scalar-mul", (3, 4), |g, x| g.scalar_mul(x, -1.7)),
            ("transpose", (3, 4), |g, x| g.transpose(x)),
            ("reshape", (3, 4), |g, x| g.reshape(x, 2, 6).unwrap()),
            ("gather-rows", (5, 3), |g, x| {
                g.gather_rows(x, vec![0, 3, 3, 1]).unwrap()
            }),
            ("mean-rows", (5, 3), |g, x| {
                g.mean_rows_over_sets(x, vec![vec![0, 1, 4], vec![2], vec![3, 0]]).unwrap()
            }),
        ];

        for (name, (r, c), build) in cases {
            let mut g = ExprGraph::new();
            let x = g.input("x", r, c).unwrap();
            let y = build(&mut g, x);
            let root = reduce_to_scalar(&mut g, y, &mut rng);
            let mut b = Bindings::new();
            // Keep relu/leaky-relu inputs away from the kink.
            let mut t = random_tensor(&mut rng, r, c);
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.1;
                }
            }
            b.bind("x", t);
            let grads = g.gradient(root, &b, &ctx).unwrap();
            let fd = finite_difference(&g, root, &b, &ctx, "x", h);
            assert_close_rel(&grads["x"], &fd, tol);
            let _ = name;
        }
    }

    #[test]
    fn gradients_match_finite_differences_binary_ops() {
        let mut rng = ChaCha20Rng::seed_from_u64(992);
        let ctx = EvalContext::infer();

        // matmul
        let mut g = ExprGraph::new();
        let a = g.input("a", 3, 4).unwrap();
        let b = g.input("b", 4, 2).unwrap();
        let y = g.matmul(a, b).unwrap();
        let root = reduce_to_scalar(&mut g, y, &mut rng);
        let mut bind = Bindings::new();
        bind.bind("a", random_tensor(&mut rng, 3, 4));
        bind.bind("b", random_tensor(&mut rng, 4, 2));
        let grads = g.gradient(root, &bind, &ctx).unwrap();
        for leaf in ["a", "b"] {
            let fd = finite_difference(&g, root, &bind, &ctx, leaf, 1e-5);
            assert_close_rel(&grads[leaf], &fd, 1e-6);
        }

        // add with row- and column-broadcast right operands
        for (br, bc) in [(3, 4), (1, 4), (3, 1)] {
            let mut g = ExprGraph::new();
            let a = g.input("a", 3, 4).unwrap();
            let b = g.input("b", br, bc).unwrap();
            let y = g.add(a, b).unwrap();
            let root = reduce_to_scalar(&mut g, y, &mut rng);
            let mut bind = Bindings::new();
            bind.bind("a", random_tensor(&mut rng, 3, 4));
            bind.bind("b", random_tensor(&mut rng, br, bc));
            let grads = g.gradient(root, &bind, &ctx).unwrap();
            for leaf in ["a", "b"] {
                let fd = finite_difference(&g, root, &bind, &ctx, leaf, 1e-5);
                assert_close_rel(&grads[leaf], &fd, 1e-6);
            }
        }

        // concat-cols
        let mut g = ExprGraph::new();
        let a = g.input("a", 3, 2).unwrap();
        let b = g.input("b", 3, 3).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        let root = reduce_to_scalar(&mut g, y, &mut rng);
        let mut bind = Bindings::new();
        bind.bind("a", random_tensor(&mut rng, 3, 2));
        bind.bind("b", random_tensor(&mut rng, 3, 3));
        let grads = g.gradient(root, &bind, &ctx).unwrap();
        for leaf in ["a", "b"] {
            let fd = finite_difference(&g, root, &bind, &ctx, leaf, 1e-5);
            assert_close_rel(&grads[leaf], &fd, 1e-6);
        }

        // cross-entropy-with-logits
        let mut g = ExprGraph::new();
        let x = g.input("x", 4, 3).unwrap();
        let root = g.cross_entropy_with_logits(x, vec![0, 2, 1, 2]).unwrap();
        let mut bind = Bindings::new();
        bind.bind("x", random_tensor(&mut rng, 4, 3));
        let grads = g.gradient(root, &bind, &ctx).unwrap();
        let fd = finite_difference(&g, root, &bind, &ctx, "x", 1e-5);
        assert_close_rel(&grads["x"], &fd, 1e-6);
    }

    #[test]
    fn two_layer_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(993);
        let ctx = EvalContext::infer();
        let mut g = ExprGraph::new();
        let x = g.input("x", 2, 5).unwrap();
        let w1 = g.param("w1", 5, 4).unwrap();
        let b1 = g.param("b1", 1, 4).unwrap();
        let w2 = g.param("w2", 4, 3).unwrap();
        let h1 = g.matmul(x, w1).unwrap();
        let h1b = g.add(h1, b1).unwrap();
        let a1 = g.relu(h1b);
        let logits = g.matmul(a1, w2).unwrap();
        let root = g.cross_entropy_with_logits(logits, vec![1, 0]).unwrap();

        let mut bind = Bindings::new();
        for (name, r, c) in [("x", 2, 5), ("w1", 5, 4), ("b1", 1, 4), ("w2", 4, 3)] {
            let mut t = random_tensor(&mut rng, r, c);
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.05;
                }
            }
            bind.bind(name, t);
        }
        let grads = g.gradient(root, &bind, &ctx).unwrap();
        for leaf in ["x", "w1", "b1", "w2"] {
            let fd = finite_difference(&g, root, &bind, &ctx, leaf, 1e-5);
            assert_close_rel(&grads[leaf], &fd, 1e-6);
        }
    }

    #[test]
    fn evaluation_is_bit_reproducible() {
        let mut rng = ChaCha20Rng::seed_from_u64(994);
        let mut g = ExprGraph::new();
        let x = g.input("x", 4, 4).unwrap();
        let w = g.param("w", 4, 4).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax_rows(y);
        let d = g.dropout_rows(s, 0.3).unwrap();
        let root = reduce_to_scalar(&mut g, d, &mut rng);
        let mut bind = Bindings::new();
        bind.bind("x", random_tensor(&mut rng, 4, 4));
        bind.bind("w", random_tensor(&mut rng, 4, 4));
        let ctx = EvalContext::train(77);
        let v1 = g.evaluate(root, &bind, &ctx).unwrap();
        let v2 = g.evaluate(root, &bind, &ctx).unwrap();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        let g1 = g.gradient(root, &bind, &ctx).unwrap();
        let g2 = g.gradient(root, &bind, &ctx).unwrap();
        for (a, b) in g1["w"].data().iter().zip(g2["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
