//! Integrated gradients with a midpoint Riemann rule.

use std::time::Instant;

use crate::diffcore::Tensor;
use crate::ingest::{EmbeddedThread, VeracityLabel};
use crate::verifier::ModelParams;

use super::{
    thread_features, verifier_scorer, AttributionError, AttributionMeta, AttributionMethod,
    AttributionResult, ScoreModel,
};

/// Raw integrated-gradients output before ranking.
#[derive(Debug, Clone)]
pub struct IgOutcome {
    /// Per-feature attribution matrix `e`.
    pub per_feature: Tensor,
    pub score_at_input: f64,
    pub score_at_baseline: f64,
}

impl IgOutcome {
    /// |sum(e) - (F(x) - F(b))|, the completeness gap.
    pub fn completeness_gap(&self) -> f64 {
        (self.per_feature.sum() - (self.score_at_input - self.score_at_baseline)).abs()
    }
}

/// Accumulate embedding gradients along the interpolated path from the
/// baseline to the input, evaluated at midpoints `b + (t - 0.5)/m * (x - b)`,
/// and scale by `(x - b)`. The stance matrix is held fixed.
pub fn integrated_gradients_core(
    model: &impl ScoreModel,
    embeddings: &Tensor,
    stance: &Tensor,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<IgOutcome, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::Invalid("steps must be at least 1".into()));
    }
    let zero_baseline;
    let baseline = match baseline {
        Some(b) => {
            if b.shape() != embeddings.shape() {
                return Err(AttributionError::Invalid(format!(
                    "baseline shape {:?} does not match embeddings {:?}",
                    b.shape(),
                    embeddings.shape()
                )));
            }
            b
        }
        None => {
            zero_baseline = Tensor::zeros(embeddings.rows(), embeddings.cols());
            &zero_baseline
        }
    };

    let mut delta = embeddings.clone();
    for (d, &b) in delta.data_mut().iter_mut().zip(baseline.data()) {
        *d -= b;
    }

    let mut accum = Tensor::zeros(embeddings.rows(), embeddings.cols());
    for t in 1..=steps {
        let alpha = (t as f64 - 0.5) / steps as f64;
        let mut point = baseline.clone();
        for (p, &d) in point.data_mut().iter_mut().zip(delta.data()) {
            *p += alpha * d;
        }
        let (_, grad) = model.score_with_embedding_grad(&point, stance)?;
        accum.add_assign(&grad)?;
    }
    let mean = accum.scaled(1.0 / steps as f64);
    let per_feature = delta.hadamard(&mean)?;

    Ok(IgOutcome {
        per_feature,
        score_at_input: model.score(embeddings, stance)?,
        score_at_baseline: model.score(baseline, stance)?,
    })
}

/// Integrated gradients for a thread against the verifier. The default
/// baseline is the all-zeros embedding matrix.
pub fn integrated_gradients(
    params: &ModelParams,
    thread: &EmbeddedThread,
    target: VeracityLabel,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<AttributionResult, AttributionError> {
    let started = Instant::now();
    let (embeddings, stance) = thread_features(thread)?;
    let scorer = verifier_scorer(params, thread, target)?;
    let outcome = integrated_gradients_core(&scorer, &embeddings, &stance, steps, baseline)?;

    let post_scores: Vec<f64> = (0..outcome.per_feature.rows())
        .map(|r| outcome.per_feature.row(r).iter().sum())
        .collect();
    let per_feature_rows: Vec<Vec<f64>> = (0..outcome.per_feature.rows())
        .map(|r| outcome.per_feature.row(r).to_vec())
        .collect();
    let meta = AttributionMeta {
        steps: Some(steps),
        score_at_input: Some(outcome.score_at_input),
        score_at_baseline: Some(outcome.score_at_baseline),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok(AttributionResult::from_scores(
        AttributionMethod::IntegratedGradients,
        target,
        Some(per_feature_rows),
        post_scores,
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::test_stubs::LinearModel;

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn exact_for_linear_models_any_step_count() {
        let weights = tensor(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let model = LinearModel {
            weights: weights.clone(),
        };
        let x = tensor(&[vec![2.0, 1.0], vec![-1.0, 4.0]]);
        let stance = Tensor::zeros(2, 1);
        for steps in [1, 7, 64] {
            let outcome = integrated_gradients_core(&model, &x, &stance, steps, None).unwrap();
            let expect = weights.hadamard(&x).unwrap();
            for (a, b) in outcome.per_feature.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            assert!(outcome.completeness_gap() <= 1e-12);
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let model = LinearModel {
            weights: tensor(&[vec![1.0, 1.0]]),
        };
        let x = tensor(&[vec![0.7, -0.3]]);
        let stance = Tensor::zeros(1, 1);
        let outcome = integrated_gradients_core(&model, &x, &stance, 16, Some(&x)).unwrap();
        assert!(outcome.per_feature.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_steps_rejected() {
        let model = LinearModel {
            weights: tensor(&[vec![1.0]]),
        };
        let x = tensor(&[vec![1.0]]);
        assert!(integrated_gradients_core(&model, &x, &Tensor::zeros(1, 1), 0, None).is_err());
    }

    #[test]
    fn baseline_shape_mismatch_rejected() {
        let model = LinearModel {
            weights: tensor(&[vec![1.0]]),
        };
        let x = tensor(&[vec![1.0]]);
        let bad = Tensor::zeros(2, 1);
        assert!(integrated_gradients_core(&model, &x, &Tensor::zeros(1, 1), 4, Some(&bad)).is_err());
    }
}
