//! MAE/MSE, the mean-value-prediction baseline and best-of-k selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub mae: f64,
    pub mse: f64,
}

/// Mean absolute and mean squared error between equally shaped tensors.
pub fn evaluate(pred: &Tensor, truth: &Tensor) -> Result<MetricPair> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: pred.shape(),
            rhs: truth.shape(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate empty tensors".into(),
        ));
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred
        .data()
        .iter()
        .zip(truth.data())
        .fold((0.0, 0.0), |(a, s), (p, t)| {
            let d = p - t;
            (a + d.abs(), s + d * d)
        });
    Ok(MetricPair {
        mae: abs / n,
        mse: sq / n,
    })
}

/// Predicts the mean of `train_labels` for every row of `eval_labels`.
pub fn mean_value_baseline(train_labels: &Tensor, eval_labels: &Tensor) -> Result<MetricPair> {
    if train_labels.is_empty() || eval_labels.is_empty() {
        return Err(Error::InvalidArgument("baseline needs labels".into()));
    }
    let mean = train_labels.mean();
    let pred = Tensor::filled(eval_labels.rows(), eval_labels.cols(), mean);
    evaluate(&pred, eval_labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    OriginalMae,
    AttackMae,
}

/// Anything that exposes the MAE a [`Criterion`] ranks by.
pub trait Ranked {
    fn criterion_mae(&self, criterion: Criterion) -> f64;
}

/// Index of the run with the lowest MAE under `criterion`; ties go to the
/// lowest index.
pub fn best_index<T: Ranked>(results: &[T], criterion: Criterion) -> Result<usize> {
    extreme_index(results, criterion, |cand, best| cand < best)
}

/// Index of the run with the highest MAE; ties go to the lowest index.
pub fn worst_index<T: Ranked>(results: &[T], criterion: Criterion) -> Result<usize> {
    extreme_index(results, criterion, |cand, best| cand > best)
}

fn extreme_index<T: Ranked>(
    results: &[T],
    criterion: Criterion,
    better: impl Fn(f64, f64) -> bool,
) -> Result<usize> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no runs to choose from".into()));
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        if better(
            r.criterion_mae(criterion),
            results[best].criterion_mae(criterion),
        ) {
            best = i;
        }
    }
    Ok(best)
}

/// The run with the lowest MAE under `criterion`.
pub fn best_of_runs<T: Ranked + Clone>(results: &[T], criterion: Criterion) -> Result<T> {
    Ok(results[best_index(results, criterion)?].clone())
}
