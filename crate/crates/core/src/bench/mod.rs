//! Synthetic benchmarks, the single-task lasso baseline and evaluation
//! metrics.

mod metrics;
mod synth;

pub use metrics::{
    error_rate, mcc, pooled_error_rate, pooled_rmse, ree, rmse, support, Confusion,
    SUPPORT_THRESHOLD,
};
pub use synth::{generate, GroundTruth, Mixing, SynthData, SynthSpec};

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::{Loss, Problem};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::trainer;

/// Test-set metrics of an estimated coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Pooled RMSE (regression) or error rate (classification).
    pub prediction_error: f64,
    pub ree: Option<f64>,
    pub mcc: Option<f64>,
}

/// Evaluates `w_hat` (D x T) on `test`, restricted to `tasks`. REE and MCC are
/// computed when the true coefficients are given.
pub fn evaluate(
    w_hat: ArrayView2<'_, f64>,
    test: &Problem,
    w_true: Option<ArrayView2<'_, f64>>,
    tasks: &[usize],
) -> Result<Metrics> {
    if w_hat.dim() != (test.d(), test.t()) {
        return Err(Error::ShapeMismatch(format!(
            "coefficients are {:?}, test problem is {}x{}",
            w_hat.dim(),
            test.d(),
            test.t()
        )));
    }
    let mut truth: Vec<Array1<f64>> = Vec::with_capacity(tasks.len());
    let mut pred = Vec::with_capacity(tasks.len());
    for &i in tasks {
        let task = test.task(i);
        let scores = task.x().dot(&w_hat.column(i));
        truth.push(task.y().to_owned());
        pred.push(match test.loss() {
            Loss::Squared => scores,
            Loss::Logistic => scores.mapv(|s| if s >= 0.0 { 1.0 } else { -1.0 }),
        });
    }
    let prediction_error = match test.loss() {
        Loss::Squared => pooled_rmse(&truth, &pred)?,
        Loss::Logistic => pooled_error_rate(&truth, &pred)?,
    };
    let (ree_v, mcc_v) = match w_true {
        Some(w_true) => {
            if w_true.dim() != w_hat.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "true coefficients are {:?}, estimate is {:?}",
                    w_true.dim(),
                    w_hat.dim()
                )));
            }
            let sub = |m: ArrayView2<'_, f64>| -> Array2<f64> { m.select(ndarray::Axis(1), tasks) };
            let (wt, wh) = (sub(w_true), sub(w_hat));
            let st = wt.mapv(|x| x != 0.0);
            (
                Some(ree(wt.view(), wh.view())?),
                Some(mcc(st.view(), support(wh.view()).view())?),
            )
        }
        None => (None, None),
    };
    Ok(Metrics {
        prediction_error,
        ree: ree_v,
        mcc: mcc_v,
    })
}

/// Single-task baseline: per-task cross-validated lasso with the same grid
/// and folds as the multi-task trainer.
pub fn lasso_baseline(
    train: &Problem,
    test: &Problem,
    w_true: Option<ArrayView2<'_, f64>>,
    grid: &[f64],
    folds: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Array2<f64>, Metrics)> {
    let init = trainer::initialize(train, grid, folds, seed, exec)?;
    let w = init.w.into_inner();
    let all: Vec<usize> = (0..test.t()).collect();
    let m = evaluate(w.view(), test, w_true, &all)?;
    Ok((w, m))
}
