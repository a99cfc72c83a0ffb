//! The alternating training loop: initialize W per task, then repeat
//! {memberships from W, cluster coefficients given memberships, refresh W}
//! until the penalized objective settles.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;

use crate::data::{
    ClusterCoefs, CoefMatrix, FitReport, HyperParams, Loss, Membership, PhaseTimes, Problem,
    TaskDataset,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::solver::{
    cluster_penalty_weight, cross_validate, fit_lasso, log1p_exp, null_penalty, ClusterUpdater, CvResult,
    LassoProblem,
};
use crate::{bench, rng, soup};

/// A fitted model: cluster coefficients, memberships and the fit report.
#[derive(Debug, Clone, PartialEq)]
pub struct StcmtlModel {
    pub u: ClusterCoefs,
    pub v: Membership,
    /// Tasks predicted from their own coefficient vector instead of `U v_i`
    /// (outliers in robust mode).
    pub task_overrides: BTreeMap<usize, Array1<f64>>,
    pub loss: Loss,
    pub report: FitReport,
}

impl StcmtlModel {
    pub fn k(&self) -> usize {
        self.u.k()
    }

    pub fn d(&self) -> usize {
        self.u.d()
    }

    pub fn t(&self) -> usize {
        self.v.t()
    }

    pub fn task_coef(&self, task: usize) -> Array1<f64> {
        match self.task_overrides.get(&task) {
            Some(w) => w.clone(),
            None => self.u.view().dot(&self.v.column(task)),
        }
    }

    /// Per-task coefficient matrix (D x T).
    pub fn coefficients(&self) -> Array2<f64> {
        let mut w = self.u.view().dot(&self.v.view());
        for (&i, c) in &self.task_overrides {
            w.column_mut(i).assign(c);
        }
        w
    }
}

/// Initial per-task fits and their cross-validated penalties.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub w: CoefMatrix,
    pub lambda: Vec<f64>,
    /// Empty when the penalties were given rather than selected.
    pub cv: Vec<CvResult>,
}

/// Per-task cross-validation of the penalty followed by a full lasso fit at
/// the selected value.
pub fn initialize(problem: &Problem, grid: &[f64], folds: usize, seed: u64, exec: Exec) -> Result<Initialization> {
    let results = exec.try_map(problem.t(), |i| -> Result<(Array1<f64>, CvResult)> {
        let task = problem.task(i);
        let cv = cross_validate(task, grid, folds, seed)?;
        let w = fit_task(task, cv.best_lambda, None, None)?;
        Ok((w, cv))
    })?;
    let mut w = Array2::zeros((problem.d(), problem.t()));
    let mut lambda = Vec::with_capacity(problem.t());
    let mut cvs = Vec::with_capacity(problem.t());
    for (i, (col, cv)) in results.into_iter().enumerate() {
        w.column_mut(i).assign(&col);
        lambda.push(cv.best_lambda);
        cvs.push(cv);
    }
    Ok(Initialization {
        w: CoefMatrix::new(w)?,
        lambda,
        cv: cvs,
    })
}

/// Per-task lasso fits at fixed penalties.
pub fn initialize_with(problem: &Problem, lambda: &[f64], exec: Exec) -> Result<Initialization> {
    if lambda.len() != problem.t() {
        return Err(Error::ShapeMismatch(format!(
            "{} penalties for {} tasks",
            lambda.len(),
            problem.t()
        )));
    }
    let cols = exec.try_map(problem.t(), |i| fit_task(problem.task(i), lambda[i], None, None))?;
    let mut w = Array2::zeros((problem.d(), problem.t()));
    for (i, c) in cols.into_iter().enumerate() {
        w.column_mut(i).assign(&c);
    }
    Ok(Initialization {
        w: CoefMatrix::new(w)?,
        lambda: lambda.to_vec(),
        cv: vec![],
    })
}

pub(crate) fn fit_task(
    task: &TaskDataset,
    lambda: f64,
    init: Option<ArrayView1<'_, f64>>,
    max_sweeps: Option<usize>,
) -> Result<Array1<f64>> {
    let p = LassoProblem::new(task.x(), task.y(), lambda, task.loss());
    Ok(fit_lasso(&p, init, max_sweeps)?.coef)
}

/// Mean loss of task `i` under coefficients `w`.
pub(crate) fn task_loss(task: &TaskDataset, w: ArrayView1<'_, f64>) -> f64 {
    let eta = task.x().dot(&w);
    let y = task.y();
    let total: f64 = match task.loss() {
        Loss::Squared => eta.iter().zip(y).map(|(e, y)| (y - e) * (y - e)).sum(),
        Loss::Logistic => eta.iter().zip(y).map(|(e, y)| log1p_exp(-y * e)).sum(),
    };
    total / task.n() as f64
}

/// `sum_i (1/n_i) L(y_i, X_i U v_i) + gamma * sum_k c_k |u_k|_1`, where
/// `c_k = sum_i v_ki^2` ([`cluster_penalty_weight`]).
pub fn objective(problem: &Problem, u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, gamma: f64) -> f64 {
    let fit: f64 = (0..problem.t())
        .map(|i| task_loss(problem.task(i), u.dot(&v.column(i)).view()))
        .sum();
    let penalty: f64 = (0..u.ncols())
        .map(|k| cluster_penalty_weight(v, k) * u.column(k).iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    fit + gamma * penalty
}

/// Starting U: per cluster, the mean coefficient vector of its pure tasks.
pub(crate) fn pure_centroids(w: ArrayView2<'_, f64>, sel: &soup::PureTaskSelection) -> Array2<f64> {
    let mut u = Array2::zeros((w.nrows(), sel.k));
    let mut counts = vec![0usize; sel.k];
    for (&i, &l) in sel.pure.iter().zip(&sel.labels) {
        let mut col = u.column_mut(l);
        col += &w.column(i);
        counts[l] += 1;
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            u.column_mut(l).mapv_inplace(|x| x / c as f64);
        }
    }
    u
}

/// Summary of one U-update.
#[derive(Debug, Clone)]
pub struct UUpdate {
    pub u: Array2<f64>,
    pub cycles: usize,
    /// Full objective after each cycle over the columns.
    pub trace: Vec<f64>,
}

/// Cycles over the columns of U, minimizing each in turn, until no column
/// moves by more than `tol` (Euclidean) or `max_cycles` is reached.
pub fn update_u(
    problem: &Problem,
    updater: &mut ClusterUpdater<'_>,
    mut u: Array2<f64>,
    v: ArrayView2<'_, f64>,
    gamma: f64,
    max_cycles: usize,
    tol: f64,
) -> Result<UUpdate> {
    let mut trace = vec![objective(problem, u.view(), v, gamma)];
    let mut cycles = 0;
    while cycles < max_cycles {
        let mut moved = 0.0f64;
        for k in 0..u.ncols() {
            let new = updater.update_column(u.view(), v, k, gamma)?.coef;
            let step = (&new - &u.column(k)).mapv(|x| x * x).sum().sqrt();
            moved = moved.max(step);
            u.column_mut(k).assign(&new);
        }
        cycles += 1;
        trace.push(objective(problem, u.view(), v, gamma));
        if moved < tol {
            break;
        }
    }
    Ok(UUpdate { u, cycles, trace })
}

pub(crate) fn check_k(problem: &Problem, k: usize) -> Result<()> {
    if k == 0 || k > problem.t() || k > problem.d() {
        return Err(Error::InvalidParam(format!(
            "k = {k} must be in 1..=min(D, T) = {}",
            problem.t().min(problem.d())
        )));
    }
    if 2 * k > problem.t().min(problem.d()) {
        warn!(
            "k = {k} is not small relative to min(D, T) = {}",
            problem.t().min(problem.d())
        );
    }
    Ok(())
}

/// Runs the full training procedure with `k` clusters.
pub fn fit(problem: &Problem, k: usize, hp: &HyperParams) -> Result<StcmtlModel> {
    hp.validate()?;
    check_k(problem, k)?;
    let start = Instant::now();
    let init = match &hp.lambda {
        Some(l) => initialize_with(problem, l, hp.exec)?,
        None => initialize(problem, &hp.lambda_grid, hp.folds, hp.seed, hp.exec)?,
    };
    let mut model = fit_from_init(problem, k, hp, &init)?;
    model.report.times.init = start.elapsed();
    Ok(model)
}

/// Mean of the per-task penalties, each capped at the task's null penalty
/// (the plain mean if every cap is zero).
///
/// A task whose cross-validation prefers the empty model selects the largest
/// grid value, but every penalty above its null penalty gives the same fit;
/// capping keeps such tasks from inflating the cluster penalty by an amount
/// that only reflects where the grid happens to end.
pub fn default_gamma(problem: &Problem, lambda: &[f64]) -> f64 {
    let total: f64 = lambda
        .iter()
        .enumerate()
        .map(|(i, &l)| l.min(null_penalty(problem.task(i))))
        .sum();
    if total > 0.0 {
        total / lambda.len() as f64
    } else {
        lambda.iter().sum::<f64>() / lambda.len() as f64
    }
}

/// Outer loop from a precomputed initialization. `report.times.init` is left
/// at zero.
pub fn fit_from_init(problem: &Problem, k: usize, hp: &HyperParams, init: &Initialization) -> Result<StcmtlModel> {
    hp.validate()?;
    check_k(problem, k)?;
    let gamma = hp
        .gamma
        .unwrap_or_else(|| default_gamma(problem, &init.lambda));
    let mut times = PhaseTimes::default();
    let mut w = init.w.view().to_owned();
    let mut updater = ClusterUpdater::new(problem);
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Array2<f64>, Membership)> = None;
    let mut converged = false;

    for it in 1..=hp.max_outer {
        let t0 = Instant::now();
        let clustering = soup::soup(w.view(), k, hp.theta, hp.epsilon, hp.seed)?;
        times.update_v += t0.elapsed();

        let t0 = Instant::now();
        let u0 = pure_centroids(w.view(), &clustering.selection);
        let v = clustering.membership;
        let upd = update_u(problem, &mut updater, u0, v.view(), gamma, hp.u_cycles, hp.u_tol)?;
        times.update_u += t0.elapsed();
        let u = upd.u;

        let obj = *upd.trace.last().unwrap();
        if !obj.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        debug!("iteration {it}: objective {obj:.6} after {} U-cycles", upd.cycles);
        let prev = trace.last().copied();
        trace.push(obj);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, it, u.clone(), v.clone()));
        }
        if let Some(prev) = prev {
            if (prev - obj).abs() <= hp.tol * obj.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        if it == hp.max_outer {
            break;
        }

        let t0 = Instant::now();
        let cols = hp.exec.try_map(problem.t(), |i| {
            let start = u.dot(&v.column(i));
            fit_task(problem.task(i), init.lambda[i], Some(start.view()), Some(hp.w_sweeps))
        })?;
        for (i, c) in cols.into_iter().enumerate() {
            w.column_mut(i).assign(&c);
        }
        times.update_w += t0.elapsed();
    }

    let (_, best_iteration, u, v) = best.expect("at least one outer iteration");
    let report = FitReport {
        iterations: trace.len(),
        objective_trace: trace,
        lambda: init.lambda.clone(),
        gamma,
        k,
        outliers: vec![],
        converged,
        best_iteration,
        times,
    };
    Ok(StcmtlModel {
        u: ClusterCoefs::new(u)?,
        v,
        task_overrides: BTreeMap::new(),
        loss: problem.loss(),
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `X w` for the task's coefficients.
    pub scores: Array1<f64>,
    /// Predicted labels in {-1, +1}; `None` for regression.
    pub labels: Option<Array1<f64>>,
}

impl Prediction {
    /// Labels for classification, scores for regression.
    pub fn values(&self) -> &Array1<f64> {
        self.labels.as_ref().unwrap_or(&self.scores)
    }
}

pub fn predict(model: &StcmtlModel, x_new: ArrayView2<'_, f64>, task: usize) -> Result<Prediction> {
    if x_new.ncols() != model.d() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, model has {} features",
            x_new.ncols(),
            model.d()
        )));
    }
    if task >= model.t() {
        return Err(Error::ShapeMismatch(format!(
            "task {} out of range 1..={}",
            task + 1,
            model.t()
        )));
    }
    let scores = x_new.dot(&model.task_coef(task));
    let labels = match model.loss {
        Loss::Squared => None,
        Loss::Logistic => Some(scores.mapv(|s| if s >= 0.0 { 1.0 } else { -1.0 })),
    };
    Ok(Prediction { scores, labels })
}

/// Pooled held-out error of a model: RMSE for regression, error rate for
/// classification.
pub fn holdout_error(model: &StcmtlModel, test: &Problem) -> Result<f64> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, task) in test.tasks().iter().enumerate() {
        let p = predict(model, task.x(), i)?;
        truth.push(task.y().to_owned());
        pred.push(p.values().clone());
    }
    match test.loss() {
        Loss::Squared => bench::pooled_rmse(&truth, &pred),
        Loss::Logistic => bench::pooled_error_rate(&truth, &pred),
    }
}

/// Splits every task's rows into a training and a held-out part
/// (`train_fraction` of the rows, at least one row each side).
pub fn split_rows(problem: &Problem, train_fraction: f64, seed: u64) -> Result<(Problem, Problem)> {
    let mut train = Vec::with_capacity(problem.t());
    let mut held = Vec::with_capacity(problem.t());
    for task in problem.tasks() {
        let n = task.n();
        if n < 2 {
            return Err(Error::TooFewRows { rows: n, folds: 2 });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, rng::SPLIT, task.id() as u64));
        let cut = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let (a, b) = perm.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        train.push(task.select_rows(&a));
        held.push(task.select_rows(&b));
    }
    Ok((
        crate::data::validate_problem(train)?,
        crate::data::validate_problem(held)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub best_k: usize,
    /// (k, held-out error) in grid order.
    pub curve: Vec<(usize, f64)>,
}

/// Chooses the number of clusters by held-out error on an 80/20 split of
/// every task. Ties go to the smaller k.
pub fn select_k(problem: &Problem, k_grid: &[usize], hp: &HyperParams) -> Result<KSelection> {
    hp.validate()?;
    if k_grid.is_empty() {
        return Err(Error::InvalidParam("empty k grid".into()));
    }
    let (train, held) = split_rows(problem, 0.8, hp.seed)?;
    let init = match &hp.lambda {
        Some(l) => initialize_with(&train, l, hp.exec)?,
        None => initialize(&train, &hp.lambda_grid, hp.folds, hp.seed, hp.exec)?,
    };
    let mut curve = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let model = fit_from_init(&train, k, hp, &init)?;
        let err = holdout_error(&model, &held)?;
        debug!("k = {k}: held-out error {err:.5}");
        curve.push((k, err));
    }
    let mut best = curve[0];
    for &(k, e) in &curve[1..] {
        if e < best.1 || (e == best.1 && k < best.0) {
            best = (k, e);
        }
    }
    Ok(KSelection {
        best_k: best.0,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_problem;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn objective_hand_value() {
        let t = TaskDataset::new(0, array![[1.0], [2.0]], array![1.0, 2.0], Loss::Squared).unwrap();
        let p = validate_problem(vec![t]).unwrap();
        let obj = objective(&p, array![[1.0]].view(), array![[1.0]].view(), 0.1);
        assert_abs_diff_eq!(obj, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn objective_zero_model() {
        let t = TaskDataset::new(0, array![[1.0], [2.0]], array![1.0, 3.0], Loss::Squared).unwrap();
        let p = validate_problem(vec![t]).unwrap();
        let obj = objective(&p, array![[0.0]].view(), array![[1.0]].view(), 5.0);
        assert_abs_diff_eq!(obj, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_caps_penalties_at_null_fit() {
        let a = TaskDataset::new(0, array![[1.0], [2.0]], array![1.0, 2.0], Loss::Squared).unwrap();
        let b = TaskDataset::new(1, array![[1.0], [-1.0]], array![0.5, 0.5], Loss::Squared).unwrap();
        let p = validate_problem(vec![a, b]).unwrap();
        // null penalties: max |2/n X'y| = 5 and 0
        assert_abs_diff_eq!(null_penalty(p.task(0)), 5.0, epsilon = 1e-15);
        assert_eq!(null_penalty(p.task(1)), 0.0);
        assert_abs_diff_eq!(default_gamma(&p, &[0.5, 8.0]), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(default_gamma(&p, &[8.0, 8.0]), 2.5, epsilon = 1e-15);
        let q = validate_problem(vec![p.task(1).clone()]).unwrap();
        assert_eq!(default_gamma(&q, &[0.25]), 0.25);
    }

    fn toy_model() -> StcmtlModel {
        let u = array![[1.0, 1.0], [-1.0, 1.0]];
        let v = Membership::new(
            array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]],
            BTreeMap::from([(0, 0), (1, 1)]),
        )
        .unwrap();
        StcmtlModel {
            u: ClusterCoefs::new(u).unwrap(),
            v,
            task_overrides: BTreeMap::new(),
            loss: Loss::Squared,
            report: FitReport {
                objective_trace: vec![0.0],
                lambda: vec![0.1; 3],
                gamma: 0.1,
                k: 2,
                outliers: vec![],
                iterations: 1,
                converged: true,
                best_iteration: 1,
                times: PhaseTimes::default(),
            },
        }
    }

    #[test]
    fn predict_hand_product() {
        let m = toy_model();
        let p = predict(&m, array![[2.0, 3.0]].view(), 2).unwrap();
        assert_abs_diff_eq!(p.scores[0], 2.0, epsilon = 1e-15);
        assert!(p.labels.is_none());
    }

    #[test]
    fn predict_pure_task_uses_its_cluster() {
        let m = toy_model();
        let x = array![[0.5, 2.0], [1.0, -1.0]];
        let p = predict(&m, x.view(), 0).unwrap();
        assert_eq!(p.scores, x.dot(&array![1.0, -1.0]));
        let z = predict(&m, Array2::zeros((3, 2)).view(), 1).unwrap();
        assert!(z.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn predict_shape_mismatch() {
        let m = toy_model();
        assert!(matches!(
            predict(&m, Array2::zeros((1, 3)).view(), 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logistic_prediction_exposes_scores_and_signs() {
        let mut m = toy_model();
        m.loss = Loss::Logistic;
        let p = predict(&m, array![[1.0, 0.0], [-1.0, 0.0]].view(), 0).unwrap();
        assert_eq!(p.scores, array![1.0, -1.0]);
        assert_eq!(p.labels.unwrap(), array![1.0, -1.0]);
    }
}
