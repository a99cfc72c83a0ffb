//! Coordinate-descent solvers for l1-penalized squared and logistic losses.
//!
//! Every problem minimizes
//!
//! ```text
//! sum_r omega_r * loss(target_r, offset_r + design_r . w) + lambda * |w|_1
//! ```
//!
//! with `omega_r = 1/n` unless per-row weights are given. For the squared
//! loss, `loss(t, eta) = (t - eta)^2`, so the smooth gradient carries the
//! factor 2/n. For the logistic loss, `loss(y, eta) = log(1 + exp(-y eta))`.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder};
use rand::seq::SliceRandom;

use crate::data::{Loss, Membership, Problem, TaskDataset};
use crate::error::{Error, Result};
use crate::rng;

/// KKT residual the squared-loss solver drives below before stopping.
const SQUARED_KKT_TARGET: f64 = 1e-8;
/// KKT residual the logistic solver drives below before stopping.
const LOGISTIC_KKT_TARGET: f64 = 1e-7;
const SQUARED_SWEEP_CAP: usize = 100_000;
/// A path over a design with at least as many features as rows stops early
/// once the training residual falls below this fraction of the response
/// energy.
const PATH_SATURATION: f64 = 1e-3;
const LOGISTIC_SWEEP_CAP: usize = 10_000;
/// Probability clip used for the logistic working weights.
const PROB_CLIP: f64 = 1e-5;

/// `sign(z) * max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Geometric grid `2^3, 2^2, ..., 2^-15`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-15..=3).rev().map(|e| 2f64.powi(e)).collect()
}

#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub target: ArrayView1<'a, f64>,
    pub weights: Option<ArrayView1<'a, f64>>,
    pub offset: Option<ArrayView1<'a, f64>>,
    pub lambda: f64,
    pub loss: Loss,
}

impl<'a> LassoProblem<'a> {
    pub fn new(
        design: ArrayView2<'a, f64>,
        target: ArrayView1<'a, f64>,
        lambda: f64,
        loss: Loss,
    ) -> Self {
        LassoProblem {
            design,
            target,
            weights: None,
            offset: None,
            lambda,
            loss,
        }
    }

    pub fn with_weights(mut self, weights: ArrayView1<'a, f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_offset(mut self, offset: ArrayView1<'a, f64>) -> Self {
        self.offset = Some(offset);
        self
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.target.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "design has {n} rows, target has {}",
                self.target.len()
            )));
        }
        for (name, v) in [("weights", &self.weights), ("offset", &self.offset)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "design has {n} rows, {name} has {}",
                        v.len()
                    )));
                }
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParam(format!("lambda = {} < 0", self.lambda)));
        }
        Ok(())
    }

    fn omega(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.to_vec(),
            None => vec![1.0 / self.n().max(1) as f64; self.n()],
        }
    }

    fn linear_predictor(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut eta = self.design.dot(&w);
        if let Some(o) = &self.offset {
            eta += o;
        }
        eta
    }

    /// Value of the penalized objective at `w`.
    pub fn objective(&self, w: ArrayView1<'_, f64>) -> f64 {
        let eta = self.linear_predictor(w);
        let omega = self.omega();
        let smooth: f64 = match self.loss {
            Loss::Squared => eta
                .iter()
                .zip(self.target.iter())
                .zip(&omega)
                .map(|((e, t), o)| o * (t - e) * (t - e))
                .sum(),
            Loss::Logistic => eta
                .iter()
                .zip(self.target.iter())
                .zip(&omega)
                .map(|((e, y), o)| o * log1p_exp(-y * e))
                .sum(),
        };
        smooth + self.lambda * w.iter().map(|x| x.abs()).sum::<f64>()
    }

    /// Gradient of the smooth part of the objective.
    pub fn gradient(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        let eta = self.linear_predictor(w);
        let omega = self.omega();
        let dloss: Array1<f64> = match self.loss {
            Loss::Squared => Array1::from_iter(
                eta.iter()
                    .zip(self.target.iter())
                    .zip(&omega)
                    .map(|((e, t), o)| -2.0 * o * (t - e)),
            ),
            Loss::Logistic => Array1::from_iter(
                eta.iter()
                    .zip(self.target.iter())
                    .zip(&omega)
                    .map(|((e, y), o)| -o * y * sigmoid(-y * e)),
            ),
        };
        self.design.t().dot(&dloss)
    }

    /// Largest violation of the lasso optimality conditions at `w`.
    pub fn kkt_residual(&self, w: ArrayView1<'_, f64>) -> f64 {
        kkt_from_gradient(self.gradient(w).view(), w, self.lambda)
    }
}

pub(crate) fn kkt_from_gradient(g: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, lambda: f64) -> f64 {
    g.iter()
        .zip(w.iter())
        .map(|(&g, &w)| {
            if w != 0.0 {
                (g + lambda * w.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coef: Array1<f64>,
    pub sweeps: usize,
    /// Whether the KKT conditions hold at the returned point.
    pub converged: bool,
}

/// Solves an l1-penalized problem by cyclic coordinate descent.
///
/// Without `max_sweeps` the solver runs until the KKT residual is below
/// `1e-8` (squared) or `1e-7` (logistic). With `max_sweeps` it performs exactly
/// that many full sweeps starting from `init`.
pub fn fit_lasso(
    p: &LassoProblem<'_>,
    init: Option<ArrayView1<'_, f64>>,
    max_sweeps: Option<usize>,
) -> Result<LassoFit> {
    match p.loss {
        Loss::Squared => fit_squared(p, init, max_sweeps, SweepControl::exact()),
        Loss::Logistic => fit_logistic_l1(p, init, max_sweeps),
    }
}

#[derive(Debug, Clone, Copy)]
struct SweepControl {
    /// Stop once the largest per-coordinate objective decrease in a sweep
    /// falls below this (relative to the null objective).
    decrease_tol: f64,
    /// Require the KKT residual below this before stopping.
    kkt_tol: Option<f64>,
}

impl SweepControl {
    fn exact() -> Self {
        SweepControl {
            decrease_tol: 1e-20,
            kkt_tol: Some(SQUARED_KKT_TARGET),
        }
    }

    /// Used along cross-validation paths where only predictions matter.
    fn path() -> Self {
        SweepControl {
            decrease_tol: 1e-7,
            kkt_tol: None,
        }
    }
}

/// Weighted squared-loss coordinate descent on a column-major design.
struct SquaredCd<'a> {
    /// p x n, row j holds feature j.
    xt: Cow<'a, [f64]>,
    n: usize,
    omega: Cow<'a, [f64]>,
    col_sq: Vec<f64>,
    /// target - offset - X w
    resid: Vec<f64>,
    lambda: f64,
}

impl<'a> SquaredCd<'a> {
    fn new(xt: Cow<'a, [f64]>, n: usize, omega: Cow<'a, [f64]>, resid: Vec<f64>, lambda: f64) -> Self {
        let p = if n == 0 { 0 } else { xt.len() / n };
        let col_sq = (0..p)
            .map(|j| {
                xt[j * n..(j + 1) * n]
                    .iter()
                    .zip(omega.iter())
                    .map(|(x, o)| o * x * x)
                    .sum()
            })
            .collect();
        SquaredCd {
            xt,
            n,
            omega,
            col_sq,
            resid,
            lambda,
        }
    }

    fn p(&self) -> usize {
        self.col_sq.len()
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.xt[j * self.n..(j + 1) * self.n]
    }

    /// One coordinate update; returns the objective decrease `a * delta^2`.
    #[inline]
    fn update(&mut self, j: usize, w: &mut [f64]) -> f64 {
        let a = self.col_sq[j];
        let old = w[j];
        let new = if a > 0.0 {
            let mut z = 0.0;
            for ((x, r), o) in self.col(j).iter().zip(&self.resid).zip(self.omega.iter()) {
                z += o * x * r;
            }
            soft_threshold(z + a * old, 0.5 * self.lambda) / a
        } else {
            0.0
        };
        let delta = new - old;
        if delta != 0.0 {
            w[j] = new;
            let n = self.n;
            let col = &self.xt[j * n..(j + 1) * n];
            for (r, x) in self.resid.iter_mut().zip(col) {
                *r -= delta * x;
            }
        }
        a * delta * delta
    }

    fn sweep(&mut self, w: &mut [f64]) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.p() {
            worst = worst.max(self.update(j, w));
        }
        worst
    }

    fn sweep_active(&mut self, w: &mut [f64], active: &[usize]) -> f64 {
        let mut worst = 0.0f64;
        for &j in active {
            worst = worst.max(self.update(j, w));
        }
        worst
    }

    fn kkt(&self, w: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.p() {
            let mut g = 0.0;
            for ((x, r), o) in self.col(j).iter().zip(&self.resid).zip(self.omega.iter()) {
                g += o * x * r;
            }
            let g = -2.0 * g;
            let v = if w[j] != 0.0 {
                (g + self.lambda * w[j].signum()).abs()
            } else {
                (g.abs() - self.lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    fn null_scale(&self) -> f64 {
        self.resid
            .iter()
            .zip(self.omega.iter())
            .map(|(r, o)| o * r * r)
            .sum::<f64>()
            .max(f64::MIN_POSITIVE)
    }

    /// Runs to convergence, or exactly `max_sweeps` full sweeps.
    fn run(&mut self, w: &mut [f64], max_sweeps: Option<usize>, ctl: SweepControl) -> (usize, bool) {
        if let Some(m) = max_sweeps {
            for _ in 0..m {
                self.sweep(w);
            }
            return (m, self.kkt(w) <= 1e-6);
        }
        let tol = ctl.decrease_tol * self.null_scale();
        let mut sweeps = 0;
        while sweeps < SQUARED_SWEEP_CAP {
            let worst = self.sweep(w);
            sweeps += 1;
            if worst <= tol {
                match ctl.kkt_tol {
                    None => return (sweeps, true),
                    Some(k) if self.kkt(w) <= k => return (sweeps, true),
                    Some(_) => {}
                }
            }
            let active: Vec<usize> = (0..self.p()).filter(|&j| w[j] != 0.0).collect();
            if active.is_empty() {
                continue;
            }
            while sweeps < SQUARED_SWEEP_CAP {
                let worst = self.sweep_active(w, &active);
                sweeps += 1;
                if worst <= tol {
                    break;
                }
            }
        }
        let ok = self.kkt(w) <= ctl.kkt_tol.unwrap_or(f64::INFINITY);
        (sweeps, ok)
    }
}

/// Feature-major copy (or borrow) of a design matrix.
fn feature_major<'a>(design: ArrayView2<'a, f64>) -> Cow<'a, [f64]> {
    let xt = design.reversed_axes();
    match xt.to_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(xt.iter().copied().collect()),
    }
}

fn init_coef(p: usize, init: Option<ArrayView1<'_, f64>>) -> Result<Vec<f64>> {
    match init {
        Some(w) if w.len() != p => Err(Error::ShapeMismatch(format!(
            "init has {} entries, design has {p} columns",
            w.len()
        ))),
        Some(w) => Ok(w.to_vec()),
        None => Ok(vec![0.0; p]),
    }
}

fn fit_squared(
    p: &LassoProblem<'_>,
    init: Option<ArrayView1<'_, f64>>,
    max_sweeps: Option<usize>,
    ctl: SweepControl,
) -> Result<LassoFit> {
    p.validate()?;
    let mut w = init_coef(p.p(), init)?;
    let mut resid = p.target.to_owned();
    if let Some(o) = &p.offset {
        resid -= o;
    }
    resid -= &p.design.dot(&ArrayView1::from(&w[..]));
    let mut cd = SquaredCd::new(
        feature_major(p.design),
        p.n(),
        Cow::Owned(p.omega()),
        resid.to_vec(),
        p.lambda,
    );
    let (sweeps, converged) = cd.run(&mut w, max_sweeps, ctl);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso coordinate descent"));
    }
    Ok(LassoFit {
        coef: Array1::from(w),
        sweeps,
        converged,
    })
}

/// l1-penalized logistic regression.
///
/// Each iteration forms the quadratic approximation of the loss at the current
/// point (working weights from probabilities clipped to `[1e-5, 1 - 1e-5]`),
/// performs one coordinate sweep on it, and backtracks if the true objective
/// went up. Separable data without penalty terminates at the sweep cap.
pub fn fit_logistic_l1(
    p: &LassoProblem<'_>,
    init: Option<ArrayView1<'_, f64>>,
    max_sweeps: Option<usize>,
) -> Result<LassoFit> {
    p.validate()?;
    if p.loss != Loss::Logistic {
        return Err(Error::InvalidParam("fit_logistic_l1 needs a logistic problem".into()));
    }
    let n = p.n();
    let xt = feature_major(p.design);
    let omega = p.omega();
    let mut w = Array1::from(init_coef(p.p(), init)?);
    let mut obj = p.objective(w.view());
    let cap = max_sweeps.unwrap_or(LOGISTIC_SWEEP_CAP);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cap {
        if max_sweeps.is_none() && p.kkt_residual(w.view()) <= LOGISTIC_KKT_TARGET {
            converged = true;
            break;
        }
        let eta = p.linear_predictor(w.view());
        let mut weights = Vec::with_capacity(n);
        let mut resid = Vec::with_capacity(n);
        for r in 0..n {
            let prob = sigmoid(eta[r]);
            let clipped = prob.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            let h = clipped * (1.0 - clipped);
            let y01 = 0.5 * (p.target[r] + 1.0);
            let g = prob - y01;
            weights.push(0.5 * omega[r] * h);
            resid.push(-g / h);
        }
        let mut cd = SquaredCd::new(Cow::Borrowed(&xt), n, Cow::Owned(weights), resid, p.lambda);
        let mut next = w.to_vec();
        cd.sweep(&mut next);
        sweeps += 1;
        let next = Array1::from(next);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = if step == 1.0 {
                next.clone()
            } else {
                &w + &((&next - &w) * step)
            };
            let cand_obj = p.objective(cand.view());
            if cand_obj <= obj + 1e-12 * obj.abs() {
                accepted = Some((cand, cand_obj));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, cand_obj)) => {
                let moved = cand != w;
                w = cand;
                obj = cand_obj;
                if !moved {
                    break;
                }
            }
            None => break,
        }
        if !obj.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logistic coordinate descent"));
        }
    }
    if !converged {
        converged = p.kkt_residual(w.view()) <= 1e-5;
    }
    Ok(LassoFit {
        coef: w,
        sweeps,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_loss: f64,
    pub sd_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_lambda: f64,
    /// Sorted by lambda, descending.
    pub curve: Vec<CvPoint>,
}

/// Mean validation loss: mean squared error, or mean logistic loss.
fn validation_loss(task: &TaskDataset, rows: &[usize], w: ArrayView1<'_, f64>) -> f64 {
    let x = task.x();
    let y = task.y();
    let mut total = 0.0;
    for &r in rows {
        let eta = x.row(r).dot(&w);
        total += match task.loss() {
            Loss::Squared => (y[r] - eta) * (y[r] - eta),
            Loss::Logistic => log1p_exp(-y[r] * eta),
        };
    }
    total / rows.len() as f64
}

/// Deterministic assignment of rows to folds. Depends only on the seed and
/// the row count, so tasks of equal size share their folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::FOLD, n as u64));
    let mut fold = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        fold[row] = pos % folds;
    }
    fold
}

/// K-fold cross-validation of the per-task penalty over `grid`.
///
/// Each fold fits the whole grid as a warm-started path from the largest
/// penalty down. The best penalty minimizes the mean validation loss; ties go
/// to the larger (sparser) penalty.
pub fn cross_validate(task: &TaskDataset, grid: &[f64], folds: usize, seed: u64) -> Result<CvResult> {
    let n = task.n();
    if folds < 2 || n < folds {
        return Err(Error::TooFewRows { rows: n, folds });
    }
    if grid.is_empty() {
        return Err(Error::InvalidParam("empty lambda grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let assignment = fold_assignment(n, folds, seed);

    let mut losses = vec![vec![0.0; folds]; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&r| assignment[r] != f).collect();
        let valid: Vec<usize> = (0..n).filter(|&r| assignment[r] == f).collect();
        let sub = task.select_rows(&train);
        let path = fit_path(&sub, &grid)?;
        for (g, w) in path.iter().enumerate() {
            losses[g][f] = validation_loss(task, &valid, w.view());
        }
    }

    let curve: Vec<CvPoint> = grid
        .iter()
        .zip(&losses)
        .map(|(&lambda, l)| {
            let mean = l.iter().sum::<f64>() / folds as f64;
            let var = l.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (folds - 1) as f64;
            CvPoint {
                lambda,
                mean_loss: mean,
                sd_loss: var.sqrt(),
            }
        })
        .collect();
    let mut best = 0;
    for (i, pt) in curve.iter().enumerate() {
        if pt.mean_loss < curve[best].mean_loss {
            best = i;
        }
    }
    Ok(CvResult {
        best_lambda: curve[best].lambda,
        curve,
    })
}

/// Smallest penalty at which the all-zero coefficient vector is optimal for
/// `task`. Every larger penalty yields the same (null) fit.
pub fn null_penalty(task: &TaskDataset) -> f64 {
    let p = LassoProblem::new(task.x(), task.y(), 0.0, task.loss());
    p.gradient(Array1::zeros(p.p()).view())
        .iter()
        .fold(0.0, |m, g| m.max(g.abs()))
}

/// Warm-started solutions for each penalty in `grid` (taken in the given order).
pub fn fit_path(task: &TaskDataset, grid: &[f64]) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut w: Option<Array1<f64>> = None;
    for &lambda in grid {
        let p = LassoProblem::new(task.x(), task.y(), lambda, task.loss());
        let fit = match task.loss() {
            Loss::Squared => fit_squared(&p, w.as_ref().map(|w| w.view()), None, SweepControl::path())?,
            Loss::Logistic => fit_logistic_l1(&p, w.as_ref().map(|w| w.view()), None)?,
        };
        let saturated = task.loss() == Loss::Squared && task.d() >= task.n() && {
            let r = &task.y() - &task.x().dot(&fit.coef);
            r.dot(&r) <= PATH_SATURATION * task.y().dot(&task.y())
        };
        w = Some(fit.coef.clone());
        out.push(fit.coef);
        if saturated {
            // The training data are interpolated; smaller penalties cannot
            // change the predictions materially.
            let last = out.last().unwrap().clone();
            out.resize(grid.len(), last);
            break;
        }
    }
    Ok(out)
}

/// Per-task sufficient statistics for the squared-loss cluster update.
///
/// Gram columns `X_iᵀ X_i e_l / n_i` are computed on first use and kept, since
/// only the features that ever become active are needed.
#[derive(Debug)]
pub struct ClusterUpdater<'p> {
    problem: &'p Problem,
    /// D x T, column i = X_iᵀ y_i / n_i
    xty: Array2<f64>,
    /// D x T, column i = diag(X_iᵀ X_i) / n_i
    diag: Array2<f64>,
    /// feature l -> D x T matrix whose column i is X_iᵀ X_i e_l / n_i
    gram_cols: HashMap<usize, Array2<f64>>,
}

/// Result of one cluster-column update.
#[derive(Debug, Clone)]
pub struct ColumnUpdate {
    pub coef: Array1<f64>,
    /// M(u_k) before each sweep and after the last one.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl<'p> ClusterUpdater<'p> {
    pub fn new(problem: &'p Problem) -> Self {
        let (d, t) = (problem.d(), problem.t());
        let mut xty = Array2::zeros((d, t).f());
        let mut diag = Array2::zeros((d, t).f());
        if problem.loss() == Loss::Squared {
            for (i, task) in problem.tasks().iter().enumerate() {
                let n = task.n() as f64;
                let x = task.x();
                xty.column_mut(i).assign(&(x.t().dot(&task.y()) / n));
                for j in 0..d {
                    let c = x.column(j);
                    diag[[j, i]] = c.dot(&c) / n;
                }
            }
        }
        ClusterUpdater {
            problem,
            xty,
            diag,
            gram_cols: HashMap::new(),
        }
    }

    fn ensure_gram_col(&mut self, l: usize) {
        if self.gram_cols.contains_key(&l) {
            return;
        }
        let (d, t) = (self.problem.d(), self.problem.t());
        let mut m = Array2::zeros((d, t).f());
        for (i, task) in self.problem.tasks().iter().enumerate() {
            let x = task.x();
            let col = x.t().dot(&x.column(l)) / task.n() as f64;
            m.column_mut(i).assign(&col);
        }
        self.gram_cols.insert(l, m);
    }

    /// Minimizes `M(u_k)` over column `k` of `u`, holding the other columns
    /// and the memberships fixed. The penalty on the column is `gamma` times
    /// [`cluster_penalty_weight`]. Returns the new column.
    pub fn update_column(
        &mut self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        k: usize,
        gamma: f64,
    ) -> Result<ColumnUpdate> {
        let (d, kk) = u.dim();
        let t = self.problem.t();
        if d != self.problem.d() || v.dim() != (kk, t) || k >= kk {
            return Err(Error::ShapeMismatch(format!(
                "U is {d}x{kk}, V is {:?}, cluster {k}",
                v.dim()
            )));
        }
        let gamma = gamma * cluster_penalty_weight(v, k);
        match self.problem.loss() {
            Loss::Squared => self.update_squared(u, v, k, gamma),
            Loss::Logistic => {
                let fit = fit_stacked(self.problem, u, v, k, gamma)?;
                Ok(ColumnUpdate {
                    coef: fit.coef,
                    objective_trace: vec![],
                    converged: fit.converged,
                })
            }
        }
    }

    fn update_squared(
        &mut self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        k: usize,
        gamma: f64,
    ) -> Result<ColumnUpdate> {
        let d = self.problem.d();
        let a = v.row(k).to_owned();
        let a2 = a.mapv(|x| x * x);

        // coefficients of the other clusters, per task: D x T (sparse rows)
        let mut others = Array2::<f64>::zeros((d, v.ncols()));
        for m in 0..u.ncols() {
            if m == k {
                continue;
            }
            for (l, &c) in u.column(m).iter().enumerate() {
                if c != 0.0 {
                    others.row_mut(l).scaled_add(c, &v.row(m));
                }
            }
        }
        // b = sum_i a_i (X_iᵀ y_i - X_iᵀ X_i w_-k,i) / n_i
        let mut b = self.xty.dot(&a);
        let support: Vec<usize> = (0..d)
            .filter(|&l| others.row(l).iter().any(|&x| x != 0.0))
            .collect();
        for &l in &support {
            self.ensure_gram_col(l);
            let scaled = &others.row(l) * &a;
            b -= &self.gram_cols[&l].dot(&scaled);
        }
        let diag_h = self.diag.dot(&a2);

        let mut hcols: HashMap<usize, Array1<f64>> = HashMap::new();
        let mut coef = u.column(k).to_owned();
        let mut hu = Array1::<f64>::zeros(d);
        for l in 0..d {
            if coef[l] != 0.0 {
                if diag_h[l] == 0.0 {
                    coef[l] = 0.0;
                    continue;
                }
                self.ensure_gram_col(l);
                let h = self.gram_cols[&l].dot(&a2);
                hu.scaled_add(coef[l], &h);
                hcols.insert(l, h);
            }
        }

        let objective = |coef: &Array1<f64>, hu: &Array1<f64>| -> f64 {
            coef.dot(hu) - 2.0 * b.dot(coef) + gamma * coef.iter().map(|x| x.abs()).sum::<f64>()
        };
        let scale = b.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        let tol = 1e-20 * scale;
        let mut trace = vec![objective(&coef, &hu)];

        let kkt = |coef: &Array1<f64>, hu: &Array1<f64>| -> f64 {
            let g = (hu - &b) * 2.0;
            kkt_from_gradient(g.view(), coef.view(), gamma)
        };

        let update = |j: usize,
                          coef: &mut Array1<f64>,
                          hu: &mut Array1<f64>,
                          hcols: &mut HashMap<usize, Array1<f64>>,
                          this: &mut Self|
         -> f64 {
            let hjj = diag_h[j];
            if hjj <= 0.0 {
                return 0.0;
            }
            let old = coef[j];
            let z = b[j] - hu[j] + hjj * old;
            let new = soft_threshold(z, 0.5 * gamma) / hjj;
            let delta = new - old;
            if delta != 0.0 {
                let h = hcols.entry(j).or_insert_with(|| {
                    this.ensure_gram_col(j);
                    this.gram_cols[&j].dot(&a2)
                });
                hu.scaled_add(delta, h);
                coef[j] = new;
            }
            hjj * delta * delta
        };

        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < SQUARED_SWEEP_CAP {
            let mut worst = 0.0f64;
            for j in 0..d {
                worst = worst.max(update(j, &mut coef, &mut hu, &mut hcols, self));
            }
            sweeps += 1;
            trace.push(objective(&coef, &hu));
            if worst <= tol && kkt(&coef, &hu) <= SQUARED_KKT_TARGET {
                converged = true;
                break;
            }
            let active: Vec<usize> = (0..d).filter(|&j| coef[j] != 0.0).collect();
            while !active.is_empty() && sweeps < SQUARED_SWEEP_CAP {
                let mut worst = 0.0f64;
                for &j in &active {
                    worst = worst.max(update(j, &mut coef, &mut hu, &mut hcols, self));
                }
                sweeps += 1;
                trace.push(objective(&coef, &hu));
                if worst <= tol {
                    break;
                }
            }
        }
        if coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster column update"));
        }
        Ok(ColumnUpdate {
            coef,
            objective_trace: trace,
            converged,
        })
    }
}

/// Curvature mass `sum_i v_ki^2` of cluster `k` (at least one).
///
/// The column subproblem's data term is a sum over tasks whose Hessian is
/// `sum_i v_ki^2 X_iᵀX_i / n_i`. Scaling the penalty by the same mass makes
/// `gamma` act on the membership-weighted average task, the scale on which the
/// per-task penalties it derives from were tuned. A plain sum over a dozen
/// tasks would otherwise swamp it and every column would come out dense.
pub fn cluster_penalty_weight(v: ArrayView2<'_, f64>, k: usize) -> f64 {
    v.row(k).iter().map(|x| x * x).sum::<f64>().max(1.0)
}

/// The cluster-column subproblem as one stacked lasso: rows of task `i` are
/// scaled by `v[k, i]`, the other clusters enter as offsets and each row is
/// weighted by `1 / n_i`. Tasks with zero membership in `k` are dropped.
pub fn fit_stacked(
    problem: &Problem,
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    k: usize,
    gamma: f64,
) -> Result<LassoFit> {
    let d = problem.d();
    let involved: Vec<usize> = (0..problem.t()).filter(|&i| v[[k, i]] != 0.0).collect();
    let rows: usize = involved.iter().map(|&i| problem.n(i)).sum();
    let mut design = Array2::<f64>::zeros((rows, d).f());
    let mut target = Array1::zeros(rows);
    let mut offset = Array1::zeros(rows);
    let mut weights = Array1::zeros(rows);
    let mut at = 0;
    for &i in &involved {
        let task = problem.task(i);
        let n = task.n();
        let mut w_other = Array1::<f64>::zeros(d);
        for m in 0..u.ncols() {
            if m != k {
                w_other.scaled_add(v[[m, i]], &u.column(m));
            }
        }
        let x = task.x();
        let mut block = design.slice_mut(ndarray::s![at..at + n, ..]);
        block.assign(&x);
        block *= v[[k, i]];
        target.slice_mut(ndarray::s![at..at + n]).assign(&task.y());
        offset.slice_mut(ndarray::s![at..at + n]).assign(&x.dot(&w_other));
        weights.slice_mut(ndarray::s![at..at + n]).fill(1.0 / n as f64);
        at += n;
    }
    let p = LassoProblem::new(design.view(), target.view(), gamma, problem.loss())
        .with_weights(weights.view())
        .with_offset(offset.view());
    let init = u.column(k);
    fit_lasso(&p, Some(init), None)
}

/// Minimizes `M(u_k)` for cluster `k` and returns the new column.
pub fn update_cluster_column(
    problem: &Problem,
    u: ArrayView2<'_, f64>,
    v: &Membership,
    k: usize,
    gamma: f64,
) -> Result<Array1<f64>> {
    Ok(ClusterUpdater::new(problem)
        .update_column(u, v.view(), k, gamma)?
        .coef)
}

/// `M(u_k)`: the data fit of every task plus the (weighted) penalty on
/// column `k` only.
pub fn cluster_column_objective(
    problem: &Problem,
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    k: usize,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, task) in problem.tasks().iter().enumerate() {
        let w = u.dot(&v.column(i));
        let eta = task.x().dot(&w);
        let n = task.n() as f64;
        total += match task.loss() {
            Loss::Squared => eta
                .iter()
                .zip(task.y())
                .map(|(e, y)| (y - e) * (y - e))
                .sum::<f64>(),
            Loss::Logistic => eta
                .iter()
                .zip(task.y())
                .map(|(e, y)| log1p_exp(-y * e))
                .sum::<f64>(),
        } / n;
    }
    total + gamma * cluster_penalty_weight(v, k) * u.column(k).iter().map(|x| x.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn soft_threshold_cases() {
        assert_abs_diff_eq!(soft_threshold(0.7, 0.2), 0.5, epsilon = 1e-15);
        assert_eq!(soft_threshold(0.1, 0.2), 0.0);
        assert_abs_diff_eq!(soft_threshold(-1.0, 0.3), -0.7, epsilon = 1e-15);
    }

    #[test]
    fn grid_is_geometric_descending() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 8.0);
        assert_eq!(g[18], 2f64.powi(-15));
    }

    fn one_feature(lambda: f64) -> f64 {
        let x = array![[1.0], [1.0]];
        let y = array![1.0, 1.0];
        let p = LassoProblem::new(x.view(), y.view(), lambda, Loss::Squared);
        fit_lasso(&p, None, None).unwrap().coef[0]
    }

    #[test]
    fn one_feature_closed_form() {
        // w = S((2/n) xᵀy, λ) / ((2/n) xᵀx) = S(2, λ) / 2
        assert_abs_diff_eq!(one_feature(0.5), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(one_feature(0.0), 1.0, epsilon = 1e-12);
        assert_eq!(one_feature(2.5), 0.0);
    }

    #[test]
    fn max_sweeps_is_exact() {
        let x = array![[1.0, 0.5], [0.2, 1.0], [0.3, -0.4]];
        let y = array![1.0, 2.0, -1.0];
        let p = LassoProblem::new(x.view(), y.view(), 0.01, Loss::Squared);
        let fit = fit_lasso(&p, None, Some(2)).unwrap();
        assert_eq!(fit.sweeps, 2);
        let a = fit_lasso(&p, None, Some(1)).unwrap();
        let b = fit_lasso(&p, Some(a.coef.view()), Some(1)).unwrap();
        for (u, v) in b.coef.iter().zip(&fit.coef) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn logistic_large_lambda_is_zero() {
        let x = array![[1.0], [-1.0]];
        let y = array![1.0, -1.0];
        let p = LassoProblem::new(x.view(), y.view(), 10.0, Loss::Logistic);
        let fit = fit_logistic_l1(&p, None, None).unwrap();
        assert_eq!(fit.coef[0], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn logistic_separable_terminates() {
        let x = array![[1.0], [-1.0], [2.0], [-0.5]];
        let y = array![1.0, -1.0, 1.0, -1.0];
        let p = LassoProblem::new(x.view(), y.view(), 0.0, Loss::Logistic);
        let fit = fit_logistic_l1(&p, None, None).unwrap();
        assert!(fit.coef[0] > 5.0);
        assert!(fit.coef[0].is_finite());
    }

    #[test]
    fn logistic_duplicate_columns_kkt() {
        let x = array![[1.0, 1.0], [-0.5, -0.5], [0.3, 0.3], [-1.2, -1.2], [0.8, 0.8], [-0.1, -0.1]];
        let y = array![1.0, -1.0, -1.0, -1.0, 1.0, 1.0];
        let p = LassoProblem::new(x.view(), y.view(), 0.05, Loss::Logistic);
        let fit = fit_logistic_l1(&p, None, None).unwrap();
        assert!(p.kkt_residual(fit.coef.view()) <= 1e-5);
    }

    #[test]
    fn logistic_wrong_loss_rejected() {
        let x = array![[1.0]];
        let y = array![1.0];
        let p = LassoProblem::new(x.view(), y.view(), 0.0, Loss::Squared);
        assert!(fit_logistic_l1(&p, None, None).is_err());
    }

    #[test]
    fn cv_too_few_rows() {
        let t = TaskDataset::new(0, Array2::zeros((3, 2)), Array1::zeros(3), Loss::Squared).unwrap();
        assert!(matches!(
            cross_validate(&t, &default_lambda_grid(), 5, 1),
            Err(Error::TooFewRows { rows: 3, folds: 5 })
        ));
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_assignment(23, 5, 9);
        for k in 0..5 {
            let c = f.iter().filter(|&&x| x == k).count();
            assert!(c == 4 || c == 5);
        }
    }

    #[test]
    fn shape_errors() {
        let x = array![[1.0], [1.0]];
        let y = array![1.0];
        let p = LassoProblem::new(x.view(), y.view(), 0.1, Loss::Squared);
        assert!(matches!(fit_lasso(&p, None, None), Err(Error::ShapeMismatch(_))));
    }
}
