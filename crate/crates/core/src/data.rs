//! Domain types shared by the solvers, the clustering step and the trainer.
//!
//! Matrices are dense `f64`. Task indices are 0-based in memory; files use
//! 1-based task ids.

use std::collections::BTreeMap;
use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Column sums of a membership matrix must be within this distance of one.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    Squared,
    Logistic,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::Squared => "squared",
            Loss::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Option<Loss> {
        match s.trim().to_ascii_lowercase().as_str() {
            "squared" | "regression" => Some(Loss::Squared),
            "logistic" | "classification" => Some(Loss::Logistic),
            _ => None,
        }
    }
}

/// One task: design matrix, response and loss kind.
///
/// The design is stored column-major so that coordinate descent walks
/// contiguous feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    id: usize,
    x: Array2<f64>,
    y: Array1<f64>,
    loss: Loss,
}

impl TaskDataset {
    /// `id` is the 0-based task index within its problem.
    pub fn new(id: usize, x: Array2<f64>, y: Array1<f64>, loss: Loss) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "task {}: design has {} rows but response has {}",
                id + 1,
                x.nrows(),
                y.len()
            )));
        }
        if loss == Loss::Logistic {
            if let Some((row, &value)) = y
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 1.0 && v != -1.0)
            {
                return Err(Error::BadLabels {
                    task: id + 1,
                    row: row + 1,
                    value,
                });
            }
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task data"));
        }
        let x = if x.t().is_standard_layout() {
            x
        } else {
            let mut f = Array2::zeros((x.nrows(), x.ncols()).f());
            f.assign(&x);
            f
        };
        Ok(TaskDataset { id, x, y, loss })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Copy of the task restricted to `rows`, keeping the id.
    pub fn select_rows(&self, rows: &[usize]) -> TaskDataset {
        let mut x = Array2::zeros((rows.len(), self.d()).f());
        let mut y = Array1::zeros(rows.len());
        for (dst, &src) in rows.iter().enumerate() {
            x.row_mut(dst).assign(&self.x.row(src));
            y[dst] = self.y[src];
        }
        TaskDataset {
            id: self.id,
            x,
            y,
            loss: self.loss,
        }
    }

    pub(crate) fn with_id(mut self, id: usize) -> TaskDataset {
        self.id = id;
        self
    }
}

/// A validated collection of tasks sharing the feature dimension and loss.
#[derive(Debug, Clone)]
pub struct Problem {
    tasks: Vec<TaskDataset>,
    d: usize,
    loss: Loss,
}

/// Checks that the tasks form a well-posed multi-task problem.
pub fn validate_problem(tasks: Vec<TaskDataset>) -> Result<Problem> {
    let first = tasks.first().ok_or(Error::EmptyProblem)?;
    let d = first.d();
    let loss = first.loss();
    for t in &tasks {
        if t.d() != d {
            return Err(Error::ShapeMismatch(format!(
                "task {} has {} features, task 1 has {}",
                t.id() + 1,
                t.d(),
                d
            )));
        }
        if t.loss() != loss {
            return Err(Error::ShapeMismatch(format!(
                "task {} uses {} loss, task 1 uses {}",
                t.id() + 1,
                t.loss().as_str(),
                loss.as_str()
            )));
        }
        if t.loss() == Loss::Logistic {
            if let Some((row, &value)) = t
                .y()
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 1.0 && v != -1.0)
            {
                return Err(Error::BadLabels {
                    task: t.id() + 1,
                    row: row + 1,
                    value,
                });
            }
        }
    }
    let tasks = tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.with_id(i))
        .collect();
    Ok(Problem { tasks, d, loss })
}

impl Problem {
    pub fn t(&self) -> usize {
        self.tasks.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn n(&self, task: usize) -> usize {
        self.tasks[task].n()
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> &TaskDataset {
        &self.tasks[i]
    }

    /// Sub-problem on the given tasks, re-indexed from zero in the given order.
    pub fn subset(&self, ids: &[usize]) -> Problem {
        Problem {
            tasks: ids
                .iter()
                .enumerate()
                .map(|(new, &old)| self.tasks[old].clone().with_id(new))
                .collect(),
            d: self.d,
            loss: self.loss,
        }
    }
}

/// Per-task coefficient matrix W (D x T).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefMatrix(Array2<f64>);

impl CoefMatrix {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient matrix"));
        }
        Ok(CoefMatrix(w))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.column(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Per-cluster coefficients U (D x K).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCoefs(Array2<f64>);

impl ClusterCoefs {
    pub fn new(u: Array2<f64>) -> Result<Self> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster coefficients"));
        }
        Ok(ClusterCoefs(u))
    }

    pub fn zeros(d: usize, k: usize) -> Self {
        ClusterCoefs(Array2::zeros((d, k)))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    /// Sum of absolute entries, the l1 norm of U taken column by column.
    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Column-stochastic membership matrix V (K x T) with its pure-task set.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    v: Array2<f64>,
    pure: BTreeMap<usize, usize>,
}

impl Membership {
    /// Validates every simplex and pure-task constraint. `pure` maps pure
    /// task index to its cluster.
    pub fn new(v: Array2<f64>, pure: BTreeMap<usize, usize>) -> Result<Self> {
        let (k, t) = v.dim();
        if k == 0 || t == 0 {
            return Err(Error::InvalidMembership("empty matrix".into()));
        }
        for (i, col) in v.columns().into_iter().enumerate() {
            if col.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidMembership(format!(
                    "column {} has an entry outside [0, 1]",
                    i + 1
                )));
            }
            let s: f64 = col.sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidMembership(format!(
                    "column {} sums to {s}",
                    i + 1
                )));
            }
        }
        for (&task, &cluster) in &pure {
            if task >= t || cluster >= k {
                return Err(Error::InvalidMembership(format!(
                    "pure task {} / cluster {} out of range",
                    task + 1,
                    cluster + 1
                )));
            }
            let one_hot = v
                .column(task)
                .iter()
                .enumerate()
                .all(|(c, &x)| x == if c == cluster { 1.0 } else { 0.0 });
            if !one_hot {
                return Err(Error::InvalidMembership(format!(
                    "pure task {} is not one-hot",
                    task + 1
                )));
            }
        }
        for c in 0..k {
            if !v.row(c).iter().any(|&x| x == 1.0) {
                return Err(Error::InvalidMembership(format!(
                    "cluster {} has no pure task",
                    c + 1
                )));
            }
        }
        Ok(Membership { v, pure })
    }

    /// K = 1: every task belongs to the single cluster.
    pub fn single_cluster(t: usize) -> Self {
        Membership {
            v: Array2::ones((1, t)),
            pure: (0..t).map(|i| (i, 0)).collect(),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.v.view()
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.v.column(i)
    }

    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    pub fn t(&self) -> usize {
        self.v.ncols()
    }

    pub fn pure_set(&self) -> Vec<usize> {
        self.pure.keys().copied().collect()
    }

    pub fn cluster_of_pure(&self) -> &BTreeMap<usize, usize> {
        &self.pure
    }

    pub fn is_pure(&self, task: usize) -> bool {
        self.pure.contains_key(&task)
    }
}

/// Tuning knobs for training. Defaults follow the reference setup.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Fraction of tasks declared pure.
    pub theta: f64,
    /// Fraction of neighbours examined by the purity score.
    pub epsilon: f64,
    /// Per-task penalties; selected by cross-validation when `None`.
    pub lambda: Option<Vec<f64>>,
    /// Penalty on U; the mean of the per-task penalties when `None`.
    pub gamma: Option<f64>,
    pub folds: usize,
    /// Candidate penalties, descending.
    pub lambda_grid: Vec<f64>,
    pub max_outer: usize,
    /// Relative objective change that stops the outer loop.
    pub tol: f64,
    /// Coordinate sweeps per W-refresh.
    pub w_sweeps: usize,
    /// Cycles over the columns of U per U-update.
    pub u_cycles: usize,
    /// Column movement (Euclidean) below which the U-update stops.
    pub u_tol: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            theta: 0.5,
            epsilon: 0.1,
            lambda: None,
            gamma: None,
            folds: 5,
            lambda_grid: crate::solver::default_lambda_grid(),
            max_outer: 50,
            tol: 1e-4,
            w_sweeps: 3,
            u_cycles: 100,
            u_tol: 1e-4,
            seed: 42,
            exec: Exec::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad(format!("theta = {} not in (0, 1]", self.theta));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon = {} not in (0, 1]", self.epsilon));
        }
        if let Some(l) = &self.lambda {
            if l.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad("every lambda must be positive".into());
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("gamma = {g} must be positive"));
            }
        }
        if self.folds < 2 {
            return bad(format!("folds = {} < 2", self.folds));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&x| !(x > 0.0)) {
            return bad("lambda grid must be nonempty and positive".into());
        }
        if self.max_outer == 0 {
            return bad("max_outer must be at least 1".into());
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol = {} must be nonnegative", self.tol));
        }
        Ok(())
    }
}

/// Wall time spent in each phase of a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimes {
    pub init: Duration,
    pub screen: Duration,
    pub update_v: Duration,
    pub update_u: Duration,
    pub update_w: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Penalized objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: f64,
    pub k: usize,
    /// Tasks screened out as outliers (robust mode), ascending.
    pub outliers: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Outer iteration (1-based) whose U and V were returned.
    pub best_iteration: usize,
    pub times: PhaseTimes,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace[self.best_iteration - 1]
    }
}
