//! Robust training: screen out tasks whose coefficient vectors do not fit a
//! shared low-rank structure, then train on the survivors.
//!
//! Screening factorizes the surviving columns of W as `C Θ` under the
//! column-wise l2,1 loss `sum_i ||W_i - C Θ_i||`, so a handful of outlying
//! columns cannot drag the factors towards themselves. Tasks whose residual
//! norm sits far above the bulk are flagged and never come back.

use std::collections::BTreeMap;
use std::time::Instant;

use log::debug;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::data::{ClusterCoefs, FitReport, HyperParams, Membership, PhaseTimes, Problem};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sym_eigen};
use crate::solver::ClusterUpdater;
use crate::trainer::{self, StcmtlModel};
use crate::soup;

/// Residual norms below this are floored when forming IRLS weights.
const WEIGHT_FLOOR: f64 = 1e-8;
const IRLS_TOL: f64 = 1e-6;
const IRLS_MAX_ITER: usize = 200;
/// Multiple of the interquartile range above the upper quartile that flags
/// an outlier.
pub const IQR_FACTOR: f64 = 4.5;

/// `W ≈ C Θ` with per-column residual norms.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustFactorization {
    /// D x K
    pub c: Array2<f64>,
    /// K x T'
    pub theta: Array2<f64>,
    /// `||W_i - C Θ_i||` per column.
    pub column_errors: Array1<f64>,
    /// l2,1 objective at the start and after every iteration.
    pub trace: Vec<f64>,
}

fn column_errors(w: ArrayView2<'_, f64>, c: &Array2<f64>, theta: &Array2<f64>) -> Array1<f64> {
    let r = &w - &c.dot(theta);
    r.map_axis(Axis(0), |col| col.dot(&col).sqrt())
}

/// Solves the SPD system `A X = B` with a small relative ridge, reporting a
/// singular system as rank deficiency.
fn ridge_solve(a: &Array2<f64>, b: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let scale = a.diag().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if !(scale > 0.0) {
        return Err(Error::RankDeficient { k });
    }
    solve_spd(a.view(), b, 1e-12 * scale).map_err(|_| Error::RankDeficient { k })
}

/// Rank-`k` factorization of `w` (D x T') minimizing the column-wise l2,1
/// residual by iteratively reweighted alternating least squares.
///
/// Starts from the truncated SVD of the column-normalized matrix; each
/// iteration reweights columns by the
/// inverse of their current residual norm, solves for `C`, then for `Θ`.
/// Stops when the relative objective change drops below `1e-6` or after 200
/// iterations. Deterministic; the seed is accepted for interface stability.
pub fn robust_factorize(w: ArrayView2<'_, f64>, k: usize, _seed: u64) -> Result<RobustFactorization> {
    let (d, t) = w.dim();
    if k == 0 || k > t || k > d {
        return Err(Error::InvalidParam(format!(
            "rank {k} must be in 1..=min(D, T') = {}",
            d.min(t)
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("coefficient matrix"));
    }
    let gram = w.t().dot(&w);
    let eig = sym_eigen(gram.view());
    let top = eig.values[0].max(0.0);
    if !(top > 0.0) || eig.values[k - 1] <= 1e-12 * top {
        return Err(Error::RankDeficient { k });
    }
    // Start from the leading left singular subspace of the column-normalized
    // matrix, so that a few large columns cannot claim components for
    // themselves; once fitted exactly, a column's weight pins it there.
    let norms = w.map_axis(Axis(0), |col| col.dot(&col).sqrt());
    let unit = &w * &norms.mapv(|n| if n > 0.0 { 1.0 / n } else { 0.0 }).insert_axis(Axis(0));
    let unit_eig = sym_eigen(unit.t().dot(&unit).view());
    let mut c = unit.dot(&unit_eig.vectors.slice(s![.., ..k]));
    let ctc = c.t().dot(&c);
    let mut theta = ridge_solve(&ctc, c.t().dot(&w).view(), k)?;
    let mut errs = column_errors(w, &c, &theta);
    let mut trace = vec![errs.sum()];

    for it in 0..IRLS_MAX_ITER {
        let omega = errs.mapv(|e| 1.0 / e.max(WEIGHT_FLOOR));
        // C = W Ω Θᵀ (Θ Ω Θᵀ)⁻¹, solved as (Θ Ω Θᵀ) Cᵀ = Θ Ω Wᵀ.
        let theta_w = &theta * &omega.view().insert_axis(Axis(0));
        let lhs = theta_w.dot(&theta.t());
        let rhs = theta_w.dot(&w.t());
        c = ridge_solve(&lhs, rhs.view(), k)?.reversed_axes();
        // Θ_i = (CᵀC)⁻¹ Cᵀ W_i; per-column weights cancel.
        let ctc = c.t().dot(&c);
        let ctw = c.t().dot(&w);
        theta = ridge_solve(&ctc, ctw.view(), k)?;

        errs = column_errors(w, &c, &theta);
        let obj = errs.sum();
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (prev - obj).abs() < IRLS_TOL * prev.max(f64::MIN_POSITIVE) {
            debug!("l21 factorization converged after {} iterations", it + 1);
            break;
        }
    }
    Ok(RobustFactorization {
        c,
        theta,
        column_errors: errs,
        trace,
    })
}

/// Quantile by linear interpolation between order statistics (the default
/// "type 7" rule): position `(n - 1) p` in the sorted sample.
pub fn type7_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Flags tasks whose error exceeds `Q3 + 4.5 IQR`, with quartiles taken over
/// the errors of tasks not already in `existing`. Returns `existing` plus the
/// new flags.
pub fn detect_outliers(errors: &[f64], existing: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = existing.to_vec();
    out.sort_unstable();
    out.dedup();
    let mut clean: Vec<f64> = (0..errors.len())
        .filter(|i| out.binary_search(i).is_err())
        .map(|i| errors[i])
        .collect();
    if clean.is_empty() {
        return out;
    }
    clean.sort_by(f64::total_cmp);
    let q1 = type7_quantile(&clean, 0.25);
    let q3 = type7_quantile(&clean, 0.75);
    let threshold = q3 + IQR_FACTOR * (q3 - q1);
    for (i, &e) in errors.iter().enumerate() {
        if e > threshold && out.binary_search(&i).is_err() {
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}

/// Robust training. Each outer iteration re-screens the surviving tasks
/// before the usual membership / cluster / per-task updates, which then run
/// on survivors only. Flagged tasks keep their initial lasso fit as their
/// model and receive a uniform placeholder membership column.
pub fn fit_robust(problem: &Problem, k: usize, hp: &HyperParams) -> Result<StcmtlModel> {
    hp.validate()?;
    trainer::check_k(problem, k)?;
    let start = Instant::now();
    let init = match &hp.lambda {
        Some(l) => trainer::initialize_with(problem, l, hp.exec)?,
        None => trainer::initialize(problem, &hp.lambda_grid, hp.folds, hp.seed, hp.exec)?,
    };
    let mut times = PhaseTimes {
        init: start.elapsed(),
        ..PhaseTimes::default()
    };
    let gamma = hp
        .gamma
        .unwrap_or_else(|| trainer::default_gamma(problem, &init.lambda));
    let w0 = init.w.view();
    let mut w = w0.to_owned();
    let mut outliers: Vec<usize> = Vec::new();
    let mut survivors: Vec<usize> = (0..problem.t()).collect();
    let mut sub = problem.subset(&survivors);
    let mut trace = Vec::new();
    // Objectives are only comparable while the survivor set is unchanged.
    let mut comparable_from = 0usize;
    let mut best: Option<(f64, usize, Vec<usize>, Array2<f64>, Membership)> = None;
    let mut converged = false;

    for it in 1..=hp.max_outer {
        let t0 = Instant::now();
        let w_sub = w.select(Axis(1), &survivors);
        let fac = robust_factorize(w_sub.view(), k, hp.seed)?;
        let local = detect_outliers(fac.column_errors.as_slice().unwrap(), &[]);
        let changed = !local.is_empty();
        if changed {
            for &l in &local {
                outliers.push(survivors[l]);
            }
            outliers.sort_unstable();
            survivors.retain(|i| outliers.binary_search(i).is_err());
            if survivors.len() < k {
                return Err(Error::AllOutliers {
                    remaining: survivors.len(),
                    k,
                });
            }
            sub = problem.subset(&survivors);
            comparable_from = trace.len();
            best = None;
            debug!("iteration {it}: outliers now {outliers:?}");
        }
        times.screen += t0.elapsed();

        let w_surv = w.select(Axis(1), &survivors);
        let t0 = Instant::now();
        let clustering = soup::soup(w_surv.view(), k, hp.theta, hp.epsilon, hp.seed)?;
        times.update_v += t0.elapsed();

        let t0 = Instant::now();
        let u0 = trainer::pure_centroids(w_surv.view(), &clustering.selection);
        let v = clustering.membership;
        let mut updater = ClusterUpdater::new(&sub);
        let upd = trainer::update_u(&sub, &mut updater, u0, v.view(), gamma, hp.u_cycles, hp.u_tol)?;
        times.update_u += t0.elapsed();
        let u = upd.u;

        let obj = *upd.trace.last().unwrap();
        if !obj.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        debug!("iteration {it}: objective {obj:.6} on {} tasks", survivors.len());
        let prev = if trace.len() > comparable_from {
            trace.last().copied()
        } else {
            None
        };
        trace.push(obj);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, it, survivors.clone(), u.clone(), v.clone()));
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
        let cols = hp.exec.try_map(survivors.len(), |j| {
            let i = survivors[j];
            let start = u.dot(&v.column(j));
            trainer::fit_task(problem.task(i), init.lambda[i], Some(start.view()), Some(hp.w_sweeps))
        })?;
        for (j, c) in cols.into_iter().enumerate() {
            w.column_mut(survivors[j]).assign(&c);
        }
        times.update_w += t0.elapsed();
    }

    let (_, best_iteration, kept, u, v_sub) = best.expect("at least one outer iteration");
    let t = problem.t();
    let mut v = Array2::from_elem((k, t), 1.0 / k as f64);
    let mut pure = BTreeMap::new();
    for (j, &i) in kept.iter().enumerate() {
        v.column_mut(i).assign(&v_sub.column(j));
    }
    for (&j, &c) in v_sub.cluster_of_pure() {
        pure.insert(kept[j], c);
    }
    let task_overrides = outliers
        .iter()
        .map(|&i| (i, w0.column(i).to_owned()))
        .collect();
    let report = FitReport {
        iterations: trace.len(),
        objective_trace: trace,
        lambda: init.lambda.clone(),
        gamma,
        k,
        outliers,
        converged,
        best_iteration,
        times,
    };
    Ok(StcmtlModel {
        u: ClusterCoefs::new(u)?,
        v: Membership::new(v, pure)?,
        task_overrides,
        loss: problem.loss(),
        report,
    })
}
