//! Benchmark-level acceptance checks. Every check prints one `PASS` or
//! `FAIL` line; a test fails if any of its lines does.
//!
//! Replicates use seeds 1..=10. The heavy criteria hold a shared lock so the
//! wall-clock figures are not inflated by other tests running alongside.

mod common;

use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{array, Array1, Array2};
use rand::Rng;
use stcmtl::bench::{evaluate, generate, mcc, ree, Mixing, SynthSpec};
use stcmtl::linalg::sym_eigen;
use stcmtl::robust::{detect_outliers, robust_factorize};
use stcmtl::solver::{fit_lasso, LassoProblem};
use stcmtl::soup::{recover_membership, similarity, soup, spectral_basis, SpectralBasis};
use stcmtl::trainer::{fit_from_init, initialize};
use stcmtl::{fit_robust, select_k, HyperParams, Loss};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
const K: usize = 5;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, ok: bool, text: String) {
        println!("{} {text}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(text);
        }
    }

    fn within(&mut self, label: &str, value: f64, lo: f64, hi: f64) {
        self.line(lo <= value && value <= hi, format!("{label} = {} in [{lo}, {hi}]", show(value)));
    }

    fn at_most(&mut self, label: &str, value: f64, bound: f64) {
        self.line(value <= bound, format!("{label} = {} <= {bound}", show(value)));
    }

    fn at_least(&mut self, label: &str, value: f64, bound: f64) {
        self.line(value >= bound, format!("{label} = {} >= {bound}", show(value)));
    }

    fn count(&mut self, label: &str, hits: usize, need: usize, of: usize) {
        self.line(hits >= need, format!("{label}: {hits}/{of} (need {need})"));
    }

    fn finish(self) {
        assert!(self.failed.is_empty(), "failed: {:#?}", self.failed);
    }
}

fn show(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn hp(seed: u64) -> HyperParams {
    HyperParams {
        seed,
        ..HyperParams::default()
    }
}

struct Replicate {
    rmse: f64,
    ree: f64,
    mcc: f64,
    lasso_rmse: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

struct Batch {
    runs: Vec<Replicate>,
    elapsed: Duration,
}

fn run_reference(d: usize, mixing: Mixing) -> Batch {
    let start = Instant::now();
    let runs = SEEDS
        .map(|seed| {
            let data = generate(&SynthSpec::reference(d, mixing, seed)).unwrap();
            let hp = hp(seed);
            let init = initialize(&data.train, &hp.lambda_grid, hp.folds, hp.seed, hp.exec).unwrap();
            let model = fit_from_init(&data.train, K, &hp, &init).unwrap();
            let all: Vec<usize> = (0..data.test.t()).collect();
            let w_true = Some(data.truth.w_true.view());
            let m = evaluate(model.coefficients().view(), &data.test, w_true, &all).unwrap();
            let lasso = evaluate(init.w.view(), &data.test, None, &all).unwrap();
            let r = &model.report;
            println!(
                "  D={d} {} seed {seed}: rmse {:.4} lasso {:.4} ree {:.4} mcc {:.3} iters {} converged {}",
                mixing.as_str(),
                m.prediction_error,
                lasso.prediction_error,
                m.ree.unwrap(),
                m.mcc.unwrap(),
                r.iterations,
                r.converged
            );
            Replicate {
                rmse: m.prediction_error,
                ree: m.ree.unwrap(),
                mcc: m.mcc.unwrap(),
                lasso_rmse: lasso.prediction_error,
                iterations: r.iterations,
                converged: r.converged,
                trace: r.objective_trace.clone(),
            }
        })
        .collect();
    Batch {
        runs,
        elapsed: start.elapsed(),
    }
}

fn reference(d: usize, mixing: Mixing) -> &'static Batch {
    static SPARSE_200: OnceLock<Batch> = OnceLock::new();
    static DENSE_200: OnceLock<Batch> = OnceLock::new();
    static SPARSE_600: OnceLock<Batch> = OnceLock::new();
    let cell = match (d, mixing) {
        (200, Mixing::Sparse) => &SPARSE_200,
        (200, Mixing::Dense) => &DENSE_200,
        (600, Mixing::Sparse) => &SPARSE_600,
        _ => unreachable!("no reference batch for D={d} {}", mixing.as_str()),
    };
    cell.get_or_init(|| {
        let _guard = heavy();
        run_reference(d, mixing)
    })
}

fn table2(report: &mut Report, d: usize, mixing: Mixing, rmse_hi: f64, mcc_lo: f64) -> &'static Batch {
    let b = reference(d, mixing);
    let tag = format!("D={d} {}", mixing.as_str());
    report.within(&format!("{tag} RMSE mean"), mean(b.runs.iter().map(|r| r.rmse)), 0.50, rmse_hi);
    report.at_least(&format!("{tag} MCC mean"), mean(b.runs.iter().map(|r| r.mcc)), mcc_lo);
    b
}

#[test]
fn criterion_01_sparse_d200() {
    let mut report = Report::default();
    let b = table2(&mut report, 200, Mixing::Sparse, 0.56, 0.70);
    let ree_mean = mean(b.runs.iter().map(|r| r.ree));
    report.at_most("D=200 sparse REE mean (||W - W_hat||_F / sqrt(T))", ree_mean, 0.015);
    // Per-entry scale, shown for comparison only.
    println!("info D=200 sparse REE mean / sqrt(D) = {:.5}", ree_mean / 200f64.sqrt());
    report.at_most("D=200 sparse runtime (s)", b.elapsed.as_secs_f64(), 600.0);
    report.finish();
}

#[test]
fn criterion_02_dense_d200() {
    let mut report = Report::default();
    table2(&mut report, 200, Mixing::Dense, 0.56, 0.70);
    report.finish();
}

#[test]
fn criterion_03_sparse_d600() {
    let mut report = Report::default();
    let b = table2(&mut report, 600, Mixing::Sparse, 0.57, 0.55);
    report.at_most("D=600 sparse runtime (s)", b.elapsed.as_secs_f64(), 1800.0);
    report.finish();
}

#[test]
fn criterion_04_beats_lasso() {
    let mut report = Report::default();
    for (d, mixing) in [(200, Mixing::Sparse), (200, Mixing::Dense), (600, Mixing::Sparse)] {
        let b = reference(d, mixing);
        let wins = b.runs.iter().filter(|r| r.rmse < r.lasso_rmse).count();
        let gap = mean(b.runs.iter().map(|r| r.lasso_rmse - r.rmse));
        println!("info D={d} {} mean RMSE gap to lasso {gap:.4}", mixing.as_str());
        report.count(&format!("D={d} {} replicates beating lasso", mixing.as_str()), wins, 9, b.runs.len());
    }
    report.finish();
}

#[test]
fn criterion_05_k_selection() {
    let mut report = Report::default();
    let grid: Vec<usize> = (2..=9).collect();
    for mixing in [Mixing::Sparse, Mixing::Dense] {
        let _guard = heavy();
        let picks: Vec<usize> = SEEDS
            .map(|seed| {
                let data = generate(&SynthSpec::reference(200, mixing, seed)).unwrap();
                select_k(&data.train, &grid, &hp(seed)).unwrap().best_k
            })
            .collect();
        println!("info D=200 {} selected k per seed: {picks:?}", mixing.as_str());
        let hits = picks.iter().filter(|&&k| k == K).count();
        report.count(&format!("D=200 {} seeds selecting k = 5", mixing.as_str()), hits, 8, picks.len());
    }
    report.finish();
}

#[test]
fn criterion_06_convergence() {
    let mut report = Report::default();
    for (d, mixing) in [(200, Mixing::Sparse), (200, Mixing::Dense), (600, Mixing::Sparse)] {
        let b = reference(d, mixing);
        let tag = format!("D={d} {}", mixing.as_str());
        let fast = b.runs.iter().filter(|r| r.converged && r.iterations <= 20).count();
        report.count(&format!("{tag} runs terminating within 20 iterations"), fast, 8, b.runs.len());
        let improved = b
            .runs
            .iter()
            .filter(|r| r.trace.last().unwrap() <= r.trace.first().unwrap())
            .count();
        report.count(&format!("{tag} runs ending at or below the first-iteration objective"), improved, b.runs.len(), b.runs.len());
    }
    report.finish();
}

struct RobustRun {
    survivor_rmse: f64,
    all_rmse: f64,
    survivor_mcc: f64,
    all_flagged: bool,
}

fn run_robust(d: usize) -> Vec<RobustRun> {
    let _guard = heavy();
    SEEDS
        .map(|seed| {
            let data = generate(&SynthSpec::robust(d, seed)).unwrap();
            let model = fit_robust(&data.train, K, &hp(seed)).unwrap();
            let flagged = &model.report.outliers;
            let survivors: Vec<usize> = (0..data.test.t()).filter(|i| !flagged.contains(i)).collect();
            let all: Vec<usize> = (0..data.test.t()).collect();
            let w = model.coefficients();
            let w_true = Some(data.truth.w_true.view());
            let s = evaluate(w.view(), &data.test, w_true, &survivors).unwrap();
            let a = evaluate(w.view(), &data.test, None, &all).unwrap();
            let all_flagged = data.truth.outlier_ids.iter().all(|i| flagged.contains(i));
            println!(
                "  robust D={d} seed {seed}: survivor rmse {:.4} all-task rmse {:.4} mcc {:.3} flagged {flagged:?}",
                s.prediction_error,
                a.prediction_error,
                s.mcc.unwrap()
            );
            RobustRun {
                survivor_rmse: s.prediction_error,
                all_rmse: a.prediction_error,
                survivor_mcc: s.mcc.unwrap(),
                all_flagged,
            }
        })
        .collect()
}

#[test]
fn criterion_07_robust() {
    let mut report = Report::default();
    let runs = run_robust(200);
    report.within("robust D=200 survivor RMSE mean", mean(runs.iter().map(|r| r.survivor_rmse)), 0.64, 0.76);
    println!("info robust D=200 all-task RMSE mean {:.4}", mean(runs.iter().map(|r| r.all_rmse)));
    report.at_least("robust D=200 survivor MCC mean", mean(runs.iter().map(|r| r.survivor_mcc)), 0.65);
    let caught = runs.iter().filter(|r| r.all_flagged).count();
    report.count("robust D=200 seeds flagging all 5 planted outliers", caught, 8, runs.len());

    let runs = run_robust(100);
    report.within("robust D=100 survivor RMSE mean", mean(runs.iter().map(|r| r.survivor_rmse)), 0.53, 0.65);
    println!("info robust D=100 all-task RMSE mean {:.4}", mean(runs.iter().map(|r| r.all_rmse)));
    report.finish();
}

#[test]
fn criterion_08_solver_oracle() {
    let mut report = Report::default();
    let mut rng = common::rng(8);
    let (mut checked, mut worst, mut converged, mut certified) = (0, 0.0f64, 0, 0);
    while checked < 200 {
        let (x, y, lambda) = common::instance(&mut rng);
        if !common::full_rank(&x) {
            continue;
        }
        let p = LassoProblem::new(x.view(), y.view(), lambda, Loss::Squared);
        let fit = fit_lasso(&p, None, None).unwrap();
        worst = worst.max((p.objective(fit.coef.view()) - common::oracle(&p)).abs());
        if fit.converged {
            converged += 1;
            // (2/n) X_j' r within lambda + 1e-6, with sign agreement on the support
            let g = p.gradient(fit.coef.view());
            let ok = g.iter().zip(fit.coef.iter()).all(|(&g, &w)| {
                if w == 0.0 {
                    g.abs() <= lambda + 1e-6
                } else {
                    (g + lambda * w.signum()).abs() <= 1e-6
                }
            });
            certified += usize::from(ok);
        }
        checked += 1;
    }
    report.at_most("max |objective - oracle| over 200 instances", worst, 1e-4);
    report.count("converged fits with a KKT certificate", certified, converged, converged);
    report.finish();
}

#[test]
fn criterion_09_spectral() {
    let mut report = Report::default();
    let mut rng = common::rng(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1..=40);
        let b = common::gaussian(t, t, &mut rng);
        let a = (&b + &b.t()) * 0.5;
        let eig = sym_eigen(a.view());
        let rebuilt = eig.vectors.dot(&Array2::from_diag(&eig.values)).dot(&eig.vectors.t());
        worst = worst.max((&a - &rebuilt).mapv(|x| x * x).sum().sqrt());
    }
    report.at_most("max Frobenius reconstruction error over 100 matrices", worst, 1e-8);

    let (mut exact, mut rotated) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let (w, v, sel) = common::planted(&mut rng);
        let basis = spectral_basis(&similarity(w.view()), 3).unwrap();
        let base = recover_membership(&basis, &sel).unwrap().view().to_owned();
        exact = exact.max(common::max_abs_diff(&base, &v));
        let q = sym_eigen(common::gaussian(3, 3, &mut rng).dot(&common::gaussian(3, 3, &mut rng).t()).view()).vectors;
        let turned = SpectralBasis {
            theta: q.dot(&basis.theta),
            eigenvalues: basis.eigenvalues.clone(),
        };
        let got = recover_membership(&turned, &sel).unwrap().view().to_owned();
        rotated = rotated.max(common::max_abs_diff(&got, &base));
    }
    report.at_most("exact recovery: max |V - V*|", exact, 1e-6);
    report.at_most("rotation invariance: max |V(QΘ) - V(Θ)|", rotated, 1e-8);
    report.finish();
}

#[test]
fn criterion_10_properties() {
    let mut report = Report::default();
    let mut rng = common::rng(10);

    // membership invariants on noisy coefficient matrices
    let mut simplex_ok = true;
    for seed in 0..20 {
        let (w, _, _) = common::planted(&mut rng);
        let noisy = &w + &(common::gaussian(w.nrows(), w.ncols(), &mut rng) * 0.05);
        let out = soup(noisy.view(), 3, 0.5, 0.1, seed).unwrap();
        let v = out.membership.view();
        let pure = out.membership.cluster_of_pure();
        let mut seen = [false; 3];
        for i in 0..v.ncols() {
            let col = v.column(i);
            simplex_ok &= (col.sum() - 1.0).abs() <= 1e-9 && col.iter().all(|&x| x >= 0.0);
            if let Some(&c) = pure.get(&i) {
                simplex_ok &= col[c] == 1.0;
                seen[c] = true;
            }
        }
        simplex_ok &= seen.iter().all(|&s| s);
    }
    report.line(simplex_ok, "membership columns on the simplex, pure columns one-hot, every cluster has a pure task".into());

    // generator support layout
    let data = generate(&SynthSpec::reference(200, Mixing::Sparse, 3)).unwrap();
    let u = &data.truth.u_true;
    let per_column = (0..K).all(|c| u.column(c).iter().filter(|&&x| x != 0.0).count() == 10);
    let rows: Vec<usize> = (0..200).filter(|&r| data.truth.w_true.row(r).iter().any(|&x| x != 0.0)).collect();
    report.line(
        per_column && rows == (0..30).collect::<Vec<_>>(),
        "generator: 10 nonzero rows per cluster, union support rows 1..30".into(),
    );

    // metric identities
    let wt = common::gaussian(12, 7, &mut rng);
    let wh = common::gaussian(12, 7, &mut rng);
    let a = -2.5;
    let scaled = (ree((&wt * a).view(), (&wh * a).view()).unwrap() - a.abs() * ree(wt.view(), wh.view()).unwrap()).abs();
    let st = wt.mapv(|x| x > 0.3);
    let se = wh.mapv(|x| x > 0.0);
    let flipped = (mcc(st.view(), se.view()).unwrap() - mcc(st.mapv(|b| !b).view(), se.mapv(|b| !b).view()).unwrap()).abs();
    report.line(scaled <= 1e-12 && flipped <= 1e-12, "ree scales with |a|, mcc symmetric under complementing both supports".into());

    // outlier rule hand cases
    let base = [1.0, 1.1, 0.9, 1.05, 0.95, 1.0, 1.02, 0.98];
    let mut errors = base.to_vec();
    errors.push(5.0);
    let equal = vec![2.0; 6];
    let rule_ok = detect_outliers(&errors, &[]) == vec![8]
        && detect_outliers(&base, &[]).is_empty()
        && detect_outliers(&equal, &[]).is_empty()
        && detect_outliers(&errors, &[2]) == vec![2, 8];
    report.line(rule_ok, "outlier rule hand cases (Q3 + 4.5 IQR, strict)".into());

    // l21 IRLS monotonicity
    let mut monotone = true;
    for _ in 0..10 {
        let mut w = common::gaussian(20, 3, &mut rng).dot(&common::gaussian(3, 24, &mut rng));
        for j in 0..3 {
            w.column_mut(j).mapv_inplace(|x| x * 10.0);
        }
        let f = robust_factorize(w.view(), 3, 0).unwrap();
        monotone &= f.trace.windows(2).all(|p| p[1] <= p[0] + 1e-10);
    }
    report.line(monotone, "l21 IRLS objective non-increasing".into());

    // coordinate sweeps never increase the lasso objective
    let x = common::gaussian(30, 6, &mut rng);
    let y: Array1<f64> = x.dot(&array![1.0, 0.0, -0.5, 0.0, 0.0, 2.0]);
    let p = LassoProblem::new(x.view(), y.view(), 0.05, Loss::Squared);
    let objs: Vec<f64> = (0..12)
        .map(|s| p.objective(fit_lasso(&p, None, Some(s)).unwrap().coef.view()))
        .collect();
    report.line(objs.windows(2).all(|p| p[1] <= p[0] + 1e-12), "lasso sweeps non-increasing".into());
    report.finish();
}
