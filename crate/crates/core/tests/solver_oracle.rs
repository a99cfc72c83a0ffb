//! Coordinate descent against an exhaustive sign-pattern oracle on tiny
//! squared-loss lasso problems.

mod common;

use common::{full_rank, instance, oracle};
use ndarray::Array1;
use rand::Rng;
use stcmtl::solver::{fit_lasso, LassoProblem};
use stcmtl::Loss;

#[test]
fn matches_brute_force_on_200_instances() {
    let mut rng = common::rng(20);
    let mut checked = 0;
    while checked < 200 {
        let (x, y, lambda) = instance(&mut rng);
        if !full_rank(&x) {
            continue;
        }
        let p = LassoProblem::new(x.view(), y.view(), lambda, Loss::Squared);
        let fit = fit_lasso(&p, None, None).unwrap();
        let got = p.objective(fit.coef.view());
        let want = oracle(&p);
        assert!((got - want).abs() <= 1e-4, "instance {checked}: cd {got} vs oracle {want}");
        assert!(got >= want - 1e-9, "instance {checked}: cd {got} below the oracle {want}");
        checked += 1;
    }
}

#[test]
fn converged_fits_carry_a_kkt_certificate() {
    let mut rng = common::rng(21);
    for case in 0..200 {
        let (x, y, lambda) = instance(&mut rng);
        let p = LassoProblem::new(x.view(), y.view(), lambda, Loss::Squared);
        let fit = fit_lasso(&p, None, None).unwrap();
        assert!(fit.converged, "case {case} did not converge");
        assert!(p.kkt_residual(fit.coef.view()) <= 1e-8, "case {case}");
    }
}

#[test]
fn logistic_fits_carry_a_kkt_certificate() {
    let mut rng = common::rng(22);
    for case in 0..100 {
        let (x, y, _) = instance(&mut rng);
        let y = y.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let lambda = 2f64.powf(rng.random_range(-5.0..0.0));
        let p = LassoProblem::new(x.view(), y.view(), lambda, Loss::Logistic);
        let fit = fit_lasso(&p, None, None).unwrap();
        if fit.converged {
            assert!(p.kkt_residual(fit.coef.view()) <= 1e-7, "case {case}");
        }
    }
}

#[test]
fn large_penalty_gives_zero() {
    let mut rng = common::rng(23);
    for _ in 0..50 {
        let (x, y, _) = instance(&mut rng);
        let p0 = LassoProblem::new(x.view(), y.view(), 0.0, Loss::Squared);
        let lmax = p0.gradient(Array1::zeros(x.ncols()).view()).iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let p = LassoProblem::new(x.view(), y.view(), lmax * 1.0001, Loss::Squared);
        let fit = fit_lasso(&p, None, None).unwrap();
        assert!(fit.coef.iter().all(|&c| c == 0.0));
    }
}
