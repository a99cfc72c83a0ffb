//! Helpers shared by the integration suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stcmtl::solver::LassoProblem;
use stcmtl::soup::PureTaskSelection;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let m = b.len();
    for c in 0..m {
        let piv = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-10 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..m {
            let f = a[r][c] / a[c][c];
            for k in c..m {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Minimum of `(1/n)|y - Xw|^2 + lambda |w|_1` over every sign pattern whose
/// stationary point is sign-consistent. Exact for full column rank designs.
pub fn oracle(p: &LassoProblem<'_>) -> f64 {
    let (n, d) = (p.n(), p.p());
    let mut best = p.objective(Array1::zeros(d).view());
    for code in 0..3usize.pow(d as u32) {
        let signs: Vec<i32> = (0..d).map(|j| (code / 3usize.pow(j as u32) % 3) as i32 - 1).collect();
        let active: Vec<usize> = (0..d).filter(|&j| signs[j] != 0).collect();
        if active.is_empty() {
            continue;
        }
        let scale = 2.0 / n as f64;
        let a: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| active.iter().map(|&j| scale * p.design.column(i).dot(&p.design.column(j))).collect())
            .collect();
        let b: Vec<f64> = active
            .iter()
            .map(|&i| scale * p.design.column(i).dot(&p.target) - p.lambda * signs[i] as f64)
            .collect();
        let Some(sol) = solve(a, b) else { continue };
        if active.iter().zip(&sol).any(|(&j, &v)| v * signs[j] as f64 <= 0.0) {
            continue;
        }
        let mut w = Array1::zeros(d);
        for (&j, &v) in active.iter().zip(&sol) {
            w[j] = v;
        }
        best = best.min(p.objective(w.view()));
    }
    best
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>, f64) {
    let d = rng.random_range(1..=4);
    let n = rng.random_range(d + 1..=8);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let y = Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0));
    let lambda = 2f64.powf(rng.random_range(-8.0..2.0));
    (x, y, lambda)
}


/// Whether `X` has full column rank (as judged by the elimination above).
pub fn full_rank(x: &Array2<f64>) -> bool {
    let g: Vec<Vec<f64>> = x.t().dot(x).rows().into_iter().map(|r| r.to_vec()).collect();
    solve(g, vec![0.0; x.ncols()]).is_some()
}

/// Noiseless `W = U V` with three clusters of four pure tasks each, followed
/// by six mixed tasks; returns `W`, `V` and the true pure labelling.
pub fn planted(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>, PureTaskSelection) {
    let (k, per, mixed) = (3, 4, 6);
    let t = k * per + mixed;
    let mut v = Array2::zeros((k, t));
    for c in 0..k {
        for j in 0..per {
            v[[c, c * per + j]] = 1.0;
        }
    }
    for i in k * per..t {
        let raw = Array1::from_shape_fn(k, |_| rng.random_range(0.05..1.0));
        let sum = raw.sum();
        v.column_mut(i).assign(&(raw / sum));
    }
    let pure: Vec<usize> = (0..k * per).collect();
    let labels = pure.iter().map(|i| i / per).collect();
    let sel = PureTaskSelection {
        scores: Array1::zeros(t),
        pure,
        labels,
        k,
    };
    let u = gaussian(30, k, rng);
    (u.dot(&v), v, sel)
}
