//! Small dense kernels: symmetric eigendecomposition and SPD solves.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Descending.
    pub values: Array1<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: Array2<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver.
///
/// Iterates until the off-diagonal Frobenius mass falls below `1e-12` of the
/// matrix norm. Eigenvectors are sign-normalized so that their largest
/// magnitude entry (first one on ties) is positive, which makes the output
/// reproducible.
pub fn sym_eigen(a: ArrayView2<'_, f64>) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    // row-major working copies
    let mut m: Vec<f64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            m.push(0.5 * (a[[i, j]] + a[[j, i]]));
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = 1e-12 * norm;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = m[r * n + p];
                    let arq = m[r * n + q];
                    m[r * n + p] = c * arp - s * arq;
                    m[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = m[p * n + r];
                    let aqr = m[q * n + r];
                    m[p * n + r] = c * apr - s * aqr;
                    m[q * n + r] = s * apr + c * aqr;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let mut best = 0usize;
        for r in 0..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[[r, dst]] = sign * v[r * n + src];
        }
    }
    SymEigen { values, vectors }
}

/// Cholesky factor of a symmetric positive definite matrix; `None` when a
/// pivot drops below `min_pivot`.
pub fn cholesky(a: ArrayView2<'_, f64>, min_pivot: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > min_pivot) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` for each column of `B`.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for mut col in x.axis_iter_mut(Axis(1)) {
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    x
}

/// Solves the SPD system `(A + jitter I) X = B`.
pub fn solve_spd(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, jitter: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut a = a.to_owned();
    for i in 0..n {
        a[[i, i]] += jitter;
    }
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let l = cholesky(a.view(), 1e-13 * scale).ok_or(Error::SingularBasis)?;
    Ok(cholesky_solve(&l, b))
}
