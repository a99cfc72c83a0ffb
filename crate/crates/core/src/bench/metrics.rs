//! Prediction, estimation and support-recovery metrics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Coefficients with magnitude above this count as selected.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

pub fn rmse(y_true: ArrayView1<'_, f64>, y_pred: ArrayView1<'_, f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y_true.len() as f64).sqrt())
}

/// RMSE over all tasks' rows pooled together: `sqrt(sum r^2 / sum n_i)`.
pub fn pooled_rmse(y_true: &[Array1<f64>], y_pred: &[Array1<f64>]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut ss = 0.0;
    let mut n = 0usize;
    for (a, b) in y_true.iter().zip(y_pred) {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        ss += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += a.len();
    }
    Ok(if n == 0 { 0.0 } else { (ss / n as f64).sqrt() })
}

/// Fraction of mismatched labels.
pub fn error_rate(y_true: ArrayView1<'_, f64>, y_pred: ArrayView1<'_, f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Ok(0.0);
    }
    let wrong = y_true.iter().zip(y_pred).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / y_true.len() as f64)
}

pub fn pooled_error_rate(y_true: &[Array1<f64>], y_pred: &[Array1<f64>]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut wrong = 0usize;
    let mut n = 0usize;
    for (a, b) in y_true.iter().zip(y_pred) {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        wrong += a.iter().zip(b).filter(|(x, y)| x != y).count();
        n += a.len();
    }
    Ok(if n == 0 { 0.0 } else { wrong as f64 / n as f64 })
}

/// Root estimation error `||W - Ŵ||_F / sqrt(T)`.
pub fn ree(w_true: ArrayView2<'_, f64>, w_hat: ArrayView2<'_, f64>) -> Result<f64> {
    if w_true.dim() != w_hat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            w_true.dim(),
            w_hat.dim()
        )));
    }
    let t = w_true.ncols().max(1) as f64;
    let ss: f64 = w_true.iter().zip(w_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss.sqrt() / t.sqrt())
}

/// Entrywise nonzero pattern.
pub fn support(w: ArrayView2<'_, f64>) -> Array2<bool> {
    w.mapv(|x| x.abs() > SUPPORT_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_supports(truth: ArrayView2<'_, bool>, est: ArrayView2<'_, bool>) -> Result<Self> {
        if truth.dim() != est.dim() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", truth.dim(), est.dim())));
        }
        let mut c = Confusion::default();
        for (&t, &e) in truth.iter().zip(est) {
            match (t, e) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Matthews correlation; zero when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fn_) * (tp + fp) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

pub fn mcc(truth: ArrayView2<'_, bool>, est: ArrayView2<'_, bool>) -> Result<f64> {
    Ok(Confusion::from_supports(truth, est)?.mcc())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(array![1.0, 2.0].view(), array![1.0, 2.0].view()).unwrap(), 0.0);
        assert_eq!(rmse(array![0.0, 0.0].view(), array![1.0, 1.0].view()).unwrap(), 1.0);
        assert_eq!(
            rmse(array![0.0, 0.0, 0.0, 0.0].view(), array![1.0, 0.0, 0.0, 0.0].view()).unwrap(),
            0.5
        );
        assert!(matches!(
            rmse(array![0.0].view(), array![1.0, 1.0].view()),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn pooled_rmse_weights_by_rows() {
        let t = vec![array![0.0], array![0.0, 0.0, 0.0]];
        let p = vec![array![2.0], array![0.0, 0.0, 0.0]];
        assert_eq!(pooled_rmse(&t, &p).unwrap(), 1.0);
    }

    #[test]
    fn error_rate_cases() {
        let y = array![1.0, -1.0, 1.0, -1.0];
        assert_eq!(error_rate(y.view(), y.view()).unwrap(), 0.0);
        assert_eq!(error_rate(y.view(), (-&y).view()).unwrap(), 1.0);
        assert_eq!(error_rate(y.view(), array![1.0, -1.0, 1.0, 1.0].view()).unwrap(), 0.25);
    }

    #[test]
    fn ree_cases() {
        let w = Array2::<f64>::zeros((4, 9));
        assert_eq!(ree(w.view(), w.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(ree(w.view(), Array2::ones((4, 9)).view()).unwrap(), 2.0, epsilon = 1e-15);
        let mut h = Array2::<f64>::zeros((3, 4));
        h[[1, 2]] = -0.3;
        assert_abs_diff_eq!(ree(Array2::zeros((3, 4)).view(), h.view()).unwrap(), 0.15, epsilon = 1e-15);
        assert!(ree(w.view(), Array2::zeros((4, 8)).view()).is_err());
    }

    #[test]
    fn mcc_cases() {
        let perfect = Confusion { tp: 3, tn: 4, fp: 0, fn_: 0 };
        assert_eq!(perfect.mcc(), 1.0);
        let coin = Confusion { tp: 5, tn: 5, fp: 5, fn_: 5 };
        assert_eq!(coin.mcc(), 0.0);
        let c = Confusion { tp: 8, tn: 80, fp: 2, fn_: 10 };
        let expect = 620.0 / (18.0f64 * 10.0 * 82.0 * 90.0).sqrt();
        assert_abs_diff_eq!(c.mcc(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(c.mcc(), 0.538, epsilon = 5e-4);
        let empty = Confusion { tp: 0, tn: 10, fp: 0, fn_: 0 };
        assert_eq!(empty.mcc(), 0.0);
    }

    #[test]
    fn mcc_from_matrices() {
        let t = array![[true, false], [false, true]];
        assert_eq!(mcc(t.view(), t.view()).unwrap(), 1.0);
        assert!(mcc(t.view(), array![[true, false]].view()).is_err());
    }
}
