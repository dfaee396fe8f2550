//! Ordinary and weighted least squares with classical and
//! heteroskedasticity-robust (HC0/HC1) covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sandwich, DenseMatrix, Qr};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Classical,
    Hc0,
    #[default]
    Hc1,
}

#[derive(Debug, Clone)]
pub struct OlsFit<T> {
    /// Coefficients on the kept columns, in column order.
    pub coefficients: Vec<T>,
    /// Column indices of the design that were estimated.
    pub kept: Vec<usize>,
    /// Column indices dropped as aliased.
    pub aliased: Vec<usize>,
    /// Raw (unweighted) residuals `y - Xb`.
    pub residuals: Vec<T>,
    /// Weighted residual sum of squares.
    pub rss: T,
    pub n: usize,
    weights: Option<Vec<T>>,
    bread: DenseMatrix<T>,
}

impl<T: Scalar> OlsFit<T> {
    pub fn fit(x: &DenseMatrix<T>, y: &[T], weights: Option<&[T]>) -> Result<Self> {
        let n = x.rows();
        if y.len() != n {
            return Err(Error::invalid("response length differs from design rows"));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("least-squares input".into()));
        }
        if let Some(w) = weights {
            if w.len() != n || w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(Error::invalid("weights must be finite, nonnegative, one per row"));
            }
        }
        let (xs, ys) = match weights {
            None => (x.clone(), y.to_vec()),
            Some(w) => {
                let mut xs = x.clone();
                let mut ys = y.to_vec();
                for i in 0..n {
                    let s = w[i].sqrt();
                    for v in xs.row_mut(i) {
                        *v *= s;
                    }
                    ys[i] *= s;
                }
                (xs, ys)
            }
        };
        let qr = Qr::factor(&xs);
        if qr.rank() == 0 {
            return Err(Error::RankDeficient("design has no estimable column".into()));
        }
        let coefficients = qr.solve(&ys);
        let kept = qr.kept().to_vec();
        let residuals: Vec<T> = (0..n)
            .map(|i| {
                let r = x.row(i);
                y[i] - kept
                    .iter()
                    .zip(&coefficients)
                    .fold(T::zero(), |acc, (&j, &b)| acc + r[j] * b)
            })
            .collect();
        let rss = residuals
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, &e)| {
                acc + weights.map_or(T::one(), |w| w[i]) * e * e
            });
        Ok(Self {
            coefficients,
            aliased: qr.aliased().to_vec(),
            kept,
            residuals,
            rss,
            n,
            weights: weights.map(<[T]>::to_vec),
            bread: qr.xtx_inverse(),
        })
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn df_resid(&self) -> usize {
        self.n.saturating_sub(self.rank())
    }

    /// Coefficient on design column `col`, `None` if it was aliased.
    pub fn coefficient(&self, col: usize) -> Option<T> {
        self.kept
            .iter()
            .position(|&j| j == col)
            .map(|k| self.coefficients[k])
    }

    /// Full-length coefficient vector with zeros at aliased columns.
    pub fn full_coefficients(&self, p: usize) -> Vec<T> {
        let mut b = vec![T::zero(); p];
        for (&j, &v) in self.kept.iter().zip(&self.coefficients) {
            b[j] = v;
        }
        b
    }

    pub fn sigma2(&self) -> T {
        let df = self.df_resid();
        if df == 0 {
            T::zero()
        } else {
            self.rss / T::from_usize_lossy(df)
        }
    }

    /// `(XᵀWX)⁻¹` over the kept columns.
    pub fn bread(&self) -> &DenseMatrix<T> {
        &self.bread
    }

    /// Covariance of the kept coefficients. `x` must be the design used to
    /// fit.
    pub fn covariance(&self, x: &DenseMatrix<T>, kind: CovarianceKind) -> DenseMatrix<T> {
        match kind {
            CovarianceKind::Classical => {
                let s2 = self.sigma2();
                self.bread.map(|v| v * s2)
            }
            CovarianceKind::Hc0 | CovarianceKind::Hc1 => {
                let scores = self.scores(x);
                let meat = outer_sum(&scores);
                let mut cov = sandwich(&self.bread, &meat);
                if kind == CovarianceKind::Hc1 {
                    let df = self.df_resid();
                    let scale = if df == 0 {
                        T::zero()
                    } else {
                        T::from_usize_lossy(self.n) / T::from_usize_lossy(df)
                    };
                    cov = cov.map(|v| v * scale);
                }
                cov
            }
        }
    }

    pub fn std_errors(&self, x: &DenseMatrix<T>, kind: CovarianceKind) -> Vec<T> {
        let cov = self.covariance(x, kind);
        (0..cov.rows()).map(|i| cov[(i, i)].max(T::zero()).sqrt()).collect()
    }

    /// Per-row score vectors `w_i e_i x_i` restricted to kept columns.
    pub fn scores(&self, x: &DenseMatrix<T>) -> Vec<Vec<T>> {
        (0..self.n)
            .map(|i| {
                let w = self.weights.as_ref().map_or(T::one(), |w| w[i]);
                let s = w * self.residuals[i];
                self.kept.iter().map(|&j| x[(i, j)] * s).collect()
            })
            .collect()
    }

    /// Weighted, centered R².
    pub fn r_squared(&self, y: &[T]) -> T {
        let w = |i: usize| self.weights.as_ref().map_or(T::one(), |w| w[i]);
        let sw = (0..self.n).fold(T::zero(), |a, i| a + w(i));
        let ybar = (0..self.n).fold(T::zero(), |a, i| a + w(i) * y[i]) / sw;
        let tss = (0..self.n).fold(T::zero(), |a, i| a + w(i) * (y[i] - ybar) * (y[i] - ybar));
        if tss == T::zero() {
            T::zero()
        } else {
            T::one() - self.rss / tss
        }
    }

    pub fn predict_row(&self, row: &[T]) -> T {
        self.kept
            .iter()
            .zip(&self.coefficients)
            .fold(T::zero(), |acc, (&j, &b)| acc + row[j] * b)
    }
}

/// `Σ s sᵀ` over score vectors.
pub fn outer_sum<T: Scalar>(scores: &[Vec<T>]) -> DenseMatrix<T> {
    let k = scores.first().map_or(0, Vec::len);
    let mut m = DenseMatrix::zeros(k, k);
    for s in scores {
        for a in 0..k {
            if s[a] == T::zero() {
                continue;
            }
            for b in a..k {
                m[(a, b)] += s[a] * s[b];
            }
        }
    }
    m.symmetrize_upper();
    m
}

/// Solve the normal equations for a single regressor plus intercept; used by
/// callers that need only the slope.
pub fn simple_slope<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let dx: Vec<T> = x.iter().map(|&v| v - mx).collect();
    let sxx = dot(&dx, &dx);
    if sxx == T::zero() {
        return None;
    }
    let sxy = dx.iter().zip(y).fold(T::zero(), |a, (&d, &v)| a + d * (v - my));
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[[f64; 2]]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hc1_matches_hand_computation() {
        // y = 1 + 2x with residuals (+1, -1, -1, +1) at x = 0..3.
        let x = design(&[[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]]);
        let y = [2.0, 2.0, 4.0, 8.0];
        let fit = OlsFit::fit(&x, &y, None).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        // Residuals are ±1, so HC0 meat = XᵀX and HC0 = (XᵀX)⁻¹.
        let hc0 = fit.covariance(&x, CovarianceKind::Hc0);
        assert!((hc0[(1, 1)] - 0.2).abs() < 1e-12);
        let hc1 = fit.covariance(&x, CovarianceKind::Hc1);
        assert!((hc1[(1, 1)] - 0.4).abs() < 1e-12);
        let classical = fit.covariance(&x, CovarianceKind::Classical);
        assert!((classical[(1, 1)] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn weights_equal_row_duplication() {
        let x = design(&[[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]);
        let y = [0.0, 2.0, 3.0];
        let w = [1.0, 2.0, 1.0];
        let fw = OlsFit::fit(&x, &y, Some(&w)).unwrap();
        let xd = design(&[[1.0, 0.0], [1.0, 1.0], [1.0, 1.0], [1.0, 2.0]]);
        let fd = OlsFit::fit(&xd, &[0.0, 2.0, 2.0, 3.0], None).unwrap();
        for (a, b) in fw.coefficients.iter().zip(&fd.coefficients) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((fw.rss - fd.rss).abs() < 1e-12);
    }

    #[test]
    fn aliased_columns_reported() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let fit = OlsFit::fit(&x, &[1.0, 2.0, 1.5], None).unwrap();
        assert_eq!(fit.aliased, vec![2]);
        assert_eq!(fit.coefficient(2), None);
        assert!(fit.coefficient(1).is_some());
    }

    #[test]
    fn rejects_non_finite() {
        let x = design(&[[1.0, f64::NAN], [1.0, 1.0]]);
        assert!(matches!(
            OlsFit::fit(&x, &[0.0, 1.0], None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn single_precision_fit() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0f32, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
        ])
        .unwrap();
        let fit = OlsFit::fit(&x, &[1.0f32, 3.0, 5.0], None).unwrap();
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-5);
        assert_eq!(simple_slope(&[0.0f32, 1.0, 2.0], &[1.0, 3.0, 5.0]), Some(2.0));
    }
}
