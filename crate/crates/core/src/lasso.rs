//! LASSO regularization paths by coordinate descent, and Mallows-Cp
//! selection along the path.
//!
//! The solver works in covariance ("Gram") form on standardized columns:
//! it needs only `XᵀX`, `Xᵀy`, `yᵀy` and `n` of the centered data, which is
//! what lets surface fits be assembled from per-site moments. The objective
//! is
//!
//! ```text
//! (1 / 2n) ‖y − Xb‖² + λ Σ_{j penalized} |b_j|
//! ```
//!
//! with an implicit intercept removed by centering. Coordinates are visited
//! in column order; each λ is warm-started from the previous solution. A
//! λ is converged when a full sweep changes no coefficient by more than
//! `tol`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, GramCholesky};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    pub n_lambda: usize,
    /// Smallest λ as a fraction of λ_max.
    pub min_ratio: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            n_lambda: 100,
            min_ratio: 1e-4,
            tol: 1e-7,
            max_sweeps: 100_000,
        }
    }
}

/// Centered, standardized least-squares problem in Gram form.
#[derive(Debug, Clone)]
pub struct GramProblem<T> {
    /// `ZᵀZ` for standardized columns `Z` (diagonal `n` for non-constant
    /// columns).
    pub gram: DenseMatrix<T>,
    pub zty: Vec<T>,
    /// Centered `yᵀy`.
    pub yty: T,
    pub n: usize,
    pub penalized: Vec<bool>,
}

impl<T: Scalar> GramProblem<T> {
    pub fn p(&self) -> usize {
        self.zty.len()
    }

    /// `‖y − Zb‖²` from the moments.
    pub fn rss(&self, b: &[T]) -> T {
        let gb = self.gram.matvec(b);
        (self.yty - T::lit(2.0) * dot(b, &self.zty) + dot(b, &gb)).max(T::zero())
    }

    /// Least squares on the unpenalized columns only; all others zero.
    fn unpenalized_fit(&self) -> Vec<T> {
        let idx: Vec<usize> = (0..self.p()).filter(|&j| !self.penalized[j]).collect();
        let mut b = vec![T::zero(); self.p()];
        if idx.is_empty() {
            return b;
        }
        let g = self.gram.submatrix(&idx);
        let chol = GramCholesky::factor(&g);
        let rhs: Vec<T> = idx.iter().map(|&j| self.zty[j]).collect();
        let sol = chol.solve_full(&rhs);
        for (&k, v) in chol.kept().iter().zip(sol) {
            b[idx[k]] = v;
        }
        b
    }

    /// Smallest λ at which every penalized coefficient is zero.
    pub fn lambda_max(&self) -> T {
        let b = self.unpenalized_fit();
        let gb = self.gram.matvec(&b);
        let n = T::from_usize_lossy(self.n);
        (0..self.p())
            .filter(|&j| self.penalized[j])
            .map(|j| ((self.zty[j] - gb[j]) / n).abs())
            .fold(T::zero(), T::max)
    }
}

fn soft_threshold<T: Scalar>(z: T, g: T) -> T {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        T::zero()
    }
}

const EXACT_RETRY_SWEEPS: usize = 10;

struct Solver<'a, T> {
    prob: &'a GramProblem<T>,
    b: Vec<T>,
    /// `Zᵀy − ZᵀZ b`.
    r: Vec<T>,
    n: T,
}

impl<'a, T: Scalar> Solver<'a, T> {
    fn new(prob: &'a GramProblem<T>, b: Vec<T>) -> Self {
        let gb = prob.gram.matvec(&b);
        let r = prob.zty.iter().zip(gb).map(|(&a, g)| a - g).collect();
        Self {
            prob,
            b,
            r,
            n: T::from_usize_lossy(prob.n),
        }
    }

    fn update(&mut self, j: usize, lambda: T) -> T {
        let gjj = self.prob.gram[(j, j)];
        if gjj <= T::zero() {
            return T::zero();
        }
        let old = self.b[j];
        let z = (self.r[j] + gjj * old) / self.n;
        let pen = if self.prob.penalized[j] { lambda } else { T::zero() };
        let new = soft_threshold(z, pen) / (gjj / self.n);
        let delta = new - old;
        if delta != T::zero() {
            self.b[j] = new;
            // The Gram matrix is symmetric; row j is contiguous.
            for (rk, &g) in self.r.iter_mut().zip(self.prob.gram.row(j)) {
                *rk -= g * delta;
            }
        }
        delta.abs()
    }

    /// Active-set step: solve the stationarity equations on the current
    /// support with the current signs. If a coefficient would change sign,
    /// move toward the solution only until the first one reaches zero, drop
    /// it, and repeat. Every step lowers the objective. Returns whether `b`
    /// changed; the caller's full sweep then decides convergence.
    fn exact_on_support(&mut self, lambda: T) -> bool {
        let p = self.b.len();
        let mut changed = false;
        for _ in 0..=p {
            let support: Vec<usize> = (0..p)
                .filter(|&j| self.b[j] != T::zero() || !self.prob.penalized[j])
                .collect();
            if support.is_empty() {
                break;
            }
            let g = self.prob.gram.submatrix(&support);
            let Ok(chol) = GramCholesky::strict(&g) else {
                break;
            };
            let rhs: Vec<T> = support
                .iter()
                .map(|&j| {
                    let s = if self.prob.penalized[j] { self.b[j].signum() } else { T::zero() };
                    self.prob.zty[j] - self.n * lambda * s
                })
                .collect();
            let x = chol.solve_kept(&rhs);
            if x.iter().any(|v| !v.is_finite()) {
                break;
            }
            // First sign change along b -> x.
            let mut step = T::one();
            let mut hit = None;
            for (&j, &v) in support.iter().zip(&x) {
                let bj = self.b[j];
                if self.prob.penalized[j] && (v == T::zero() || v.signum() != bj.signum()) {
                    let t = bj / (bj - v);
                    if t < step {
                        step = t;
                        hit = Some(j);
                    }
                }
            }
            for (&j, &v) in support.iter().zip(&x) {
                self.b[j] = self.b[j] + step * (v - self.b[j]);
            }
            changed = true;
            match hit {
                Some(j) => self.b[j] = T::zero(),
                None => break,
            }
        }
        if changed {
            let gb = self.prob.gram.matvec(&self.b);
            for ((r, &z), g) in self.r.iter_mut().zip(&self.prob.zty).zip(gb) {
                *r = z - g;
            }
        }
        changed
    }

    fn full_sweep(&mut self, lambda: T) -> T {
        let mut max_delta = T::zero();
        for j in 0..self.b.len() {
            max_delta = max_delta.max(self.update(j, lambda));
        }
        max_delta
    }

    fn solve(&mut self, lambda: T, tol: T, max_sweeps: usize) -> Result<usize> {
        let p = self.b.len();
        let mut sweeps = 0;
        loop {
            let max_delta = self.full_sweep(lambda);
            sweeps += 1;
            if max_delta < tol {
                return Ok(sweeps);
            }
            if self.exact_on_support(lambda) {
                sweeps += 1;
                if self.full_sweep(lambda) < tol {
                    return Ok(sweeps);
                }
            }
            let active: Vec<usize> = (0..p).filter(|&j| self.b[j] != T::zero()).collect();
            let mut inner = 0usize;
            loop {
                let mut md = T::zero();
                for &j in &active {
                    md = md.max(self.update(j, lambda));
                }
                sweeps += 1;
                inner += 1;
                if md < tol {
                    break;
                }
                // Ill-conditioned supports converge slowly under coordinate
                // descent; retry the direct solve once signs settle.
                if inner.is_multiple_of(EXACT_RETRY_SWEEPS) && self.exact_on_support(lambda) {
                    break;
                }
                if sweeps > max_sweeps {
                    return Err(Error::invalid(format!(
                        "coordinate descent did not converge in {max_sweeps} sweeps"
                    )));
                }
            }
            if sweeps > max_sweeps {
                return Err(Error::invalid(format!(
                    "coordinate descent did not converge in {max_sweeps} sweeps"
                )));
            }
        }
    }
}

/// Solution path in the standardized scale.
#[derive(Debug, Clone)]
pub struct LassoPath<T> {
    pub lambdas: Vec<T>,
    pub coefficients: Vec<Vec<T>>,
    /// Penalized-fit residual sum of squares at each λ.
    pub rss: Vec<T>,
    pub n: usize,
    /// Parameters counted at every point: the intercept plus unpenalized
    /// columns.
    pub n_fixed: usize,
}

impl<T: Scalar> LassoPath<T> {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Nonzero penalized and unpenalized columns at point `i`.
    pub fn support(&self, i: usize) -> Vec<usize> {
        self.coefficients[i]
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != T::zero())
            .map(|(j, _)| j)
            .collect()
    }

    pub fn n_params(&self, i: usize, penalized: &[bool]) -> usize {
        1 + self.coefficients[i]
            .iter()
            .zip(penalized)
            .filter(|(&b, &pen)| pen && b != T::zero())
            .count()
            + penalized.iter().filter(|&&p| !p).count()
    }
}

/// Geometric grid from `lambda_max` down to `min_ratio · lambda_max`.
pub fn lambda_grid<T: Scalar>(lambda_max: T, n: usize, min_ratio: T) -> Vec<T> {
    if n == 1 {
        return vec![lambda_max];
    }
    let step = min_ratio.ln() / T::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| lambda_max * (step * T::from_usize_lossy(i)).exp())
        .collect()
}

pub fn lasso_path_gram<T: Scalar>(prob: &GramProblem<T>, opts: &LassoOptions) -> Result<LassoPath<T>> {
    if !prob.gram.is_finite() || prob.zty.iter().any(|v| !v.is_finite()) || !prob.yty.is_finite() {
        return Err(Error::NonFinite("LASSO input".into()));
    }
    let lmax = prob.lambda_max();
    let lambdas = lambda_grid(lmax, opts.n_lambda.max(1), T::lit(opts.min_ratio));
    lasso_at_lambdas(prob, &lambdas, opts)
}

/// Solutions at the given λ values, warm-started in order.
pub fn lasso_at_lambdas<T: Scalar>(
    prob: &GramProblem<T>,
    lambdas: &[T],
    opts: &LassoOptions,
) -> Result<LassoPath<T>> {
    let mut solver = Solver::new(prob, prob.unpenalized_fit());
    let tol = T::lit(opts.tol);
    let mut coefficients = Vec::with_capacity(lambdas.len());
    let mut rss = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        solver.solve(lam, tol, opts.max_sweeps)?;
        rss.push(prob.rss(&solver.b));
        coefficients.push(solver.b.clone());
    }
    Ok(LassoPath {
        lambdas: lambdas.to_vec(),
        coefficients,
        rss,
        n: prob.n,
        n_fixed: 1 + prob.penalized.iter().filter(|&&p| !p).count(),
    })
}

/// Column centering and scaling used before penalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization<T> {
    pub means: Vec<T>,
    /// Population standard deviations; zero marks a constant column, which
    /// is held at zero.
    pub scales: Vec<T>,
    pub y_mean: T,
}

/// Standardize raw data and form the Gram problem.
pub fn standardize<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &[T],
    unpenalized: &[usize],
) -> Result<(GramProblem<T>, Standardization<T>)> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::invalid("response length differs from design rows"));
    }
    if n < 2 {
        return Err(Error::insufficient("LASSO needs at least 2 observations"));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LASSO input".into()));
    }
    let nf = T::from_usize_lossy(n);
    let y_mean = y.iter().copied().sum::<T>() / nf;
    let yc: Vec<T> = y.iter().map(|&v| v - y_mean).collect();
    let mut means = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    let mut z = DenseMatrix::zeros(n, p);
    for j in 0..p {
        let col = x.column(j);
        let m = col.iter().copied().sum::<T>() / nf;
        let var = col.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / nf;
        let s = var.sqrt();
        let constant = s <= T::alias_tol() * m.abs().max(T::one());
        means.push(m);
        scales.push(if constant { T::zero() } else { s });
        if !constant {
            for i in 0..n {
                z[(i, j)] = (col[i] - m) / s;
            }
        }
    }
    let gram = z.gram(None);
    let zty = z.xty(&yc, None);
    let mut penalized = vec![true; p];
    for &j in unpenalized {
        penalized[j] = false;
    }
    Ok((
        GramProblem {
            gram,
            zty,
            yty: dot(&yc, &yc),
            n,
            penalized,
        },
        Standardization {
            means,
            scales,
            y_mean,
        },
    ))
}

impl<T: Scalar> Standardization<T> {
    /// Raw-scale `(intercept, slopes)` from standardized coefficients.
    pub fn to_raw(&self, b: &[T]) -> (T, Vec<T>) {
        let slopes: Vec<T> = b
            .iter()
            .zip(&self.scales)
            .map(|(&bj, &s)| if s > T::zero() { bj / s } else { T::zero() })
            .collect();
        let intercept = self.y_mean - dot(&slopes, &self.means);
        (intercept, slopes)
    }
}

/// Path on raw data: standardizes, runs the path, and keeps the
/// standardization so coefficients can be mapped back.
pub fn lasso_path<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &[T],
    unpenalized: &[usize],
    opts: &LassoOptions,
) -> Result<(LassoPath<T>, Standardization<T>, GramProblem<T>)> {
    let (prob, st) = standardize(x, y, unpenalized)?;
    let path = lasso_path_gram(&prob, opts)?;
    Ok((path, st, prob))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpSelection<T> {
    pub index: usize,
    pub support: Vec<usize>,
    pub cp: T,
    pub cp_values: Vec<T>,
}

/// Point minimizing `Cp = RSS/σ² − n + 2k`; exact ties go to the smaller
/// support.
pub fn select_cp<T: Scalar>(path: &LassoPath<T>, penalized: &[bool], sigma2_full: T) -> Result<CpSelection<T>> {
    if path.is_empty() {
        return Err(Error::invalid("empty LASSO path"));
    }
    if !(sigma2_full > T::zero()) {
        return Err(Error::invalid("Cp requires a positive variance anchor"));
    }
    let n = T::from_usize_lossy(path.n);
    let cp_values: Vec<T> = (0..path.len())
        .map(|i| {
            let k = T::from_usize_lossy(path.n_params(i, penalized));
            path.rss[i] / sigma2_full - n + T::lit(2.0) * k
        })
        .collect();
    let mut best = 0;
    for i in 1..path.len() {
        let better = cp_values[i] < cp_values[best]
            || (cp_values[i] == cp_values[best]
                && path.n_params(i, penalized) < path.n_params(best, penalized));
        if better {
            best = i;
        }
    }
    Ok(CpSelection {
        index: best,
        support: path.support(best),
        cp: cp_values[best],
        cp_values,
    })
}

/// Residual variance anchor for Cp: from the full least-squares fit on the
/// Gram problem (aliased columns dropped). If that fit has no residual
/// degrees of freedom, falls back to the penalized fit at the smallest λ of
/// `path`.
pub fn sigma2_full<T: Scalar>(prob: &GramProblem<T>, path: Option<&LassoPath<T>>) -> Result<T> {
    let chol = GramCholesky::factor(&prob.gram);
    let rhs: Vec<T> = chol.kept().iter().map(|&j| prob.zty[j]).collect();
    let b = chol.solve_kept(&rhs);
    let rss = (prob.yty - dot(&b, &rhs)).max(T::zero());
    let df = prob.n as i64 - 1 - chol.rank() as i64;
    if df > 0 {
        return Ok(rss / T::from_usize_lossy(df as usize));
    }
    if let Some(path) = path {
        let last = path.len() - 1;
        let k = path.n_params(last, &prob.penalized) as i64;
        let df = prob.n as i64 - k;
        if df > 0 {
            return Ok(path.rss[last] / T::from_usize_lossy(df as usize));
        }
    }
    Err(Error::insufficient(
        "no residual degrees of freedom for the Cp variance anchor",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean-zero columns with `XᵀX = n I`, so standardization is the
    /// identity.
    fn orthonormal_design() -> DenseMatrix<f64> {
        let h = [
            [1.0, 1.0, 1.0],
            [-1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0],
            [-1.0, -1.0, 1.0],
            [1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
            [-1.0, -1.0, -1.0],
        ];
        DenseMatrix::from_rows(&h.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn soft_threshold_on_orthonormal_design() {
        let x = orthonormal_design();
        let y = [3.0, -1.0, 2.0, 0.5, 1.0, 0.0, -2.0, 1.5];
        let (prob, st) = standardize(&x, &y, &[]).unwrap();
        assert!(st.scales.iter().all(|&s| (s - 1.0).abs() < 1e-15));
        let ls: Vec<f64> = prob.zty.iter().map(|v| v / 8.0).collect();
        let lams = [0.5, 0.2, 0.05, 0.0];
        let path = lasso_at_lambdas(&prob, &lams, &LassoOptions::default()).unwrap();
        for (i, &lam) in lams.iter().enumerate() {
            for j in 0..3 {
                let want = ls[j].signum() * (ls[j].abs() - lam).max(0.0);
                assert!((path.coefficients[i][j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn above_lambda_max_is_all_zero() {
        let x = orthonormal_design();
        let y = [3.0, -1.0, 2.0, 0.5, 1.0, 0.0, -2.0, 1.5];
        let (path, _, prob) = lasso_path(&x, &y, &[], &LassoOptions::default()).unwrap();
        assert!(path.coefficients[0].iter().all(|&b| b == 0.0));
        let above = lasso_at_lambdas(&prob, &[prob.lambda_max() * 1.5], &LassoOptions::default()).unwrap();
        assert!(above.coefficients[0].iter().all(|&b| b == 0.0));
        assert_eq!(path.len(), 100);
        let ratio = path.lambdas[99] / path.lambdas[0];
        assert!((ratio - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn unpenalized_column_never_zero() {
        let x = orthonormal_design();
        let y = [3.0, -1.0, 2.0, 0.5, 1.0, 0.0, -2.0, 1.5];
        let (path, _, prob) = lasso_path(&x, &y, &[0], &LassoOptions::default()).unwrap();
        assert!(path.coefficients[0][0] != 0.0);
        assert!(path.coefficients[0][1..].iter().all(|&b| b == 0.0));
        assert!(!prob.penalized[0]);
    }

    #[test]
    fn single_point_path_selected() {
        let x = orthonormal_design();
        let y = [3.0, -1.0, 2.0, 0.5, 1.0, 0.0, -2.0, 1.5];
        let (prob, _) = standardize(&x, &y, &[]).unwrap();
        let path = lasso_at_lambdas(&prob, &[0.1], &LassoOptions::default()).unwrap();
        let sel = select_cp(&path, &prob.penalized, 1.0).unwrap();
        assert_eq!(sel.index, 0);
    }
}
