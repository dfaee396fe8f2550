//! Small dense linear algebra: a row-major matrix, Householder QR with
//! limited column pivoting, and a Cholesky factorization that skips aliased
//! columns. Both factorizations walk the columns in their given order and
//! drop a column when it is numerically in the span of the columns already
//! accepted, so the aliasing decision is deterministic and always removes the
//! later of two collinear terms.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::invalid("ragged columns"));
        }
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid("matmul dimension mismatch"));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut m = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (jj, &j) in idx.iter().enumerate() {
                m[(i, jj)] = self[(i, j)];
            }
        }
        m
    }

    /// Principal submatrix on `idx` (rows and columns).
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let mut m = Self::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                m[(a, b)] = self[(i, j)];
            }
        }
        m
    }

    /// `XᵀX`, optionally with row weights.
    pub fn gram(&self, weights: Option<&[T]>) -> Self {
        let p = self.cols;
        let mut g = Self::zeros(p, p);
        for i in 0..self.rows {
            let w = weights.map_or(T::one(), |w| w[i]);
            let r = self.row(i);
            for a in 0..p {
                let ra = w * r[a];
                if ra == T::zero() {
                    continue;
                }
                for b in a..p {
                    g.data[a * p + b] += ra * r[b];
                }
            }
        }
        g.symmetrize_upper();
        g
    }

    /// `Xᵀy`, optionally with row weights.
    pub fn xty(&self, y: &[T], weights: Option<&[T]>) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let w = weights.map_or(T::one(), |w| w[i]);
            let wy = w * y[i];
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x * wy;
            }
        }
        out
    }

    /// Copy the upper triangle onto the lower one.
    pub fn symmetrize_upper(&mut self) {
        let p = self.cols;
        for a in 0..p {
            for b in 0..a {
                self.data[a * p + b] = self.data[b * p + a];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Householder QR of an `n x p` matrix with limited column pivoting.
#[derive(Debug, Clone)]
pub struct Qr<T> {
    n: usize,
    /// Householder vectors (full length `n`, zero above the pivot) and their
    /// scale factors.
    reflectors: Vec<(Vec<T>, T)>,
    /// Column `c` of `R` for the `c`-th kept column, length `c + 1`.
    r_cols: Vec<Vec<T>>,
    kept: Vec<usize>,
    aliased: Vec<usize>,
}

impl<T: Scalar> Qr<T> {
    pub fn factor(x: &DenseMatrix<T>) -> Self {
        Self::factor_with_tol(x, T::alias_tol())
    }

    pub fn factor_with_tol(x: &DenseMatrix<T>, tol: T) -> Self {
        let n = x.rows();
        let mut reflectors: Vec<(Vec<T>, T)> = Vec::new();
        let mut r_cols = Vec::new();
        let mut kept = Vec::new();
        let mut aliased = Vec::new();
        for j in 0..x.cols() {
            let mut col = x.column(j);
            let norm0 = dot(&col, &col).sqrt();
            for (v, beta) in &reflectors {
                apply_reflector(v, *beta, &mut col);
            }
            let k = kept.len();
            if k >= n {
                aliased.push(j);
                continue;
            }
            let tail = dot(&col[k..], &col[k..]).sqrt();
            if norm0 == T::zero() || tail <= tol * norm0 {
                aliased.push(j);
                continue;
            }
            let alpha = if col[k] > T::zero() { -tail } else { tail };
            let mut v = vec![T::zero(); n];
            v[k] = col[k] - alpha;
            v[k + 1..].copy_from_slice(&col[k + 1..]);
            let vtv = dot(&v[k..], &v[k..]);
            let beta = T::lit(2.0) / vtv;
            let mut rc = col[..k].to_vec();
            rc.push(alpha);
            r_cols.push(rc);
            reflectors.push((v, beta));
            kept.push(j);
        }
        Self {
            n,
            reflectors,
            r_cols,
            kept,
            aliased,
        }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    /// Original column indices retained, in order.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn aliased(&self) -> &[usize] {
        &self.aliased
    }

    /// `Qᵀy`.
    pub fn qt_mul(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.n);
        let mut out = y.to_vec();
        for (v, beta) in &self.reflectors {
            apply_reflector(v, *beta, &mut out);
        }
        out
    }

    /// Least-squares coefficients for the kept columns (same order as
    /// [`Qr::kept`]).
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        let qty = self.qt_mul(y);
        self.back_substitute(&qty[..self.rank()])
    }

    fn r(&self, i: usize, c: usize) -> T {
        if i <= c {
            self.r_cols[c][i]
        } else {
            T::zero()
        }
    }

    fn back_substitute(&self, rhs: &[T]) -> Vec<T> {
        let k = self.rank();
        let mut b = vec![T::zero(); k];
        for i in (0..k).rev() {
            let mut s = rhs[i];
            for c in i + 1..k {
                s -= self.r(i, c) * b[c];
            }
            b[i] = s / self.r(i, i);
        }
        b
    }

    /// `(X_kᵀX_k)⁻¹ = R⁻¹R⁻ᵀ` over the kept columns.
    pub fn xtx_inverse(&self) -> DenseMatrix<T> {
        let k = self.rank();
        let mut rinv = DenseMatrix::zeros(k, k);
        for c in 0..k {
            let mut e = vec![T::zero(); k];
            e[c] = T::one();
            let col = self.back_substitute(&e);
            for (i, v) in col.into_iter().enumerate() {
                rinv[(i, c)] = v;
            }
        }
        let mut out = DenseMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let mut s = T::zero();
                for c in b..k {
                    s += rinv[(a, c)] * rinv[(b, c)];
                }
                out[(a, b)] = s;
                out[(b, a)] = s;
            }
        }
        out
    }
}

fn apply_reflector<T: Scalar>(v: &[T], beta: T, x: &mut [T]) {
    let s = dot(v, x) * beta;
    if s == T::zero() {
        return;
    }
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi -= s * vi;
    }
}

/// Cholesky factor `G_kk = L Lᵀ` of a symmetric positive semidefinite matrix,
/// skipping columns whose Schur complement falls below `tol · G_jj`.
#[derive(Debug, Clone)]
pub struct GramCholesky<T> {
    l: DenseMatrix<T>,
    kept: Vec<usize>,
    aliased: Vec<usize>,
}

impl<T: Scalar> GramCholesky<T> {
    pub fn factor(g: &DenseMatrix<T>) -> Self {
        Self::factor_with_tol(g, T::alias_tol())
    }

    pub fn factor_with_tol(g: &DenseMatrix<T>, tol: T) -> Self {
        let p = g.rows();
        let mut l = DenseMatrix::zeros(p, p);
        let mut kept: Vec<usize> = Vec::new();
        let mut aliased = Vec::new();
        for j in 0..p {
            let k = kept.len();
            let gjj = g[(j, j)];
            if !(gjj > T::zero()) {
                aliased.push(j);
                continue;
            }
            let mut row = vec![T::zero(); k];
            for a in 0..k {
                let mut s = g[(kept[a], j)];
                for b in 0..a {
                    s -= l[(a, b)] * row[b];
                }
                row[a] = s / l[(a, a)];
            }
            let d = gjj - dot(&row, &row);
            if d <= tol * gjj {
                aliased.push(j);
                continue;
            }
            for (b, v) in row.into_iter().enumerate() {
                l[(k, b)] = v;
            }
            l[(k, k)] = d.sqrt();
            kept.push(j);
        }
        let k = kept.len();
        let mut lk = DenseMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                lk[(a, b)] = l[(a, b)];
            }
        }
        Self {
            l: lk,
            kept,
            aliased,
        }
    }

    /// Strict Cholesky: fails unless every column is retained.
    pub fn strict(g: &DenseMatrix<T>) -> Result<Self> {
        let f = Self::factor(g);
        if !f.aliased.is_empty() {
            return Err(Error::RankDeficient(format!(
                "matrix not positive definite (aliased columns {:?})",
                f.aliased
            )));
        }
        Ok(f)
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn aliased(&self) -> &[usize] {
        &self.aliased
    }

    /// Solve `G_kk x = rhs_k` where `rhs_k` is already restricted to the kept
    /// indices.
    pub fn solve_kept(&self, rhs: &[T]) -> Vec<T> {
        let k = self.rank();
        let mut z = vec![T::zero(); k];
        for i in 0..k {
            let mut s = rhs[i];
            for b in 0..i {
                s -= self.l[(i, b)] * z[b];
            }
            z[i] = s / self.l[(i, i)];
        }
        for i in (0..k).rev() {
            let mut s = z[i];
            for a in i + 1..k {
                s -= self.l[(a, i)] * z[a];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    /// Solve using a full-length right-hand side; entries at aliased indices
    /// are ignored.
    pub fn solve_full(&self, rhs: &[T]) -> Vec<T> {
        let r: Vec<T> = self.kept.iter().map(|&i| rhs[i]).collect();
        self.solve_kept(&r)
    }

    /// Inverse of `G_kk`.
    pub fn inverse(&self) -> DenseMatrix<T> {
        let k = self.rank();
        let mut inv = DenseMatrix::zeros(k, k);
        for c in 0..k {
            let mut e = vec![T::zero(); k];
            e[c] = T::one();
            for (i, v) in self.solve_kept(&e).into_iter().enumerate() {
                inv[(i, c)] = v;
            }
        }
        inv
    }

    /// `xᵀ G_kk⁻¹ x` via one triangular solve.
    pub fn quad_form_inv(&self, x: &[T]) -> T {
        let k = self.rank();
        let mut z = vec![T::zero(); k];
        for i in 0..k {
            let mut s = x[i];
            for b in 0..i {
                s -= self.l[(i, b)] * z[b];
            }
            z[i] = s / self.l[(i, i)];
        }
        dot(&z, &z)
    }
}

/// Sandwich `B M B` for symmetric `B` and `M`.
pub fn sandwich<T: Scalar>(bread: &DenseMatrix<T>, meat: &DenseMatrix<T>) -> DenseMatrix<T> {
    let left = bread.matmul(meat).expect("square sandwich");
    let mut out = left.matmul(bread).expect("square sandwich");
    let k = out.rows();
    for a in 0..k {
        for b in a + 1..k {
            let s = (out[(a, b)] + out[(b, a)]) * T::lit(0.5);
            out[(a, b)] = s;
            out[(b, a)] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn qr_solves_full_rank_system() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            vec![1.0, 3.0],
        ])
        .unwrap();
        let y = [1.0, 3.0, 5.0, 7.0];
        let qr = Qr::factor(&x);
        assert_eq!(qr.rank(), 2);
        let b = qr.solve(&y);
        assert!(close(b[0], 1.0, 1e-12) && close(b[1], 2.0, 1e-12));
        let inv = qr.xtx_inverse();
        // (XᵀX)⁻¹ for x = 0..3 with intercept: [[7/10, -3/10], [-3/10, 1/5]]
        assert!(close(inv[(0, 0)], 0.7, 1e-12));
        assert!(close(inv[(0, 1)], -0.3, 1e-12));
        assert!(close(inv[(1, 1)], 0.2, 1e-12));
    }

    #[test]
    fn qr_drops_later_collinear_column() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 2.0],
            vec![1.0, 0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 5.0],
            vec![1.0, 0.0, 1.0, 3.0],
        ])
        .unwrap();
        let qr = Qr::factor(&x);
        assert_eq!(qr.kept(), &[0, 1, 3]);
        assert_eq!(qr.aliased(), &[2]);
    }

    #[test]
    fn cholesky_matches_qr_and_aliases_identically() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 2.0],
            vec![1.0, 0.0, 1.0, 1.5],
            vec![1.0, 1.0, 0.0, 5.0],
            vec![1.0, 0.0, 1.0, 3.0],
            vec![1.0, 0.0, 1.0, -1.0],
        ])
        .unwrap();
        let y = [0.5, 1.0, 2.0, -1.0, 0.25];
        let qr = Qr::factor(&x);
        let ch = GramCholesky::factor(&x.gram(None));
        assert_eq!(qr.kept(), ch.kept());
        let b_qr = qr.solve(&y);
        let b_ch = ch.solve_full(&x.xty(&y, None));
        for (a, b) in b_qr.iter().zip(&b_ch) {
            assert!(close(*a, *b, 1e-10), "{a} vs {b}");
        }
    }

    #[test]
    fn strict_cholesky_rejects_singular() {
        let g = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(GramCholesky::strict(&g).is_err());
        let g = DenseMatrix::from_rows(&[vec![4.0f32, 2.0], vec![2.0, 3.0]]).unwrap();
        let ch = GramCholesky::strict(&g).unwrap();
        let inv = ch.inverse();
        assert!((inv[(0, 0)] - 0.375).abs() < 1e-6);
        assert!((ch.quad_form_inv(&[1.0, 0.0]) - 0.375).abs() < 1e-6);
    }
}
