//! Factorizations of `H = G^T D G + diag(a)` with diagonal `D >= 0`.
//!
//! Problems with `N <= M` factor `H` directly; otherwise the M x M matrix
//! `S = I + D^½ K D^½` with `K = G diag(a)^-1 G^T` is factored instead.

use nalgebra::{DMatrix, DVector};

use crate::error::{EsiError, Result};

/// Ratio of extreme eigenvalues of a symmetric matrix, for diagnostics.
pub(crate) fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Cholesky factor `L` of a symmetric positive-definite matrix, stored column-major
/// with only the lower triangle meaningful.
pub(crate) struct LowerFactor {
    l: DMatrix<f64>,
}

impl LowerFactor {
    /// Right-looking factorization in place; `None` unless every pivot is finite and positive.
    pub(crate) fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return None;
        }
        let data = a.as_mut_slice();
        for k in 0..n {
            let (done, rest) = data.split_at_mut((k + 1) * n);
            let col_k = &mut done[k * n..];
            let pivot = col_k[k];
            if !(pivot > 0.0 && pivot.is_finite()) {
                return None;
            }
            let root = pivot.sqrt();
            col_k[k] = root;
            let inv = 1.0 / root;
            for v in &mut col_k[k + 1..] {
                *v *= inv;
            }
            let below = &col_k[k + 1..];
            for (offset, col_j) in rest.chunks_exact_mut(n).enumerate() {
                let j = k + 1 + offset;
                let ljk = below[offset];
                if ljk != 0.0 {
                    for (v, lik) in col_j[j..].iter_mut().zip(&below[offset..]) {
                        *v -= lik * ljk;
                    }
                }
            }
        }
        Some(Self { l: a })
    }

    pub(crate) fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L L^T x = b` in place.
    pub(crate) fn solve_slice(&self, x: &mut [f64]) {
        let n = self.l.nrows();
        let l = self.l.as_slice();
        for k in 0..n {
            let col = &l[k * n..(k + 1) * n];
            let xk = x[k] / col[k];
            x[k] = xk;
            if xk != 0.0 {
                for (xi, li) in x[k + 1..].iter_mut().zip(&col[k + 1..]) {
                    *xi -= xk * li;
                }
            }
        }
        for k in (0..n).rev() {
            let col = &l[k * n..(k + 1) * n];
            let dot: f64 = x[k + 1..].iter().zip(&col[k + 1..]).map(|(a, b)| a * b).sum();
            x[k] = (x[k] - dot) / col[k];
        }
    }

    pub(crate) fn solve_vec(&self, x: &mut DVector<f64>) {
        self.solve_slice(x.as_mut_slice());
    }

    pub(crate) fn solve_mat(&self, x: &mut DMatrix<f64>) {
        let n = self.l.nrows();
        for col in x.as_mut_slice().chunks_exact_mut(n) {
            self.solve_slice(col);
        }
    }

    /// `log det(L L^T)`.
    pub(crate) fn log_det(&self) -> f64 {
        2.0 * (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }
}

fn factor(build: impl Fn() -> DMatrix<f64>, what: &str) -> Result<LowerFactor> {
    LowerFactor::new(build()).ok_or_else(|| {
        let m = build();
        let (message, condition) = if m.iter().all(|v| v.is_finite()) {
            (format!("{what} is not positive definite"), condition_estimate(&m))
        } else {
            (format!("{what} has non-finite entries"), f64::INFINITY)
        };
        EsiError::Numerical { message, condition }
    })
}

/// `D^½ X`, scaling each row.
fn scale_rows(x: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut row, &v) in out.row_iter_mut().zip(s.iter()) {
        row *= v;
    }
    out
}

/// Sum of squares of each column.
fn column_sq_norms(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.norm_squared()))
}

/// The `D`-independent part of the system: leadfield and prior precisions.
#[derive(Debug, Clone)]
pub(crate) struct SystemBasis<'a> {
    g: &'a DMatrix<f64>,
    a_bar: &'a DVector<f64>,
    a_inv: DVector<f64>,
    /// `G diag(a)^-1 G^T`, present when the dual form is used.
    k: Option<DMatrix<f64>>,
}

impl<'a> SystemBasis<'a> {
    pub(crate) fn new(g: &'a DMatrix<f64>, a_bar: &'a DVector<f64>) -> Result<Self> {
        if g.ncols() != a_bar.len() {
            return Err(EsiError::DimensionMismatch(format!(
                "{} sources in leadfield, {} precisions",
                g.ncols(),
                a_bar.len()
            )));
        }
        if a_bar.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(EsiError::InvalidInput("precisions must be positive and finite".into()));
        }
        let a_inv = a_bar.map(|a| 1.0 / a);
        let k = if g.ncols() > g.nrows() {
            let g_scaled = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * a_inv[j]);
            Some(&g_scaled * g.transpose())
        } else {
            None
        };
        Ok(Self { g, a_bar, a_inv, k })
    }

    pub(crate) fn is_dual(&self) -> bool {
        self.k.is_some()
    }

    pub(crate) fn leadfield(&self) -> &DMatrix<f64> {
        self.g
    }

    /// Factors the system for channel weights `d`.
    pub(crate) fn factor(&self, d: &DVector<f64>) -> Result<WeightedFactor<'_, 'a>> {
        if d.len() != self.g.nrows() {
            return Err(EsiError::DimensionMismatch(format!(
                "{} weights for {} channels",
                d.len(),
                self.g.nrows()
            )));
        }
        if d.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(EsiError::InvalidInput("channel weights must be finite and >= 0".into()));
        }
        let sqrt_d = d.map(f64::sqrt);
        match &self.k {
            None => {
                let build = || {
                    let gd = scale_rows(self.g, &sqrt_d);
                    let mut h = gd.tr_mul(&gd);
                    for (i, &a) in self.a_bar.iter().enumerate() {
                        h[(i, i)] += a;
                    }
                    h
                };
                let chol = factor(build, "source-space system matrix")?;
                Ok(WeightedFactor {
                    basis: self,
                    d: d.clone(),
                    sqrt_d,
                    chol,
                })
            }
            Some(k) => {
                let build = || {
                    let m = k.nrows();
                    let mut s = k.clone();
                    let root = sqrt_d.as_slice();
                    for (j, col) in s.as_mut_slice().chunks_exact_mut(m).enumerate() {
                        let dj = root[j];
                        for (v, di) in col.iter_mut().zip(root) {
                            *v *= di * dj;
                        }
                        col[j] += 1.0;
                    }
                    s
                };
                let chol = factor(build, "sensor-space system matrix")?;
                Ok(WeightedFactor {
                    basis: self,
                    d: d.clone(),
                    sqrt_d,
                    chol,
                })
            }
        }
    }
}

/// A factored `H`; the Cholesky factor is of `H` (primal) or of `S` (dual).
pub(crate) struct WeightedFactor<'b, 'a> {
    basis: &'b SystemBasis<'a>,
    d: DVector<f64>,
    sqrt_d: DVector<f64>,
    chol: LowerFactor,
}

impl WeightedFactor<'_, '_> {
    /// `H^-1 G^T D B` for every column of `B`.
    pub(crate) fn solve_data(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let g = self.basis.g;
        if self.basis.is_dual() {
            let mut y = scale_rows(b, &self.sqrt_d);
            self.chol.solve_mat(&mut y);
            let y = scale_rows(&y, &self.sqrt_d);
            scale_rows(&g.tr_mul(&y), &self.basis.a_inv)
        } else {
            let mut x = g.tr_mul(&scale_rows(b, &self.d));
            self.chol.solve_mat(&mut x);
            x
        }
    }

    /// `H^-1 G^T D b` for one column.
    pub(crate) fn solve_data_col(&self, b: &DVector<f64>) -> DVector<f64> {
        let g = self.basis.g;
        if self.basis.is_dual() {
            let mut y = b.component_mul(&self.sqrt_d);
            self.chol.solve_vec(&mut y);
            g.tr_mul(&y.component_mul(&self.sqrt_d))
                .component_mul(&self.basis.a_inv)
        } else {
            let mut x = g.tr_mul(&b.component_mul(&self.d));
            self.chol.solve_vec(&mut x);
            x
        }
    }

    /// `H^-1 G^T D b` together with its image under `G`.
    pub(crate) fn solve_data_col_fitted(&self, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let g = self.basis.g;
        match &self.basis.k {
            Some(k) => {
                let mut y = b.component_mul(&self.sqrt_d);
                self.chol.solve_vec(&mut y);
                y.component_mul_assign(&self.sqrt_d);
                let x = g.tr_mul(&y).component_mul(&self.basis.a_inv);
                (x, k * y)
            }
            None => {
                let x = self.solve_data_col(b);
                let fitted = g * &x;
                (x, fitted)
            }
        }
    }

    pub(crate) fn log_det(&self) -> f64 {
        if self.basis.is_dual() {
            self.chol.log_det() + self.basis.a_bar.iter().map(|a| a.ln()).sum::<f64>()
        } else {
            self.chol.log_det()
        }
    }

    fn l_inverse(&self) -> DMatrix<f64> {
        lower_triangular_inverse(self.chol.l())
    }

    /// Diagonal of `H^-1`.
    pub(crate) fn cov_diag(&self) -> DVector<f64> {
        let g = self.basis.g;
        let linv = self.l_inverse();
        if self.basis.is_dual() {
            let a_inv = &self.basis.a_inv;
            let x = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| self.sqrt_d[i] * g[(i, j)] * a_inv[j]);
            let reduce = column_sq_norms(&(linv * x));
            (a_inv - reduce).map(|v| v.max(0.0))
        } else {
            column_sq_norms(&linv)
        }
    }

    /// Diagonal of `G H^-1 G^T`.
    pub(crate) fn fitted_cov_diag(&self) -> DVector<f64> {
        let g = self.basis.g;
        let linv = self.l_inverse();
        match &self.basis.k {
            Some(k) => {
                let reduce = column_sq_norms(&(linv * scale_rows(k, &self.sqrt_d)));
                DVector::from_fn(k.nrows(), |i, _| (k[(i, i)] - reduce[i]).max(0.0))
            }
            None => column_sq_norms(&(linv * g.transpose())),
        }
    }

    /// `G H^-1 G^T`.
    pub(crate) fn fitted_cov(&self) -> DMatrix<f64> {
        let g = self.basis.g;
        let linv = self.l_inverse();
        match &self.basis.k {
            Some(k) => {
                let x = linv * scale_rows(k, &self.sqrt_d);
                k - x.transpose() * x
            }
            None => {
                let y = linv * g.transpose();
                y.transpose() * y
            }
        }
    }

    /// Adds this factor's `diag(H^-1)` to a running sum.
    pub(crate) fn accumulate_cov_diag(&self, acc: &mut CovDiagSum) {
        match acc {
            CovDiagSum::Direct { sum, count } => {
                *sum += self.cov_diag();
                *count += 1;
            }
            CovDiagSum::Sensor { w_sum, count } => {
                // D^½ S^-1 D^½, so that diag(H^-1) = a^-1 - a^-2 diag(G^T W G)
                let z = scale_columns(&self.l_inverse(), &self.sqrt_d);
                *w_sum += z.transpose() * z;
                *count += 1;
            }
        }
    }
}

/// `X D`, scaling each column.
fn scale_columns(x: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, &v) in out.column_iter_mut().zip(s.iter()) {
        col *= v;
    }
    out
}

/// Inverse of a lower-triangular matrix (only the lower triangle of `l` is read).
/// Column-oriented forward substitution keeps the inner loop contiguous.
pub(crate) fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(m, m);
    let src = l.as_slice();
    let dst = inv.as_mut_slice();
    for j in 0..m {
        let x = &mut dst[j * m..(j + 1) * m];
        x[j] = 1.0;
        for k in j..m {
            let xk = x[k] / src[k * m + k];
            x[k] = xk;
            if xk != 0.0 {
                let col = &src[k * m + k + 1..(k + 1) * m];
                for (xi, li) in x[k + 1..].iter_mut().zip(col) {
                    *xi -= xk * li;
                }
            }
        }
    }
    inv
}

/// Running sum of `diag(H_t^-1)` over many weightings of one basis.
/// In dual form the M x M inner matrices are summed and the N-vector is formed once.
pub(crate) enum CovDiagSum {
    Direct { sum: DVector<f64>, count: usize },
    Sensor { w_sum: DMatrix<f64>, count: usize },
}

impl CovDiagSum {
    pub(crate) fn for_basis(basis: &SystemBasis<'_>) -> Self {
        let (m, n) = basis.g.shape();
        if basis.is_dual() {
            CovDiagSum::Sensor {
                w_sum: DMatrix::zeros(m, m),
                count: 0,
            }
        } else {
            CovDiagSum::Direct {
                sum: DVector::zeros(n),
                count: 0,
            }
        }
    }

    pub(crate) fn finish(self, basis: &SystemBasis<'_>) -> DVector<f64> {
        match self {
            CovDiagSum::Direct { sum, .. } => sum,
            CovDiagSum::Sensor { w_sum, count } => {
                let g = basis.g;
                let wg = &w_sum * g;
                let a_inv = &basis.a_inv;
                DVector::from_fn(g.ncols(), |n, _| {
                    let quad: f64 = g.column(n).dot(&wg.column(n));
                    (count as f64 * a_inv[n] - a_inv[n] * a_inv[n] * quad).max(0.0)
                })
            }
        }
    }
}
