//! Complex matrices, Cholesky-based Hermitian solves and a small dense
//! complex tensor used by the simulator and the receiver front end.

pub use num_complex::Complex64;

use crate::{Error, Result};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * other`.
    pub fn mul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product `self * v`.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn add(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(other.data.iter()) {
            *o += b;
        }
        out
    }

    pub fn scaled(&self, c: Complex64) -> ComplexMatrix {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o *= c;
        }
        out
    }

    pub fn add_scaled_identity(&mut self, v: f64) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            self[(i, i)] += Complex64::new(v, 0.0);
        }
    }

    /// Real part of the trace (the imaginary part is ~0 for Hermitian input).
    pub fn trace_re(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)].re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Squared Frobenius norm; equals tr(S^2) for Hermitian S.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in i..self.cols {
                let d = self[(i, j)] - self[(j, i)].conj();
                if d.norm() > tol {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a Hermitian positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: ComplexMatrix,
}

impl Cholesky {
    /// Factors `a = L L^H`; returns `None` when a pivot is non-positive or
    /// non-finite.
    pub fn new(a: &ComplexMatrix) -> Option<Cholesky> {
        let n = a.rows;
        if n != a.cols {
            return None;
        }
        let mut l = ComplexMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)].re;
            for k in 0..j {
                diag -= l[(j, k)].norm_sqr();
            }
            if !(diag.is_finite() && diag > 0.0) {
                return None;
            }
            let dj = diag.sqrt();
            l[(j, j)] = Complex64::new(dj, 0.0);
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / dj;
            }
        }
        Some(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `A x = b` in place.
    pub fn solve_vec_in_place(&self, b: &mut [Complex64]) {
        let n = self.l.rows;
        debug_assert_eq!(b.len(), n);
        // L y = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
        // L^H x = y
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)].conj() * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &ComplexMatrix) -> ComplexMatrix {
        let n = self.l.rows;
        debug_assert_eq!(b.rows, n);
        let mut out = b.clone();
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = out[(i, j)];
            }
            self.solve_vec_in_place(&mut col);
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    /// Smallest diagonal entry of the factor (a cheap conditioning probe).
    pub fn min_pivot(&self) -> f64 {
        (0..self.l.rows)
            .map(|i| self.l[(i, i)].re)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Relative diagonal jitter applied when the first factorization fails.
const SOLVE_JITTER_EPS: f64 = 1e-9;
/// Relative residual accepted for a solve that needed jitter.
const JITTERED_RESIDUAL_TOL: f64 = 1e-6;

/// Solves `A X = B` for Hermitian positive semi-definite `A`.
///
/// When the Cholesky factorization fails, retries once with
/// `eps * (tr(A)/n) * I` added to the diagonal and verifies the residual of
/// the jittered solve against the original system.
pub fn hermitian_solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.rows != a.cols {
        return Err(Error::Shape(format!(
            "hermitian_solve needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "hermitian_solve dimension mismatch: A is {0}x{0}, B has {1} rows",
            a.rows, b.rows
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric(
            "hermitian_solve: non-finite entries in input".into(),
        ));
    }
    debug_assert!(a.is_hermitian(1e-9), "hermitian_solve input is not Hermitian");

    if let Some(chol) = Cholesky::new(a) {
        return Ok(chol.solve_mat(b));
    }

    let n = a.rows as f64;
    let jitter = SOLVE_JITTER_EPS * (a.trace_re() / n).abs();
    let mut aj = a.clone();
    aj.add_scaled_identity(jitter);
    let chol = Cholesky::new(&aj).ok_or_else(|| {
        Error::Numeric(format!(
            "hermitian_solve: factorization failed even with jitter {jitter:.3e} \
             (trace {:.3e})",
            a.trace_re()
        ))
    })?;
    let x = chol.solve_mat(b);

    let residual = {
        let ax = a.mul(&x);
        let mut diff = ax;
        for (d, bb) in diff.data.iter_mut().zip(b.data.iter()) {
            *d -= bb;
        }
        diff.frobenius_norm()
    };
    let b_norm = b.frobenius_norm().max(f64::MIN_POSITIVE);
    if residual / b_norm > JITTERED_RESIDUAL_TOL {
        return Err(Error::Numeric(format!(
            "hermitian_solve: relative residual {:.3e} after jitter {:.3e}; \
             min pivot {:.3e} suggests an ill-conditioned system",
            residual / b_norm,
            jitter,
            chol.min_pivot()
        )));
    }
    Ok(x)
}

/// Dense row-major complex tensor (rank decided by `shape`).
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        CTensor {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn idx3(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> Complex64 {
        self.data[self.idx3(a, b, c)]
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> Complex64 {
        self.data[self.idx4(a, b, c, d)]
    }

    #[inline]
    pub fn set3(&mut self, a: usize, b: usize, c: usize, v: Complex64) {
        let i = self.idx3(a, b, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn set4(&mut self, a: usize, b: usize, c: usize, d: usize, v: Complex64) {
        let i = self.idx4(a, b, c, d);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    /// G G^H + I is Hermitian positive definite by construction.
    fn random_hpd(rng: &mut ChaCha8Rng, n: usize) -> ComplexMatrix {
        let g = random_matrix(rng, n, n);
        let mut a = g.mul(&g.hermitian());
        a.add_scaled_identity(1.0);
        a
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = ComplexMatrix::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 4, 2);
        let x = hermitian_solve(&a, &b).unwrap();
        for (xv, bv) in x.data().iter().zip(b.data().iter()) {
            assert!((xv - bv).norm() < 1e-14);
        }
    }

    #[test]
    fn solve_scaled_identity() {
        let mut a = ComplexMatrix::zeros(3, 3);
        a.add_scaled_identity(2.0);
        let b = ComplexMatrix::identity(3);
        let x = hermitian_solve(&a, &b).unwrap();
        for i in 0..3 {
            assert!((x[(i, i)] - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn solve_multiply_back_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_hpd(&mut rng, 6);
            let b = random_matrix(&mut rng, 6, 3);
            let x = hermitian_solve(&a, &b).unwrap();
            let ax = a.mul(&x);
            let mut num = 0.0;
            for (av, bv) in ax.data().iter().zip(b.data().iter()) {
                num += (av - bv).norm_sqr();
            }
            let rel = num.sqrt() / b.frobenius_norm();
            assert!(rel <= 1e-9, "residual {rel}");
        }
    }

    #[test]
    fn solve_rejects_non_finite() {
        let mut a = ComplexMatrix::identity(2);
        a[(0, 0)] = Complex64::new(f64::NAN, 0.0);
        let b = ComplexMatrix::identity(2);
        assert!(hermitian_solve(&a, &b).is_err());
    }

    #[test]
    fn hermitian_flag_detects_asymmetry() {
        let mut a = ComplexMatrix::identity(2);
        assert!(a.is_hermitian(1e-12));
        a[(0, 1)] = Complex64::new(0.0, 1.0);
        a[(1, 0)] = Complex64::new(0.0, 1.0); // conj would be -i
        assert!(!a.is_hermitian(1e-12));
    }
}
