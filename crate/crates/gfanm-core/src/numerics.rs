//! Dense complex linear algebra used throughout the crate.
//!
//! Thin wrappers over `nalgebra` that fix sorting conventions, tolerances
//! and error reporting. Matrices here are at most a few dozen rows, so
//! everything is dense and favours robustness over speed.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;
pub type RMatrix = DMatrix<f64>;

/// Condition estimate above which a linear solve is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Eigendecomposition of a Hermitian matrix, eigenvalues nonincreasing.
#[derive(Clone, Debug)]
pub struct HermitianEig {
    pub values: Vec<f64>,
    /// Unitary matrix whose k-th column pairs with `values[k]`.
    pub vectors: CMatrix,
}

impl HermitianEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// First `r` eigenvectors (the dominant subspace).
    pub fn leading(&self, r: usize) -> CMatrix {
        self.vectors.columns(0, r).into_owned()
    }

    /// Eigenvectors `r..n`, the complement of [`leading`](Self::leading).
    pub fn trailing(&self, r: usize) -> CMatrix {
        let n = self.dim();
        self.vectors.columns(r, n - r).into_owned()
    }

    pub fn reconstruct(&self) -> CMatrix {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let lam = self.values[k];
            scaled.column_mut(k).scale_mut(lam);
        }
        &scaled * self.vectors.adjoint()
    }
}

pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `(H + H*) / 2`.
pub fn hermitian_part(h: &CMatrix) -> CMatrix {
    (h + h.adjoint()).scale(0.5)
}

pub fn frobenius(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn require_square(a: &CMatrix, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

/// Eigendecomposition of the Hermitian part of `h`.
pub fn hermitian_eig(h: &CMatrix) -> Result<HermitianEig> {
    let n = require_square(h, "hermitian_eig input")?;
    if n == 0 {
        return Ok(HermitianEig {
            values: Vec::new(),
            vectors: CMatrix::zeros(0, 0),
        });
    }
    let sym = hermitian_part(h);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 100_000).ok_or(Error::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEig { values, vectors })
}

/// Eigenvalues of a real symmetric matrix in nondecreasing order.
pub fn symmetric_eigenvalues(a: &RMatrix) -> Vec<f64> {
    let sym = (a + a.transpose()).scale(0.5);
    let mut v: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn norm1(a: &CMatrix) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `A X = B` by LU with partial pivoting.
///
/// Fails with [`Error::Singular`] when the 1-norm condition estimate
/// exceeds [`MAX_CONDITION`].
pub fn solve_linear(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let n = require_square(a, "coefficient matrix")?;
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Singular { cond: f64::INFINITY })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular { cond });
    }
    lu.solve(b).ok_or(Error::Singular { cond })
}

pub fn singular_values(a: &CMatrix) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let svd = SVD::new(a.clone(), false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Largest singular value.
pub fn spectral_norm(a: &CMatrix) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Number of singular values at least `rtol` times the largest.
pub fn numerical_rank(a: &CMatrix, rtol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v >= rtol * top).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudoinverse, dropping singular values below `rtol` times
/// the largest.
pub fn pinv(a: &CMatrix, rtol: f64) -> CMatrix {
    if a.is_empty() {
        return CMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = SVD::new(a.clone(), true, true);
    let top = svd.singular_values.max();
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut out = CMatrix::zeros(a.ncols(), a.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rtol * top && s > 0.0 {
            let vk = vt.row(k).adjoint();
            let uk = u.column(k).adjoint();
            out += (vk * uk).unscale(s);
        }
    }
    out
}

/// `A^k` by repeated squaring.
pub fn matrix_power(a: &CMatrix, mut k: usize) -> CMatrix {
    let n = a.nrows();
    let mut result = CMatrix::identity(n, n);
    let mut base = a.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_eigenvalues() {
        let eig = hermitian_eig(&CMatrix::identity(3, 3)).unwrap();
        for v in &eig.values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn diagonal_eigenvectors_are_standard_basis() {
        let mut d = CMatrix::zeros(2, 2);
        d[(0, 0)] = c64(2.0, 0.0);
        let eig = hermitian_eig(&d).unwrap();
        assert_relative_eq!(eig.values[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(eig.values[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(eig.vectors[(0, 0)].norm(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(eig.vectors[(1, 1)].norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn random_hermitian_reconstructs() {
        let mut r = rng(7);
        let h = random_hermitian(&mut r, 5);
        let eig = hermitian_eig(&h).unwrap();
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        let err = frobenius(&(eig.reconstruct() - &h)) / frobenius(&h);
        assert!(err < 1e-10, "reconstruction error {err}");
        let gram = eig.vectors.adjoint() * &eig.vectors;
        assert!(frobenius(&(gram - CMatrix::identity(5, 5))) < 1e-10);
    }

    #[test]
    fn eig_rejects_rectangular() {
        assert!(matches!(
            hermitian_eig(&CMatrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let mut r = rng(1);
        let b = random_matrix(&mut r, 4, 2);
        let x = solve_linear(&CMatrix::identity(4, 4), &b).unwrap();
        assert!(frobenius(&(x - &b)) < 1e-15);

        let a = CMatrix::from_diagonal(&CVector::from_vec(vec![c64(2.0, 0.0), c64(4.0, 0.0)]));
        let rhs = CMatrix::from_column_slice(2, 1, &[c64(2.0, 0.0), c64(4.0, 0.0)]);
        let x = solve_linear(&a, &rhs).unwrap();
        assert_relative_eq!(x[(0, 0)].re, 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[(1, 0)].re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn solve_random_residual() {
        let mut r = rng(3);
        let a = random_matrix(&mut r, 6, 6) + CMatrix::identity(6, 6).scale(6.0);
        let b = random_matrix(&mut r, 6, 3);
        let x = solve_linear(&a, &b).unwrap();
        assert!(frobenius(&(&a * x - &b)) <= 1e-10 * frobenius(&b));
    }

    #[test]
    fn solve_singular_reports_condition() {
        let mut a = CMatrix::zeros(2, 2);
        a[(0, 0)] = c64(1.0, 0.0);
        a[(0, 1)] = c64(1.0, 0.0);
        a[(1, 0)] = c64(1.0, 0.0);
        a[(1, 1)] = c64(1.0 + 1e-15, 0.0);
        let b = CMatrix::identity(2, 1);
        assert!(matches!(solve_linear(&a, &b), Err(Error::Singular { .. })));
    }

    #[test]
    fn spectral_norm_cases() {
        assert_eq!(spectral_norm(&CMatrix::zeros(3, 3)), 0.0);
        // A Givens rotation with a phase is unitary.
        let (c, s) = (0.6, 0.8);
        let mut u = CMatrix::zeros(2, 2);
        u[(0, 0)] = c64(c, 0.0);
        u[(0, 1)] = c64(0.0, -s);
        u[(1, 0)] = c64(0.0, -s);
        u[(1, 1)] = c64(c, 0.0);
        assert_relative_eq!(spectral_norm(&u), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_rank_one_matches_power_iteration() {
        let mut r = rng(11);
        let u = random_matrix(&mut r, 5, 1);
        let v = random_matrix(&mut r, 4, 1);
        let a = &u * v.adjoint();
        let closed = u.norm() * v.norm();
        let ours = spectral_norm(&a);
        assert_relative_eq!(ours, closed, max_relative = 1e-10);

        let mut z = random_matrix(&mut r, 4, 1);
        for _ in 0..50 {
            z = a.adjoint() * (&a * &z);
            let nz = z.norm();
            z.unscale_mut(nz);
        }
        let power = (&a * &z).norm();
        assert_relative_eq!(ours, power, max_relative = 1e-10);
    }

    #[test]
    fn pinv_of_rank_deficient() {
        let mut r = rng(5);
        let u = random_matrix(&mut r, 4, 2);
        let v = random_matrix(&mut r, 3, 2);
        let a = &u * v.adjoint();
        let p = pinv(&a, 1e-12);
        assert!(frobenius(&(&a * &p * &a - &a)) < 1e-10 * frobenius(&a));
        assert!(frobenius(&(&p * &a * &p - &p)) < 1e-10 * frobenius(&p));
        assert_eq!(numerical_rank(&a, 1e-10), 2);
    }

    #[test]
    fn matrix_power_matches_repeated_product() {
        let mut r = rng(9);
        let a = random_matrix(&mut r, 3, 3).scale(0.3);
        let mut slow = CMatrix::identity(3, 3);
        for _ in 0..7 {
            slow = &slow * &a;
        }
        assert!(frobenius(&(matrix_power(&a, 7) - slow)) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn trace_equals_eigenvalue_sum(seed in any::<u64>(), n in 1usize..8) {
            let mut r = rng(seed);
            let h = random_hermitian(&mut r, n);
            let eig = hermitian_eig(&h).unwrap();
            let tr: f64 = (0..n).map(|i| h[(i, i)].re).sum();
            let sum: f64 = eig.values.iter().sum();
            prop_assert!((tr - sum).abs() <= 1e-10 * (1.0 + frobenius(&h)));
        }

        #[test]
        fn solve_then_multiply_is_identity(seed in any::<u64>(), n in 1usize..8) {
            let mut r = rng(seed);
            let a = random_matrix(&mut r, n, n) + CMatrix::identity(n, n).scale(2.0 * n as f64);
            let b = random_matrix(&mut r, n, 2);
            let x = solve_linear(&a, &b).unwrap();
            prop_assert!(frobenius(&(&a * x - &b)) <= 1e-10 * frobenius(&b));
        }

        #[test]
        fn spectral_norm_submultiplicative(seed in any::<u64>(), n in 1usize..7) {
            let mut r = rng(seed);
            let a = random_matrix(&mut r, n, n);
            let b = random_matrix(&mut r, n, n);
            prop_assert!(spectral_norm(&(&a * &b)) <= spectral_norm(&a) * spectral_norm(&b) + 1e-10);
        }
    }
}
