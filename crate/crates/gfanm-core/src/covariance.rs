//! State covariances of a G-filter and the structure of range Γ.
//!
//! A Hermitian `Σ` is a filtered covariance exactly when
//! `Σ - A Σ A* = b h* + h b*` for some `h`. Membership is tested through the
//! projector form `(I - Π_b)(Σ - A Σ A*)(I - Π_b) = 0` and through the
//! bordered rank condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfilter::GFilter;
use crate::numerics::{c64, frobenius, hermitian_part, numerical_rank, CMatrix, CVector};

/// Relative singular value cutoff in [`rank_test_matrix`].
pub const BORDERED_RANK_RTOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct StateCovariance {
    pub sigma: CMatrix,
}

impl StateCovariance {
    pub fn new(sigma: CMatrix) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        Ok(StateCovariance {
            sigma: hermitian_part(&sigma),
        })
    }

    pub fn zeros(n: usize) -> Self {
        StateCovariance {
            sigma: CMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n()).map(|i| self.sigma[(i, i)].re).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CovarianceJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CovarianceJson = serde_json::from_str(text)?;
        raw.try_into()
    }
}

/// Flattened row-major JSON layout of a covariance.
#[derive(Serialize, Deserialize)]
struct CovarianceJson {
    n: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl From<&StateCovariance> for CovarianceJson {
    fn from(c: &StateCovariance) -> Self {
        let n = c.n();
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                re.push(c.sigma[(i, j)].re);
                im.push(c.sigma[(i, j)].im);
            }
        }
        CovarianceJson { n, re, im }
    }
}

impl TryFrom<CovarianceJson> for StateCovariance {
    type Error = Error;

    fn try_from(raw: CovarianceJson) -> Result<Self> {
        let n = raw.n;
        if raw.re.len() != n * n || raw.im.len() != n * n {
            return Err(Error::Dimension(format!(
                "covariance JSON for n = {n} needs {} entries per part",
                n * n
            )));
        }
        StateCovariance::new(CMatrix::from_fn(n, n, |i, j| {
            c64(raw.re[i * n + j], raw.im[i * n + j])
        }))
    }
}

/// A Hermitian matrix annihilated by the adjoint map: `G* Y G ≡ 0`.
#[derive(Clone, Debug)]
pub struct KernelElement {
    pub y: CMatrix,
}

impl KernelElement {
    /// Component of `x` orthogonal to range Γ.
    pub fn project(filter: &GFilter, x: &CMatrix) -> Self {
        let x = hermitian_part(x);
        let basis = filter.range_basis();
        KernelElement {
            y: &x - basis.project(&x),
        }
    }

    /// Largest `|G* Y G|` over an equispaced grid of `points` frequencies.
    pub fn max_adjoint(&self, filter: &GFilter, points: usize) -> f64 {
        (0..points)
            .map(|l| adjoint_eval(filter, &self.y, l as f64 * std::f64::consts::TAU / points as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Isometric real coordinates of a Hermitian matrix (length n²).
pub fn hvec(h: &CMatrix) -> Vec<f64> {
    let n = h.nrows();
    let mut v = Vec::with_capacity(n * n);
    for i in 0..n {
        v.push(h[(i, i)].re);
    }
    let r2 = std::f64::consts::SQRT_2;
    for i in 0..n {
        for j in i + 1..n {
            v.push(r2 * h[(i, j)].re);
            v.push(r2 * h[(i, j)].im);
        }
    }
    v
}

/// Inverse of [`hvec`].
pub fn unhvec(v: &[f64], n: usize) -> CMatrix {
    let mut h = CMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = c64(v[i], 0.0);
    }
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut k = n;
    for i in 0..n {
        for j in i + 1..n {
            let z = c64(v[k] * r2, v[k + 1] * r2);
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
            k += 2;
        }
    }
    h
}

/// Real inner product `Re tr(X* Y)` on Hermitian matrices.
pub fn hermitian_inner(x: &CMatrix, y: &CMatrix) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Solves the Stein equation `X - A X A* = Q` by Smith doubling.
pub fn stein_solve(a: &CMatrix, q: &CMatrix) -> CMatrix {
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..80 {
        let step = &ak * &x * ak.adjoint();
        x += &step;
        ak = &ak * &ak;
        if frobenius(&ak) < 1e-18 || frobenius(&step) <= 1e-17 * frobenius(&x) {
            break;
        }
    }
    x
}

/// Frobenius-orthonormal basis of range Γ, real dimension `2n - 1`.
#[derive(Clone, Debug)]
pub struct RangeBasis {
    pub elements: Vec<CMatrix>,
    pub traces: Vec<f64>,
}

impl RangeBasis {
    /// Solves the Stein equation for `h = e_k` and `h = i e_k`, then
    /// orthonormalises the solutions.
    pub fn compute(filter: &GFilter) -> Self {
        let n = filter.n();
        let b = filter.b();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
        for k in 0..n {
            for unit in [c64(1.0, 0.0), c64(0.0, 1.0)] {
                let mut h = CVector::zeros(n);
                h[k] = unit;
                let q = b * h.adjoint() + &h * b.adjoint();
                rows.push(hvec(&stein_solve(filter.a(), &q)));
            }
        }
        let dim = n * n;
        let m = nalgebra::DMatrix::<f64>::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        let svd = m.svd(false, true);
        let vt = svd.v_t.expect("requested V^T");
        let top = svd.singular_values.max();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let mut elements = Vec::new();
        for &k in &order {
            if svd.singular_values[k] > 1e-9 * top {
                let v: Vec<f64> = vt.row(k).iter().copied().collect();
                elements.push(unhvec(&v, n));
            }
        }
        let traces = elements
            .iter()
            .map(|e| (0..n).map(|i| e[(i, i)].re).sum())
            .collect();
        RangeBasis { elements, traces }
    }

    pub fn dim(&self) -> usize {
        self.elements.len()
    }

    pub fn coordinates(&self, x: &CMatrix) -> Vec<f64> {
        self.elements.iter().map(|e| hermitian_inner(e, x)).collect()
    }

    pub fn combine(&self, coords: &[f64]) -> CMatrix {
        let n = self.elements.first().map_or(0, |e| e.nrows());
        let mut out = CMatrix::zeros(n, n);
        for (e, &c) in self.elements.iter().zip(coords) {
            out += e.scale(c);
        }
        out
    }

    /// Orthogonal projection onto range Γ.
    pub fn project(&self, x: &CMatrix) -> CMatrix {
        self.combine(&self.coordinates(x))
    }
}

/// `Σ ρ_k G(e^{iθ_k}) G(e^{iθ_k})*`.
pub fn gamma_of_atoms(filter: &GFilter, freqs: &[f64], powers: &[f64]) -> Result<StateCovariance> {
    if freqs.len() != powers.len() {
        return Err(Error::Dimension(format!(
            "{} frequencies but {} powers",
            freqs.len(),
            powers.len()
        )));
    }
    if let Some(p) = powers.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument(format!("power {p} is not positive")));
    }
    let n = filter.n();
    let mut sigma = CMatrix::zeros(n, n);
    for (&th, &rho) in freqs.iter().zip(powers) {
        let g = filter.atom_vector(th);
        sigma += (&g * g.adjoint()).scale(rho);
    }
    StateCovariance::new(sigma)
}

fn stein_residual(filter: &GFilter, sigma: &CMatrix) -> CMatrix {
    let a = filter.a();
    sigma - a * sigma * a.adjoint()
}

/// Frobenius norm of `(I - Π_b)(Σ - A Σ A*)(I - Π_b)`.
pub fn range_residual(filter: &GFilter, sigma: &StateCovariance) -> f64 {
    let b = filter.b();
    let n = filter.n();
    let proj = CMatrix::identity(n, n) - (b * b.adjoint()).unscale(b.norm_squared());
    frobenius(&(&proj * stein_residual(filter, &sigma.sigma) * &proj))
}

/// Tolerance used to call a covariance structural.
pub fn membership_tolerance(sigma: &StateCovariance) -> f64 {
    1e-8 * frobenius(&sigma.sigma).max(1.0)
}

/// Numerical rank of `[[Σ - A Σ A*, b], [b*, 0]]`; equals 2 on range Γ.
pub fn rank_test_matrix(filter: &GFilter, sigma: &StateCovariance) -> usize {
    let n = filter.n();
    let d = stein_residual(filter, &sigma.sigma);
    let b = filter.b();
    let mut m = CMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&d);
    for i in 0..n {
        m[(i, n)] = b[i];
        m[(n, i)] = b[i].conj();
    }
    numerical_rank(&m, BORDERED_RANK_RTOL)
}

/// `G*(e^{iθ}) X G(e^{iθ})`, real for Hermitian `X`.
pub fn adjoint_eval(filter: &GFilter, x: &CMatrix, theta: f64) -> f64 {
    let g = filter.atom_vector(theta);
    g.dotc(&(x * &g)).re
}

/// Average of the outer products `x x*`.
pub fn sample_covariance(outputs: &[CVector]) -> Result<StateCovariance> {
    let first = outputs.first().ok_or(Error::Empty("output list"))?;
    let n = first.len();
    let mut sigma = CMatrix::zeros(n, n);
    for x in outputs {
        if x.len() != n {
            return Err(Error::Dimension(format!(
                "output of length {} among vectors of length {n}",
                x.len()
            )));
        }
        sigma += x * x.adjoint();
    }
    StateCovariance::new(sigma.unscale(outputs.len() as f64))
}

/// Largest deviation of `m` from a Hermitian Toeplitz matrix, entrywise.
pub fn toeplitz_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 1..n {
        for j in 1..n {
            worst = worst.max((m[(i, j)] - m[(i - 1, j - 1)]).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfilter::{build_delay_filter, build_repeated_pole_filter};
    use crate::numerics::testutil::{random_hermitian, random_matrix, rng};
    use crate::numerics::{hermitian_eig, C64};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::TAU;

    fn band_filter(n: usize) -> GFilter {
        build_repeated_pole_filter(C64::from_polar(0.58, 2.0), n).unwrap()
    }

    fn random_atoms(r: &mut impl Rng, m: usize) -> (Vec<f64>, Vec<f64>) {
        let th = (0..m).map(|_| r.random_range(0.0..TAU)).collect();
        let rho = (0..m).map(|_| r.random_range(0.5..5.0)).collect();
        (th, rho)
    }

    #[test]
    fn single_atom_is_rank_one() {
        let f = band_filter(8);
        let s = gamma_of_atoms(&f, &[1.3], &[2.5]).unwrap();
        assert_relative_eq!(s.trace(), 2.5 * f.gain(1.3), max_relative = 1e-12);
        let eig = hermitian_eig(&s.sigma).unwrap();
        assert!(eig.values[1].abs() < 1e-12 * eig.values[0]);
    }

    #[test]
    fn three_atoms_covariance_has_rank_three() {
        let f = band_filter(20);
        let s = gamma_of_atoms(&f, &[1.0, 2.0, 3.0], &[8.0, 4.0, 2.0]).unwrap();
        let eig = hermitian_eig(&s.sigma).unwrap();
        assert!(eig.values[2] > 1.0);
        assert!(eig.values[3].abs() < 1e-10 * eig.values[0]);
        assert!(range_residual(&f, &s) <= 1e-10 * frobenius(&s.sigma));
        assert_eq!(rank_test_matrix(&f, &s), 2);
    }

    #[test]
    fn delay_bank_covariances_are_toeplitz() {
        let f = build_delay_filter(6).unwrap();
        let s = gamma_of_atoms(&f, &[0.4, 2.0, 5.1], &[1.0, 3.0, 0.7]).unwrap();
        assert!(toeplitz_deviation(&s.sigma) < 1e-10);
    }

    #[test]
    fn non_toeplitz_matrix_leaves_range() {
        let f = build_delay_filter(2).unwrap();
        let mut d = CMatrix::zeros(2, 2);
        d[(0, 0)] = c64(1.0, 0.0);
        d[(1, 1)] = c64(2.0, 0.0);
        let s = StateCovariance::new(d).unwrap();
        assert_relative_eq!(range_residual(&f, &s), 1.0, epsilon = 1e-14);
        assert_eq!(range_residual(&f, &StateCovariance::zeros(2)), 0.0);
    }

    #[test]
    fn bordered_rank_cases() {
        let f = build_delay_filter(3).unwrap();
        assert_eq!(rank_test_matrix(&f, &StateCovariance::zeros(3)), 2);
        let mut s = gamma_of_atoms(&f, &[0.5, 1.5], &[1.0, 2.0]).unwrap();
        assert_eq!(rank_test_matrix(&f, &s), 2);
        s.sigma[(0, 0)] += c64(1.0, 0.0);
        assert!(rank_test_matrix(&f, &s) > 2);
    }

    #[test]
    fn adjoint_cases() {
        let f = band_filter(10);
        let id = CMatrix::identity(10, 10);
        assert_relative_eq!(adjoint_eval(&f, &id, 0.8), f.gain(0.8), max_relative = 1e-13);

        let s = gamma_of_atoms(&f, &[2.2], &[1.0]).unwrap();
        let g0 = f.atom_vector(2.2);
        for th in [0.0, 1.0, 2.1, 4.0] {
            let g = f.atom_vector(th);
            let expect = g.dotc(&g0).norm_sqr();
            assert_relative_eq!(adjoint_eval(&f, &s.sigma, th), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn range_basis_dimension_and_orthonormality() {
        for n in [1, 2, 5, 20] {
            let f = band_filter(n);
            let basis = f.range_basis();
            assert_eq!(basis.dim(), 2 * n - 1, "n = {n}");
            for i in 0..basis.dim() {
                for j in 0..basis.dim() {
                    let ip = hermitian_inner(&basis.elements[i], &basis.elements[j]);
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - expect).abs() < 1e-10);
                }
                let res = range_residual(&f, &StateCovariance::new(basis.elements[i].clone()).unwrap());
                assert!(res < 1e-10);
            }
        }
    }

    #[test]
    fn kernel_elements_vanish_under_adjoint() {
        let f = band_filter(8);
        let mut r = rng(4);
        let x = random_hermitian(&mut r, 8);
        let k = KernelElement::project(&f, &x);
        assert!(frobenius(&k.y) > 1e-3);
        let max_gain = (0..512).map(|l| f.gain(l as f64 * TAU / 512.0)).fold(0.0, f64::max);
        assert!(k.max_adjoint(&f, 512) <= 1e-8 * frobenius(&k.y) * max_gain);
    }

    #[test]
    fn delay_kernel_diagonals_sum_to_zero() {
        let n = 5;
        let f = build_delay_filter(n).unwrap();
        let mut r = rng(8);
        let k = KernelElement::project(&f, &random_hermitian(&mut r, n));
        for off in 0..n {
            let s: C64 = (0..n - off).map(|i| k.y[(i + off, i)]).sum();
            assert!(s.norm() < 1e-10, "diagonal {off}: {s}");
        }
    }

    #[test]
    fn sample_covariance_cases() {
        assert!(matches!(sample_covariance(&[]), Err(Error::Empty(_))));
        let mut r = rng(6);
        let x = random_matrix(&mut r, 4, 1).column(0).into_owned();
        let one = sample_covariance(std::slice::from_ref(&x)).unwrap();
        assert!(frobenius(&(&one.sigma - &x * x.adjoint())) < 1e-14);
        let two = sample_covariance(&[x.clone(), x.clone()]).unwrap();
        assert!(frobenius(&(&two.sigma - &one.sigma)) < 1e-14);
        let basis: Vec<CVector> = (0..4)
            .map(|k| {
                let mut e = CVector::zeros(4);
                e[k] = c64(1.0, 0.0);
                e
            })
            .collect();
        let avg = sample_covariance(&basis).unwrap();
        assert!(frobenius(&(&avg.sigma - CMatrix::identity(4, 4).unscale(4.0))) < 1e-15);
    }

    #[test]
    fn json_roundtrip() {
        let f = band_filter(4);
        let s = gamma_of_atoms(&f, &[1.0, 2.5], &[1.0, 0.5]).unwrap();
        let back = StateCovariance::from_json(&s.to_json().unwrap()).unwrap();
        assert!(frobenius(&(back.sigma - &s.sigma)) < 1e-14);
    }

    #[test]
    fn stein_solver_satisfies_equation() {
        let f = band_filter(12);
        let mut r = rng(12);
        let q = random_hermitian(&mut r, 12);
        let x = stein_solve(f.a(), &q);
        let res = &x - f.a() * &x * f.a().adjoint() - &q;
        assert!(frobenius(&res) < 1e-10 * frobenius(&q));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn atoms_always_pass_membership(seed in any::<u64>(), m in 1usize..6) {
            let f = band_filter(12);
            let mut r = rng(seed);
            let (th, rho) = random_atoms(&mut r, m);
            let s = gamma_of_atoms(&f, &th, &rho).unwrap();
            prop_assert!(range_residual(&f, &s) <= 1e-10 * frobenius(&s.sigma));
            prop_assert_eq!(rank_test_matrix(&f, &s), 2);
        }

        #[test]
        fn residual_is_subadditive(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let f = band_filter(6);
            let mut r = rng(seed);
            let s1 = StateCovariance::new(random_hermitian(&mut r, 6)).unwrap();
            let s2 = StateCovariance::new(random_hermitian(&mut r, 6)).unwrap();
            let mix = StateCovariance::new(s1.sigma.scale(alpha) + s2.sigma.scale(beta)).unwrap();
            let lhs = range_residual(&f, &mix);
            let rhs = alpha.abs() * range_residual(&f, &s1) + beta.abs() * range_residual(&f, &s2);
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn delay_atoms_give_toeplitz(seed in any::<u64>(), m in 1usize..5, n in 2usize..9) {
            let f = build_delay_filter(n).unwrap();
            let mut r = rng(seed);
            let (th, rho) = random_atoms(&mut r, m);
            let s = gamma_of_atoms(&f, &th, &rho).unwrap();
            prop_assert!(toeplitz_deviation(&s.sigma) <= 1e-10);
        }

        #[test]
        fn adjoint_of_psd_is_nonnegative(seed in any::<u64>()) {
            let f = band_filter(6);
            let mut r = rng(seed);
            let b = random_matrix(&mut r, 6, 3);
            let x = &b * b.adjoint();
            for l in 0..64 {
                prop_assert!(adjoint_eval(&f, &x, l as f64 * TAU / 64.0) >= -1e-10);
            }
        }
    }
}
