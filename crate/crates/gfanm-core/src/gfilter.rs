//! G-filters: stable reachable pairs `(A, b)` driving `x(t) = A x(t-1) + b y(t)`.
//!
//! The transfer vector `G(e^{iθ}) = (I - e^{-iθ} A)^{-1} b` is the atom of the
//! estimator. Every filter keeps a complex Schur form of `A` so atoms cost one
//! triangular solve.

use std::f64::consts::TAU;
use std::sync::{Arc, OnceLock};

use nalgebra::linalg::Schur;
use serde::{Deserialize, Serialize};

use crate::covariance::RangeBasis;
use crate::error::{Error, Result};
use crate::numerics::{c64, matrix_power, spectral_norm, CMatrix, CVector, C64};

/// Default truncation threshold for the filter transient.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Reduces an angle to `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Distance between two angles on the circle.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[derive(Clone, Debug)]
pub struct GFilter {
    a: CMatrix,
    b: CVector,
    // A = Q T Q*, T upper triangular; `qb` is Q* b.
    q: Option<CMatrix>,
    t: CMatrix,
    qb: CVector,
    range: OnceLock<Arc<RangeBasis>>,
}

/// A filter atom `G(e^{iθ})` together with its frequency.
#[derive(Clone, Debug)]
pub struct Atom {
    pub theta: f64,
    pub vector: CVector,
}

fn is_upper_triangular(a: &CMatrix) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| a[(i, j)] == C64::new(0.0, 0.0)))
}

impl GFilter {
    /// Validates and wraps an arbitrary pair.
    pub fn new(a: CMatrix, b: CVector) -> Result<Self> {
        let n = b.len();
        if n == 0 {
            return Err(Error::Empty("filter input vector b"));
        }
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{} but b has length {n}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite filter entry".into()));
        }
        let (q, t) = if is_upper_triangular(&a) {
            (None, a.clone())
        } else {
            let schur = Schur::try_new(a.clone(), f64::EPSILON, 100_000).ok_or(Error::NoConvergence)?;
            let (q, t) = schur.unpack();
            (Some(q), t)
        };
        let qb = match &q {
            Some(q) => q.adjoint() * &b,
            None => b.clone(),
        };
        let filter = GFilter {
            a,
            b,
            q,
            t,
            qb,
            range: OnceLock::new(),
        };
        let rho = filter.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Unstable { modulus: rho });
        }
        if !filter.is_reachable() {
            return Err(Error::Unreachable);
        }
        Ok(filter)
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &CMatrix {
        &self.a
    }

    pub fn b(&self) -> &CVector {
        &self.b
    }

    pub fn spectral_radius(&self) -> f64 {
        (0..self.n()).map(|i| self.t[(i, i)].norm()).fold(0.0, f64::max)
    }

    /// Arnoldi test: the Krylov space of `(A, b)` must reach dimension n.
    ///
    /// The explicit reachability matrix is far too ill conditioned for a rank
    /// test once n exceeds a handful, so the orthogonalised Krylov basis is
    /// grown instead and a collapsing new direction signals a deficiency.
    pub fn is_reachable(&self) -> bool {
        let n = self.n();
        let bn = self.b.norm();
        if bn == 0.0 {
            return false;
        }
        let scale = spectral_norm(&self.a).max(1e-300);
        let mut basis: Vec<CVector> = vec![self.b.unscale(bn)];
        for _ in 1..n {
            let mut w = &self.a * basis.last().unwrap();
            for _pass in 0..2 {
                for v in &basis {
                    let h = v.dotc(&w);
                    w.axpy(-h, v, C64::new(1.0, 0.0));
                }
            }
            let h = w.norm();
            if h <= 1e-10 * scale {
                return false;
            }
            basis.push(w.unscale(h));
        }
        true
    }

    /// `G(e^{iθ})`.
    pub fn atom_vector(&self, theta: f64) -> CVector {
        let n = self.n();
        let z = C64::from_polar(1.0, -theta);
        // Back substitution on (I - z T) w = Q* b.
        let mut w = CVector::zeros(n);
        for i in (0..n).rev() {
            let mut acc = self.qb[i];
            for j in i + 1..n {
                acc += z * self.t[(i, j)] * w[j];
            }
            w[i] = acc / (C64::new(1.0, 0.0) - z * self.t[(i, i)]);
        }
        match &self.q {
            Some(q) => q * w,
            None => w,
        }
    }

    pub fn atom(&self, theta: f64) -> Atom {
        let theta = wrap_angle(theta);
        Atom {
            theta,
            vector: self.atom_vector(theta),
        }
    }

    /// Atoms at several frequencies as the columns of an n x m matrix.
    pub fn atom_matrix(&self, thetas: &[f64]) -> CMatrix {
        let mut g = CMatrix::zeros(self.n(), thetas.len());
        for (k, &th) in thetas.iter().enumerate() {
            g.set_column(k, &self.atom_vector(th));
        }
        g
    }

    /// Squared gain `‖G(e^{iθ})‖²`.
    pub fn gain(&self, theta: f64) -> f64 {
        self.atom_vector(theta).norm_squared()
    }

    /// Smallest `L` with `‖A^L‖₂ < epsilon`.
    pub fn truncation_length(&self, epsilon: f64) -> usize {
        assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
        let n = self.n();
        let mut power = CMatrix::identity(n, n);
        let mut k = 0;
        while spectral_norm(&power) >= epsilon {
            power = &power * &self.a;
            k += 1;
        }
        k
    }

    /// `‖A^k‖₂`.
    pub fn power_norm(&self, k: usize) -> f64 {
        spectral_norm(&matrix_power(&self.a, k))
    }

    /// Orthonormal basis of range Γ for this filter, computed once.
    pub fn range_basis(&self) -> Arc<RangeBasis> {
        self.range
            .get_or_init(|| Arc::new(RangeBasis::compute(self)))
            .clone()
    }
}

/// Filter with a single pole `p` of multiplicity `n`, normalised so that
/// `A A* + b b* = I`.
///
/// Realised as a cascade of first-order all-pass sections. The result is
/// unitarily similar to the normalised Jordan realisation, so atoms keep
/// their norms and the state covariance structure is unchanged; unlike the
/// Jordan route it does not pass through a Gramian whose condition number
/// overflows double precision at n ≈ 20.
pub fn build_repeated_pole_filter(p: C64, n: usize) -> Result<GFilter> {
    if n == 0 {
        return Err(Error::InvalidArgument("filter size must be at least 1".into()));
    }
    if !(p.norm() < 1.0) {
        return Err(Error::Unstable { modulus: p.norm() });
    }
    let s2 = 1.0 - p.norm_sqr();
    let s = s2.sqrt();
    let q = -p.conj();
    let mut a = CMatrix::zeros(n, n);
    let mut b = CVector::zeros(n);
    for i in 0..n {
        a[(i, i)] = p;
        for j in i + 1..n {
            a[(i, j)] = q.powi((j - i - 1) as i32) * s2;
        }
        b[i] = q.powi((n - 1 - i) as i32) * s;
    }
    GFilter::new(a, b)
}

/// Tapped delay line: `x(t) = (y(t-n+1), …, y(t))`.
pub fn build_delay_filter(n: usize) -> Result<GFilter> {
    if n == 0 {
        return Err(Error::InvalidArgument("filter size must be at least 1".into()));
    }
    let mut a = CMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = c64(1.0, 0.0);
    }
    let mut b = CVector::zeros(n);
    b[n - 1] = c64(1.0, 0.0);
    GFilter::new(a, b)
}

/// Bank of first-order sections `1 / (1 - p_k z^{-1})`.
pub fn build_first_order_filter(poles: &[C64]) -> Result<GFilter> {
    if poles.is_empty() {
        return Err(Error::Empty("pole list"));
    }
    if let Some(p) = poles.iter().find(|p| !(p.norm() < 1.0)) {
        return Err(Error::Unstable { modulus: p.norm() });
    }
    let a = CMatrix::from_diagonal(&CVector::from_column_slice(poles));
    let b = CVector::from_element(poles.len(), c64(1.0, 0.0));
    GFilter::new(a, b)
}

/// Serializable description of one of the supported filter families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    RepeatedPole {
        n: usize,
        pole_modulus: f64,
        pole_phase: f64,
    },
    Delay {
        n: usize,
    },
    FirstOrder {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
        /// Poles as `[re, im]` pairs.
        poles: Vec<[f64; 2]>,
    },
}

impl FilterSpec {
    pub fn n(&self) -> usize {
        match self {
            FilterSpec::RepeatedPole { n, .. } | FilterSpec::Delay { n } => *n,
            FilterSpec::FirstOrder { poles, .. } => poles.len(),
        }
    }

    pub fn build(&self) -> Result<GFilter> {
        match self {
            FilterSpec::RepeatedPole {
                n,
                pole_modulus,
                pole_phase,
            } => build_repeated_pole_filter(C64::from_polar(*pole_modulus, *pole_phase), *n),
            FilterSpec::Delay { n } => build_delay_filter(*n),
            FilterSpec::FirstOrder { n, poles } => {
                if let Some(n) = n {
                    if *n != poles.len() {
                        return Err(Error::Config(format!(
                            "n = {n} but {} poles were given",
                            poles.len()
                        )));
                    }
                }
                let poles: Vec<C64> = poles.iter().map(|p| c64(p[0], p[1])).collect();
                build_first_order_filter(&poles)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::rng;
    use crate::numerics::{frobenius, hermitian_eig, numerical_rank};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn band_filter(n: usize) -> GFilter {
        build_repeated_pole_filter(C64::from_polar(0.58, 2.0), n).unwrap()
    }

    fn normalization_residual(f: &GFilter) -> f64 {
        let n = f.n();
        let m = f.a() * f.a().adjoint() + f.b() * f.b().adjoint() - CMatrix::identity(n, n);
        frobenius(&m)
    }

    #[test]
    fn zero_pole_is_delay_bank() {
        let f = build_repeated_pole_filter(c64(0.0, 0.0), 4).unwrap();
        let d = build_delay_filter(4).unwrap();
        assert_eq!(f.a(), d.a());
        assert_eq!(f.b(), d.b());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if j == i + 1 { 1.0 } else { 0.0 };
                assert_eq!(f.a()[(i, j)], c64(expect, 0.0));
            }
        }
        assert_eq!(f.b()[3], c64(1.0, 0.0));
    }

    #[test]
    fn repeated_pole_is_normalized() {
        for n in [1, 2, 5, 20, 30] {
            let f = band_filter(n);
            assert!(normalization_residual(&f) < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn band_filter_peaks_at_two() {
        let f = band_filter(20);
        let grid = 10_000;
        let (best, _) = (0..grid)
            .map(|l| (l, f.gain(l as f64 * TAU / grid as f64)))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        let theta = best as f64 * TAU / grid as f64;
        assert!(circular_distance(theta, 2.0) <= TAU / grid as f64);
    }

    #[test]
    fn truncation_lengths() {
        assert_eq!(band_filter(20).truncation_length(1e-3), 97);
        assert_eq!(band_filter(30).truncation_length(1e-3), 137);
        for n in [1, 3, 7] {
            let d = build_delay_filter(n).unwrap();
            assert_eq!(d.truncation_length(1e-3), n);
            assert_eq!(d.truncation_length(0.999), n);
        }
    }

    #[test]
    fn unstable_pole_rejected() {
        assert!(matches!(
            build_repeated_pole_filter(c64(1.0, 0.0), 3),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn delay_atoms() {
        let f = build_delay_filter(3).unwrap();
        let th = 0.7;
        let g = f.atom_vector(th);
        let expect = [C64::from_polar(1.0, -2.0 * th), C64::from_polar(1.0, -th), c64(1.0, 0.0)];
        for k in 0..3 {
            assert!((g[k] - expect[k]).norm() < 1e-14);
        }
        let f1 = build_delay_filter(1).unwrap();
        assert_eq!(f1.a()[(0, 0)], c64(0.0, 0.0));
        assert_eq!(f1.b()[0], c64(1.0, 0.0));

        let f2 = build_delay_filter(2).unwrap();
        let g0 = f2.atom_vector(0.0);
        assert!((g0[0] - c64(1.0, 0.0)).norm() < 1e-15 && (g0[1] - c64(1.0, 0.0)).norm() < 1e-15);
        let gpi = f2.atom_vector(std::f64::consts::PI);
        assert!((gpi[0] - c64(-1.0, 0.0)).norm() < 1e-14 && (gpi[1] - c64(1.0, 0.0)).norm() < 1e-14);
        for l in 0..50 {
            assert_relative_eq!(f.gain(l as f64 * 0.13), 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn first_order_bank() {
        let f = build_first_order_filter(&[c64(0.5, 0.0)]).unwrap();
        let th = 1.1;
        let cauchy = c64(1.0, 0.0) / (c64(1.0, 0.0) - C64::from_polar(0.5, -th));
        assert!((f.atom_vector(th)[0] - cauchy).norm() < 1e-14);

        let f = build_first_order_filter(&[c64(0.0, 0.0), c64(0.5, 0.0)]).unwrap();
        assert_relative_eq!(f.spectral_radius(), 0.5);

        assert!(matches!(
            build_first_order_filter(&[c64(0.5, 0.0), c64(0.5, 0.0)]),
            Err(Error::Unreachable)
        ));
    }

    #[test]
    fn atom_matches_series() {
        let f = band_filter(20);
        for th in [0.3, 2.0, 4.4] {
            let z = C64::from_polar(1.0, -th);
            let mut term = f.b().clone();
            let mut sum = term.clone();
            for k in 1..2000 {
                term = f.a() * term * z;
                sum += &term;
                if k > 300 && term.norm() < 1e-18 {
                    break;
                }
            }
            assert!((f.atom_vector(th) - sum).norm() < 1e-8);
        }
    }

    #[test]
    fn non_triangular_filter_uses_schur() {
        // A unitary change of basis must leave gains unchanged.
        let f = band_filter(6);
        let mut r = rng(2);
        let m = crate::numerics::testutil::random_matrix(&mut r, 6, 6);
        let qr = m.qr();
        let u = qr.q();
        let g = GFilter::new(&u * f.a() * u.adjoint(), &u * f.b()).unwrap();
        for th in [0.1, 1.9, 2.0, 5.0] {
            assert_relative_eq!(g.gain(th), f.gain(th), max_relative = 1e-10);
            let direct = (CMatrix::identity(6, 6) - g.a() * C64::from_polar(1.0, -th))
                .lu()
                .solve(g.b())
                .unwrap();
            assert!((g.atom_vector(th) - direct).norm() < 1e-10);
        }
    }

    /// The Jordan realisation normalised through the Gramian, built only for
    /// sizes where that Gramian is still well conditioned.
    fn jordan_normalized(p: C64, n: usize) -> (CMatrix, CVector) {
        let mut j = CMatrix::zeros(n, n);
        for i in 0..n {
            j[(i, i)] = p;
            if i + 1 < n {
                j[(i, i + 1)] = c64(1.0, 0.0);
            }
        }
        let mut bt = CVector::zeros(n);
        bt[n - 1] = c64(1.0, 0.0);
        let mut e = CMatrix::zeros(n, n);
        let mut term = &bt * bt.adjoint();
        loop {
            e += &term;
            term = &j * term * j.adjoint();
            if frobenius(&term) < 1e-16 {
                break;
            }
        }
        let eig = hermitian_eig(&e).unwrap();
        let root = |pow: f64| {
            let mut v = eig.vectors.clone();
            for k in 0..n {
                let s = eig.values[k].powf(pow);
                v.column_mut(k).scale_mut(s);
            }
            v * eig.vectors.adjoint()
        };
        let (ih, h) = (root(-0.5), root(0.5));
        (&ih * j * h, ih * bt)
    }

    #[test]
    fn cascade_agrees_with_jordan_normalization() {
        let p = C64::from_polar(0.58, 2.0);
        for n in 2..=8 {
            let (aj, bj) = jordan_normalized(p, n);
            let jf = GFilter::new(aj, bj).unwrap();
            let cf = band_filter(n);
            assert!(normalization_residual(&jf) < 1e-9);
            for th in [0.0, 1.0, 2.0, 2.3, 4.0] {
                assert_relative_eq!(jf.gain(th), cf.gain(th), max_relative = 1e-9);
            }
            for k in [1, 5, 20] {
                assert_relative_eq!(jf.power_norm(k), cf.power_norm(k), max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn filter_spec_roundtrip() {
        let spec = FilterSpec::RepeatedPole {
            n: 20,
            pole_modulus: 0.58,
            pole_phase: 2.0,
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"repeated_pole\""));
        assert_eq!(FilterSpec::from_json(&text).unwrap(), spec);
        let fo = FilterSpec::from_json(r#"{"kind":"first_order","poles":[[0.5,0.0],[0.0,0.3]]}"#).unwrap();
        assert_eq!(fo.build().unwrap().n(), 2);
        let bad = FilterSpec::from_json(r#"{"kind":"first_order","n":3,"poles":[[0.5,0.0]]}"#).unwrap();
        assert!(matches!(bad.build(), Err(Error::Config(_))));
    }

    #[test]
    fn angle_helpers() {
        assert_relative_eq!(wrap_angle(-0.5), TAU - 0.5, epsilon = 1e-15);
        assert_relative_eq!(circular_distance(0.1, TAU - 0.1), 0.2, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn constructed_filters_are_valid(modulus in 0.0f64..0.95, phase in 0.0f64..TAU, n in 1usize..25) {
            let f = build_repeated_pole_filter(C64::from_polar(modulus, phase), n).unwrap();
            prop_assert!(f.spectral_radius() < 1.0);
            prop_assert!(f.is_reachable());
            prop_assert!(normalization_residual(&f) <= 1e-10);
        }

        #[test]
        fn gain_is_squared_atom_norm(theta in -10.0f64..10.0, n in 1usize..25) {
            let f = band_filter(n);
            let a = f.atom(theta);
            prop_assert!(a.theta >= 0.0 && a.theta < TAU);
            prop_assert_eq!(f.gain(theta), f.atom_vector(theta).norm_squared());
            prop_assert!(f.gain(theta) >= 0.0);
        }

        #[test]
        fn atoms_are_linearly_independent(seed in any::<u64>()) {
            let n = 20;
            let f = band_filter(n);
            let mut r = rng(seed);
            let th: Vec<f64> = (0..n)
                .map(|k| (k as f64 + r.random_range(0.0..0.5)) * TAU / n as f64)
                .collect();
            let g = f.atom_matrix(&th);
            prop_assert_eq!(numerical_rank(&g, 1e-14), n);
        }
    }
}
