//! Atomic norm minimization over the atoms `G(e^{iθ})` of a G-filter.
//!
//! The primal problems are posed in LMI form on the bordered matrix
//! `[[τ, x*], [x, Σ]]` with `Σ` parameterised by the range Γ basis. The dual
//! problems are posed with explicit matrix variables
//! `[[κI + Y, q], [q*, κ]]`, where `Y` lies in ker Γ*.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::cfdecomp::{self, cf_decompose_with, cluster_center, grid_map, runs_of, CenterRule, CfOptions, GridScan};
use crate::conic::{embed_hermitian, solve, unembed, KktResiduals, SdpProblem, SdpSettings, SdpSolution, SdpStatus};
use crate::covariance::{KernelElement, RangeBasis, StateCovariance};
use crate::error::{Error, Result};
use crate::gfilter::{circular_distance, GFilter, DEFAULT_EPSILON};
use crate::numerics::{c64, hermitian_eig, singular_values, CMatrix, CVector, RMatrix, C64};
use crate::signal::{filter_record, SignalRecord};

pub const DEFAULT_EPS2: f64 = 1e-3;
/// Estimated noise variances below this are treated as noiseless.
pub const NOISELESS_THRESHOLD: f64 = 1e-10;
pub const COMPLEMENTARITY_RTOL: f64 = 1e-6;

/// Status and residuals of one conic solve.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SolveInfo {
    pub status: SdpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl From<&SdpSolution> for SolveInfo {
    fn from(s: &SdpSolution) -> Self {
        SolveInfo {
            status: s.status,
            iterations: s.iterations,
            residuals: s.residuals,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnmPrimalResult {
    pub tau: f64,
    pub sigma: StateCovariance,
    /// `(τ + tr Σ) / 2`.
    pub atomic_norm_value: f64,
    /// Denoised vector; the input itself in the noiseless problem.
    pub x_hat: CVector,
    /// Optimal value of the problem that was solved.
    pub objective: f64,
    pub solve: SolveInfo,
}

#[derive(Clone, Debug)]
pub struct DualCertificate {
    pub q: CVector,
    pub y: KernelElement,
    /// Bound level: 1 for the noiseless problem, `2λ` for the noisy one.
    pub lambda: f64,
    pub objective: f64,
    pub solve: Option<SolveInfo>,
}

impl DualCertificate {
    /// `Q(θ) = G*(e^{iθ}) q`.
    pub fn eval(&self, filter: &GFilter, theta: f64) -> C64 {
        filter.atom_vector(theta).dotc(&self.q)
    }
}

fn check_len(filter: &GFilter, x: &CVector) -> Result<usize> {
    let n = filter.n();
    if x.len() != n {
        return Err(Error::Dimension(format!("vector of length {} for a filter of size {n}", x.len())));
    }
    Ok(n)
}

/// `h` placed at `(offset, offset)` inside a zero `size x size` matrix, embedded.
fn embed_block(h: &CMatrix, offset: usize, size: usize) -> RMatrix {
    let mut big = CMatrix::zeros(size, size);
    big.view_mut((offset, offset), (h.nrows(), h.ncols())).copy_from(h);
    embed_hermitian(&big)
}

/// `z E_ij + z̄ E_ji` for `i != j`.
fn hermitian_pair(size: usize, i: usize, j: usize, z: C64) -> CMatrix {
    let mut h = CMatrix::zeros(size, size);
    h[(i, j)] = z;
    h[(j, i)] = z.conj();
    h
}

fn diag_unit(size: usize, i: usize) -> CMatrix {
    let mut h = CMatrix::zeros(size, size);
    h[(i, i)] = c64(1.0, 0.0);
    h
}

fn sym_pair(size: usize, i: usize, j: usize, v: f64) -> RMatrix {
    let mut a = RMatrix::zeros(size, size);
    a[(i, j)] += v;
    a[(j, i)] += v;
    a
}

/// Columns for `τ` and the range coordinates of `Σ`, each priced at `weight`.
fn push_bordered(p: &mut SdpProblem, basis: &RangeBasis, size: usize, weight: f64) {
    p.add_constraint(vec![(0, -embed_hermitian(&diag_unit(size, 0)))], -weight);
    for (bj, &tr) in basis.elements.iter().zip(&basis.traces) {
        p.add_constraint(vec![(0, -embed_block(bj, 1, size))], -weight * tr);
    }
}

fn primal_parts(basis: &RangeBasis, y: &[f64]) -> Result<(f64, StateCovariance)> {
    let d = basis.dim();
    let sigma = StateCovariance::new(basis.combine(&y[1..1 + d]))?;
    Ok((y[0], sigma))
}

pub fn solve_noiseless(filter: &GFilter, x: &CVector) -> Result<AnmPrimalResult> {
    solve_noiseless_with(filter, x, SdpSettings::default())
}

/// `min ½(τ + tr Σ)` over `Σ ∈ range Γ` with `[[τ, x*], [x, Σ]] ⪰ 0`.
pub fn solve_noiseless_with(filter: &GFilter, x: &CVector, settings: SdpSettings) -> Result<AnmPrimalResult> {
    let n = check_len(filter, x)?;
    let basis = filter.range_basis();
    let size = n + 1;
    let mut p = SdpProblem::new(vec![2 * size]);
    let mut c = CMatrix::zeros(size, size);
    for k in 0..n {
        c[(k + 1, 0)] = x[k];
        c[(0, k + 1)] = x[k].conj();
    }
    p.set_cost(0, embed_hermitian(&c));
    push_bordered(&mut p, &basis, size, 0.5);
    let sol = solve(&p, settings)?.require_optimal()?;
    let (tau, sigma) = primal_parts(&basis, &sol.y)?;
    let atomic_norm_value = 0.5 * (tau + sigma.trace());
    Ok(AnmPrimalResult {
        tau,
        sigma,
        atomic_norm_value,
        x_hat: x.clone(),
        objective: -sol.dual_objective,
        solve: SolveInfo::from(&sol),
    })
}

pub fn solve_noisy(filter: &GFilter, x_tilde: &CVector, lambda: f64) -> Result<AnmPrimalResult> {
    solve_noisy_with(filter, x_tilde, lambda, SdpSettings::default())
}

/// `min ½‖x̃ - x‖² + λ(τ + tr Σ)` under the same LMI.
pub fn solve_noisy_with(filter: &GFilter, x_tilde: &CVector, lambda: f64, settings: SdpSettings) -> Result<AnmPrimalResult> {
    let n = check_len(filter, x_tilde)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("regularization weight {lambda} must be positive")));
    }
    let basis = filter.range_basis();
    let size = n + 1;
    let last = 2 * n;
    let mut p = SdpProblem::new(vec![2 * size, 2 * n + 1]);
    let mut c2 = RMatrix::identity(2 * n + 1, 2 * n + 1);
    c2[(last, last)] = 0.0;
    for k in 0..n {
        c2[(k, last)] = x_tilde[k].re;
        c2[(last, k)] = x_tilde[k].re;
        c2[(n + k, last)] = x_tilde[k].im;
        c2[(last, n + k)] = x_tilde[k].im;
    }
    p.set_cost(1, c2);
    push_bordered(&mut p, &basis, size, lambda);
    for (unit, offset) in [(c64(1.0, 0.0), 0), (c64(0.0, 1.0), n)] {
        for k in 0..n {
            p.add_constraint(
                vec![
                    (0, -embed_hermitian(&hermitian_pair(size, k + 1, 0, unit))),
                    (1, sym_pair(2 * n + 1, offset + k, last, 1.0)),
                ],
                0.0,
            );
        }
    }
    let mut at = RMatrix::zeros(2 * n + 1, 2 * n + 1);
    at[(last, last)] = -2.0;
    p.add_constraint(vec![(1, at)], -1.0);
    let sol = solve(&p, settings)?.require_optimal()?;
    let (tau, sigma) = primal_parts(&basis, &sol.y)?;
    let d = basis.dim();
    let x_hat = CVector::from_fn(n, |k, _| c64(sol.y[1 + d + k], sol.y[1 + d + n + k]));
    let atomic_norm_value = 0.5 * (tau + sigma.trace());
    Ok(AnmPrimalResult {
        tau,
        sigma,
        atomic_norm_value,
        x_hat,
        objective: -sol.dual_objective,
        solve: SolveInfo::from(&sol),
    })
}

/// Explicit dual with bound level `kappa`; the quadratic term is present
/// only for the noisy problem.
fn solve_dual(filter: &GFilter, x: &CVector, kappa: f64, noisy: bool, settings: SdpSettings) -> Result<DualCertificate> {
    let n = check_len(filter, x)?;
    let basis = filter.range_basis();
    let size = n + 1;
    let mut blocks = vec![2 * size];
    if noisy {
        blocks.push(2 * n + 1);
    }
    let mut p = SdpProblem::new(blocks);
    let mut k_mat = CMatrix::zeros(size, size);
    for k in 0..n {
        k_mat[(k, n)] = x[k];
        k_mat[(n, k)] = x[k].conj();
    }
    p.set_cost(0, embed_hermitian(&k_mat).scale(-0.25));
    p.add_constraint(vec![(0, embed_hermitian(&diag_unit(size, n)))], 2.0 * kappa);
    for (bj, &tr) in basis.elements.iter().zip(&basis.traces) {
        p.add_constraint(vec![(0, embed_block(bj, 0, size))], 2.0 * kappa * tr);
    }
    if noisy {
        let last = 2 * n;
        let mut c2 = RMatrix::identity(2 * n + 1, 2 * n + 1).scale(0.5);
        c2[(last, last)] = 0.0;
        p.set_cost(1, c2);
        let mut omega = RMatrix::zeros(2 * n + 1, 2 * n + 1);
        omega[(last, last)] = 1.0;
        p.add_constraint(vec![(1, omega)], 1.0);
        for (unit, offset) in [(c64(0.5, 0.0), 0), (c64(0.0, 0.5), n)] {
            for k in 0..n {
                p.add_constraint(
                    vec![
                        (0, embed_hermitian(&hermitian_pair(size, k, n, unit)).scale(-0.5)),
                        (1, sym_pair(2 * n + 1, offset + k, last, 0.5)),
                    ],
                    0.0,
                );
            }
        }
    }
    let sol = solve(&p, settings)?.require_optimal()?;
    let z = unembed(&sol.x[0]);
    let q = CVector::from_fn(n, |k, _| z[(k, n)]);
    let w = z.view((0, 0), (n, n)).into_owned() - CMatrix::identity(n, n).scale(kappa);
    Ok(DualCertificate {
        q,
        y: KernelElement::project(filter, &w),
        lambda: kappa,
        objective: -sol.primal_objective,
        solve: Some(SolveInfo::from(&sol)),
    })
}

/// `max Re⟨q, x⟩` over `[[I + Y, q], [q*, 1]] ⪰ 0`, `Y ∈ ker Γ*`.
pub fn solve_noiseless_dual(filter: &GFilter, x: &CVector) -> Result<DualCertificate> {
    solve_dual(filter, x, 1.0, false, SdpSettings::default())
}

pub fn solve_noiseless_dual_with(filter: &GFilter, x: &CVector, settings: SdpSettings) -> Result<DualCertificate> {
    solve_dual(filter, x, 1.0, false, settings)
}

/// `max Re⟨q, x̃⟩ - ½‖q‖²` over `[[2λI + Y, q], [q*, 2λ]] ⪰ 0`.
///
/// The bound level is `2λ` because the primal charges `λ(τ + tr Σ)`, which is
/// `2λ` times the atomic norm.
pub fn solve_noisy_dual(filter: &GFilter, x_tilde: &CVector, lambda: f64) -> Result<DualCertificate> {
    solve_noisy_dual_with(filter, x_tilde, lambda, SdpSettings::default())
}

pub fn solve_noisy_dual_with(filter: &GFilter, x_tilde: &CVector, lambda: f64, settings: SdpSettings) -> Result<DualCertificate> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("regularization weight {lambda} must be positive")));
    }
    solve_dual(filter, x_tilde, 2.0 * lambda, true, settings)
}

/// Scaled certificate `|Q(θ)|² / (λ² ‖G(e^{iθ})‖²)` on a grid.
pub fn certificate_scan(filter: &GFilter, cert: &DualCertificate, grid_size: usize) -> GridScan {
    let l2 = cert.lambda * cert.lambda;
    let values = grid_map(grid_size, |th| {
        let g = filter.atom_vector(th);
        g.dotc(&cert.q).norm_sqr() / (l2 * g.norm_squared())
    });
    GridScan { grid_size, values }
}

/// Peaks of the scaled certificate reaching `1 - eps2`, one per cluster.
pub fn localize_from_dual(filter: &GFilter, cert: &DualCertificate, grid_size: usize, eps2: f64) -> Vec<f64> {
    if !(cert.lambda > 0.0) || cert.q.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        return Vec::new();
    }
    let scan = certificate_scan(filter, cert, grid_size);
    let deficit = GridScan {
        grid_size,
        values: scan.values.iter().map(|v| 1.0 - v).collect(),
    };
    let sel: Vec<usize> = (0..grid_size).filter(|&l| deficit.values[l] <= eps2).collect();
    let mut peaks: Vec<f64> = runs_of(&sel, grid_size)
        .iter()
        .map(|run| cluster_center(&deficit, run, CenterRule::Argmin))
        .collect();
    peaks.sort_by(f64::total_cmp);
    peaks
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateCheck {
    pub passed: bool,
    /// Largest `|Q(θ_k) - λ sgn(c_k) ‖G‖| / (λ ‖G‖)` over the support.
    pub interpolation_error: f64,
    /// Largest `|Q(θ)| / (λ ‖G‖)` on grid points more than 3 steps from the support.
    pub off_support_peak: f64,
}

/// Checks that `cert` interpolates the phases of `x = Σ c_k G(e^{iθ_k})` and
/// stays strictly below the bound elsewhere.
pub fn verify_certificate(filter: &GFilter, cert: &DualCertificate, freqs: &[f64], amps: &[C64], grid_size: usize) -> CertificateCheck {
    let failed = CertificateCheck {
        passed: false,
        interpolation_error: f64::INFINITY,
        off_support_peak: f64::INFINITY,
    };
    if freqs.len() != amps.len() || !(cert.lambda > 0.0) || amps.iter().any(|c| c.norm() == 0.0) {
        return failed;
    }
    let lam = cert.lambda;
    let interpolation_error = freqs
        .iter()
        .zip(amps)
        .map(|(&th, &c)| {
            let g = filter.atom_vector(th);
            let target = (c / c.norm()) * (lam * g.norm());
            (cert.eval(filter, th) - target).norm() / (lam * g.norm())
        })
        .fold(0.0, f64::max);
    let step = TAU / grid_size as f64;
    let off = grid_map(grid_size, |th| {
        if freqs.iter().any(|&f| circular_distance(th, f) <= 3.0 * step) {
            return 0.0;
        }
        let g = filter.atom_vector(th);
        g.dotc(&cert.q).norm() / (lam * g.norm())
    });
    let off_support_peak = off.into_iter().fold(0.0, f64::max);
    CertificateCheck {
        passed: interpolation_error <= 1e-4 && off_support_peak < 1.0,
        interpolation_error,
        off_support_peak,
    }
}

/// Numerical ranks of `[[τ, x*], [x, Σ]]` and `[[λI + Y, q], [q*, λ]]`,
/// counting singular values above `1e-6` times the largest of either matrix.
pub fn complementarity_ranks(primal: &AnmPrimalResult, cert: &DualCertificate) -> (usize, usize) {
    let n = primal.sigma.n();
    let mut bp = CMatrix::zeros(n + 1, n + 1);
    bp[(0, 0)] = c64(primal.tau, 0.0);
    for k in 0..n {
        bp[(k + 1, 0)] = primal.x_hat[k];
        bp[(0, k + 1)] = primal.x_hat[k].conj();
    }
    bp.view_mut((1, 1), (n, n)).copy_from(&primal.sigma.sigma);
    let mut bd = CMatrix::zeros(n + 1, n + 1);
    bd.view_mut((0, 0), (n, n))
        .copy_from(&(&cert.y.y + CMatrix::identity(n, n).scale(cert.lambda)));
    for k in 0..n {
        bd[(k, n)] = cert.q[k];
        bd[(n, k)] = cert.q[k].conj();
    }
    bd[(n, n)] = c64(cert.lambda, 0.0);
    // One cutoff for both: a zero primal optimum is all interior-point noise.
    let sp = singular_values(&bp);
    let sd = singular_values(&bd);
    let top = sp.first().copied().unwrap_or(0.0).max(sd.first().copied().unwrap_or(0.0));
    let cut = COMPLEMENTARITY_RTOL * top;
    let count = |s: &[f64]| s.iter().filter(|&&v| v > cut).count();
    (count(&sp), count(&sd))
}

/// Mean of the smallest quarter of the eigenvalues of the biased sample
/// autocovariance Toeplitz matrix with `⌊L/3⌋` lags.
pub fn estimate_noise_variance(record: &SignalRecord) -> Result<f64> {
    let len = record.len();
    if len < 12 {
        return Err(Error::InsufficientData { required: 12, got: len });
    }
    let y = &record.samples;
    let lags = len / 3;
    let r: Vec<C64> = (0..=lags)
        .map(|k| (0..len - k).map(|t| y[t + k] * y[t].conj()).sum::<C64>() / len as f64)
        .collect();
    let dim = lags + 1;
    let t = CMatrix::from_fn(dim, dim, |i, j| if i >= j { r[i - j] } else { r[j - i].conj() });
    let mut w: Vec<f64> = hermitian_eig(&t)?.values;
    w.sort_by(f64::total_cmp);
    let count = (dim as f64 * 0.25).ceil() as usize;
    Ok((w[..count].iter().sum::<f64>() / count as f64).max(0.0))
}

/// `(σ/2) √(n ln n)`.
pub fn lambda_heuristic(sigma2: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("filter size {n} is below 2")));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance {sigma2} is negative")));
    }
    let n = n as f64;
    Ok(0.5 * sigma2.sqrt() * (n * n.ln()).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct EstimateOptions {
    /// Transient tolerance deciding how many outputs are discarded.
    pub truncation_epsilon: f64,
    pub grid_size: usize,
    pub eps1: f64,
    pub eps2: f64,
    /// Overrides the heuristic regularization weight.
    pub lambda: Option<f64>,
    /// Forces the noiseless problem.
    pub noiseless: bool,
    /// Also solves the dual and cross-checks its peaks.
    pub dual: bool,
    pub center: CenterRule,
    pub settings: SdpSettings,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            truncation_epsilon: DEFAULT_EPSILON,
            grid_size: cfdecomp::DEFAULT_GRID,
            eps1: cfdecomp::DEFAULT_EPS1,
            eps2: DEFAULT_EPS2,
            lambda: None,
            noiseless: false,
            dual: true,
            center: CenterRule::Argmin,
            settings: SdpSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimationReport {
    pub m_hat: usize,
    pub freqs: Vec<f64>,
    pub powers: Vec<f64>,
    /// Dual peaks match the decomposition frequencies; false when the dual was skipped.
    pub certificate_ok: bool,
    pub complementarity_ranks: Option<(usize, usize)>,
    pub sigma2_hat: f64,
    /// Zero when the noiseless problem was solved.
    pub lambda_used: f64,
    pub noiseless: bool,
    /// Numerical rank of `Σ̂`; equals `m_hat` unless extraction failed.
    pub rank: usize,
    pub eigenvalues: Vec<f64>,
    pub eps1_used: f64,
    pub atomic_norm_value: f64,
    pub dual_freqs: Option<Vec<f64>>,
    pub primal_solve: SolveInfo,
    pub dual_solve: Option<SolveInfo>,
    #[serde(skip)]
    pub sigma: StateCovariance,
}

fn peaks_match(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| circular_distance(*x, *y) <= tol)
}

/// Filter, solve, decompose.
pub fn estimate(filter: &GFilter, record: &SignalRecord, opts: &EstimateOptions) -> Result<EstimationReport> {
    let outputs = filter_record(filter, record, opts.truncation_epsilon)?;
    let x = outputs.last().expect("filter_record returns at least one output").clone();
    let sigma2_hat = if record.len() >= 12 { estimate_noise_variance(record)? } else { 0.0 };
    let lambda = match opts.lambda {
        _ if opts.noiseless => 0.0,
        Some(l) => l,
        None if sigma2_hat < NOISELESS_THRESHOLD => 0.0,
        None => lambda_heuristic(sigma2_hat, filter.n())?,
    };
    let noiseless = lambda <= 0.0;
    let primal = if noiseless {
        solve_noiseless_with(filter, &x, opts.settings)?
    } else {
        solve_noisy_with(filter, &x, lambda, opts.settings)?
    };
    let eig = hermitian_eig(&primal.sigma.sigma)?;
    let rank = cfdecomp::numerical_rank(&eig.values)?;

    let mut freqs = Vec::new();
    let mut powers = Vec::new();
    let mut eps1 = opts.eps1;
    let full_rank = rank == filter.n();
    if !full_rank && rank > 0 {
        loop {
            let cf = CfOptions {
                grid_size: opts.grid_size,
                eps1,
                center: opts.center,
            };
            match cf_decompose_with(filter, &primal.sigma, cf) {
                Ok(d) => {
                    freqs = d.freqs;
                    powers = d.powers;
                    break;
                }
                Err(Error::Extraction { .. }) if eps1 * 2.0 <= 0.5 => eps1 *= 2.0,
                Err(Error::Extraction { .. }) => break,
                Err(e) => return Err(e),
            }
        }
    }

    let (mut certificate_ok, mut ranks, mut dual_freqs, mut dual_solve) = (false, None, None, None);
    if opts.dual {
        let cert = if noiseless {
            solve_noiseless_dual_with(filter, &x, opts.settings)?
        } else {
            solve_noisy_dual_with(filter, &x, lambda, opts.settings)?
        };
        let peaks = localize_from_dual(filter, &cert, opts.grid_size, opts.eps2);
        let step = TAU / opts.grid_size as f64;
        certificate_ok = !full_rank && peaks_match(&peaks, &freqs, 2.0 * step);
        ranks = Some(complementarity_ranks(&primal, &cert));
        dual_freqs = Some(peaks);
        dual_solve = cert.solve;
    }

    Ok(EstimationReport {
        m_hat: freqs.len(),
        freqs,
        powers,
        certificate_ok,
        complementarity_ranks: ranks,
        sigma2_hat,
        lambda_used: lambda,
        noiseless,
        rank,
        eigenvalues: eig.values,
        eps1_used: eps1,
        atomic_norm_value: primal.atomic_norm_value,
        dual_freqs,
        primal_solve: primal.solve,
        dual_solve,
        sigma: primal.sigma,
    })
}
