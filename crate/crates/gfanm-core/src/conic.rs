//! Dense semidefinite programming over real symmetric block-diagonal cones.
//!
//! Problems are stated in the standard primal/dual pair
//!
//! ```text
//! (P)  min <C, X>   s.t. <A_i, X> = b_i,  X ⪰ 0
//! (D)  max b'y      s.t. Σ y_i A_i + S = C, S ⪰ 0
//! ```
//!
//! where `X`, `S` and every `A_i`, `C` are block diagonal. The free vector
//! `y` carries LMI-form models; `X` carries models with explicit matrix
//! variables. Hermitian problems reach this form through
//! [`embed_hermitian`].
//!
//! The solver is an infeasible primal-dual interior point method with
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector step.

use nalgebra::{Cholesky, DVector, SVD};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{c64, symmetric_eigenvalues, CMatrix, RMatrix};

/// `[[Re H, -Im H], [Im H, Re H]]`.
pub fn embed_hermitian(h: &CMatrix) -> RMatrix {
    let n = h.nrows();
    let mut out = RMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = h[(i, j)];
            out[(i, j)] = z.re;
            out[(i + n, j + n)] = z.re;
            out[(i + n, j)] = z.im;
            out[(i, j + n)] = -z.im;
        }
    }
    out
}

/// Hermitian matrix represented by a symmetric `2n x 2n` matrix, averaging
/// the two copies of the real and imaginary parts.
///
/// For every Hermitian `H`, `<embed(H), X> = 2 <H, unembed(X)>`.
pub fn unembed(x: &RMatrix) -> CMatrix {
    let n = x.nrows() / 2;
    CMatrix::from_fn(n, n, |i, j| {
        let re = 0.5 * (x[(i, j)] + x[(i + n, j + n)]);
        let im = 0.5 * (x[(i + n, j)] - x[(i, j + n)]);
        c64(re, im)
    })
}

fn sym_inner(a: &RMatrix, b: &RMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn symmetrize(a: &RMatrix) -> RMatrix {
    (a + a.transpose()).scale(0.5)
}

/// One equality `Σ_k <A_k, X_k> = rhs`; blocks absent from the list are zero.
#[derive(Clone, Debug)]
pub struct Constraint {
    pub blocks: Vec<(usize, RMatrix)>,
    pub rhs: f64,
}

#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub cost: Vec<RMatrix>,
    pub constraints: Vec<Constraint>,
}

impl SdpProblem {
    /// Problem with zero cost and no constraints.
    pub fn new(block_sizes: Vec<usize>) -> Self {
        let cost = block_sizes.iter().map(|&n| RMatrix::zeros(n, n)).collect();
        SdpProblem {
            block_sizes,
            cost,
            constraints: Vec::new(),
        }
    }

    pub fn set_cost(&mut self, block: usize, c: RMatrix) {
        self.cost[block] = c;
    }

    pub fn add_constraint(&mut self, blocks: Vec<(usize, RMatrix)>, rhs: f64) {
        self.constraints.push(Constraint { blocks, rhs });
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn rhs(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.rhs).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cost.len() != self.block_sizes.len() {
            return Err(Error::Dimension(format!(
                "{} cost blocks for {} cone blocks",
                self.cost.len(),
                self.block_sizes.len()
            )));
        }
        for (k, (c, &n)) in self.cost.iter().zip(&self.block_sizes).enumerate() {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::Dimension(format!("cost block {k} is not {n}x{n}")));
            }
        }
        for (i, con) in self.constraints.iter().enumerate() {
            if !con.rhs.is_finite() {
                return Err(Error::InvalidArgument(format!("constraint {i} has non-finite rhs")));
            }
            for (k, a) in &con.blocks {
                let n = *self.block_sizes.get(*k).ok_or_else(|| {
                    Error::Dimension(format!("constraint {i} names missing block {k}"))
                })?;
                if a.nrows() != n || a.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "constraint {i}, block {k} is {}x{}, expected {n}x{n}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `<C, X>`.
    pub fn primal_objective(&self, x: &[RMatrix]) -> f64 {
        self.cost.iter().zip(x).map(|(c, x)| sym_inner(c, x)).sum()
    }

    /// `A(X)`.
    pub fn apply(&self, x: &[RMatrix]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|con| con.blocks.iter().map(|(k, a)| sym_inner(a, &x[*k])).sum())
            .collect()
    }

    /// `A^T(y)` as one matrix per block.
    pub fn apply_adjoint(&self, y: &[f64]) -> Vec<RMatrix> {
        let mut out: Vec<RMatrix> = self.block_sizes.iter().map(|&n| RMatrix::zeros(n, n)).collect();
        for (con, &yi) in self.constraints.iter().zip(y) {
            for (k, a) in &con.blocks {
                out[*k] += a.scale(yi);
            }
        }
        out
    }

    /// Sparse triplet dump for cross-checking against external solvers.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry {
            block: usize,
            row: usize,
            col: usize,
            value: f64,
        }
        #[derive(Serialize)]
        struct Dump {
            block_sizes: Vec<usize>,
            cost: Vec<Entry>,
            constraints: Vec<(f64, Vec<Entry>)>,
        }
        fn triplets(k: usize, a: &RMatrix) -> Vec<Entry> {
            let mut v = Vec::new();
            for j in 0..a.ncols() {
                for i in 0..=j {
                    if a[(i, j)] != 0.0 {
                        v.push(Entry {
                            block: k,
                            row: i,
                            col: j,
                            value: a[(i, j)],
                        });
                    }
                }
            }
            v
        }
        let dump = Dump {
            block_sizes: self.block_sizes.clone(),
            cost: self.cost.iter().enumerate().flat_map(|(k, c)| triplets(k, c)).collect(),
            constraints: self
                .constraints
                .iter()
                .map(|con| {
                    (
                        con.rhs,
                        con.blocks.iter().flat_map(|(k, a)| triplets(*k, a)).collect(),
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    MaxIters,
    Infeasible,
    /// A scaling or Schur complement factorization broke down.
    NumericalFailure,
}

#[derive(Clone, Copy, Debug)]
pub struct SdpSettings {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iters: usize,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            tol_gap: 1e-8,
            tol_feas: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Primal blocks `X`.
    pub x: Vec<RMatrix>,
    /// Equality multipliers `y`.
    pub y: Vec<f64>,
    /// Dual slack blocks `S`.
    pub s: Vec<RMatrix>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl SdpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SdpStatus::Optimal
    }

    /// Error unless the status is optimal.
    pub fn require_optimal(self) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(Error::Solver(self.status))
        }
    }
}

/// Scaled optimality residuals of a primal-dual point.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct KktResiduals {
    /// `‖b - A(X)‖ / (1 + ‖b‖)`.
    pub primal_infeasibility: f64,
    /// `‖C - S - A^T y‖_F / (1 + ‖C‖_F)`.
    pub dual_infeasibility: f64,
    /// `|<C,X> - b'y| / (1 + |<C,X>|)`.
    pub relative_gap: f64,
    /// `<X, S>`.
    pub complementarity: f64,
    /// Smallest eigenvalue over all `X` blocks.
    pub min_eig_x: f64,
    /// Smallest eigenvalue over all `S` blocks.
    pub min_eig_s: f64,
}

impl KktResiduals {
    pub fn within(&self, tol_feas: f64, tol_gap: f64) -> bool {
        self.primal_infeasibility <= tol_feas
            && self.dual_infeasibility <= tol_feas
            && self.relative_gap <= tol_gap
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Recomputes the residuals of `(x, y, s)` from scratch.
pub fn kkt_residuals(problem: &SdpProblem, x: &[RMatrix], y: &[f64], s: &[RMatrix]) -> KktResiduals {
    let b = problem.rhs();
    let ax = problem.apply(x);
    let rp: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let aty = problem.apply_adjoint(y);
    let mut rd2 = 0.0;
    let mut c2 = 0.0;
    for k in 0..problem.block_sizes.len() {
        let r = &problem.cost[k] - &s[k] - &aty[k];
        rd2 += r.norm_squared();
        c2 += problem.cost[k].norm_squared();
    }
    let pobj = problem.primal_objective(x);
    let dobj: f64 = b.iter().zip(y).map(|(b, y)| b * y).sum();
    let min_eig = |blocks: &[RMatrix]| {
        blocks
            .iter()
            .filter(|m| m.nrows() > 0)
            .map(|m| symmetric_eigenvalues(m)[0])
            .fold(f64::INFINITY, f64::min)
    };
    KktResiduals {
        primal_infeasibility: norm2(&rp) / (1.0 + norm2(&b)),
        dual_infeasibility: rd2.sqrt() / (1.0 + c2.sqrt()),
        relative_gap: (pobj - dobj).abs() / (1.0 + pobj.abs()),
        complementarity: x.iter().zip(s).map(|(x, s)| sym_inner(x, s)).sum(),
        min_eig_x: min_eig(x),
        min_eig_s: min_eig(s),
    }
}

/// A constraint block stored densely, with a triplet list when sparse.
struct PreparedBlock {
    block: usize,
    dense: RMatrix,
    sparse: Option<Vec<(usize, usize, f64)>>,
}

struct Prepared {
    rows: Vec<Vec<PreparedBlock>>,
    rhs: Vec<f64>,
    /// Row indices of the original problem kept after dependency removal.
    kept: Vec<usize>,
}

/// Drops linearly dependent constraints via pivoted Cholesky of the
/// constraint Gram matrix. Inconsistent dependent rows mean infeasibility.
fn prepare(problem: &SdpProblem) -> std::result::Result<Prepared, SdpStatus> {
    let m = problem.num_constraints();
    let blocks: Vec<Vec<(usize, RMatrix)>> = problem
        .constraints
        .iter()
        .map(|c| c.blocks.iter().map(|(k, a)| (*k, symmetrize(a))).collect())
        .collect();
    let mut gram = RMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let mut v = 0.0;
            for (ki, ai) in &blocks[i] {
                for (kj, aj) in &blocks[j] {
                    if ki == kj {
                        v += sym_inner(ai, aj);
                    }
                }
            }
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }

    // Pivoted Cholesky: gram[P, P] = L L^T on the accepted pivots.
    let scale = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let mut diag: Vec<f64> = (0..m).map(|i| gram[(i, i)]).collect();
    let mut l = RMatrix::zeros(m, m);
    let mut pivots: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..m).collect();
    while !remaining.is_empty() {
        let (pos, &piv) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| diag[*a.1].total_cmp(&diag[*b.1]))
            .unwrap();
        if diag[piv] <= 1e-12 * scale.max(1e-300) {
            break;
        }
        remaining.swap_remove(pos);
        let col = pivots.len();
        let d = diag[piv].sqrt();
        l[(piv, col)] = d;
        for &r in &remaining {
            let mut v = gram[(r, piv)];
            for c in 0..col {
                v -= l[(r, c)] * l[(piv, c)];
            }
            l[(r, col)] = v / d;
            diag[r] -= l[(r, col)] * l[(r, col)];
        }
        pivots.push(piv);
    }

    let rhs_all = problem.rhs();
    if !remaining.is_empty() {
        let k = pivots.len();
        let lk = RMatrix::from_fn(k, k, |i, j| l[(pivots[i], j)]);
        let b_kept = DVector::from_iterator(k, pivots.iter().map(|&p| rhs_all[p]));
        for &d in &remaining {
            // Express row d through the kept rows: G_kk c = G_kd.
            let g_kd = DVector::from_iterator(k, pivots.iter().map(|&p| gram[(p, d)]));
            let c = lk
                .clone()
                .solve_lower_triangular(&g_kd)
                .and_then(|z| lk.transpose().solve_upper_triangular(&z))
                .ok_or(SdpStatus::NumericalFailure)?;
            let implied = c.dot(&b_kept);
            let tol = 1e-9 * (1.0 + rhs_all[d].abs() + b_kept.norm());
            if (implied - rhs_all[d]).abs() > tol {
                return Err(SdpStatus::Infeasible);
            }
        }
    }

    let mut kept = pivots;
    kept.sort_unstable();
    let rows = kept
        .iter()
        .map(|&i| {
            blocks[i]
                .iter()
                .map(|(k, a)| {
                    let n = a.nrows();
                    let nz: Vec<(usize, usize, f64)> = (0..n)
                        .flat_map(|c| (0..n).map(move |r| (r, c)))
                        .filter_map(|(r, c)| (a[(r, c)] != 0.0).then(|| (r, c, a[(r, c)])))
                        .collect();
                    let sparse = (nz.len() <= 2 * n).then_some(nz);
                    PreparedBlock {
                        block: *k,
                        dense: a.clone(),
                        sparse,
                    }
                })
                .collect()
        })
        .collect();
    let rhs = kept.iter().map(|&i| rhs_all[i]).collect();
    Ok(Prepared { rows, rhs, kept })
}

/// Nesterov-Todd scaling of one block: `G^T S G = G^{-1} X G^{-T} = diag(d)`.
struct Scaling {
    g: RMatrix,
    gt: RMatrix,
    ginv: RMatrix,
    d: Vec<f64>,
}

fn nt_scaling(x: &RMatrix, s: &RMatrix) -> Option<Scaling> {
    let lx = Cholesky::new(x.clone())?.unpack();
    let ls = Cholesky::new(s.clone())?.unpack();
    let prod = ls.transpose() * &lx;
    let svd = SVD::try_new(prod, true, true, f64::EPSILON, 10_000)?;
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let d: Vec<f64> = svd.singular_values.iter().copied().collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let n = d.len();
    let mut g = &lx * &v;
    for j in 0..n {
        g.column_mut(j).scale_mut(1.0 / d[j].sqrt());
    }
    let mut ginv = u.transpose() * ls.transpose();
    for i in 0..n {
        ginv.row_mut(i).scale_mut(1.0 / d[i].sqrt());
    }
    let gt = g.transpose();
    Some(Scaling { g, gt, ginv, d })
}

/// `G^T A G` using the triplet list when available.
fn congruence(sc: &Scaling, a: &PreparedBlock) -> RMatrix {
    let n = sc.d.len();
    match &a.sparse {
        Some(nz) => {
            let mut out = RMatrix::zeros(n, n);
            for &(p, q, v) in nz {
                // (G^T e_p e_q^T G)[:, c] = G^T[:, p] * G[q, c]
                let gp = sc.gt.column(p);
                for c in 0..n {
                    let coef = v * sc.g[(q, c)];
                    if coef != 0.0 {
                        out.column_mut(c).axpy(coef, &gp, 1.0);
                    }
                }
            }
            out
        }
        None => &sc.gt * &a.dense * &sc.g,
    }
}

/// Largest step keeping `diag(d) + α Δ ⪰ 0`, capped at 1.
fn max_step(d: &[f64], delta: &RMatrix) -> f64 {
    let n = d.len();
    let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let m = RMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * delta[(i, j)] * inv_sqrt[j]);
    let lmin = symmetric_eigenvalues(&m)[0];
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

struct Direction {
    dy: DVector<f64>,
    dx: Vec<RMatrix>,
    ds: Vec<RMatrix>,
}

/// Solves the scaled Newton system for a given complementarity target
/// `dc = ΔX~ + ΔS~`.
fn newton_direction(
    f: &[RMatrix],
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rp: &DVector<f64>,
    rd_scaled: &[RMatrix],
    dc: &[RMatrix],
) -> Direction {
    let m = rp.len();
    let nb = f.len();
    let mut rhs = rp.clone();
    for k in 0..nb {
        let n = dc[k].nrows();
        if n == 0 {
            continue;
        }
        let diff = &rd_scaled[k] - &dc[k];
        let v = DVector::from_column_slice(diff.as_slice());
        rhs += &f[k] * v;
    }
    let dy = chol.solve(&rhs);
    let mut dx = Vec::with_capacity(nb);
    let mut ds = Vec::with_capacity(nb);
    for k in 0..nb {
        let n = dc[k].nrows();
        let aty = if m > 0 {
            f[k].transpose() * &dy
        } else {
            DVector::zeros(n * n)
        };
        let aty = RMatrix::from_column_slice(n, n, aty.as_slice());
        let s = symmetrize(&(&rd_scaled[k] - aty));
        let x = symmetrize(&(&dc[k] - &s));
        dx.push(x);
        ds.push(s);
    }
    Direction { dy, dx, ds }
}

/// Solves `problem` with default tolerances.
pub fn solve_default(problem: &SdpProblem) -> Result<SdpSolution> {
    solve(problem, SdpSettings::default())
}

/// Solves the primal-dual pair.
///
/// Returns an error only for malformed problems; convergence failures are
/// reported through [`SdpSolution::status`].
pub fn solve(problem: &SdpProblem, settings: SdpSettings) -> Result<SdpSolution> {
    problem.validate()?;
    let sizes = problem.block_sizes.clone();
    let nb = sizes.len();
    let cost: Vec<RMatrix> = problem.cost.iter().map(symmetrize).collect();
    let m_full = problem.num_constraints();

    let empty_solution = |status: SdpStatus| SdpSolution {
        status,
        x: sizes.iter().map(|&n| RMatrix::zeros(n, n)).collect(),
        y: vec![0.0; m_full],
        s: sizes.iter().map(|&n| RMatrix::zeros(n, n)).collect(),
        primal_objective: f64::NAN,
        dual_objective: f64::NAN,
        iterations: 0,
        residuals: KktResiduals::default(),
    };

    let prep = match prepare(problem) {
        Ok(p) => p,
        Err(status) => return Ok(empty_solution(status)),
    };
    let m = prep.rhs.len();
    let b = DVector::from_vec(prep.rhs.clone());
    let bnorm = b.norm();
    let cnorm = cost.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();

    // Dense row-major view of the kept constraints for A(X) and A^T(y).
    let raw: Vec<RMatrix> = (0..nb)
        .map(|k| {
            let n = sizes[k];
            let mut a = RMatrix::zeros(m, n * n);
            for (i, row) in prep.rows.iter().enumerate() {
                for pb in row.iter().filter(|pb| pb.block == k) {
                    for (j, v) in pb.dense.iter().enumerate() {
                        a[(i, j)] += v;
                    }
                }
            }
            a
        })
        .collect();
    let apply = |x: &[RMatrix]| -> DVector<f64> {
        let mut out = DVector::zeros(m);
        for k in 0..nb {
            if sizes[k] > 0 {
                out += &raw[k] * DVector::from_column_slice(x[k].as_slice());
            }
        }
        out
    };
    let adjoint = |y: &DVector<f64>| -> Vec<RMatrix> {
        (0..nb)
            .map(|k| {
                let n = sizes[k];
                let v = raw[k].transpose() * y;
                RMatrix::from_column_slice(n, n, v.as_slice())
            })
            .collect()
    };

    // Starting point in the style of SDPT3.
    let mut x: Vec<RMatrix> = Vec::with_capacity(nb);
    let mut s: Vec<RMatrix> = Vec::with_capacity(nb);
    for k in 0..nb {
        let n = sizes[k];
        let nf = n as f64;
        let mut xi: f64 = 10f64.max(nf.sqrt());
        let mut eta: f64 = 10f64.max(nf.sqrt()).max(cost[k].norm());
        for (i, row) in prep.rows.iter().enumerate() {
            for pb in row.iter().filter(|pb| pb.block == k) {
                let an = pb.dense.norm();
                xi = xi.max(nf * (1.0 + prep.rhs[i].abs()) / (1.0 + an));
                eta = eta.max(an);
            }
        }
        x.push(RMatrix::identity(n, n).scale(xi));
        s.push(RMatrix::identity(n, n).scale(eta));
    }
    let mut y = DVector::<f64>::zeros(m);
    let total_dim: f64 = sizes.iter().sum::<usize>() as f64;

    let mut status = SdpStatus::MaxIters;
    let mut iterations = 0;
    let mut stalls = 0;
    for iter in 0..=settings.max_iters {
        iterations = iter;
        let rp = &b - apply(&x);
        let aty = adjoint(&y);
        let rd: Vec<RMatrix> = (0..nb).map(|k| &cost[k] - &s[k] - &aty[k]).collect();
        let pobj: f64 = cost.iter().zip(&x).map(|(c, x)| sym_inner(c, x)).sum();
        let dobj = b.dot(&y);
        let xs: f64 = x.iter().zip(&s).map(|(x, s)| sym_inner(x, s)).sum();
        let pinf = rp.norm() / (1.0 + bnorm);
        let dinf = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + cnorm);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs());
        let comp = xs / (1.0 + pobj.abs() + dobj.abs());
        if pinf <= settings.tol_feas
            && dinf <= settings.tol_feas
            && gap <= settings.tol_gap
            && comp <= settings.tol_gap
        {
            status = SdpStatus::Optimal;
            break;
        }
        let xnorm = x.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if xnorm > 1e12 * (1.0 + bnorm) || y.norm() > 1e12 * (1.0 + cnorm) {
            status = SdpStatus::Infeasible;
            break;
        }
        if iter == settings.max_iters {
            break;
        }
        let mu = xs / total_dim;

        let mut scalings = Vec::with_capacity(nb);
        for k in 0..nb {
            match nt_scaling(&x[k], &s[k]) {
                Some(sc) => scalings.push(sc),
                None => {
                    status = SdpStatus::NumericalFailure;
                    break;
                }
            }
        }
        if scalings.len() < nb {
            break;
        }

        // Scaled constraint matrices, one row per constraint.
        let f: Vec<RMatrix> = (0..nb)
            .map(|k| {
                let n = sizes[k];
                let mut fk = RMatrix::zeros(m, n * n);
                for (i, row) in prep.rows.iter().enumerate() {
                    for pb in row.iter().filter(|pb| pb.block == k) {
                        let t = congruence(&scalings[k], pb);
                        for (j, v) in t.iter().enumerate() {
                            fk[(i, j)] += v;
                        }
                    }
                }
                fk
            })
            .collect();
        let mut schur = RMatrix::zeros(m, m);
        for fk in &f {
            if fk.ncols() > 0 {
                schur += fk * fk.transpose();
            }
        }
        let diag_max = (0..m).map(|i| schur[(i, i)]).fold(0.0, f64::max);
        let chol = match Cholesky::new(schur.clone()) {
            Some(c) => c,
            None => {
                let mut reg = schur.clone();
                for i in 0..m {
                    reg[(i, i)] += 1e-14 * diag_max.max(1e-300);
                }
                match Cholesky::new(reg) {
                    Some(c) => c,
                    None => {
                        status = SdpStatus::NumericalFailure;
                        break;
                    }
                }
            }
        };
        let rd_scaled: Vec<RMatrix> = (0..nb)
            .map(|k| &scalings[k].gt * &rd[k] * &scalings[k].g)
            .collect();

        // Predictor.
        let dc_aff: Vec<RMatrix> = scalings
            .iter()
            .map(|sc| RMatrix::from_diagonal(&DVector::from_iterator(sc.d.len(), sc.d.iter().map(|v| -v))))
            .collect();
        let aff = newton_direction(&f, &chol, &rp, &rd_scaled, &dc_aff);
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for k in 0..nb {
            if sizes[k] == 0 {
                continue;
            }
            ap = ap.min(max_step(&scalings[k].d, &aff.dx[k]));
            ad = ad.min(max_step(&scalings[k].d, &aff.ds[k]));
        }
        let ap = ap.min(1.0);
        let ad = ad.min(1.0);
        let mut xs_aff = 0.0;
        for k in 0..nb {
            let dk = &scalings[k].d;
            let n = dk.len();
            for i in 0..n {
                for j in 0..n {
                    let xv = if i == j { dk[i] } else { 0.0 } + ap * aff.dx[k][(i, j)];
                    let sv = if i == j { dk[i] } else { 0.0 } + ad * aff.ds[k][(i, j)];
                    xs_aff += xv * sv;
                }
            }
        }
        let expon = (3.0 * ap.min(ad).powi(2)).max(1.0);
        let sigma = (xs_aff / xs).max(0.0).powf(expon).min(1.0);

        // Corrector: Lyapunov solve in the scaled space.
        let dc: Vec<RMatrix> = (0..nb)
            .map(|k| {
                let dk = &scalings[k].d;
                let n = dk.len();
                let cross = &aff.dx[k] * &aff.ds[k];
                let cross = &cross + cross.transpose();
                RMatrix::from_fn(n, n, |i, j| {
                    let mut r = -cross[(i, j)];
                    if i == j {
                        r += 2.0 * sigma * mu - 2.0 * dk[i] * dk[i];
                    }
                    r / (dk[i] + dk[j])
                })
            })
            .collect();
        let dir = newton_direction(&f, &chol, &rp, &rd_scaled, &dc);
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for k in 0..nb {
            if sizes[k] == 0 {
                continue;
            }
            ap = ap.min(max_step(&scalings[k].d, &dir.dx[k]));
            ad = ad.min(max_step(&scalings[k].d, &dir.ds[k]));
        }
        let gamma = 0.9 + 0.09 * ap.min(ad).min(1.0);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            stalls += 1;
            if stalls >= 3 {
                status = SdpStatus::NumericalFailure;
                break;
            }
        } else {
            stalls = 0;
        }
        for k in 0..nb {
            let sc = &scalings[k];
            let dx = &sc.g * &dir.dx[k] * &sc.gt;
            let ds = sc.ginv.transpose() * &dir.ds[k] * &sc.ginv;
            x[k] = symmetrize(&(&x[k] + dx.scale(ap)));
            s[k] = symmetrize(&(&s[k] + ds.scale(ad)));
        }
        y += dir.dy.scale(ad);
    }

    let mut y_full = vec![0.0; m_full];
    for (pos, &i) in prep.kept.iter().enumerate() {
        y_full[i] = y[pos];
    }
    let primal_objective = problem.primal_objective(&x);
    let dual_objective: f64 = problem.rhs().iter().zip(&y_full).map(|(b, y)| b * y).sum();
    let residuals = kkt_residuals(problem, &x, &y_full, &s);
    Ok(SdpSolution {
        status,
        x,
        y: y_full,
        s,
        primal_objective,
        dual_objective,
        iterations,
        residuals,
    })
}
