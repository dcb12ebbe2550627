//! Decomposition of a rank-deficient state covariance into atoms,
//! `Σ = Σ_k ρ_k G(e^{iθ_k}) G(e^{iθ_k})*`.
//!
//! The frequencies are the zeros of the normalised projection function
//! `d̄(θ) = ‖U_n* G(e^{iθ})‖² / ‖G(e^{iθ})‖²`, where `U_n` spans the
//! eigenvectors of the vanishing eigenvalues. Zeros are located on a grid by
//! thresholding and clustering; powers follow from a small linear solve.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::StateCovariance;
use crate::error::{Error, Result};
use crate::gfilter::{circular_distance, GFilter};
use crate::numerics::{hermitian_eig, solve_linear, CMatrix, HermitianEig};

pub const DEFAULT_GRID: usize = 10_000;
pub const DEFAULT_EPS1: f64 = 0.05;
/// Sub-threshold points further apart than this many grid steps start a new
/// cluster.
pub const CLUSTER_GAP: usize = 10;

const ABS_EIG_FLOOR: f64 = 1e-3;
const EIG_RATIO: f64 = 1e3;

/// Model order from a nonincreasing spectrum: the first `k` with
/// `λ_{k+1} < 1e-3` or `λ_k / λ_{k+1} > 1e3`, else the full length.
/// A spectrum whose largest value is already below `1e-3` has order 0.
pub fn numerical_rank(eigenvalues: &[f64]) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::Empty("eigenvalue list"));
    }
    let w: Vec<f64> = eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    if w[0] < ABS_EIG_FLOOR {
        return Ok(0);
    }
    for k in 1..w.len() {
        if w[k] < ABS_EIG_FLOOR || w[k - 1] > EIG_RATIO * w[k] {
            return Ok(k);
        }
    }
    Ok(w.len())
}

/// Values of `d̄` on the grid `φ_ℓ = 2πℓ/N`.
#[derive(Clone, Debug, Serialize)]
pub struct GridScan {
    pub grid_size: usize,
    pub values: Vec<f64>,
}

impl GridScan {
    pub fn theta(&self, l: usize) -> f64 {
        l as f64 * TAU / self.grid_size as f64
    }

    pub fn step(&self) -> f64 {
        TAU / self.grid_size as f64
    }
}

/// Evaluates `f` on `N` equispaced frequencies, in parallel chunks.
pub(crate) fn grid_map<F>(grid_size: usize, f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync,
{
    (0..grid_size)
        .into_par_iter()
        .with_min_len(256)
        .map(|l| f(l as f64 * TAU / grid_size as f64))
        .collect()
}

pub fn scan_projection_function(filter: &GFilter, noise_basis: &CMatrix, grid_size: usize) -> GridScan {
    let values = grid_map(grid_size, |th| {
        let g = filter.atom_vector(th);
        let gain = g.norm_squared();
        if noise_basis.ncols() == 0 {
            return 0.0;
        }
        (noise_basis.adjoint() * &g).norm_squared() / gain
    });
    GridScan { grid_size, values }
}

/// How a cluster of grid points is reduced to one frequency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterRule {
    /// Grid point of smallest scan value.
    #[default]
    Argmin,
    /// Circular mean of the cluster's grid points.
    Mean,
}

pub(crate) fn cluster_center(scan: &GridScan, members: &[usize], rule: CenterRule) -> f64 {
    match rule {
        CenterRule::Argmin => {
            let best = members
                .iter()
                .copied()
                .min_by(|&a, &b| scan.values[a].total_cmp(&scan.values[b]))
                .unwrap();
            scan.theta(best)
        }
        CenterRule::Mean => {
            let base = scan.theta(members[0]);
            let mean_off = members
                .iter()
                .map(|&l| {
                    let d = (scan.theta(l) - base).rem_euclid(TAU);
                    if d > std::f64::consts::PI {
                        d - TAU
                    } else {
                        d
                    }
                })
                .sum::<f64>()
                / members.len() as f64;
            (base + mean_off).rem_euclid(TAU)
        }
    }
}

/// Splits sub-threshold indices into runs, joining across the wrap.
pub(crate) fn runs_of(sel: &[usize], grid_size: usize) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &i in sel {
        match runs.last_mut() {
            Some(run) if i - run.last().unwrap() <= CLUSTER_GAP => run.push(i),
            _ => runs.push(vec![i]),
        }
    }
    if runs.len() > 1 {
        let first_start = runs[0][0];
        let last_end = *runs.last().unwrap().last().unwrap();
        if first_start + grid_size - last_end <= CLUSTER_GAP {
            let mut last = runs.pop().unwrap();
            last.extend(runs[0].iter());
            runs[0] = last;
        }
    }
    runs
}

/// Scan minima at least this many times deeper than the barrier separating
/// them count as distinct dips when seeding the fallback clustering.
const BARRIER_RATIO: f64 = 10.0;

/// Largest scan value on the shorter grid arc from `a` to `b`.
fn barrier(scan: &GridScan, a: usize, b: usize) -> f64 {
    let n = scan.grid_size;
    let fwd = (b + n - a) % n;
    let (start, len) = if fwd <= n - fwd { (a, fwd) } else { (b, n - fwd) };
    (0..=len).map(|k| scan.values[(start + k) % n]).fold(f64::MIN, f64::max)
}

/// Up to `r` sub-threshold local minima, deepest first, pairwise separated by a barrier.
fn distinct_minima(scan: &GridScan, sel: &[usize], r: usize) -> Vec<usize> {
    let n = scan.grid_size;
    let v = &scan.values;
    let mut minima: Vec<usize> = sel
        .iter()
        .copied()
        .filter(|&l| v[l] <= v[(l + 1) % n] && v[l] <= v[(l + n - 1) % n])
        .collect();
    minima.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut seeds: Vec<usize> = Vec::with_capacity(r);
    for l in minima {
        if seeds.len() == r {
            break;
        }
        let separated = seeds
            .iter()
            .all(|&s| barrier(scan, s, l) >= BARRIER_RATIO * v[l].max(v[s]).max(f64::MIN_POSITIVE));
        if separated {
            seeds.push(l);
        }
    }
    seeds
}

/// Lloyd iterations with `r` centers on the circle, each center the argmin of its group.
fn lloyd(scan: &GridScan, sel: &[usize], r: usize) -> Vec<Vec<usize>> {
    let theta = |l: usize| scan.theta(l);
    // Seed with distinct dips, then farthest points.
    let mut centers: Vec<f64> = distinct_minima(scan, sel, r).into_iter().map(theta).collect();
    while centers.len() < r {
        let far = sel
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let da = centers.iter().map(|&c| circular_distance(theta(a), c)).fold(f64::MAX, f64::min);
                let db = centers.iter().map(|&c| circular_distance(theta(b), c)).fold(f64::MAX, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(theta(far));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); r];
    for _ in 0..100 {
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); r];
        for &l in sel {
            let (k, _) = centers
                .iter()
                .enumerate()
                .map(|(k, &c)| (k, circular_distance(theta(l), c)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            next[k].push(l);
        }
        let new_centers: Vec<f64> = next
            .iter()
            .zip(&centers)
            .map(|(g, &c)| if g.is_empty() { c } else { cluster_center(scan, g, CenterRule::Argmin) })
            .collect();
        let moved = new_centers
            .iter()
            .zip(&centers)
            .any(|(a, b)| circular_distance(*a, *b) > 1e-12);
        groups = next;
        centers = new_centers;
        if !moved {
            break;
        }
    }
    groups
}

/// `r` frequencies from the grid points where the scan is below `eps1`,
/// each the argmin of its cluster, sorted ascending.
pub fn extract_frequencies(scan: &GridScan, r: usize, eps1: f64) -> Result<Vec<f64>> {
    extract_frequencies_with(scan, r, eps1, CenterRule::Argmin)
}

pub fn extract_frequencies_with(scan: &GridScan, r: usize, eps1: f64, rule: CenterRule) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::InvalidArgument("cannot extract zero frequencies".into()));
    }
    let sel: Vec<usize> = (0..scan.grid_size).filter(|&l| scan.values[l] < eps1).collect();
    let runs = runs_of(&sel, scan.grid_size);
    if sel.len() < r {
        return Err(Error::Extraction {
            found: runs.len(),
            wanted: r,
        });
    }
    let clusters = if runs.len() == r { runs } else { lloyd(scan, &sel, r) };
    if clusters.iter().any(|c| c.is_empty()) {
        return Err(Error::Extraction {
            found: clusters.iter().filter(|c| !c.is_empty()).count(),
            wanted: r,
        });
    }
    let mut freqs: Vec<f64> = clusters.iter().map(|c| cluster_center(scan, c, rule)).collect();
    freqs.sort_by(f64::total_cmp);
    Ok(freqs)
}

/// `diag(T^{-1} diag(λ_{1:r}) T^{-*})` with `T = U_{1:r}* [G(e^{iθ_1}) … G(e^{iθ_r})]`.
pub fn recover_powers(filter: &GFilter, eig: &HermitianEig, r: usize, freqs: &[f64]) -> Result<Vec<f64>> {
    if freqs.len() != r {
        return Err(Error::Dimension(format!("{} frequencies for rank {r}", freqs.len())));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    let t = eig.leading(r).adjoint() * filter.atom_matrix(freqs);
    let tinv = solve_linear(&t, &CMatrix::identity(r, r))?;
    let mut scaled = tinv.clone();
    for k in 0..r {
        scaled.column_mut(k).scale_mut(eig.values[k]);
    }
    let d = scaled * tinv.adjoint();
    Ok((0..r).map(|k| d[(k, k)].re).collect())
}

/// Atoms recovered from a covariance.
#[derive(Clone, Debug, Serialize)]
pub struct CfDecomposition {
    pub freqs: Vec<f64>,
    pub powers: Vec<f64>,
    pub r: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub scan: Option<GridScan>,
}

#[derive(Clone, Copy, Debug)]
pub struct CfOptions {
    pub grid_size: usize,
    pub eps1: f64,
    pub center: CenterRule,
}

impl Default for CfOptions {
    fn default() -> Self {
        CfOptions {
            grid_size: DEFAULT_GRID,
            eps1: DEFAULT_EPS1,
            center: CenterRule::Argmin,
        }
    }
}

pub fn cf_decompose(filter: &GFilter, sigma: &StateCovariance, grid_size: usize, eps1: f64) -> Result<CfDecomposition> {
    cf_decompose_with(
        filter,
        sigma,
        CfOptions {
            grid_size,
            eps1,
            ..CfOptions::default()
        },
    )
}

pub fn cf_decompose_with(filter: &GFilter, sigma: &StateCovariance, opts: CfOptions) -> Result<CfDecomposition> {
    let n = filter.n();
    if sigma.n() != n {
        return Err(Error::Dimension(format!("covariance is {}x{0} for a filter of size {n}", sigma.n())));
    }
    let eig = hermitian_eig(&sigma.sigma)?;
    let r = numerical_rank(&eig.values)?;
    if r == n {
        return Err(Error::FullRank(n));
    }
    if r == 0 {
        return Ok(CfDecomposition {
            freqs: Vec::new(),
            powers: Vec::new(),
            r,
            eigenvalues: eig.values,
            scan: None,
        });
    }
    let scan = scan_projection_function(filter, &eig.trailing(r), opts.grid_size);
    let freqs = extract_frequencies_with(&scan, r, opts.eps1, opts.center)?;
    let powers = recover_powers(filter, &eig, r, &freqs)?;
    Ok(CfDecomposition {
        freqs,
        powers,
        r,
        eigenvalues: eig.values,
        scan: Some(scan),
    })
}
