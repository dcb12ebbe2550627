//! Subspace baselines on the raw signal: MUSIC, ESPRIT and Wax-Kailath
//! order selection. The standard ANM baseline is [`anm_delay`].

use std::f64::consts::TAU;
use std::str::FromStr;

use nalgebra::linalg::Schur;
use serde::Serialize;

use crate::anm::{estimate, EstimateOptions, EstimationReport};
use crate::cfdecomp::grid_map;
use crate::error::{Error, Result};
use crate::gfilter::build_delay_filter;
use crate::numerics::{hermitian_eig, pinv, CMatrix, CVector, C64};
use crate::signal::SignalRecord;

const EIG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct SubspaceConfig {
    pub window: usize,
    pub m: usize,
    pub grid_size: usize,
}

impl SubspaceConfig {
    pub fn new(window: usize, m: usize, grid_size: usize) -> Result<Self> {
        if m == 0 || window <= m {
            return Err(Error::InvalidArgument(format!("need window > m >= 1, got window {window}, m {m}")));
        }
        if grid_size == 0 {
            return Err(Error::InvalidArgument("grid size must be positive".into()));
        }
        Ok(SubspaceConfig { window, m, grid_size })
    }
}

/// Half the record length.
pub fn default_window(len: usize) -> usize {
    len / 2
}

/// Forward-averaged covariance of the length-`window` snapshots and the
/// snapshot count.
pub fn snapshot_covariance(record: &SignalRecord, window: usize) -> Result<(CMatrix, usize)> {
    let len = record.len();
    if window == 0 || len < 2 * window {
        return Err(Error::InsufficientData {
            required: 2 * window.max(1),
            got: len,
        });
    }
    let k = len - window + 1;
    let y = &record.samples;
    let mut r = CMatrix::zeros(window, window);
    for t in 0..k {
        let s = CVector::from_column_slice(&y[t..t + window]);
        r += &s * s.adjoint();
    }
    Ok((r.unscale(k as f64), k))
}

fn steering(window: usize, theta: f64) -> CVector {
    CVector::from_fn(window, |k, _| C64::from_polar(1.0, theta * k as f64))
}

/// `m` largest local maxima of `1 / ‖E_n* a(θ)‖²`, sorted ascending.
pub fn music(record: &SignalRecord, cfg: &SubspaceConfig) -> Result<Vec<f64>> {
    let (r, _) = snapshot_covariance(record, cfg.window)?;
    let eig = hermitian_eig(&r)?;
    let en_adj = eig.trailing(cfg.m).adjoint();
    let spec = grid_map(cfg.grid_size, |th| {
        let d = (&en_adj * steering(cfg.window, th)).norm_squared();
        1.0 / d.max(f64::MIN_POSITIVE)
    });
    let n = cfg.grid_size;
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&l| {
            let prev = spec[(l + n - 1) % n];
            let next = spec[(l + 1) % n];
            spec[l] >= prev && spec[l] > next
        })
        .collect();
    if peaks.len() < cfg.m {
        return Err(Error::Extraction {
            found: peaks.len(),
            wanted: cfg.m,
        });
    }
    peaks.sort_by(|&a, &b| spec[b].total_cmp(&spec[a]));
    let mut out: Vec<f64> = peaks[..cfg.m].iter().map(|&l| l as f64 * TAU / n as f64).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Angles of the eigenvalues of the least-squares rotation between the two
/// shifted halves of the signal subspace, sorted ascending.
pub fn esprit(record: &SignalRecord, cfg: &SubspaceConfig) -> Result<Vec<f64>> {
    let (r, _) = snapshot_covariance(record, cfg.window)?;
    let es = hermitian_eig(&r)?.leading(cfg.m);
    let w = cfg.window;
    let upper = es.rows(0, w - 1).into_owned();
    let lower = es.rows(1, w - 1).into_owned();
    let phi = pinv(&upper, 1e-12) * lower;
    let schur = Schur::try_new(phi, f64::EPSILON, 100_000).ok_or(Error::NoConvergence)?;
    let (_, t) = schur.unpack();
    let mut out: Vec<f64> = (0..cfg.m).map(|i| t[(i, i)].arg().rem_euclid(TAU)).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Wax-Kailath AIC and BIC minimizers over `0..=max_m`.
pub fn order_select_aic_bic(record: &SignalRecord, window: usize, max_m: usize) -> Result<(usize, usize)> {
    if window <= max_m {
        return Err(Error::InvalidArgument(format!("window {window} must exceed max order {max_m}")));
    }
    let (r, k_snap) = snapshot_covariance(record, window)?;
    let w: Vec<f64> = hermitian_eig(&r)?.values.iter().map(|&v| v.max(EIG_FLOOR)).collect();
    let ks = k_snap as f64;
    let wf = window as f64;
    let mut best = ((f64::INFINITY, 0), (f64::INFINITY, 0));
    for k in 0..=max_m {
        let tail = &w[k..];
        let p = tail.len() as f64;
        let log_geo = tail.iter().map(|v| v.ln()).sum::<f64>() / p;
        let log_arith = (tail.iter().sum::<f64>() / p).ln();
        let lr = log_geo - log_arith;
        let kf = k as f64;
        let free = kf * (2.0 * wf - kf);
        let aic = -2.0 * ks * p * lr + 2.0 * free;
        let bic = -ks * p * lr + 0.5 * free * ks.ln();
        if aic < best.0 .0 {
            best.0 = (aic, k);
        }
        if bic < best.1 .0 {
            best.1 = (bic, k);
        }
    }
    Ok((best.0 .1, best.1 .1))
}

/// How the subspace methods choose the model order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRule {
    Aic,
    Bic,
    True,
    Fixed(usize),
}

impl FromStr for OrderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aic" => Ok(OrderRule::Aic),
            "bic" => Ok(OrderRule::Bic),
            "true" => Ok(OrderRule::True),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .map(OrderRule::Fixed)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown order rule {s:?}"))),
        }
    }
}

impl std::fmt::Display for OrderRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderRule::Aic => write!(f, "aic"),
            OrderRule::Bic => write!(f, "bic"),
            OrderRule::True => write!(f, "true"),
            OrderRule::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMethod {
    Music,
    Esprit,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubspaceReport {
    pub method: SubspaceMethod,
    pub order_rule: OrderRule,
    pub window: usize,
    pub m_hat: usize,
    pub freqs: Vec<f64>,
    pub aic: usize,
    pub bic: usize,
}

/// Order selection followed by MUSIC or ESPRIT. An order of zero yields no
/// frequencies.
pub fn subspace_estimate(
    record: &SignalRecord,
    method: SubspaceMethod,
    rule: OrderRule,
    true_m: Option<usize>,
    window: Option<usize>,
    grid_size: usize,
) -> Result<SubspaceReport> {
    let window = window.unwrap_or_else(|| default_window(record.len()));
    if window < 2 {
        return Err(Error::InsufficientData {
            required: 4,
            got: record.len(),
        });
    }
    let (aic, bic) = order_select_aic_bic(record, window, window - 1)?;
    let m = match rule {
        OrderRule::Aic => aic,
        OrderRule::Bic => bic,
        OrderRule::True => true_m.ok_or_else(|| Error::InvalidArgument("true order requested but not given".into()))?,
        OrderRule::Fixed(k) => k,
    };
    let freqs = if m == 0 {
        Vec::new()
    } else {
        let cfg = SubspaceConfig::new(window, m, grid_size)?;
        match method {
            SubspaceMethod::Music => music(record, &cfg)?,
            SubspaceMethod::Esprit => esprit(record, &cfg)?,
        }
    };
    Ok(SubspaceReport {
        method,
        order_rule: rule,
        window,
        m_hat: freqs.len(),
        freqs,
        aic,
        bic,
    })
}

/// Standard ANM: the estimator run on a delay bank of size `n`.
pub fn anm_delay(record: &SignalRecord, n: usize, opts: &EstimateOptions) -> Result<EstimationReport> {
    estimate(&build_delay_filter(n)?, record, opts)
}
