//! Seeded Monte Carlo runs over scenario grids, and their aggregation.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::anm::{estimate, EstimateOptions, SolveInfo};
use crate::baselines::{subspace_estimate, OrderRule, SubspaceMethod};
use crate::cfdecomp::DEFAULT_GRID;
use crate::error::{Error, Result};
use crate::gfilter::{build_delay_filter, circular_distance, FilterSpec, GFilter};
use crate::numerics::C64;
use crate::signal::{snr_to_sigma2, synthesize_with, LineSpectrum, SignalRecord};

pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_MAX_ATTEMPTS: usize = 100_000;

/// How the true frequencies of a trial are drawn.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrequencyRule {
    /// `θ_0 + o_k·2π/L` for each listed `θ_0`.
    Offsets { theta0: Vec<f64>, offsets: Vec<f64> },
    /// `m` uniform draws in `band`, pairwise at least `η·2π/L` apart.
    Random {
        band: [f64; 2],
        m: usize,
        eta: Vec<f64>,
        #[serde(default = "default_attempts")]
        max_attempts: usize,
    },
}

fn default_attempts() -> usize {
    DEFAULT_MAX_ATTEMPTS
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

/// `null` entries mean no noise.
fn snr_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub filter: FilterSpec,
    pub length: usize,
    pub frequencies: FrequencyRule,
    /// Amplitude moduli; phases are uniform. Empty means unit moduli.
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    /// Modulus the SNR refers to.
    #[serde(default = "one")]
    pub snr_ref: f64,
    #[serde(deserialize_with = "snr_list")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Subspace window; half the length when absent.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

fn one() -> f64 {
    1.0
}

/// One `(θ_0 or η, SNR)` combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioPoint {
    pub index: usize,
    pub value: f64,
    pub snr_db: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn m(&self) -> usize {
        match &self.frequencies {
            FrequencyRule::Offsets { offsets, .. } => offsets.len(),
            FrequencyRule::Random { m, .. } => *m,
        }
    }

    pub fn fft_step(&self) -> f64 {
        TAU / self.length as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.length == 0 {
            return bad("length must be positive".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr_db is empty".into());
        }
        if self.snr_db.iter().any(|s| s.is_nan()) {
            return bad("snr_db contains NaN".into());
        }
        if !(self.snr_ref > 0.0) {
            return bad(format!("snr_ref {} must be positive", self.snr_ref));
        }
        if self.grid_size == 0 {
            return bad("grid_size must be positive".into());
        }
        let m = self.m();
        if m == 0 {
            return bad("scenario has no cisoids".into());
        }
        if !self.amplitudes.is_empty() && self.amplitudes.len() != m {
            return bad(format!("{} amplitudes for {m} cisoids", self.amplitudes.len()));
        }
        if self.amplitudes.iter().any(|a| !(*a > 0.0)) {
            return bad("amplitude moduli must be positive".into());
        }
        let step = self.fft_step();
        match &self.frequencies {
            FrequencyRule::Offsets { theta0, offsets } => {
                if theta0.is_empty() {
                    return bad("theta0 list is empty".into());
                }
                for &t0 in theta0 {
                    for &o in offsets {
                        let th = t0 + o * step;
                        if !(0.0..TAU).contains(&th) {
                            return bad(format!("frequency {th} from theta0 {t0} leaves [0, 2π)"));
                        }
                    }
                }
            }
            FrequencyRule::Random { band, eta, max_attempts, .. } => {
                if !(0.0 <= band[0] && band[0] < band[1] && band[1] <= TAU) {
                    return bad(format!("band {band:?} is not an interval in [0, 2π]"));
                }
                if eta.is_empty() {
                    return bad("eta list is empty".into());
                }
                if *max_attempts == 0 {
                    return bad("max_attempts must be positive".into());
                }
                for &e in eta {
                    if !(e >= 0.0) || (m - 1) as f64 * e * step > band[1] - band[0] {
                        return bad(format!("{m} frequencies {e}·Δ apart do not fit in {band:?}"));
                    }
                }
            }
        }
        self.filter.build().map_err(|e| Error::Config(format!("filter: {e}")))?;
        Ok(())
    }

    /// Points in row-major order: outer over `θ_0`/`η`, inner over SNR.
    pub fn points(&self) -> Vec<ScenarioPoint> {
        let values: &[f64] = match &self.frequencies {
            FrequencyRule::Offsets { theta0, .. } => theta0,
            FrequencyRule::Random { eta, .. } => eta,
        };
        let mut out = Vec::new();
        for &value in values {
            for &snr_db in &self.snr_db {
                out.push(ScenarioPoint {
                    index: out.len(),
                    value,
                    snr_db,
                });
            }
        }
        out
    }

    /// Independent stream for `(seed, point, trial)`.
    pub fn trial_rng(&self, point: usize, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((point as u64) << 32) | trial as u64);
        rng
    }

    /// True frequencies (ascending) and the noisy record of one trial.
    pub fn draw(&self, point: &ScenarioPoint, trial: usize) -> Result<(Vec<f64>, SignalRecord)> {
        let mut rng = self.trial_rng(point.index, trial);
        let step = self.fft_step();
        let m = self.m();
        let mut freqs = match &self.frequencies {
            FrequencyRule::Offsets { offsets, .. } => offsets.iter().map(|o| point.value + o * step).collect(),
            FrequencyRule::Random { band, max_attempts, .. } => {
                let sep = point.value * step;
                let mut found = None;
                for _ in 0..*max_attempts {
                    let th: Vec<f64> = (0..m).map(|_| rng.random_range(band[0]..band[1])).collect();
                    if (0..m).all(|i| (i + 1..m).all(|j| circular_distance(th[i], th[j]) >= sep)) {
                        found = Some(th);
                        break;
                    }
                }
                found.ok_or_else(|| Error::InvalidArgument(format!("no admissible draw in {max_attempts} attempts")))?
            }
        };
        freqs.sort_by(f64::total_cmp);
        let amps = (0..m)
            .map(|k| {
                let modulus = self.amplitudes.get(k).copied().unwrap_or(1.0);
                C64::from_polar(modulus, rng.random_range(0.0..TAU))
            })
            .collect();
        let spec = LineSpectrum::new(freqs.clone(), amps)?;
        let sigma2 = snr_to_sigma2(point.snr_db, self.snr_ref);
        Ok((freqs, synthesize_with(&spec, self.length, sigma2, &mut rng)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ganm,
    AnmDelay,
    Music(OrderRule),
    Esprit(OrderRule),
}

impl FromStr for Method {
    type Err = Error;

    /// `ganm`, `anm-delay`, `music[:rule]`, `esprit[:rule]`, rule defaulting to AIC.
    fn from_str(s: &str) -> Result<Self> {
        let (head, rule) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let order = |r: Option<&str>| r.map_or(Ok(OrderRule::Aic), OrderRule::from_str);
        match head {
            "ganm" if rule.is_none() => Ok(Method::Ganm),
            "anm-delay" if rule.is_none() => Ok(Method::AnmDelay),
            "music" => Ok(Method::Music(order(rule)?)),
            "esprit" => Ok(Method::Esprit(order(rule)?)),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ganm => write!(f, "ganm"),
            Method::AnmDelay => write!(f, "anm-delay"),
            Method::Music(r) => write!(f, "music:{r}"),
            Method::Esprit(r) => write!(f, "esprit:{r}"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub method: Method,
    pub anm: EstimateOptions,
    /// Record wall-clock time per trial; off keeps output byte-reproducible.
    pub timing: bool,
}

impl RunOptions {
    pub fn new(method: Method) -> Self {
        RunOptions {
            method,
            anm: EstimateOptions {
                dual: false,
                ..EstimateOptions::default()
            },
            timing: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub scenario_id: String,
    pub point: usize,
    pub theta0_or_eta: f64,
    pub snr_db: f64,
    pub trial: usize,
    pub method: String,
    pub m: usize,
    pub m_hat: usize,
    pub freqs: Vec<f64>,
    pub true_freqs: Vec<f64>,
    pub success: bool,
    pub abs_error: Option<f64>,
    pub elapsed_ms: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub solve: Option<SolveInfo>,
}

/// `‖θ̂ - θ‖` pairing both sorted lists, with circular differences, under the best cyclic alignment.
pub fn matched_error(estimate: &[f64], truth: &[f64]) -> Option<f64> {
    if estimate.len() != truth.len() {
        return None;
    }
    let mut a = estimate.to_vec();
    let mut b = truth.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // Estimates past the wrap point sort to the other end, so try every cyclic alignment.
    (0..a.len().max(1))
        .map(|shift| {
            (0..a.len())
                .map(|k| circular_distance(a[(k + shift) % a.len()], b[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .min_by(f64::total_cmp)
}

struct Prepared {
    filter: Option<GFilter>,
}

fn prepare(scenario: &Scenario, method: Method) -> Result<Prepared> {
    let filter = match method {
        Method::Ganm => Some(scenario.filter.build()?),
        Method::AnmDelay => Some(build_delay_filter(scenario.filter.n())?),
        _ => None,
    };
    if let Some(f) = &filter {
        // Build the cached range basis once, before the workers share it.
        f.range_basis();
    }
    Ok(Prepared { filter })
}

fn run_method(
    scenario: &Scenario,
    prep: &Prepared,
    opts: &RunOptions,
    record: &SignalRecord,
) -> Result<(Vec<f64>, Option<SolveInfo>)> {
    match opts.method {
        Method::Ganm | Method::AnmDelay => {
            let filter = prep.filter.as_ref().expect("filter prepared for ANM methods");
            let mut anm = opts.anm;
            anm.grid_size = scenario.grid_size;
            let rep = estimate(filter, record, &anm)?;
            Ok((rep.freqs, Some(rep.primal_solve)))
        }
        Method::Music(rule) | Method::Esprit(rule) => {
            let method = if matches!(opts.method, Method::Music(_)) {
                SubspaceMethod::Music
            } else {
                SubspaceMethod::Esprit
            };
            let rep = subspace_estimate(record, method, rule, Some(scenario.m()), scenario.window, scenario.grid_size)?;
            Ok((rep.freqs, None))
        }
    }
}

/// All trials of all points, in `(point, trial)` order. Trial failures are
/// recorded in the results; only an invalid scenario is an error.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<Vec<TrialResult>> {
    scenario.validate()?;
    let prep = prepare(scenario, opts.method)?;
    let m = scenario.m();
    let jobs: Vec<(ScenarioPoint, usize)> = scenario
        .points()
        .into_iter()
        .flat_map(|p| (0..scenario.trials).map(move |t| (p, t)))
        .collect();
    let method = opts.method.to_string();
    let results = jobs
        .par_iter()
        .map(|(point, trial)| {
            let start = Instant::now();
            let outcome = scenario
                .draw(point, *trial)
                .and_then(|(truth, record)| run_method(scenario, &prep, opts, &record).map(|r| (truth, r)));
            let elapsed_ms = if opts.timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let mut res = TrialResult {
                scenario_id: scenario.id.clone(),
                point: point.index,
                theta0_or_eta: point.value,
                snr_db: point.snr_db,
                trial: *trial,
                method: method.clone(),
                m,
                m_hat: 0,
                freqs: Vec::new(),
                true_freqs: Vec::new(),
                success: false,
                abs_error: None,
                elapsed_ms,
                error: None,
                solve: None,
            };
            match outcome {
                Ok((truth, (freqs, solve))) => {
                    res.m_hat = freqs.len();
                    res.success = res.m_hat == m;
                    res.abs_error = if res.success { matched_error(&freqs, &truth) } else { None };
                    res.freqs = freqs;
                    res.true_freqs = truth;
                    res.solve = solve;
                }
                Err(e) => res.error = Some(e.to_string()),
            }
            res
        })
        .collect();
    Ok(results)
}

/// Fraction of trials with `m̂ = m`.
pub fn recovery_probability(results: &[TrialResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("trial results"));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// `sqrt(mean over successful trials of ‖θ̂ - θ‖² / m)`.
pub fn rmse(results: &[TrialResult], m: usize) -> Result<f64> {
    let errs: Vec<f64> = results.iter().filter(|r| r.success).filter_map(|r| r.abs_error).collect();
    rmse_of(&errs, m)
}

fn rmse_of(errs: &[f64], m: usize) -> Result<f64> {
    if errs.is_empty() {
        return Err(Error::Empty("successful trials"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("model order 0 has no error".into()));
    }
    Ok((errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64 / m as f64).sqrt())
}

/// One output CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub theta0_or_eta: f64,
    pub snr_db: f64,
    pub trial: usize,
    pub method: String,
    pub m_hat: usize,
    pub success: bool,
    pub abs_error: Option<f64>,
    pub elapsed_ms: f64,
}

impl From<&TrialResult> for ResultRow {
    fn from(r: &TrialResult) -> Self {
        ResultRow {
            scenario_id: r.scenario_id.clone(),
            theta0_or_eta: r.theta0_or_eta,
            snr_db: r.snr_db,
            trial: r.trial,
            method: r.method.clone(),
            m_hat: r.m_hat,
            success: r.success,
            abs_error: r.abs_error,
            elapsed_ms: r.elapsed_ms,
        }
    }
}

pub fn write_results_csv<W: Write>(w: W, results: &[TrialResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in results {
        wtr.serialize(ResultRow::from(r))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

/// Aggregate of one `(scenario, point, method)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub scenario_id: String,
    pub theta0_or_eta: f64,
    pub snr_db: f64,
    pub method: String,
    pub trials: usize,
    pub successes: usize,
    pub probability: f64,
    /// Absent when no trial succeeded.
    pub rmse: Option<f64>,
    pub median_abs_error: Option<f64>,
}

/// Groups rows in order of first appearance. The model order of a group is
/// read off its successful rows, where `m̂ = m`.
pub fn summarize(rows: &[ResultRow]) -> Vec<PointSummary> {
    let mut order: Vec<(String, u64, u64, String)> = Vec::new();
    let mut groups: HashMap<(String, u64, u64, String), Vec<&ResultRow>> = HashMap::new();
    for r in rows {
        let key = (r.scenario_id.clone(), r.theta0_or_eta.to_bits(), r.snr_db.to_bits(), r.method.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&&ResultRow> = g.iter().filter(|r| r.success).collect();
            let mut errs: Vec<f64> = ok.iter().filter_map(|r| r.abs_error).collect();
            let m = ok.first().map_or(0, |r| r.m_hat);
            let rmse = rmse_of(&errs, m).ok();
            errs.sort_by(f64::total_cmp);
            let median_abs_error = match errs.len() {
                0 => None,
                k if k % 2 == 1 => Some(errs[k / 2]),
                k => Some(0.5 * (errs[k / 2 - 1] + errs[k / 2])),
            };
            PointSummary {
                scenario_id: key.0.clone(),
                theta0_or_eta: f64::from_bits(key.1),
                snr_db: f64::from_bits(key.2),
                method: key.3.clone(),
                trials: g.len(),
                successes: ok.len(),
                probability: ok.len() as f64 / g.len() as f64,
                rmse,
                median_abs_error,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(w: W, summary: &[PointSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in summary {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}
