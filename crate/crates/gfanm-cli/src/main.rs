use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gfanm_core::anm::{estimate, EstimateOptions};
use gfanm_core::baselines::{anm_delay, subspace_estimate, OrderRule, SubspaceMethod};
use gfanm_core::cfdecomp::{cf_decompose_with, CenterRule, CfOptions, DEFAULT_EPS1, DEFAULT_GRID};
use gfanm_core::covariance::StateCovariance;
use gfanm_core::experiment::{read_results_csv, run_scenario, summarize, write_results_csv, write_summary_csv, Method, RunOptions, Scenario};
use gfanm_core::gfilter::{FilterSpec, GFilter, DEFAULT_EPSILON};
use gfanm_core::numerics::C64;
use gfanm_core::signal::{snr_to_sigma2, synthesize, LineSpectrum, SignalRecord};
use gfanm_core::Error;

#[derive(Parser)]
#[command(name = "gfanm", version, about = "Line spectral estimation with G-filter atomic norm minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the gain of a filter bank as CSV (theta, gain).
    Design(DesignArgs),
    /// Synthesize a noisy sum of cisoids.
    Simulate(SimulateArgs),
    /// Decompose a rank-deficient state covariance into atoms.
    Decompose(DecomposeArgs),
    /// Estimate frequencies from a signal record.
    Estimate(EstimateArgs),
    /// Run a comparison method on a signal record.
    Baseline(BaselineArgs),
    /// Run a Monte Carlo scenario and write one CSV row per trial.
    Montecarlo(MonteCarloArgs),
    /// Aggregate Monte Carlo CSV files per point and method.
    Report(ReportArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// Filter JSON.
    #[arg(long)]
    filter: PathBuf,
    /// Number of equispaced frequencies.
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Line spectrum JSON: {"freqs": [...], "amps": [[re, im], ...]}.
    #[arg(long, conflicts_with_all = ["freqs", "moduli", "phases"])]
    spectrum: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    freqs: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    moduli: Vec<f64>,
    /// Amplitude phases; zero when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    phases: Vec<f64>,
    #[arg(long)]
    length: usize,
    /// Noise variance.
    #[arg(long, conflicts_with = "snr_db")]
    sigma2: Option<f64>,
    /// SNR relative to --snr-ref.
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    snr_ref: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output (t, re, im); stdout when neither output is given.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Argmin,
    Mean,
}

impl From<CenterArg> for CenterRule {
    fn from(c: CenterArg) -> Self {
        match c {
            CenterArg::Argmin => CenterRule::Argmin,
            CenterArg::Mean => CenterRule::Mean,
        }
    }
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    filter: PathBuf,
    /// Covariance JSON {n, re, im}.
    #[arg(long)]
    sigma: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_EPS1)]
    eps1: f64,
    #[arg(long, value_enum, default_value_t = CenterArg::Argmin)]
    center: CenterArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the projection scan as CSV (theta, dbar).
    #[arg(long)]
    scan: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateFlags {
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_EPS1)]
    eps1: f64,
    #[arg(long, default_value_t = gfanm_core::anm::DEFAULT_EPS2)]
    eps2: f64,
    /// Regularization weight, replacing the noise-based heuristic.
    #[arg(long)]
    lambda: Option<f64>,
    /// Solve the noiseless problem.
    #[arg(long)]
    noiseless: bool,
    /// Skip the dual solve and its cross-checks.
    #[arg(long)]
    no_dual: bool,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    truncation_epsilon: f64,
}

impl EstimateFlags {
    fn options(&self) -> EstimateOptions {
        EstimateOptions {
            truncation_epsilon: self.truncation_epsilon,
            grid_size: self.grid,
            eps1: self.eps1,
            eps2: self.eps2,
            lambda: self.lambda,
            noiseless: self.noiseless,
            dual: !self.no_dual,
            ..EstimateOptions::default()
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    filter: PathBuf,
    /// Signal CSV (t, re, im).
    #[arg(long)]
    signal: PathBuf,
    #[command(flatten)]
    flags: EstimateFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the optimal covariance as JSON.
    #[arg(long)]
    sigma_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Music,
    Esprit,
    AnmDelay,
}

#[derive(Args)]
struct BaselineArgs {
    /// Filter JSON; its size sets the delay bank size for anm-delay.
    #[arg(long)]
    filter: Option<PathBuf>,
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, value_enum)]
    method: BaselineMethod,
    /// aic, bic, true or fixed:k.
    #[arg(long, default_value = "aic")]
    order: String,
    /// True model order, for --order true.
    #[arg(long)]
    m: Option<usize>,
    /// Snapshot window; half the record length by default.
    #[arg(long)]
    window: Option<usize>,
    /// Delay bank size for anm-delay.
    #[arg(long)]
    delay_n: Option<usize>,
    #[command(flatten)]
    flags: EstimateFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[arg(long)]
    config: PathBuf,
    /// ganm, anm-delay, music[:order] or esprit[:order].
    #[arg(long, default_value = "ganm")]
    method: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Record wall-clock time per trial (the CSV is then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(1, format!("{}: {e}", path.display())))
}

fn load_filter(path: &Path) -> Result<GFilter, Failure> {
    let spec = FilterSpec::from_json(&read_text(path)?)?;
    Ok(spec.build()?)
}

fn load_signal(path: &Path) -> Result<SignalRecord, Failure> {
    let file = File::open(path).map_err(|e| fail(1, format!("{}: {e}", path.display())))?;
    Ok(SignalRecord::read_csv(file)?)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| fail(1, format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn design(a: DesignArgs) -> Result<(), Failure> {
    let f = load_filter(&a.filter)?;
    if a.points == 0 {
        return Err(fail(1, "--points must be positive"));
    }
    eprintln!("n = {}, truncation length = {}", f.n(), f.truncation_length(DEFAULT_EPSILON));
    let mut w = sink(a.out.as_deref())?;
    writeln!(w, "theta,gain")?;
    for l in 0..a.points {
        let th = l as f64 * std::f64::consts::TAU / a.points as f64;
        writeln!(w, "{th},{}", f.gain(th))?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let spec = match &a.spectrum {
        Some(p) => serde_json::from_str::<LineSpectrum>(&read_text(p)?)?,
        None => {
            let m = a.freqs.len();
            if a.moduli.len() != m || !(a.phases.is_empty() || a.phases.len() == m) {
                return Err(fail(1, "--freqs, --moduli and --phases must have equal lengths"));
            }
            let amps = (0..m)
                .map(|k| C64::from_polar(a.moduli[k], a.phases.get(k).copied().unwrap_or(0.0)))
                .collect();
            LineSpectrum::new(a.freqs.clone(), amps)?
        }
    };
    let sigma2 = match (a.sigma2, a.snr_db) {
        (Some(s), _) => s,
        (None, Some(db)) => snr_to_sigma2(db, a.snr_ref),
        (None, None) => 0.0,
    };
    let rec = synthesize(&spec, a.length, sigma2, a.seed);
    if a.csv.is_some() || a.json.is_none() {
        let mut w = sink(a.csv.as_deref())?;
        rec.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(p) = &a.json {
        fs::write(p, rec.to_json()?)?;
    }
    Ok(())
}

fn decompose(a: DecomposeArgs) -> Result<(), Failure> {
    let f = load_filter(&a.filter)?;
    let sigma = StateCovariance::from_json(&read_text(&a.sigma)?)?;
    let opts = CfOptions {
        grid_size: a.grid,
        eps1: a.eps1,
        center: a.center.into(),
    };
    let d = cf_decompose_with(&f, &sigma, opts)?;
    write_json(a.out.as_deref(), &d)?;
    if let Some(p) = &a.scan {
        let mut w = sink(Some(p))?;
        writeln!(w, "theta,dbar")?;
        if let Some(scan) = &d.scan {
            for (l, v) in scan.values.iter().enumerate() {
                writeln!(w, "{},{v}", scan.theta(l))?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn estimate_cmd(a: EstimateArgs) -> Result<(), Failure> {
    let f = load_filter(&a.filter)?;
    let rec = load_signal(&a.signal)?;
    let report = estimate(&f, &rec, &a.flags.options())?;
    if let Some(p) = &a.sigma_out {
        fs::write(p, report.sigma.to_json()?)?;
    }
    write_json(a.out.as_deref(), &report)
}

fn baseline(a: BaselineArgs) -> Result<(), Failure> {
    let rec = load_signal(&a.signal)?;
    match a.method {
        BaselineMethod::AnmDelay => {
            let n = match (a.delay_n, &a.filter) {
                (Some(n), _) => n,
                (None, Some(p)) => load_filter(p)?.n(),
                (None, None) => return Err(fail(1, "anm-delay needs --delay-n or --filter")),
            };
            let report = anm_delay(&rec, n, &a.flags.options())?;
            write_json(a.out.as_deref(), &report)
        }
        BaselineMethod::Music | BaselineMethod::Esprit => {
            let rule: OrderRule = a.order.parse()?;
            let method = if matches!(a.method, BaselineMethod::Music) {
                SubspaceMethod::Music
            } else {
                SubspaceMethod::Esprit
            };
            let report = subspace_estimate(&rec, method, rule, a.m, a.window, a.flags.grid)?;
            write_json(a.out.as_deref(), &report)
        }
    }
}

fn montecarlo(a: MonteCarloArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.config).map_err(|e| fail(2, format!("{}: {e}", a.config.display())))?;
    let mut scenario = Scenario::from_json(&text)?;
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    if let Some(t) = a.trials {
        scenario.trials = t;
    }
    scenario.validate()?;
    let method: Method = a.method.parse().map_err(|e: Error| fail(2, e.to_string()))?;
    let mut opts = RunOptions::new(method);
    opts.timing = a.timing;
    let results = run_scenario(&scenario, &opts)?;
    for r in results.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "point {} trial {}: {}",
            r.point,
            r.trial,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let file = File::create(&a.out).map_err(|e| fail(1, format!("{}: {e}", a.out.display())))?;
    write_results_csv(BufWriter::new(file), &results)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let file = File::open(p).map_err(|e| fail(1, format!("{}: {e}", p.display())))?;
        rows.extend(read_results_csv(file)?);
    }
    let summary = summarize(&rows);
    if a.out.is_some() || a.json.is_none() {
        write_summary_csv(sink(a.out.as_deref())?, &summary)?;
    }
    if let Some(p) = &a.json {
        write_json(Some(p), &summary)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Design(a) => design(a),
        Command::Simulate(a) => simulate(a),
        Command::Decompose(a) => decompose(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Baseline(a) => baseline(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
