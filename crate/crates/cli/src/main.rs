use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distspec::adaptivity::{adapt, write_trace, AdaptConfig};
use distspec::experiments::{
    gen_data, oracle_select, simulate, sweep_alpha, sweep_n, with_workers, write_records, write_summary_file,
    ExperimentConfig, LambdaRule,
};
use distspec::filters::log_grid;
use distspec::smoothness::{smoothness_report, TargetFunction};
use distspec::theory::{theory_table, SpectrumModel, TheoryParams, THEORY_HEADER};
use distspec::{Error, FilterSpec, SolverPath};

#[derive(Parser)]
#[command(name = "distspec", version, about = "Distributed spectral regularization for kernel regression")]
struct Cli {
    /// Worker threads; all available cores when unset.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Main CSV output; stdout when unset.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Table of parameter choice, rate, block bound and effective dimension.
    Theory(TheoryArgs),
    /// Sine coefficients of a target and its estimated smoothness.
    Smoothness(SmoothnessArgs),
    /// Monte-Carlo runs for one configuration.
    Simulate(ExperimentArgs),
    /// Monte-Carlo runs over a grid of block exponents.
    SweepAlpha(SweepAlphaArgs),
    /// Monte-Carlo runs over sample sizes and block exponents, with slope fits.
    SweepN(SweepNArgs),
    /// Oracle search over the regularization grid.
    Oracle(ExperimentArgs),
    /// Hold-out adaptive choice of block count and regularization.
    Adapt(AdaptArgs),
}

#[derive(Args)]
struct TheoryArgs {
    /// Sample sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1024u64, 4096, 16384])]
    n: Vec<u64>,
    /// Block counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 4, 16, 64])]
    m: Vec<u64>,
    /// Smoothness values.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5f64, 1.0])]
    r: Vec<f64>,
    /// Spectral decay exponent.
    #[arg(long, default_value_t = 2.0)]
    b: f64,
    /// Spectral constant; defaults to the Sobolev kernel value.
    #[arg(long)]
    beta: Option<f64>,
    /// Norm index of the error.
    #[arg(long, default_value_t = 0.0)]
    s: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Radius of the source condition.
    #[arg(long = "radius", default_value_t = 1.0)]
    radius: f64,
}

#[derive(Args)]
struct SmoothnessArgs {
    #[arg(long, default_value = "quadratic-bump")]
    target: TargetFunction,
    #[arg(long = "max-j", default_value_t = 256)]
    max_j: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML file with experiment settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Summary file with means, standard errors and slopes.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    target: Option<TargetFunction>,
    #[arg(long)]
    filter: Option<FilterSpec>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// A number, `oracle` or `theory`.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write zero wall times so output is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0f64, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct SweepNArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![512usize, 1024, 2048, 4096])]
    ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0f64, 0.2, 0.4])]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, default_value = "quadratic-bump")]
    target: TargetFunction,
    #[arg(long, default_value = "tikhonov")]
    filter: FilterSpec,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0.005)]
    sigma: f64,
    /// Seed for the data and the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stopping threshold in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// `lo:hi:points` log grid or a comma-separated list of values.
    #[arg(long, default_value = "1e-6:1:40")]
    lattice: String,
    /// Training fraction of the sample.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Strictly decreasing block counts; derived from the training size when unset.
    #[arg(long, value_delimiter = ',')]
    m_sequence: Option<Vec<usize>>,
    /// Refit the chosen estimator on the whole sample.
    #[arg(long)]
    refit_all: bool,
}

type CliResult<T> = Result<T, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("distspec: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Input(_) => 3,
                Error::Numeric(_) => 4,
            })
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.workers == Some(0) {
        return Err(Error::Config("workers must be positive".into()));
    }
    let out = cli.out.as_deref();
    let workers = cli.workers;
    match cli.command {
        Command::Theory(a) => with_workers(workers, || theory(&a, out))?,
        Command::Smoothness(a) => smoothness(&a, out),
        Command::Simulate(a) => {
            let cfg = experiment_config(&a, workers)?;
            let res = with_workers(cfg.workers, || simulate(&cfg))??;
            emit(out, |w| write_records(w, &res.records))?;
            finish_summary(&a, &res.summaries, &[])
        }
        Command::SweepAlpha(a) => {
            let cfg = experiment_config(&a.exp, workers)?;
            let res = with_workers(cfg.workers, || sweep_alpha(&cfg, &a.alphas))??;
            emit(out, |w| write_records(w, &res.records))?;
            finish_summary(&a.exp, &res.summaries, &[])
        }
        Command::SweepN(a) => {
            let cfg = experiment_config(&a.exp, workers)?;
            let res = with_workers(cfg.workers, || sweep_n(&cfg, &a.ns, &a.alphas))??;
            emit(out, |w| write_records(w, &res.records()))?;
            for s in &res.slopes {
                eprintln!("alpha {}: slope {:.4} (r2 {:.4})", s.alpha, s.slope, s.r2);
            }
            finish_summary(&a.exp, &res.summaries(), &res.slopes)
        }
        Command::Oracle(a) => {
            let cfg = experiment_config(&a, workers)?;
            with_workers(cfg.workers, || oracle(&cfg, out))?
        }
        Command::Adapt(a) => with_workers(workers, || adapt_cmd(&a, out))?,
    }
}

/// Writes to `path`, or to stdout when it is unset.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush().map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Numeric(format!("csv output failed: {e}"))
}

fn experiment_config(a: &ExperimentArgs, workers: Option<usize>) -> CliResult<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = &a.target {
        c.target = t.clone();
    }
    if let Some(f) = &a.filter {
        c.filter = *f;
    }
    if let Some(n) = a.n {
        c.n = n;
    }
    if let Some(alpha) = a.alpha {
        c.alpha = alpha;
    }
    if a.m.is_some() {
        c.m = a.m;
    }
    if let Some(s) = a.sigma {
        c.sigma = s;
    }
    if let Some(l) = &a.lambda {
        c.lambda = parse_lambda(l)?;
    }
    if let Some(r) = a.runs {
        c.runs = r;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if a.no_timing {
        c.record_timing = false;
    }
    if workers.is_some() {
        c.workers = workers;
    }
    c.validate()?;
    Ok(c)
}

fn parse_lambda(s: &str) -> CliResult<LambdaRule> {
    match s.trim().to_ascii_lowercase().as_str() {
        "oracle" => Ok(LambdaRule::Oracle),
        "theory" => Ok(LambdaRule::Theory),
        other => other
            .parse()
            .map(LambdaRule::Explicit)
            .map_err(|_| Error::Config(format!("lambda must be a number, `oracle` or `theory`, got `{s}`"))),
    }
}

fn finish_summary(a: &ExperimentArgs, summaries: &[distspec::experiments::Summary], slopes: &[distspec::experiments::SlopeFit]) -> CliResult<()> {
    match &a.summary {
        Some(p) => write_summary_file(p, summaries, slopes),
        None => Ok(()),
    }
}

fn theory(a: &TheoryArgs, out: Option<&Path>) -> CliResult<()> {
    let beta = a.beta.unwrap_or(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let spectrum = SpectrumModel::power_law(beta, a.b)?;
    let base = TheoryParams::new(a.r.first().copied().unwrap_or(0.5), a.b, a.sigma, a.radius, 1)?
        .with_beta(beta)?
        .with_s(a.s)?;
    let rows = theory_table(&base, &a.n, &a.m, &a.r, &spectrum)?;
    emit(out, |w| {
        let mut c = csv::Writer::from_writer(w);
        if rows.is_empty() {
            c.write_record(THEORY_HEADER.split(',')).map_err(csv_err)?;
        }
        for r in &rows {
            c.serialize(r).map_err(csv_err)?;
        }
        c.flush().map_err(csv_err)
    })
}

fn smoothness(a: &SmoothnessArgs, out: Option<&Path>) -> CliResult<()> {
    let rep = smoothness_report(&a.target, a.max_j)?;
    eprintln!("target: {}", a.target);
    eprintln!("nonzero coefficients: {} of {}", rep.nonzero, rep.coefficients.len());
    if let Some(p) = rep.decay_exponent {
        eprintln!("decay exponent: {p:.4} (r2 {:.4})", rep.fit_r2.unwrap_or(f64::NAN));
    }
    eprintln!("r_max: {:.4} ({:?})", rep.r_max, rep.verdict);
    if let Some(note) = &rep.note {
        eprintln!("note: {note}");
    }
    emit(out, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["j", "c_j"]).map_err(csv_err)?;
        for (i, v) in rep.coefficients.iter().enumerate() {
            c.write_record([(i + 1).to_string(), v.to_string()]).map_err(csv_err)?;
        }
        c.flush().map_err(csv_err)
    })
}

fn oracle(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<()> {
    let grid = cfg.grid.params(&cfg.filter)?;
    let res = oracle_select(cfg, &grid)?;
    eprintln!(
        "best lambda {} (index {}, rms H_K error {:.6e})",
        res.best.lambda, res.index, res.rms_errors[res.index]
    );
    emit(out, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["lambda", "k", "rms_hk_error"]).map_err(csv_err)?;
        for (p, e) in res.grid.iter().zip(&res.rms_errors) {
            let k = p.iterations.map(|k| k.to_string()).unwrap_or_default();
            c.write_record([p.lambda.to_string(), k, e.to_string()]).map_err(csv_err)?;
        }
        c.flush().map_err(csv_err)
    })
}

/// `lo:hi:points` as a log grid, otherwise a comma-separated list.
fn parse_lattice(s: &str) -> CliResult<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse lattice `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let k: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && k > 0) {
            return Err(bad());
        }
        return Ok(log_grid(lo, hi, k));
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn adapt_cmd(a: &AdaptArgs, out: Option<&Path>) -> CliResult<()> {
    let (x, y) = gen_data(&a.target, a.n, a.sigma, a.seed)?;
    let cfg = AdaptConfig {
        delta: a.delta,
        lattice: parse_lattice(&a.lattice)?,
        m_sequence: a.m_sequence.clone(),
        train_fraction: a.split,
        seed: a.seed,
        refit_on_all: a.refit_all,
        path: SolverPath::Auto,
    };
    let res = adapt(&distspec::Kernel::sobolev_min(), &a.filter, &x, &y, &cfg)?;
    eprintln!(
        "k* = {}, m* = {}, lambda = {}, rule {}",
        res.k_star,
        res.m_star,
        res.lambda_hat,
        if res.triggered { "fired" } else { "did not fire" }
    );
    emit(out, |w| write_trace(w, &res.trace))
}
