//! Monte-Carlo harness: synthetic data, oracle parameter choice, H_K and L²
//! errors, and sweeps over the number of blocks and the sample size.
//!
//! Every random draw comes from a stream keyed by `(master seed, phase, n, run)`,
//! so results do not depend on the worker count or on scheduling.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distributed::{fit_distributed_many, partition};
use crate::error::{input, Error, Result};
use crate::estimator::{BlockSolver, KernelExpansion, SolverPath};
use crate::filters::{log_grid, FilterSpec, LambdaParam};
use crate::kernels::{dot, AnchorOperator, Kernel};
use crate::quad::Composite;
use crate::rng;
use crate::smoothness::{linear_fit, TargetFunction};
use crate::theory::{lambda_choice, TheoryParams};

const TAG_DATA: u64 = 0x4441_5441;
const TAG_ORACLE: u64 = 0x4f52_434c;

/// Above this many anchors `HkMethod::Auto` integrates derivatives instead of
/// forming the quadratic form.
pub const QUADRATURE_THRESHOLD: usize = 8192;

/// `x_i ~ U[0,1]`, `y_i = f(x_i) + ε_i`, `ε_i ~ N(0, σ²)`.
pub fn gen_data(target: &TargetFunction, n: usize, sigma: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return input("n must be positive");
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return input(format!("sigma must be finite and nonnegative, got {sigma}"));
    }
    let mut rng = rng::stream(seed, &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y = x
        .iter()
        .map(|&v| {
            let eps: f64 = normal.sample(&mut rng);
            target.eval(v) + sigma * eps
        })
        .collect();
    Ok((x, y))
}

/// Reusable `‖f̂ - f‖_{H_K}` for expansions over a fixed set of anchors.
pub struct HkEvaluator {
    op: AnchorOperator,
    fvals: Vec<f64>,
    norm_sq: f64,
}

impl HkEvaluator {
    pub fn new(kernel: &Kernel, anchors: &[f64], target: &TargetFunction) -> Result<Self> {
        let norm_sq = target
            .rkhs_norm_sq()
            .ok_or_else(|| Error::Input(format!("H_K norm of target `{}` is unknown", target.name())))?;
        Ok(HkEvaluator {
            op: kernel.operator(anchors),
            fvals: anchors.iter().map(|&x| target.eval(x)).collect(),
            norm_sq,
        })
    }

    /// `√(αᵀGα - 2 Σ α_j f(x_j) + ‖f‖²)`, clamped at 0 within `-1e-10`.
    pub fn error(&self, alpha: &[f64]) -> f64 {
        let sq = self.op.quadratic_form(alpha) - 2.0 * dot(alpha, &self.fvals) + self.norm_sq;
        if (-1e-10..0.0).contains(&sq) {
            0.0
        } else {
            sq.sqrt()
        }
    }
}

/// `‖f̂ - f‖_{H_K}` via the reproducing property.
pub fn hk_error(f_hat: &KernelExpansion, target: &TargetFunction) -> Result<f64> {
    let ev = HkEvaluator::new(f_hat.kernel(), f_hat.points(), target)?;
    let e = ev.error(f_hat.coefficients());
    if e.is_nan() {
        return Err(Error::Numeric("negative squared H_K error".into()));
    }
    Ok(e)
}

/// `(∫ (f̂' - f')²)^{1/2}` for the kernel `min(x,t) - xt`, where
/// `f̂'(x) = Σ_{x_j > x} α_j - Σ α_j x_j` is constant between anchors.
/// Uses at least 2048 Gauss–Legendre nodes in total.
pub fn hk_error_quadrature(f_hat: &KernelExpansion, target: &TargetFunction) -> Result<f64> {
    if !matches!(f_hat.kernel(), Kernel::SobolevMin) {
        return input("derivative quadrature needs the kernel min(x,t) - xt");
    }
    if !target.has_derivative() {
        return input(format!("target `{}` has no derivative", target.name()));
    }
    let mut pairs: Vec<(f64, f64)> = f_hat
        .points()
        .iter()
        .copied()
        .zip(f_hat.coefficients().iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_ax: f64 = pairs.iter().map(|(x, a)| x * a).sum();
    // slope on (x_{p-1}, x_p) is Σ_{q ≥ p} α_q - Σ α x
    let mut suffix = vec![0.0; pairs.len() + 1];
    for p in (0..pairs.len()).rev() {
        suffix[p] = suffix[p + 1] + pairs[p].1;
    }
    let mut breaks = Vec::with_capacity(pairs.len() + 2);
    breaks.push(0.0);
    breaks.extend(pairs.iter().map(|p| p.0));
    breaks.push(1.0);
    let order = 8usize.max(2048usize.div_ceil(breaks.len() - 1));
    let q = Composite::on_breaks(&breaks, order);
    let per_piece = order;
    let mut sum = 0.0;
    let mut piece = 0;
    let mut idx = 0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let slope = suffix[piece] - total_ax;
            for _ in 0..per_piece {
                let d = slope - target.derivative(q.nodes[idx]).unwrap();
                sum += q.weights[idx] * d * d;
                idx += 1;
            }
        }
        piece += 1;
    }
    Ok(sum.max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HkMethod {
    Exact,
    Quadrature,
    /// Quadrature above `QUADRATURE_THRESHOLD` anchors when available.
    #[default]
    Auto,
}

pub fn hk_error_with(f_hat: &KernelExpansion, target: &TargetFunction, method: HkMethod) -> Result<f64> {
    let use_quad = match method {
        HkMethod::Exact => false,
        HkMethod::Quadrature => true,
        HkMethod::Auto => {
            f_hat.len() > QUADRATURE_THRESHOLD
                && matches!(f_hat.kernel(), Kernel::SobolevMin)
                && target.has_derivative()
        }
    };
    if use_quad {
        hk_error_quadrature(f_hat, target)
    } else {
        hk_error(f_hat, target)
    }
}

/// `(∫₀¹ (f̂ - f)²)^{1/2}` by composite Gauss–Legendre with at least
/// `quad_nodes` nodes; for `min(x,t) - xt` the panels break at the anchors.
pub fn l2_error(f_hat: &KernelExpansion, target: &TargetFunction, quad_nodes: usize) -> Result<f64> {
    if quad_nodes < 64 {
        return input(format!("need at least 64 quadrature nodes, got {quad_nodes}"));
    }
    let q = match f_hat.kernel() {
        Kernel::SobolevMin => {
            let mut breaks: Vec<f64> = f_hat.points().to_vec();
            breaks.push(0.0);
            breaks.push(1.0);
            breaks.sort_by(f64::total_cmp);
            breaks.dedup();
            let order = 4usize.max(quad_nodes.div_ceil(breaks.len() - 1));
            Composite::on_breaks(&breaks, order)
        }
        Kernel::Custom(_) => Composite::uniform(0.0, 1.0, quad_nodes.div_ceil(16), 16),
    };
    let pred = f_hat.predict_many(&q.nodes);
    let sum: f64 = q
        .nodes
        .iter()
        .zip(&q.weights)
        .zip(&pred)
        .map(|((&x, &w), &p)| w * (p - target.eval(x)).powi(2))
        .sum();
    Ok(sum.sqrt())
}

/// Kernels addressable from configuration files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    #[default]
    SobolevMin,
}

impl KernelChoice {
    pub fn kernel(&self) -> Kernel {
        match self {
            KernelChoice::SobolevMin => Kernel::sobolev_min(),
        }
    }
}

/// How the regularization parameter is fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LambdaRule {
    Explicit(f64),
    /// Minimizer of the root-mean H_K error over fresh single-machine runs.
    #[default]
    Oracle,
    /// `λ_n` from the closed-form choice with the `[theory]` parameters.
    Theory,
}

impl Serialize for LambdaRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaRule::Explicit(v) => s.serialize_f64(*v),
            LambdaRule::Oracle => s.serialize_str("oracle"),
            LambdaRule::Theory => s.serialize_str("theory"),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LambdaRule::Explicit(v)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for LambdaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle" => Ok(LambdaRule::Oracle),
            "theory" => Ok(LambdaRule::Theory),
            other => other
                .parse::<f64>()
                .map(LambdaRule::Explicit)
                .map_err(|_| Error::Config(format!("lambda must be a number, `oracle` or `theory`, got `{other}`"))),
        }
    }
}

mod filter_name {
    use super::*;

    pub fn serialize<S: Serializer>(f: &FilterSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<FilterSpec, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Prior parameters for `LambdaRule::Theory`; noise comes from the experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySettings {
    pub r: f64,
    pub b: f64,
    #[serde(rename = "R")]
    pub radius: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        TheorySettings {
            r: 0.5,
            b: 2.0,
            radius: 1.0,
        }
    }
}

/// Oracle search grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub points: usize,
    /// Largest iteration count for iterative filters; derived from `lambda_min` when unset.
    pub k_max: Option<usize>,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            lambda_min: 1e-6,
            lambda_max: 1.0,
            points: 40,
            k_max: None,
        }
    }
}

impl GridSettings {
    /// Log-spaced `λ` values, or `k = 1..k_max` for iterative filters.
    pub fn params(&self, filter: &FilterSpec) -> Result<Vec<LambdaParam>> {
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0) {
            return input(format!(
                "grid needs 0 < lambda_min <= lambda_max <= 1, got [{}, {}]",
                self.lambda_min, self.lambda_max
            ));
        }
        if filter.is_iterative() {
            let k_max = match self.k_max {
                Some(k) => k,
                None => filter.param(self.lambda_min)?.iterations.unwrap_or(1),
            };
            if k_max == 0 {
                return input("k_max must be at least 1");
            }
            (1..=k_max).map(|k| filter.param_from_iterations(k)).collect()
        } else {
            if self.points == 0 {
                return input("grid needs at least one point");
            }
            log_grid(self.lambda_min, self.lambda_max, self.points)
                .into_iter()
                .map(|l| filter.param(l))
                .collect()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetFunction,
    pub kernel: KernelChoice,
    #[serde(with = "filter_name")]
    pub filter: FilterSpec,
    pub n: usize,
    /// `m = max(1, round(n^α))` unless `m` is given.
    pub alpha: f64,
    pub m: Option<usize>,
    pub sigma: f64,
    pub lambda: LambdaRule,
    /// Monte-Carlo runs `M`.
    pub runs: usize,
    /// Runs for the oracle search; defaults to `runs`.
    pub oracle_runs: Option<usize>,
    pub seed: u64,
    /// Worker threads; all available when unset.
    pub workers: Option<usize>,
    pub path: SolverPath,
    pub hk_method: HkMethod,
    pub l2_nodes: usize,
    /// Write measured wall time; when false the column is 0 and output is reproducible byte for byte.
    pub record_timing: bool,
    pub grid: GridSettings,
    pub theory: TheorySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            target: TargetFunction::quadratic_bump(),
            kernel: KernelChoice::SobolevMin,
            filter: FilterSpec::nu_method(1.0).expect("nu = 1 is valid"),
            n: 1024,
            alpha: 0.0,
            m: None,
            sigma: 0.005,
            lambda: LambdaRule::Oracle,
            runs: 30,
            oracle_runs: None,
            seed: 0,
            workers: None,
            path: SolverPath::Auto,
            hk_method: HkMethod::Auto,
            l2_nodes: 2048,
            record_timing: true,
            grid: GridSettings::default(),
            theory: TheorySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.runs == 0 || self.oracle_runs == Some(0) {
            return Err(Error::Config("runs must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let LambdaRule::Explicit(l) = self.lambda {
            if !(l > 0.0 && l <= 1.0) {
                return Err(Error::Config(format!("lambda must lie in (0, 1], got {l}")));
            }
        }
        self.m_for(self.n, self.alpha).map(|_| ())
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel.kernel()
    }

    /// Explicit `m`, else `max(1, round(n^α))`; must not exceed `n`.
    pub fn m_for(&self, n: usize, alpha: f64) -> Result<usize> {
        let m = self.m.unwrap_or_else(|| blocks_for(n, alpha));
        if m == 0 || m > n {
            return Err(Error::Config(format!("m = {m} blocks is invalid for n = {n}")));
        }
        Ok(m)
    }
}

/// `max(1, round(n^α))`.
pub fn blocks_for(n: usize, alpha: f64) -> usize {
    ((n as f64).powf(alpha).round() as usize).max(1)
}

/// Runs `f` on a pool with the requested number of threads.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {w} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Seed of the data set for `(phase, n, run)`.
pub fn data_seed(master: u64, phase: u64, n: usize, run: usize) -> u64 {
    rng::derive_seed(master, &[phase, n as u64, run as u64])
}

/// Outcome of the oracle search.
#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub best: LambdaParam,
    pub index: usize,
    pub grid: Vec<LambdaParam>,
    /// `((1/M) Σ ‖f̂ - f‖²_{H_K})^{1/2}` for every grid point.
    pub rms_errors: Vec<f64>,
}

/// Grid point with the smallest root-mean H_K error over `oracle_runs`
/// single-machine fits on fresh data. Ties go to the larger `λ` (smaller `k`).
pub fn oracle_select(config: &ExperimentConfig, grid: &[LambdaParam]) -> Result<OracleResult> {
    oracle_select_n(config, config.n, grid)
}

pub fn oracle_select_n(config: &ExperimentConfig, n: usize, grid: &[LambdaParam]) -> Result<OracleResult> {
    if grid.is_empty() {
        return input("oracle grid is empty");
    }
    let kernel = config.kernel();
    let runs = config.oracle_runs.unwrap_or(config.runs);
    let per_run: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let (x, y) = gen_data(&config.target, n, config.sigma, data_seed(config.seed, TAG_ORACLE, n, run))?;
            let solver = BlockSolver::new(&kernel, &config.filter, &x, &y, config.path)?;
            let ev = HkEvaluator::new(&kernel, &x, &config.target)?;
            let mut errs = vec![0.0; grid.len()];
            solver.for_each(grid, |i, alpha| errs[i] = ev.error(alpha))?;
            Ok(errs)
        })
        .collect::<Result<_>>()?;
    let rms_errors: Vec<f64> = (0..grid.len())
        .map(|i| (per_run.iter().map(|e| e[i] * e[i]).sum::<f64>() / runs as f64).sqrt())
        .collect();
    let mut index = 0;
    for i in 1..grid.len() {
        let (e, best) = (rms_errors[i], rms_errors[index]);
        if e < best || (e == best && grid[i].lambda > grid[index].lambda) {
            index = i;
        }
    }
    Ok(OracleResult {
        best: grid[index],
        index,
        grid: grid.to_vec(),
        rms_errors,
    })
}

/// One Monte-Carlo run; the CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub k: Option<usize>,
    pub run: usize,
    pub hk_error: f64,
    pub l2_error: f64,
    pub wall_ms: f64,
}

pub const RUN_HEADER: &str = "n,m,alpha,lambda,k,run,hk_error,l2_error,wall_ms";

/// Mean and standard error over runs for one `(n, m)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub k: Option<usize>,
    pub runs: usize,
    pub hk_mean: f64,
    pub hk_se: f64,
    pub hk_min: f64,
    pub hk_max: f64,
    pub l2_mean: f64,
    pub l2_se: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl Summary {
    pub fn of(records: &[RunRecord]) -> Result<Summary> {
        let first = records.first().ok_or_else(|| Error::Input("no runs to summarize".into()))?;
        let hk: Vec<f64> = records.iter().map(|r| r.hk_error).collect();
        let l2: Vec<f64> = records.iter().map(|r| r.l2_error).collect();
        let (hk_mean, hk_se) = mean_se(&hk);
        let (l2_mean, l2_se) = mean_se(&l2);
        Ok(Summary {
            n: first.n,
            m: first.m,
            alpha: first.alpha,
            lambda: first.lambda,
            k: first.k,
            runs: records.len(),
            hk_mean,
            hk_se,
            hk_min: hk.iter().copied().fold(f64::INFINITY, f64::min),
            hk_max: hk.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            l2_mean,
            l2_se,
        })
    }
}

/// Results of a sweep over block counts at one sample size.
#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub n: usize,
    pub param: LambdaParam,
    pub oracle: Option<OracleResult>,
    /// Ordered by `(α, run)`.
    pub records: Vec<RunRecord>,
    /// One per `α`, in input order.
    pub summaries: Vec<Summary>,
}

impl SweepResult {
    pub fn summary_at(&self, alpha: f64) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.alpha == alpha)
    }
}

/// Parameter for sample size `n` under the configured rule.
pub fn resolve_param(config: &ExperimentConfig, n: usize) -> Result<(LambdaParam, Option<OracleResult>)> {
    match config.lambda {
        LambdaRule::Explicit(l) => Ok((config.filter.param(l)?, None)),
        LambdaRule::Theory => {
            let t = &config.theory;
            let p = TheoryParams::new(t.r, t.b, config.sigma, t.radius, n as u64)?;
            Ok((config.filter.param(lambda_choice(&p))?, None))
        }
        LambdaRule::Oracle => {
            let grid = config.grid.params(&config.filter)?;
            let o = oracle_select_n(config, n, &grid)?;
            Ok((o.best, Some(o)))
        }
    }
}

/// Distributed fits for every `α` in `alphas` at the configured `n`, with one
/// parameter chosen from the full sample. Data for a run is shared by all `α`.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: &[f64]) -> Result<SweepResult> {
    sweep_alpha_n(config, config.n, alphas)
}

pub fn sweep_alpha_n(config: &ExperimentConfig, n: usize, alphas: &[f64]) -> Result<SweepResult> {
    if alphas.is_empty() {
        return input("alpha grid is empty");
    }
    let (param, oracle) = resolve_param(config, n)?;
    let ms: Vec<usize> = alphas
        .iter()
        .map(|&a| config.m_for(n, a))
        .collect::<Result<_>>()?;
    let kernel = config.kernel();
    let per_run: Vec<Vec<RunRecord>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let (x, y) = gen_data(&config.target, n, config.sigma, data_seed(config.seed, TAG_DATA, n, run))?;
            alphas
                .iter()
                .zip(&ms)
                .map(|(&alpha, &m)| {
                    let start = Instant::now();
                    let part = partition(n, m, None)?;
                    let avg = fit_distributed_many(&kernel, &config.filter, &[param], &x, &y, &part, config.path)?
                        .remove(0);
                    let wall_ms = if config.record_timing {
                        start.elapsed().as_secs_f64() * 1e3
                    } else {
                        0.0
                    };
                    let combined = avg.combined();
                    Ok(RunRecord {
                        n,
                        m,
                        alpha: if config.m.is_some() { effective_alpha(n, m) } else { alpha },
                        lambda: param.lambda,
                        k: param.iterations,
                        run,
                        hk_error: hk_error_with(&combined, &config.target, config.hk_method)?,
                        l2_error: l2_error(&combined, &config.target, config.l2_nodes)?,
                        wall_ms,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(config.runs * alphas.len());
    let mut summaries = Vec::with_capacity(alphas.len());
    for a in 0..alphas.len() {
        let cell: Vec<RunRecord> = per_run.iter().map(|r| r[a].clone()).collect();
        summaries.push(Summary::of(&cell)?);
        records.extend(cell);
    }
    Ok(SweepResult {
        n,
        param,
        oracle,
        records,
        summaries,
    })
}

/// `log m / log n`.
pub fn effective_alpha(n: usize, m: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (m as f64).ln() / (n as f64).ln()
    }
}

/// One configuration at its own `α` (or `m`).
pub fn simulate(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    sweep_alpha(config, &[config.alpha])
}

/// Log-log fit of mean H_K error against `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub alpha: f64,
    pub slope: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepNResult {
    pub per_n: Vec<SweepResult>,
    /// One fit per `α`; empty with fewer than two sample sizes.
    pub slopes: Vec<SlopeFit>,
}

impl SweepNResult {
    pub fn slope_at(&self, alpha: f64) -> Option<f64> {
        self.slopes.iter().find(|s| s.alpha == alpha).map(|s| s.slope)
    }

    pub fn records(&self) -> Vec<RunRecord> {
        self.per_n.iter().flat_map(|s| s.records.iter().cloned()).collect()
    }

    pub fn summaries(&self) -> Vec<Summary> {
        self.per_n.iter().flat_map(|s| s.summaries.iter().cloned()).collect()
    }
}

/// `sweep_alpha` at every `n`, each with its own parameter choice.
pub fn sweep_n(config: &ExperimentConfig, ns: &[usize], alphas: &[f64]) -> Result<SweepNResult> {
    if ns.is_empty() {
        return input("sample-size grid is empty");
    }
    let per_n: Vec<SweepResult> = ns
        .iter()
        .map(|&n| sweep_alpha_n(config, n, alphas))
        .collect::<Result<_>>()?;
    let mut slopes = Vec::new();
    if ns.len() >= 2 {
        for (a, &alpha) in alphas.iter().enumerate() {
            let pts: Vec<(f64, f64)> = per_n
                .iter()
                .map(|s| ((s.n as f64).ln(), s.summaries[a].hk_mean.ln()))
                .collect();
            let (slope, r2) = linear_fit(&pts);
            slopes.push(SlopeFit { alpha, slope, r2 });
        }
    }
    Ok(SweepNResult { per_n, slopes })
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Numeric(format!("csv output failed: {e}"))
}

/// Rows with header `n,m,alpha,lambda,k,run,hk_error,l2_error,wall_ms`.
pub fn write_records<W: Write>(w: W, records: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(csv_err)?;
    }
    if records.is_empty() {
        out.write_record(RUN_HEADER.split(',')).map_err(csv_err)?;
    }
    out.flush().map_err(csv_err)
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    String::from_utf8(buf).map_err(csv_err)
}

pub fn write_summaries<W: Write>(w: W, summaries: &[Summary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in summaries {
        out.serialize(s).map_err(csv_err)?;
    }
    out.flush().map_err(csv_err)
}

/// Summary file: per-cell means and standard errors followed by slope fits.
pub fn write_summary_file(path: impl AsRef<Path>, summaries: &[Summary], slopes: &[SlopeFit]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::Config(format!("cannot write {}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_summaries(&mut f, summaries)?;
    if !slopes.is_empty() {
        writeln!(f).map_err(io)?;
        writeln!(f, "alpha,slope,r2").map_err(io)?;
        for s in slopes {
            writeln!(f, "{},{},{}", s.alpha, s.slope, s.r2).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fit_spectral;

    fn small(n: usize) -> ExperimentConfig {
        ExperimentConfig {
            n,
            runs: 3,
            record_timing: false,
            filter: FilterSpec::tikhonov(),
            lambda: LambdaRule::Explicit(1e-3),
            ..Default::default()
        }
    }

    #[test]
    fn data_generation() {
        let t = TargetFunction::quadratic_bump();
        let (x, y) = gen_data(&t, 50, 0.0, 3).unwrap();
        assert!(x.iter().zip(&y).all(|(&a, &b)| b == t.eval(a)));
        assert_eq!(gen_data(&t, 50, 0.1, 3).unwrap(), gen_data(&t, 50, 0.1, 3).unwrap());
        let (x, _) = gen_data(&t, 100_000, 0.1, 11).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!((0.497..=0.503).contains(&mean));
    }

    #[test]
    fn error_of_zero_estimator_is_the_target_norm() {
        let t = TargetFunction::quadratic_bump();
        let z = KernelExpansion::zero(Kernel::sobolev_min());
        assert!((hk_error(&z, &t).unwrap() - (1.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!((l2_error(&z, &t, 64).unwrap() - (1.0f64 / 120.0).sqrt()).abs() < 1e-14);
        let e = KernelExpansion::new(Kernel::sobolev_min(), vec![0.3, 0.6], vec![1.0, -2.0]).unwrap();
        let zero = TargetFunction::zero();
        assert!((hk_error(&e, &zero).unwrap() - e.rkhs_norm_sq().sqrt()).abs() < 1e-15);
        assert!(hk_error(&e, &TargetFunction::custom("u", |x| x * (1.0 - x))).is_err());
    }

    #[test]
    fn quadrature_oracle_agrees() {
        let t = TargetFunction::quadratic_bump();
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        for seed in 0..5 {
            let (x, y) = gen_data(&t, 64, 0.005, seed).unwrap();
            let e = fit_spectral(&k, &f, &f.param(1e-3).unwrap(), &x, &y).unwrap();
            let a = hk_error(&e, &t).unwrap();
            let b = hk_error_quadrature(&e, &t).unwrap();
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn l2_is_dominated_by_hk() {
        let t = TargetFunction::scaled_sine();
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        for seed in 0..10 {
            let (x, y) = gen_data(&t, 40, 0.05, seed).unwrap();
            let e = fit_spectral(&k, &f, &f.param(0.01).unwrap(), &x, &y).unwrap();
            assert!(l2_error(&e, &t, 256).unwrap() <= 0.5 * hk_error(&e, &t).unwrap() + 1e-8);
        }
        assert!(l2_error(&KernelExpansion::zero(k), &t, 32).is_err());
    }

    #[test]
    fn oracle_grid_edge_cases() {
        let c = small(64);
        let one = vec![c.filter.param(0.01).unwrap()];
        assert_eq!(oracle_select(&c, &one).unwrap().best, one[0]);
        assert!(oracle_select(&c, &[]).is_err());

        let noiseless = ExperimentConfig {
            sigma: 0.0,
            filter: FilterSpec::spectral_cutoff(),
            ..small(64)
        };
        let grid = GridSettings {
            lambda_min: 1e-4,
            points: 12,
            ..Default::default()
        }
        .params(&noiseless.filter)
        .unwrap();
        let o = oracle_select(&noiseless, &grid).unwrap();
        assert_eq!(o.best.lambda, 1e-4);
    }

    #[test]
    fn iterative_grid_runs_one_to_k_max() {
        let g = GridSettings::default().params(&FilterSpec::nu_method(1.0).unwrap()).unwrap();
        assert_eq!(g.len(), 1000);
        assert_eq!(g[0].iterations, Some(1));
    }

    #[test]
    fn alpha_zero_matches_single_machine() {
        let c = small(60);
        let s = sweep_alpha(&c, &[0.0, 0.5]).unwrap();
        assert_eq!(s.summaries[1].m, 8);
        let (x, y) = gen_data(&c.target, 60, c.sigma, data_seed(c.seed, TAG_DATA, 60, 1)).unwrap();
        let e = fit_spectral(&c.kernel(), &c.filter, &s.param, &x, &y).unwrap();
        let direct = hk_error(&e, &c.target).unwrap();
        let rec = s.records.iter().find(|r| r.alpha == 0.0 && r.run == 1).unwrap();
        assert_eq!(rec.hk_error, direct);
    }

    #[test]
    fn csv_is_reproducible_across_workers() {
        let c = small(48);
        let a = with_workers(Some(1), || sweep_alpha(&c, &[0.0, 0.3])).unwrap().unwrap();
        let b = with_workers(Some(3), || sweep_alpha(&c, &[0.0, 0.3])).unwrap().unwrap();
        let ca = records_to_csv(&a.records).unwrap();
        assert_eq!(ca, records_to_csv(&b.records).unwrap());
        assert!(ca.starts_with(RUN_HEADER));
    }

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig::from_toml_str(
            "target = \"scaled-sine\"\nfilter = \"nu-method:0.5\"\nn = 256\nlambda = 0.01\n[grid]\npoints = 5\n",
        )
        .unwrap();
        assert_eq!(c.target.name(), "scaled-sine");
        assert_eq!(c.lambda, LambdaRule::Explicit(0.01));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.filter, c.filter);
        assert_eq!(back.grid, c.grid);
        assert!(ExperimentConfig::from_toml_str("n = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("lambda = \"sometimes\"").is_err());
    }

    #[test]
    fn blocks_from_alpha() {
        assert_eq!(blocks_for(4096, 0.0), 1);
        assert_eq!(blocks_for(4096, 0.5), 64);
        assert_eq!(blocks_for(4096, 0.4), 28);
    }
}
