//! Spectral regularization filters `g_λ` and their residuals `r_λ(t) = 1 - t g_λ(t)`.
//!
//! Every filter is evaluated on `(0, 1]`, the spectrum of the kernel operator after
//! normalization by `κ²`. Each built-in carries the constants bounding
//!
//! * `sup |t g_λ(t)| ≤ D'`
//! * `sup |g_λ(t)| ≤ E / λ`
//! * `sup |r_λ(t)| ≤ γ₀`
//! * `sup |r_λ(t)| t^q ≤ γ_q λ^q` for every `q` up to the qualification.
//!
//! Iterative filters (Landweber, ν-method) are indexed by an iteration count `k`;
//! [`FilterSpec::param`] maps `λ` to `k` so that the bounds above hold for the
//! requested `λ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FilterKind {
    /// `g_λ(t) = 1 / (λ + t)`, kernel ridge regression.
    Tikhonov,
    /// `g_k(t) = Σ_{j<k} (1 - t)^j`, gradient descent with unit step.
    Landweber,
    /// Semi-iterative ν-method; `g_k` is a polynomial of degree `k - 1`.
    NuMethod { nu: f64 },
    /// `g_λ(t) = 1/t` for `t ≥ λ`, else 0.
    #[serde(rename = "cutoff")]
    SpectralCutoff,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterKind::Tikhonov => write!(f, "tikhonov"),
            FilterKind::Landweber => write!(f, "landweber"),
            FilterKind::NuMethod { nu } => write!(f, "nu-method({nu})"),
            FilterKind::SpectralCutoff => write!(f, "cutoff"),
        }
    }
}

/// A regularization family together with its documented constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub dprime: f64,
    pub e: f64,
    pub gamma0: f64,
    /// Qualification; `f64::INFINITY` when arbitrary.
    pub qualification: f64,
}

/// A regularization parameter, with the iteration count for iterative filters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaParam {
    pub lambda: f64,
    pub iterations: Option<usize>,
}

impl FilterSpec {
    pub fn tikhonov() -> Self {
        FilterSpec {
            kind: FilterKind::Tikhonov,
            dprime: 1.0,
            e: 1.0,
            gamma0: 1.0,
            qualification: 1.0,
        }
    }

    pub fn landweber() -> Self {
        FilterSpec {
            kind: FilterKind::Landweber,
            dprime: 1.0,
            e: 1.0,
            gamma0: 1.0,
            qualification: f64::INFINITY,
        }
    }

    /// The ν-method. `D' = 2` follows from `|r_k| ≤ 1`; the first polynomial alone
    /// reaches `t g_1(1) = (4ν+2)/(4ν+1)`.
    pub fn nu_method(nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return input(format!("nu must be positive and finite, got {nu}"));
        }
        Ok(FilterSpec {
            kind: FilterKind::NuMethod { nu },
            dprime: 2.0,
            e: 2.0,
            gamma0: 1.0,
            qualification: nu,
        })
    }

    pub fn spectral_cutoff() -> Self {
        FilterSpec {
            kind: FilterKind::SpectralCutoff,
            dprime: 1.0,
            e: 1.0,
            gamma0: 1.0,
            qualification: f64::INFINITY,
        }
    }

    pub fn from_kind(kind: FilterKind) -> Result<Self> {
        Ok(match kind {
            FilterKind::Tikhonov => Self::tikhonov(),
            FilterKind::Landweber => Self::landweber(),
            FilterKind::NuMethod { nu } => Self::nu_method(nu)?,
            FilterKind::SpectralCutoff => Self::spectral_cutoff(),
        })
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self.kind, FilterKind::Landweber | FilterKind::NuMethod { .. })
    }

    /// `γ_q` for `0 < q ≤ qualification`, `None` beyond it.
    pub fn gamma_q(&self, q: f64) -> Option<f64> {
        if !(q > 0.0) || q > self.qualification {
            return None;
        }
        Some(match self.kind {
            FilterKind::Tikhonov | FilterKind::SpectralCutoff => 1.0,
            FilterKind::Landweber => {
                if q <= 1.0 {
                    1.0
                } else {
                    q.powf(q)
                }
            }
            // |r| t^q = (|r| t^ν)^{q/ν} |r|^{1-q/ν} interpolates between γ₀ = 1 and γ_ν
            FilterKind::NuMethod { nu } => nu_gamma(nu).powf(q / nu),
        })
    }

    /// Maps `λ ∈ (0, 1]` to a parameter. Landweber uses `k = ⌊1/λ⌋`, the ν-method
    /// `k = ⌊λ^{-1/2}⌋`; rounding down keeps `λ ≤ 1/k` (resp. `1/k²`) so the
    /// `E / λ` bound holds at the requested `λ`.
    pub fn param(&self, lambda: f64) -> Result<LambdaParam> {
        check_lambda(lambda)?;
        let iterations = match self.kind {
            FilterKind::Landweber => Some(snapped_floor(1.0 / lambda)),
            FilterKind::NuMethod { .. } => Some(snapped_floor(lambda.powf(-0.5))),
            _ => None,
        };
        Ok(LambdaParam { lambda, iterations })
    }

    /// Parameter for an explicit iteration count, with `λ = 1/k` (Landweber) or
    /// `λ = 1/k²` (ν-method).
    pub fn param_from_iterations(&self, k: usize) -> Result<LambdaParam> {
        if k == 0 {
            return input("iteration count must be at least 1");
        }
        let kf = k as f64;
        let lambda = match self.kind {
            FilterKind::Landweber => 1.0 / kf,
            FilterKind::NuMethod { .. } => 1.0 / (kf * kf),
            _ => return input(format!("filter {} is not iterative", self.kind)),
        };
        Ok(LambdaParam {
            lambda,
            iterations: Some(k),
        })
    }

    /// Checked `g_λ(t)` for `t ∈ (0, 1]`.
    pub fn g(&self, param: &LambdaParam, t: f64) -> Result<f64> {
        check_t(t)?;
        self.check_param(param)?;
        Ok(self.value(param, t))
    }

    /// Checked `r_λ(t) = 1 - t g_λ(t)`.
    pub fn residual(&self, param: &LambdaParam, t: f64) -> Result<f64> {
        check_t(t)?;
        self.check_param(param)?;
        Ok(self.residual_value(param, t))
    }

    /// Unchecked `r_λ(t)` in closed form where one exists, so the pass band of
    /// the cutoff filter is exactly 0.
    pub(crate) fn residual_value(&self, param: &LambdaParam, t: f64) -> f64 {
        let lambda = param.lambda;
        match self.kind {
            FilterKind::Tikhonov => lambda / (lambda + t),
            FilterKind::SpectralCutoff => {
                if t >= lambda && t > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            FilterKind::Landweber => {
                let k = param.iterations.unwrap_or(1) as f64;
                (k * (-t).ln_1p()).exp()
            }
            FilterKind::NuMethod { .. } => 1.0 - t * self.value(param, t),
        }
    }

    pub(crate) fn check_param(&self, param: &LambdaParam) -> Result<()> {
        check_lambda(param.lambda)?;
        if self.is_iterative() && param.iterations.unwrap_or(0) == 0 {
            return input(format!("filter {} needs an iteration count k >= 1", self.kind));
        }
        Ok(())
    }

    /// Unchecked evaluation on `[0, 1]`; `t = 0` gives the limit value
    /// (the cutoff filter is 0 there).
    pub(crate) fn value(&self, param: &LambdaParam, t: f64) -> f64 {
        let lambda = param.lambda;
        match self.kind {
            FilterKind::Tikhonov => 1.0 / (lambda + t),
            FilterKind::SpectralCutoff => {
                if t >= lambda && t > 0.0 {
                    1.0 / t
                } else {
                    0.0
                }
            }
            FilterKind::Landweber => {
                let k = param.iterations.unwrap_or(1) as f64;
                if t == 0.0 {
                    k
                } else {
                    -(k * (-t).ln_1p()).exp_m1() / t
                }
            }
            FilterKind::NuMethod { nu } => nu_polynomial(nu, param.iterations.unwrap_or(1), t),
        }
    }
}

/// The name accepted by `FromStr`.
impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FilterKind::NuMethod { nu } => write!(f, "nu-method:{nu}"),
            other => write!(f, "{other}"),
        }
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    /// Accepts `tikhonov`, `landweber`, `cutoff`, `nu-method` (ν = 1) and
    /// `nu-method:<ν>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "tikhonov" => Ok(Self::tikhonov()),
            "landweber" => Ok(Self::landweber()),
            "cutoff" | "spectral-cutoff" => Ok(Self::spectral_cutoff()),
            "nu-method" => Self::nu_method(1.0),
            other => match other.strip_prefix("nu-method:") {
                Some(nu) => Self::nu_method(
                    nu.parse()
                        .map_err(|_| Error::Input(format!("bad nu value `{nu}`")))?,
                ),
                None => input(format!("unknown filter `{other}`")),
            },
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        input(format!("lambda must lie in (0, 1], got {lambda}"))
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        input(format!("filter argument must lie in (0, 1], got {t}"))
    }
}

fn snapped_floor(v: f64) -> usize {
    let r = v.round();
    let k = if (v - r).abs() <= 1e-12 * v.max(1.0) { r } else { v.floor() };
    (k as usize).max(1)
}

// Observed sup |r_k(t)| t^ν (k+1)^{2ν} stays below this for ν in [0.25, 3].
fn nu_gamma(nu: f64) -> f64 {
    (2.0 * nu).powf(2.0 * nu).max(1.0)
}

/// Recurrence weights `(μ_k, ω_k)` of the ν-method for step `k ≥ 1`
/// (`μ_1 = 0`). Shared by the scalar filter and the coefficient-space solver.
pub(crate) fn nu_weights(nu: f64, k: usize) -> (f64, f64) {
    if k == 1 {
        return (0.0, (4.0 * nu + 2.0) / (4.0 * nu + 1.0));
    }
    let k = k as f64;
    let mu = (k - 1.0) * (2.0 * k - 3.0) * (2.0 * k + 2.0 * nu - 1.0)
        / ((k + 2.0 * nu - 1.0) * (2.0 * k + 4.0 * nu - 1.0) * (2.0 * k + 2.0 * nu - 3.0));
    let omega = 4.0 * (2.0 * k + 2.0 * nu - 1.0) * (k + nu - 1.0)
        / ((k + 2.0 * nu - 1.0) * (2.0 * k + 4.0 * nu - 1.0));
    (mu, omega)
}

/// `g_k(t)`: the recurrence `u_k = u_{k-1} + μ_k (u_{k-1} - u_{k-2}) + ω_k (1 - t u_{k-1})`
/// with `u_0 = 0`, run on scalars.
fn nu_polynomial(nu: f64, k: usize, t: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 0.0;
    for step in 1..=k {
        let (mu, omega) = nu_weights(nu, step);
        let next = cur + mu * (cur - prev) + omega * (1.0 - t * cur);
        prev = cur;
        cur = next;
    }
    cur
}

pub fn g(filter: &FilterSpec, param: &LambdaParam, t: f64) -> Result<f64> {
    filter.g(param, t)
}

pub fn residual(filter: &FilterSpec, param: &LambdaParam, t: f64) -> Result<f64> {
    filter.residual(param, t)
}

/// Grid maxima of the four filter bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxiomReport {
    pub filter: FilterKind,
    /// `max |t g_λ(t)|`, compared with `D'`.
    pub max_t_g: f64,
    /// `max |g_λ(t)| λ`, compared with `E`.
    pub max_g_lambda: f64,
    /// `max |r_λ(t)|`, compared with `γ₀`.
    pub max_residual: f64,
    /// Exponent used for the qualification check.
    pub q: f64,
    /// `max |r_λ(t)| t^q / λ^q`, compared with `γ_q`.
    pub max_qualification_ratio: f64,
    pub gamma_q: f64,
    pub violations: Vec<String>,
}

impl AxiomReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the filter bounds over `lambda_grid × t_grid`, using the filter's own
/// qualification as exponent (1 when it is infinite) and an absolute slack of
/// `AXIOM_TOL`.
pub fn verify_axioms(filter: &FilterSpec, lambda_grid: &[f64], t_grid: &[f64]) -> Result<AxiomReport> {
    let q = if filter.qualification.is_finite() {
        filter.qualification
    } else {
        1.0
    };
    verify_axioms_at(filter, lambda_grid, t_grid, q, AXIOM_TOL)
}

/// Rounding slack for the axiom checks.
pub const AXIOM_TOL: f64 = 1e-12;

/// As [`verify_axioms`] with an explicit exponent `q` and an absolute slack
/// `tol` added to every bound before flagging.
pub fn verify_axioms_at(
    filter: &FilterSpec,
    lambda_grid: &[f64],
    t_grid: &[f64],
    q: f64,
    tol: f64,
) -> Result<AxiomReport> {
    let gamma_q = filter
        .gamma_q(q)
        .ok_or_else(|| Error::Input(format!("q = {q} exceeds the qualification of {}", filter.kind)))?;
    let mut report = AxiomReport {
        filter: filter.kind,
        max_t_g: 0.0,
        max_g_lambda: 0.0,
        max_residual: 0.0,
        q,
        max_qualification_ratio: 0.0,
        gamma_q,
        violations: Vec::new(),
    };
    for &lambda in lambda_grid {
        let param = filter.param(lambda)?;
        for &t in t_grid {
            let gv = filter.g(&param, t)?;
            let r = filter.residual_value(&param, t);
            report.max_t_g = report.max_t_g.max((t * gv).abs());
            report.max_g_lambda = report.max_g_lambda.max(gv.abs() * lambda);
            report.max_residual = report.max_residual.max(r.abs());
            let ratio = r.abs() * (t / lambda).powf(q);
            report.max_qualification_ratio = report.max_qualification_ratio.max(ratio);
        }
    }
    let checks = [
        ("t*g <= D'", report.max_t_g, filter.dprime),
        ("|g|*lambda <= E", report.max_g_lambda, filter.e),
        ("|r| <= gamma0", report.max_residual, filter.gamma0),
        ("|r| t^q <= gamma_q lambda^q", report.max_qualification_ratio, gamma_q),
    ];
    for (name, got, bound) in checks {
        if got > bound + tol {
            report.violations.push(format!("{name}: {got} > {bound}"));
        }
    }
    Ok(report)
}

/// `count` points log-spaced over `[lo, hi]`, both ends included.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i + 1 == count {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}
