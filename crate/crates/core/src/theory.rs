//! Closed-form parameter choice, rates and the quantities that drive the error
//! bounds: effective dimension `𝒩(λ) = Σ μ_j/(μ_j + λ)` and
//! `𝓑_n(λ) = 1 + (2/(nλ) + √(𝒩(λ)/(nλ)))²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{input, Result};
use crate::estimator::SpectralModel;
use crate::kernels::Kernel;

/// Prior and noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Source-condition exponent.
    pub r: f64,
    /// Eigenvalue decay exponent, `μ_j ≤ β j^{-b}`.
    pub b: f64,
    pub beta: f64,
    /// Norm interpolation: 0 for H_K, 1/2 for L².
    pub s: f64,
    pub sigma: f64,
    /// Source radius.
    #[serde(rename = "R")]
    pub radius: f64,
    pub n: u64,
    /// Bounded-output moment constant; carried, unused by the formulas here.
    #[serde(default = "one", rename = "M")]
    pub moment: f64,
}

fn one() -> f64 {
    1.0
}

impl TheoryParams {
    pub fn new(r: f64, b: f64, sigma: f64, radius: f64, n: u64) -> Result<Self> {
        let p = TheoryParams {
            r,
            b,
            beta: 1.0,
            s: 0.0,
            sigma,
            radius,
            n,
            moment: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_s(mut self, s: f64) -> Result<Self> {
        self.s = s;
        self.validate()?;
        Ok(self)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.beta = beta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 1.0) {
            return input(format!("decay exponent b must exceed 1, got {}", self.b));
        }
        if !(0.0..=0.5).contains(&self.s) {
            return input(format!("s must lie in [0, 1/2], got {}", self.s));
        }
        for (name, v) in [
            ("r", self.r),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("R", self.radius),
            ("M", self.moment),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return input(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.n == 0 {
            return input("n must be positive");
        }
        Ok(())
    }

    fn denom(&self) -> f64 {
        2.0 * self.b * self.r + self.b + 1.0
    }

    /// `σ² / (R² n)`.
    fn signal_ratio(&self) -> f64 {
        self.sigma * self.sigma / (self.radius * self.radius * self.n as f64)
    }
}

/// `λ_n = min((σ²/(R²n))^{b/(2br+b+1)}, 1)`.
pub fn lambda_choice(p: &TheoryParams) -> f64 {
    p.signal_ratio().powf(p.b / p.denom()).min(1.0)
}

/// `a_n = R (σ²/(R²n))^{b(r+s)/(2br+b+1)}`.
pub fn rate(p: &TheoryParams) -> f64 {
    p.radius * p.signal_ratio().powf(p.b * (p.r + p.s) / p.denom())
}

/// Headline admissible growth `m ~ n^α`: `α < min(2br, b+1)/(2br+b+1)`.
pub fn alpha_bound(p: &TheoryParams) -> f64 {
    (2.0 * p.b * p.r).min(p.b + 1.0) / p.denom()
}

/// `2b min(r, 1)/(2br+b+1)`, the bound for the reconstruction-norm result.
pub fn alpha_bound_capped(p: &TheoryParams) -> f64 {
    2.0 * p.b * p.r.min(1.0) / p.denom()
}

/// `2br/(2br+b+1)`, the bound without saturation.
pub fn alpha_bound_unsaturated(p: &TheoryParams) -> f64 {
    2.0 * p.b * p.r / p.denom()
}

/// Relative gap in `σ √(λ_n^{-1/b}/(nλ_n)) = R λ_n^r`, which holds exactly
/// for the unclamped `λ_n`. `None` when `λ_n` is clamped at 1.
pub fn exponent_identity_gap(p: &TheoryParams) -> Option<f64> {
    let lam = p.signal_ratio().powf(p.b / p.denom());
    if lam >= 1.0 {
        return None;
    }
    let lhs = p.sigma * (lam.powf(-1.0 / p.b) / (p.n as f64 * lam)).sqrt();
    let rhs = p.radius * lam.powf(p.r);
    Some((lhs - rhs).abs() / rhs)
}

/// Eigenvalues `μ_1 ≥ μ_2 ≥ ... > 0` of the normalized covariance operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpectrumModel {
    /// `μ_j = β j^{-b}` for all `j ≥ 1`.
    PowerLaw { beta: f64, b: f64 },
    /// A finite list.
    Empirical { values: Vec<f64> },
}

impl SpectrumModel {
    pub fn power_law(beta: f64, b: f64) -> Result<Self> {
        if !(b > 1.0) || !(beta > 0.0) || beta > 1.0 {
            return input(format!("power law needs b > 1 and 0 < beta <= 1, got b={b}, beta={beta}"));
        }
        Ok(SpectrumModel::PowerLaw { beta, b })
    }

    /// `μ_j = 4/(πj)²` for `K(x,t) = min(x,t) - xt` under the uniform design.
    pub fn sobolev() -> Self {
        SpectrumModel::PowerLaw {
            beta: 4.0 / (PI * PI),
            b: 2.0,
        }
    }

    /// Positive entries, sorted non-increasing; every entry must be at most 1.
    pub fn empirical(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v > 1.0 + 1e-12) {
            return input("empirical eigenvalues must be finite and at most 1");
        }
        let mut v: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).map(|v| v.min(1.0)).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        Ok(SpectrumModel::Empirical { values: v })
    }

    /// Spectrum of `G/(κ²n)` on the given points.
    pub fn from_points(kernel: &Kernel, points: &[f64]) -> Result<Self> {
        Self::empirical(SpectralModel::new(kernel, points)?.eigenvalues())
    }

    pub fn eigenvalue(&self, j: usize) -> f64 {
        match self {
            SpectrumModel::PowerLaw { beta, b } => beta * (j as f64).powf(-b),
            SpectrumModel::Empirical { values } => values.get(j - 1).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveDimension {
    pub value: f64,
    /// Half-width of the interval known to contain `𝒩(λ)`; zero for finite lists.
    pub error_bound: f64,
    /// Number of explicitly summed terms.
    pub terms: usize,
}

/// Tail terms are summed until `λ j^b / β` reaches this.
const TAIL_START: f64 = 1e8;
const MAX_TERMS: usize = 1 << 22;

/// `𝒩(λ) = Σ μ_j/(μ_j + λ)`.
///
/// For a power law the sum runs to `J` and the tail `Σ_{j>J} 1/(1 + c j^b)`,
/// `c = λ/β`, is bracketed by `∫_{J+1}^∞` and `∫_J^∞` of the same function;
/// the midpoint is reported with the half-width as error bound.
pub fn effective_dimension(spec: &SpectrumModel, lambda: f64) -> Result<EffectiveDimension> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return input(format!("lambda must be positive, got {lambda}"));
    }
    match spec {
        SpectrumModel::Empirical { values } => Ok(EffectiveDimension {
            value: values.iter().map(|&mu| mu / (mu + lambda)).sum(),
            error_bound: 0.0,
            terms: values.len(),
        }),
        SpectrumModel::PowerLaw { beta, b } => {
            let c = lambda / beta;
            let j_max = ((TAIL_START / c).powf(1.0 / b).ceil() as usize).clamp(1, MAX_TERMS);
            let partial: f64 = (1..=j_max)
                .rev()
                .map(|j| 1.0 / (1.0 + c * (j as f64).powf(*b)))
                .sum();
            let upper = power_tail(c, *b, j_max as f64);
            let lower = power_tail(c, *b, (j_max + 1) as f64);
            Ok(EffectiveDimension {
                value: partial + 0.5 * (upper + lower),
                error_bound: 0.5 * (upper - lower),
                terms: j_max,
            })
        }
    }
}

/// `∫_x0^∞ dx / (1 + c x^b)`.
///
/// With `w = c x^b` and `v = 1/(1+w)` this is
/// `(1/b) c^{-1/b} B(1-a, a) I_{v0}(1-a, a)`, `a = 1/b`, `v0 = 1/(1 + c x0^b)`.
pub fn power_tail(c: f64, b: f64, x0: f64) -> f64 {
    let a = 1.0 / b;
    let v0 = 1.0 / (1.0 + c * x0.powf(b));
    let full_beta = PI / (PI * a).sin();
    a * c.powf(-a) * full_beta * beta_reg(1.0 - a, a, v0)
}

/// `(βb/(b-1)) (κ²λ)^{-1/b}`, valid when `β` bounds the normalized spectrum.
pub fn effective_dimension_upper_bound(beta: f64, b: f64, kappa: f64, lambda: f64) -> f64 {
    beta * b / (b - 1.0) * (kappa * kappa * lambda).powf(-1.0 / b)
}

/// `𝓑_n(λ) = 1 + (2/(nλ) + √(𝒩/(nλ)))²`.
pub fn b_quantity(n_block: f64, lambda: f64, n_lambda: f64) -> f64 {
    let nl = n_block * lambda;
    let t = 2.0 / nl + (n_lambda / nl).sqrt();
    1.0 + t * t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockCondition {
    pub n_block: f64,
    pub value: f64,
    /// `𝓑_{n/m}(λ) ≤ 2`.
    pub holds: bool,
}

pub fn block_condition(n: u64, m: u64, lambda: f64, n_lambda: f64) -> Result<BlockCondition> {
    if m == 0 || m > n {
        return input(format!("need 1 <= m <= n, got m={m}, n={n}"));
    }
    let n_block = n as f64 / m as f64;
    let value = b_quantity(n_block, lambda, n_lambda);
    Ok(BlockCondition {
        n_block,
        value,
        holds: value <= 2.0,
    })
}

/// One line of the theory table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryRow {
    pub n: u64,
    pub m: u64,
    pub b: f64,
    pub r: f64,
    pub s: f64,
    pub sigma: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub lambda_n: f64,
    pub a_n: f64,
    pub alpha_max: f64,
    #[serde(rename = "N_lambda")]
    pub n_lambda: f64,
    #[serde(rename = "B_block")]
    pub b_block: f64,
}

pub const THEORY_HEADER: &str = "n,m,b,r,s,sigma,R,lambda_n,a_n,alpha_max,N_lambda,B_block";

/// Row for `(p, m)` with `𝒩` evaluated on `spectrum` at `λ_n`.
pub fn theory_row(p: &TheoryParams, m: u64, spectrum: &SpectrumModel) -> Result<TheoryRow> {
    p.validate()?;
    let lambda_n = lambda_choice(p);
    let n_lambda = effective_dimension(spectrum, lambda_n)?.value;
    let block = block_condition(p.n, m, lambda_n, n_lambda)?;
    Ok(TheoryRow {
        n: p.n,
        m,
        b: p.b,
        r: p.r,
        s: p.s,
        sigma: p.sigma,
        radius: p.radius,
        lambda_n,
        a_n: rate(p),
        alpha_max: alpha_bound(p),
        n_lambda,
        b_block: block.value,
    })
}

/// Rows over the grid `ns × ms × rs`, skipping `m > n`.
pub fn theory_table(base: &TheoryParams, ns: &[u64], ms: &[u64], rs: &[f64], spectrum: &SpectrumModel) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &r in rs {
            let p = TheoryParams { n, r, ..*base };
            for &m in ms.iter().filter(|&&m| m <= n) {
                rows.push(theory_row(&p, m, spectrum)?);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TheoryParams {
        TheoryParams::new(0.5, 2.0, 1.0, 1.0, 1024).unwrap()
    }

    #[test]
    fn closed_forms() {
        let p = base();
        assert!((lambda_choice(&p) - 0.0625).abs() < 1e-15);
        assert!((rate(&p) - 0.25).abs() < 1e-15);
        assert!((alpha_bound(&p) - 0.4).abs() < 1e-15);
        let q = TheoryParams { r: 0.75, ..p };
        assert!((alpha_bound(&q) - 0.5).abs() < 1e-15);
        let big = TheoryParams { sigma: 100.0, ..p };
        assert_eq!(lambda_choice(&big), 1.0);
    }

    #[test]
    fn monotonicity_and_homogeneity() {
        let p = base();
        let doubled = TheoryParams { radius: 2.0, ..p };
        assert!(lambda_choice(&doubled) < lambda_choice(&p));
        let smoother = TheoryParams { r: 1.0, ..p };
        assert!(rate(&smoother) < rate(&p));
        let c = 2.0;
        let scaled = TheoryParams { radius: c, ..p };
        let by_hand = c * (p.sigma.powi(2) / (c * c * p.n as f64)).powf(p.b * p.r / p.denom());
        assert!((rate(&scaled) - by_hand).abs() < 1e-15);
    }

    #[test]
    fn alpha_bounds_agree_below_saturation() {
        for r in [0.1, 0.3, 0.5, 0.7] {
            let p = TheoryParams { r, ..base() };
            assert!((alpha_bound(&p) - alpha_bound_unsaturated(&p)).abs() < 1e-15);
            assert!(alpha_bound(&p) <= 1.0);
        }
        let far = TheoryParams { r: 1e6, ..base() };
        assert!(alpha_bound(&far) < 1e-5);
        // above r = 1 the capped bound exceeds the headline one when b = 2
        let p = TheoryParams { r: 1.2, ..base() };
        assert!((alpha_bound_capped(&p) - 4.0 / 7.8).abs() < 1e-15);
        assert!((alpha_bound(&p) - 3.0 / 7.8).abs() < 1e-15);
    }

    #[test]
    fn exponent_identity() {
        for (r, b, n) in [(0.25, 2.0, 500u64), (1.0, 3.0, 10_000), (0.6, 1.5, 77)] {
            let p = TheoryParams::new(r, b, 0.005, 0.3, n).unwrap();
            assert!(exponent_identity_gap(&p).unwrap() < 1e-10);
        }
    }

    #[test]
    fn effective_dimension_examples() {
        let one = SpectrumModel::empirical(&[0.3]).unwrap();
        assert!((effective_dimension(&one, 0.3).unwrap().value - 0.5).abs() < 1e-15);
        let s = SpectrumModel::sobolev();
        for lam in [1e-4, 1e-3, 1e-2, 1e-1] {
            let e = effective_dimension(&s, lam).unwrap();
            assert!(e.error_bound < 1e-8);
            let ub = effective_dimension_upper_bound(4.0 / (PI * PI), 2.0, 0.5, lam);
            assert!(e.value >= 0.5 && e.value <= ub, "{lam} {} {ub}", e.value);
        }
    }

    #[test]
    fn power_tail_against_direct_sum() {
        // Σ_{j>J} 1/(1+c j²) lies between the two integrals
        let (c, b) = (0.01, 2.0);
        let direct: f64 = (11..2_000_000).map(|j| 1.0 / (1.0 + c * (j as f64).powi(2))).sum::<f64>()
            + power_tail(c, b, 2_000_000.0);
        assert!(power_tail(c, b, 11.0) <= direct && direct <= power_tail(c, b, 10.0));
        // closed form for b = 2: (π/2 - atan(√c x0)) / √c
        let exact = (PI / 2.0 - (c.sqrt() * 10.0).atan()) / c.sqrt();
        assert!((power_tail(c, b, 10.0) - exact).abs() < 1e-10);
    }

    #[test]
    fn b_quantity_examples() {
        assert!((b_quantity(100.0, 0.1, 1.0) - (1.0 + (0.2 + 0.1f64.sqrt()).powi(2))).abs() < 1e-15);
        assert!((b_quantity(100.0, 0.1, 1.0) - 1.2665).abs() < 1e-4);
        assert!((b_quantity(1e12, 0.1, 5.0) - 1.0).abs() < 1e-9);
        let nl: f64 = 40.0;
        assert!((b_quantity(400.0, 0.1, nl) - (1.0 + (2.0 / nl + 1.0).powi(2))).abs() < 1e-15);
        assert!(block_condition(10, 11, 0.1, 1.0).is_err());
    }

    #[test]
    fn table_shape() {
        let rows = theory_table(&base(), &[100, 1000], &[1, 4, 200], &[0.5], &SpectrumModel::sobolev()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(THEORY_HEADER.split(',').count(), 12);
    }

    #[test]
    fn invalid_params() {
        assert!(TheoryParams::new(0.5, 1.0, 1.0, 1.0, 10).is_err());
        assert!(base().with_s(0.7).is_err());
        assert!(TheoryParams::new(0.5, 2.0, 0.0, 1.0, 10).is_err());
        assert!(effective_dimension(&SpectrumModel::sobolev(), 0.0).is_err());
    }
}
