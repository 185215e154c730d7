//! Source-condition diagnostics for targets in H¹₀[0,1].
//!
//! With the basis `e_j(x) = (√2/(πj)) sin(πjx)`, orthonormal for
//! `<f, g> = ∫ f' g'`, a target lies in the range of `T^r` exactly when
//! `Σ j^{4r} c_j²` is finite, where `c_j = <f, e_j>`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{input, Error, Result};
use crate::quad::Composite;

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Largest `|f(0)|`, `|f(1)|` accepted as vanishing.
pub const ENDPOINT_TOL: f64 = 1e-10;

pub struct CustomTarget {
    name: String,
    func: RealFn,
    derivative: Option<RealFn>,
    norm_sq: Option<f64>,
}

impl fmt::Debug for CustomTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTarget")
            .field("name", &self.name)
            .field("derivative", &self.derivative.is_some())
            .field("norm_sq", &self.norm_sq)
            .finish()
    }
}

/// Regression function `f_ρ` on `[0, 1]`.
#[derive(Clone, Debug)]
pub enum TargetFunction {
    Zero,
    /// `x(1 - x)/2`
    QuadraticBump,
    /// `sin(2πx)/(2π)`
    ScaledSine,
    Custom(Arc<CustomTarget>),
}

impl TargetFunction {
    pub fn zero() -> Self {
        TargetFunction::Zero
    }

    pub fn quadratic_bump() -> Self {
        TargetFunction::QuadraticBump
    }

    pub fn scaled_sine() -> Self {
        TargetFunction::ScaledSine
    }

    /// A user function. Without a derivative or a norm the H_K norm is unknown.
    pub fn custom<F>(name: impl Into<String>, func: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        TargetFunction::Custom(Arc::new(CustomTarget {
            name: name.into(),
            func: Arc::new(func),
            derivative: None,
            norm_sq: None,
        }))
    }

    /// Attaches `f'`; the H_K norm is then computed by quadrature unless set.
    pub fn with_derivative<D>(self, derivative: D) -> Self
    where
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        match self {
            TargetFunction::Custom(c) => {
                let d: RealFn = Arc::new(derivative);
                let norm_sq = c
                    .norm_sq
                    .or_else(|| Some(Composite::uniform(0.0, 1.0, 256, 16).integrate(|x| d(x).powi(2))));
                TargetFunction::Custom(Arc::new(CustomTarget {
                    name: c.name.clone(),
                    func: c.func.clone(),
                    derivative: Some(d),
                    norm_sq,
                }))
            }
            other => other,
        }
    }

    /// Declares `‖f‖²_{H_K}` for a custom target.
    pub fn with_norm_sq(self, norm_sq: f64) -> Result<Self> {
        if !(norm_sq >= 0.0) {
            return input(format!("squared norm must be nonnegative, got {norm_sq}"));
        }
        Ok(match self {
            TargetFunction::Custom(c) => TargetFunction::Custom(Arc::new(CustomTarget {
                name: c.name.clone(),
                func: c.func.clone(),
                derivative: c.derivative.clone(),
                norm_sq: Some(norm_sq),
            })),
            other => other,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            TargetFunction::Zero => "zero",
            TargetFunction::QuadraticBump => "quadratic-bump",
            TargetFunction::ScaledSine => "scaled-sine",
            TargetFunction::Custom(c) => &c.name,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TargetFunction::Zero => 0.0,
            TargetFunction::QuadraticBump => 0.5 * x * (1.0 - x),
            TargetFunction::ScaledSine => (2.0 * PI * x).sin() / (2.0 * PI),
            TargetFunction::Custom(c) => (c.func)(x),
        }
    }

    pub fn derivative(&self, x: f64) -> Option<f64> {
        match self {
            TargetFunction::Zero => Some(0.0),
            TargetFunction::QuadraticBump => Some(0.5 - x),
            TargetFunction::ScaledSine => Some((2.0 * PI * x).cos()),
            TargetFunction::Custom(c) => c.derivative.as_ref().map(|d| d(x)),
        }
    }

    pub fn has_derivative(&self) -> bool {
        self.derivative(0.5).is_some()
    }

    /// `‖f‖²_{H_K} = ∫ f'²`, when known.
    pub fn rkhs_norm_sq(&self) -> Option<f64> {
        match self {
            TargetFunction::Zero => Some(0.0),
            TargetFunction::QuadraticBump => Some(1.0 / 12.0),
            TargetFunction::ScaledSine => Some(0.5),
            TargetFunction::Custom(c) => c.norm_sq,
        }
    }

    /// `c_j` in closed form for the built-in targets.
    pub fn analytic_coefficient(&self, j: usize) -> Option<f64> {
        match self {
            TargetFunction::Zero => Some(0.0),
            TargetFunction::QuadraticBump => Some(if j % 2 == 1 {
                2.0 * SQRT_2 / (PI * j as f64).powi(2)
            } else {
                0.0
            }),
            TargetFunction::ScaledSine => Some(if j == 2 { SQRT_2 / 2.0 } else { 0.0 }),
            TargetFunction::Custom(_) => None,
        }
    }

    /// The cosine-basis convention `<f, e_j> = -2(πj)^{-2}` (odd `j`) quoted
    /// for the quadratic bump; it differs from the sine-basis value in sign and scale.
    pub fn cosine_convention_coefficient(&self, j: usize) -> Option<f64> {
        match self {
            TargetFunction::QuadraticBump => Some(if j % 2 == 1 {
                -2.0 / (PI * j as f64).powi(2)
            } else {
                0.0
            }),
            _ => None,
        }
    }

    pub fn vanishes_at_endpoints(&self) -> bool {
        self.eval(0.0).abs() <= ENDPOINT_TOL && self.eval(1.0).abs() <= ENDPOINT_TOL
    }
}

impl FromStr for TargetFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "zero" => Ok(TargetFunction::Zero),
            "quadratic-bump" | "quadratic" | "low" => Ok(TargetFunction::QuadraticBump),
            "scaled-sine" | "sine" | "high" => Ok(TargetFunction::ScaledSine),
            other => input(format!(
                "unknown target `{other}` (expected zero, quadratic-bump or scaled-sine)"
            )),
        }
    }
}

impl fmt::Display for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for TargetFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TargetFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `c_1..c_J`, analytic when a rule exists and by quadrature otherwise.
pub fn fourier_coefficients(f: &TargetFunction, max_j: usize) -> Result<Vec<f64>> {
    if max_j == 0 {
        return input("need at least one coefficient");
    }
    if !f.vanishes_at_endpoints() {
        return input(format!(
            "target `{}` does not vanish at 0 and 1 (f(0) = {}, f(1) = {})",
            f.name(),
            f.eval(0.0),
            f.eval(1.0)
        ));
    }
    match f.analytic_coefficient(1) {
        Some(_) => Ok((1..=max_j).map(|j| f.analytic_coefficient(j).unwrap()).collect()),
        None => fourier_coefficients_quadrature(f, max_j),
    }
}

/// `c_j = √2 πj ∫ f(x) sin(πjx) dx`, which equals `∫ f' e_j'` for `f(0) = f(1) = 0`.
/// Composite Gauss–Legendre with `64·J` nodes (`4J` panels of 16).
pub fn fourier_coefficients_quadrature(f: &TargetFunction, max_j: usize) -> Result<Vec<f64>> {
    if max_j == 0 {
        return input("need at least one coefficient");
    }
    if !f.vanishes_at_endpoints() {
        return input(format!("target `{}` does not vanish at 0 and 1", f.name()));
    }
    let q = Composite::uniform(0.0, 1.0, 4 * max_j, 16);
    let fx: Vec<f64> = q.nodes.iter().map(|&x| f.eval(x)).collect();
    Ok((1..=max_j)
        .map(|j| {
            let w = PI * j as f64;
            let s: f64 = q
                .nodes
                .iter()
                .zip(&q.weights)
                .zip(&fx)
                .map(|((&x, &wt), &v)| wt * v * (w * x).sin())
                .sum();
            SQRT_2 * w * s
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Power-law decay fitted; `r_max` is finite.
    Finite,
    /// Finitely many nonzero coefficients.
    Infinite,
    /// Every coefficient vanishes.
    Degenerate,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessReport {
    pub coefficients: Vec<f64>,
    pub nonzero: usize,
    /// Even-indexed coefficients vanish and only odd ones entered the fit.
    pub odd_only: bool,
    /// `p` in `|c_j| ≍ j^{-p}`.
    pub decay_exponent: Option<f64>,
    /// Coefficient of determination of the log-log fit.
    pub fit_r2: Option<f64>,
    /// Supremum of `r` with `Σ j^{4r} c_j² < ∞`; `(2p - 1)/4` or infinite.
    pub r_max: f64,
    pub verdict: Verdict,
    pub note: Option<String>,
}

/// Relative size below which a coefficient counts as zero.
const ZERO_REL: f64 = 1e-11;

/// Fits `|c_j| ≍ j^{-p}` on the nonzero coefficients (index `j` is position + 1).
pub fn max_smoothness(coefficients: &[f64]) -> SmoothnessReport {
    let scale = coefficients.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let nz = |c: f64| scale > 0.0 && c.abs() > ZERO_REL * scale;
    let points: Vec<(f64, f64)> = coefficients
        .iter()
        .enumerate()
        .filter(|(_, &c)| nz(c))
        .map(|(i, &c)| (((i + 1) as f64).ln(), c.abs().ln()))
        .collect();
    let nonzero = points.len();
    let has_odd = coefficients.iter().step_by(2).any(|&c| nz(c));
    let odd_only = has_odd && !coefficients.iter().skip(1).step_by(2).any(|&c| nz(c)) && coefficients.len() > 1;
    let report = |p: Option<f64>, r2, r_max, verdict, note: Option<&str>| SmoothnessReport {
        coefficients: coefficients.to_vec(),
        nonzero,
        odd_only,
        decay_exponent: p,
        fit_r2: r2,
        r_max,
        verdict,
        note: note.map(str::to_owned),
    };
    if nonzero == 0 {
        return report(None, None, f64::INFINITY, Verdict::Degenerate, Some("all coefficients vanish"));
    }
    let last = coefficients.iter().rposition(|&c| nz(c)).unwrap() + 1;
    let finite_support = nonzero < 8 || (coefficients.len() >= 16 && 2 * last <= coefficients.len());
    if finite_support {
        return report(
            None,
            None,
            f64::INFINITY,
            Verdict::Infinite,
            Some("finitely many nonzero coefficients"),
        );
    }
    let (slope, r2) = linear_fit(&points);
    let p = -slope;
    report(Some(p), Some(r2), (2.0 * p - 1.0) / 4.0, Verdict::Finite, None)
}

/// Least-squares slope and `R²` of `y` on `x`.
pub(crate) fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Growth of `S(J) = Σ_{j≤J} j^{4r} c_j²` over dyadic `J`.
#[derive(Clone, Debug, Serialize)]
pub struct PartialSumProbe {
    pub r: f64,
    /// `(J, S(J))` for `J = 1, 2, 4, ...`.
    pub partial_sums: Vec<(usize, f64)>,
    /// Log-log slope of the dyadic increments `S(2J) - S(J)` over the upper half.
    pub increment_slope: f64,
    pub bounded: bool,
}

/// Bounded means the dyadic increments shrink geometrically (negative slope)
/// or vanish.
pub fn probe_partial_sums(coefficients: &[f64], r: f64) -> PartialSumProbe {
    let mut partial_sums = Vec::new();
    let mut s = 0.0;
    let mut next = 1;
    for (i, &c) in coefficients.iter().enumerate() {
        let j = i + 1;
        s += (j as f64).powf(4.0 * r) * c * c;
        if j == next {
            partial_sums.push((j, s));
            next *= 2;
        }
    }
    let incs: Vec<(f64, f64)> = partial_sums
        .windows(2)
        .filter(|w| w[1].1 > w[0].1)
        .map(|w| ((w[0].0 as f64).ln(), (w[1].1 - w[0].1).ln()))
        .collect();
    let tail = &incs[incs.len() / 2..];
    let increment_slope = if tail.len() >= 2 {
        linear_fit(tail).0
    } else {
        f64::NEG_INFINITY
    };
    PartialSumProbe {
        r,
        partial_sums,
        increment_slope,
        bounded: increment_slope < 0.0,
    }
}

/// Report for a target over `j ≤ max_j`.
pub fn smoothness_report(f: &TargetFunction, max_j: usize) -> Result<SmoothnessReport> {
    Ok(max_smoothness(&fourier_coefficients(f, max_j)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_targets_vanish_and_have_known_norms() {
        for t in [TargetFunction::zero(), TargetFunction::quadratic_bump(), TargetFunction::scaled_sine()] {
            assert!(t.vanishes_at_endpoints());
            let d = |x: f64| t.derivative(x).unwrap().powi(2);
            let q = Composite::uniform(0.0, 1.0, 64, 16).integrate(d);
            assert!((q - t.rkhs_norm_sq().unwrap()).abs() < 1e-14, "{}", t.name());
        }
    }

    #[test]
    fn quadrature_matches_closed_form() {
        for t in [TargetFunction::quadratic_bump(), TargetFunction::scaled_sine()] {
            let a = fourier_coefficients(&t, 200).unwrap();
            let q = fourier_coefficients_quadrature(&t, 200).unwrap();
            for (j, (x, y)) in a.iter().zip(&q).enumerate() {
                assert!((x - y).abs() < 1e-10, "{} j={} {x} {y}", t.name(), j + 1);
            }
        }
    }

    #[test]
    fn closed_form_against_direct_derivative_integral() {
        // c_j = ∫ f' e_j' with e_j' = √2 cos(πjx)
        let t = TargetFunction::quadratic_bump();
        let q = Composite::uniform(0.0, 1.0, 64, 16);
        for j in 1..=9 {
            let w = PI * j as f64;
            let direct = q.integrate(|x| t.derivative(x).unwrap() * SQRT_2 * (w * x).cos());
            assert!((direct - t.analytic_coefficient(j).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn endpoint_violation_is_rejected() {
        let t = TargetFunction::custom("shifted", |x| x + 1.0);
        assert!(fourier_coefficients(&t, 4).is_err());
        assert!(fourier_coefficients(&TargetFunction::zero(), 5).unwrap().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn custom_target_with_derivative_gets_a_norm() {
        let t = TargetFunction::custom("cubic", |x| x * (1.0 - x) * (1.0 - x)).with_derivative(|x| (1.0 - x) * (1.0 - 3.0 * x));
        // ∫ ((1-x)(1-3x))² dx = 2/15
        assert!((t.rkhs_norm_sq().unwrap() - 2.0 / 15.0).abs() < 1e-14);
        let c = fourier_coefficients(&t, 50).unwrap();
        assert!((c.iter().map(|v| v * v).sum::<f64>() - 2.0 / 15.0).abs() < 1e-5);
    }

    #[test]
    fn smoothness_verdicts() {
        let r = smoothness_report(&TargetFunction::quadratic_bump(), 200).unwrap();
        assert!(r.odd_only);
        assert!((r.decay_exponent.unwrap() - 2.0).abs() < 1e-9);
        assert!((r.r_max - 0.75).abs() < 1e-9);

        let s = smoothness_report(&TargetFunction::scaled_sine(), 200).unwrap();
        assert_eq!(s.verdict, Verdict::Infinite);
        assert_eq!(s.nonzero, 1);
        assert!(s.r_max.is_infinite());

        let z = smoothness_report(&TargetFunction::zero(), 20).unwrap();
        assert_eq!(z.verdict, Verdict::Degenerate);
        assert!(z.r_max.is_infinite());
    }

    #[test]
    fn synthetic_cubic_decay() {
        let c: Vec<f64> = (1..=4096).map(|j| (j as f64).powi(-3)).collect();
        let r = max_smoothness(&c);
        assert!((r.r_max - 1.25).abs() < 1e-9);
        assert!(probe_partial_sums(&c, r.r_max - 0.1).bounded);
        assert!(!probe_partial_sums(&c, r.r_max + 0.1).bounded);
    }

    #[test]
    fn parseval_sums() {
        let q: f64 = fourier_coefficients(&TargetFunction::quadratic_bump(), 10_000).unwrap().iter().map(|c| c * c).sum();
        assert!((q - 1.0 / 12.0).abs() < 1e-6);
        let s: f64 = fourier_coefficients(&TargetFunction::scaled_sine(), 10_000).unwrap().iter().map(|c| c * c).sum();
        assert!((s - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cosine_convention_differs_only_by_sign_and_scale() {
        let t = TargetFunction::quadratic_bump();
        for j in [1, 3, 5] {
            let ratio = t.analytic_coefficient(j).unwrap() / t.cosine_convention_coefficient(j).unwrap();
            assert!((ratio + SQRT_2).abs() < 1e-14);
        }
    }

    #[test]
    fn names_round_trip() {
        for name in ["zero", "quadratic-bump", "scaled-sine"] {
            assert_eq!(name.parse::<TargetFunction>().unwrap().name(), name);
        }
        assert!("cubic".parse::<TargetFunction>().is_err());
    }
}
