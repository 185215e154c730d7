//! Hold-out parameter choice for the averaged estimator.
//!
//! For a strictly decreasing sequence of block counts `m_k` the procedure fits
//! the training part with `m_k` blocks for every `λ` in a lattice, keeps the
//! `λ̂_k` with the smallest validation error `Err(k)`, and stops at the first
//! `k ≥ 3` with `Δ(k) ≤ δ inf_{2≤j<k} Δ(j)`, where `Δ(j) = |Err(j) - Err(j-1)|`.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distributed::{fit_distributed_many, partition, AveragedEstimator};
use crate::error::{input, Error, Result};
use crate::estimator::SolverPath;
use crate::filters::{log_grid, FilterSpec};
use crate::kernels::Kernel;
use crate::rng;

/// Disjoint training and validation indices covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HoldoutSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl HoldoutSplit {
    /// The first `round(train_fraction · n)` indices after a seeded shuffle
    /// train; the rest validate. Both parts are nonempty.
    pub fn new(n: usize, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return input(format!("train fraction must lie in (0, 1), got {train_fraction}"));
        }
        if n < 2 {
            return input("a hold-out split needs at least two samples");
        }
        let m_t = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &[0x484f_4c44]));
        let validation = idx.split_off(m_t);
        Ok(HoldoutSplit { train: idx, validation })
    }

    pub fn select(idx: &[usize], v: &[f64]) -> Vec<f64> {
        idx.iter().map(|&i| v[i]).collect()
    }
}

/// `(1/m_v) Σ (y_i - f̄(x_i))²` over the validation set.
pub fn empirical_error(estimator: &AveragedEstimator, xv: &[f64], yv: &[f64]) -> Result<f64> {
    if xv.is_empty() {
        return input("validation set is empty");
    }
    if xv.len() != yv.len() {
        return input(format!("{} validation inputs but {} outputs", xv.len(), yv.len()));
    }
    let pred = estimator.predict_many(xv);
    Ok(pred.iter().zip(yv).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / xv.len() as f64)
}

/// Result of the discrepancy-style stopping rule on an error sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StopDecision {
    /// 1-based index `k*`.
    pub k_star: usize,
    /// False when the sequence ran out before the rule fired; `k_star` is then the last index.
    pub triggered: bool,
}

/// `k* = min{k ≥ 3 : Δ(k) ≤ δ inf_{2≤j<k} Δ(j)}` for `Err(1), Err(2), ...`.
pub fn stopping_index(errors: &[f64], delta: f64) -> Result<StopDecision> {
    if errors.len() < 3 {
        return input(format!("stopping rule needs at least 3 errors, got {}", errors.len()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return input(format!("delta must lie in (0, 1), got {delta}"));
    }
    let mut rule = StoppingRule::new(delta);
    for &e in errors {
        if rule.push(e) {
            return Ok(StopDecision {
                k_star: rule.len(),
                triggered: true,
            });
        }
    }
    Ok(StopDecision {
        k_star: errors.len(),
        triggered: false,
    })
}

/// Incremental form of the stopping rule.
#[derive(Clone, Debug)]
pub struct StoppingRule {
    delta: f64,
    last: Option<f64>,
    count: usize,
    inf: f64,
}

impl StoppingRule {
    pub fn new(delta: f64) -> Self {
        StoppingRule {
            delta,
            last: None,
            count: 0,
            inf: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Records `Err(k)` and returns `Δ(k)` (absent for `k = 1`).
    fn record(&mut self, err: f64) -> Option<f64> {
        let d = self.last.map(|prev| (err - prev).abs());
        self.last = Some(err);
        self.count += 1;
        d
    }

    /// Adds the next error; true when the rule fires at this index.
    pub fn push(&mut self, err: f64) -> bool {
        match self.record(err) {
            Some(d) if self.count >= 3 => {
                if d <= self.delta * self.inf {
                    return true;
                }
                self.inf = self.inf.min(d);
                false
            }
            Some(d) => {
                self.inf = self.inf.min(d);
                false
            }
            None => false,
        }
    }
}

/// `m_k = ceil(m_t^{α_k})` for `α_k = 0.6, 0.5, ..., 0`, with repeats removed.
pub fn default_m_sequence(m_t: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = Vec::new();
    for a in [0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0] {
        let m = ((m_t as f64).powf(a).ceil() as usize).clamp(1, m_t.max(1));
        if seq.last().is_none_or(|&l| m < l) {
            seq.push(m);
        }
    }
    seq
}

/// 40 log-spaced values on `[1e-6, 1]`.
pub fn default_lattice() -> Vec<f64> {
    log_grid(1e-6, 1.0, 40)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub delta: f64,
    pub lattice: Vec<f64>,
    /// Strictly decreasing block counts; derived from the training size when unset.
    pub m_sequence: Option<Vec<usize>>,
    pub train_fraction: f64,
    pub seed: u64,
    /// Refit the chosen estimator on all data instead of the training part.
    pub refit_on_all: bool,
    pub path: SolverPath,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            delta: 0.5,
            lattice: default_lattice(),
            m_sequence: None,
            train_fraction: 0.8,
            seed: 0,
            refit_on_all: false,
            path: SolverPath::Auto,
        }
    }
}

/// One step of the search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub m_k: usize,
    pub lambda_hat: f64,
    pub err: f64,
    /// `Δ(k)`; absent for `k = 1`.
    pub delta_k: Option<f64>,
}

pub const TRACE_HEADER: &str = "k,m_k,lambda_hat,err,delta_k";

pub struct AdaptOutcome {
    pub k_star: usize,
    pub m_star: usize,
    pub lambda_hat: f64,
    pub triggered: bool,
    pub estimator: AveragedEstimator,
    pub trace: Vec<TraceRow>,
    pub split: HoldoutSplit,
}

fn check_sequence(seq: &[usize], m_t: usize) -> Result<()> {
    if seq.len() < 3 {
        return input(format!("block-count sequence needs at least 3 entries, got {}", seq.len()));
    }
    if seq.windows(2).any(|w| w[1] >= w[0]) {
        return input("block counts must be strictly decreasing");
    }
    if seq[0] > m_t || *seq.last().unwrap() == 0 {
        return input(format!("block counts must lie in [1, {m_t}]"));
    }
    Ok(())
}

/// Index of the smallest error; ties go to the larger `λ`.
fn argmin_prefer_large(lattice: &[f64], errs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..errs.len() {
        if errs[i] < errs[best] || (errs[i] == errs[best] && lattice[i] > lattice[best]) {
            best = i;
        }
    }
    best
}

/// Runs the hold-out search on `(x, y)`.
pub fn adapt(kernel: &Kernel, filter: &FilterSpec, x: &[f64], y: &[f64], config: &AdaptConfig) -> Result<AdaptOutcome> {
    if x.len() != y.len() {
        return input(format!("{} inputs but {} outputs", x.len(), y.len()));
    }
    if config.lattice.is_empty() {
        return input("lambda lattice is empty");
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return input(format!("delta must lie in (0, 1), got {}", config.delta));
    }
    let split = HoldoutSplit::new(x.len(), config.train_fraction, config.seed)?;
    let (xt, yt) = (HoldoutSplit::select(&split.train, x), HoldoutSplit::select(&split.train, y));
    let (xv, yv) = (
        HoldoutSplit::select(&split.validation, x),
        HoldoutSplit::select(&split.validation, y),
    );
    let m_t = xt.len();
    let seq = match &config.m_sequence {
        Some(s) => s.clone(),
        None => default_m_sequence(m_t),
    };
    check_sequence(&seq, m_t)?;
    let params = config
        .lattice
        .iter()
        .map(|&l| filter.param(l))
        .collect::<Result<Vec<_>>>()?;

    let mut rule = StoppingRule::new(config.delta);
    let mut trace = Vec::new();
    let mut chosen: Option<(AveragedEstimator, usize)> = None;
    let mut triggered = false;
    for (i, &m_k) in seq.iter().enumerate() {
        let part = partition(m_t, m_k, None)?;
        let fits = fit_distributed_many(kernel, filter, &params, &xt, &yt, &part, config.path)?;
        let errs = fits
            .iter()
            .map(|f| empirical_error(f, &xv, &yv))
            .collect::<Result<Vec<_>>>()?;
        let best = argmin_prefer_large(&config.lattice, &errs);
        let err = errs[best];
        let prev = trace.last().map(|r: &TraceRow| r.err);
        let fired = rule.push(err);
        trace.push(TraceRow {
            k: i + 1,
            m_k,
            lambda_hat: config.lattice[best],
            err,
            delta_k: prev.map(|p| (err - p).abs()),
        });
        chosen = Some((fits.into_iter().nth(best).unwrap(), best));
        if fired {
            triggered = true;
            break;
        }
    }
    let last = trace.last().cloned().ok_or_else(|| Error::Input("empty search".into()))?;
    let (mut estimator, best) = chosen.unwrap();
    if config.refit_on_all {
        let part = partition(x.len(), last.m_k, None)?;
        estimator = fit_distributed_many(kernel, filter, &params[best..=best], x, y, &part, config.path)?.remove(0);
    }
    Ok(AdaptOutcome {
        k_star: last.k,
        m_star: last.m_k,
        lambda_hat: last.lambda_hat,
        triggered,
        estimator,
        trace,
        split,
    })
}

pub fn write_trace<W: Write>(w: W, trace: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Numeric(format!("csv output failed: {e}"));
    for r in trace {
        out.serialize(r).map_err(err)?;
    }
    if trace.is_empty() {
        out.write_record(TRACE_HEADER.split(',')).map_err(err)?;
    }
    out.flush().map_err(|e| Error::Numeric(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::KernelExpansion;
    use crate::experiments::gen_data;
    use crate::smoothness::TargetFunction;

    fn brute_force(errors: &[f64], delta: f64) -> (usize, bool) {
        let d = |j: usize| (errors[j - 1] - errors[j - 2]).abs();
        for k in 3..=errors.len() {
            let inf = (2..k).map(d).fold(f64::INFINITY, f64::min);
            if d(k) <= delta * inf {
                return (k, true);
            }
        }
        (errors.len(), false)
    }

    #[test]
    fn stopping_rule_examples() {
        let s = stopping_index(&[0.7; 6], 0.5).unwrap();
        assert_eq!((s.k_star, s.triggered), (3, true));
        // Δ(j) = 2^{-j}
        let mut errs = vec![1.0];
        for j in 2..=6 {
            errs.push(errs[j - 2] - 0.5f64.powi(j as i32));
        }
        assert_eq!(stopping_index(&errs, 0.5).unwrap().k_star, 3);
        let s = stopping_index(&[1.0, 0.9, 0.85, 0.82], 0.5).unwrap();
        assert_eq!((s.k_star, s.triggered), (4, false));
        assert!(stopping_index(&[1.0, 2.0], 0.5).is_err());
        assert!(stopping_index(&[1.0, 2.0, 3.0], 1.0).is_err());
    }

    #[test]
    fn stopping_rule_matches_brute_force() {
        let mut r = rng::stream(5, &[]);
        use rand::Rng;
        for _ in 0..500 {
            let len = r.random_range(3..12);
            let errs: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
            let s = stopping_index(&errs, 0.5).unwrap();
            assert_eq!((s.k_star, s.triggered), brute_force(&errs, 0.5));
        }
    }

    #[test]
    fn empirical_error_examples() {
        let zero = AveragedEstimator::from_locals(vec![KernelExpansion::zero(Kernel::sobolev_min())]).unwrap();
        assert_eq!(empirical_error(&zero, &[0.2, 0.4], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(empirical_error(&zero, &[], &[]).is_err());
    }

    #[test]
    fn default_sequence_is_strictly_decreasing() {
        let s = default_m_sequence(819);
        // 819^0.6 = 55.98
        assert_eq!(s.first(), Some(&56));
        assert_eq!(s.last(), Some(&1));
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(default_m_sequence(1), vec![1]);
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let s = HoldoutSplit::new(101, 0.8, 4).unwrap();
        assert_eq!(s.train.len(), 81);
        let mut all = [s.train.clone(), s.validation.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(HoldoutSplit::new(10, 1.0, 0).is_err());
    }

    #[test]
    fn adapt_runs_and_validation_does_not_touch_fits() {
        let t = TargetFunction::quadratic_bump();
        let (x, y) = gen_data(&t, 200, 0.005, 8).unwrap();
        let f = FilterSpec::tikhonov();
        let cfg = AdaptConfig {
            lattice: log_grid(1e-5, 1e-1, 9),
            ..Default::default()
        };
        let out = adapt(&Kernel::sobolev_min(), &f, &x, &y, &cfg).unwrap();
        assert!(out.k_star >= 3 || !out.triggered);
        assert_eq!(out.trace.len(), out.k_star);
        assert!(cfg.lattice.contains(&out.lambda_hat));

        // the returned estimator is the training-only fit at (m*, λ̂)
        let xt = HoldoutSplit::select(&out.split.train, &x);
        let yt = HoldoutSplit::select(&out.split.train, &y);
        let part = partition(xt.len(), out.m_star, None).unwrap();
        let p = f.param(out.lambda_hat).unwrap();
        let direct = fit_distributed_many(&Kernel::sobolev_min(), &f, &[p], &xt, &yt, &part, SolverPath::Auto).unwrap();
        assert_eq!(direct[0].combined().coefficients(), out.estimator.combined().coefficients());

        // changing validation outputs cannot change any per-λ fit
        let mut y2 = y.clone();
        for &i in &out.split.validation {
            y2[i] = -y2[i];
        }
        let yt2 = HoldoutSplit::select(&out.split.train, &y2);
        assert_eq!(yt, yt2);
    }

    #[test]
    fn adapt_rejects_bad_input() {
        let (x, y) = (vec![0.1, 0.2, 0.3, 0.4], vec![0.0; 4]);
        let f = FilterSpec::tikhonov();
        let k = Kernel::sobolev_min();
        let empty = AdaptConfig {
            lattice: vec![],
            ..Default::default()
        };
        assert!(adapt(&k, &f, &x, &y, &empty).is_err());
        let short = AdaptConfig {
            m_sequence: Some(vec![2, 1]),
            ..Default::default()
        };
        assert!(adapt(&k, &f, &x, &y, &short).is_err());
    }
}
