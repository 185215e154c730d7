//! Divide-and-average estimation: split the sample into `m` disjoint blocks, fit
//! each block with the same regularization parameter and average the local
//! estimators with equal weights.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{input, Result};
use crate::estimator::{BlockSolver, KernelExpansion, SolverPath, SpectralModel};
use crate::experiments::hk_error;
use crate::filters::{FilterSpec, LambdaParam};
use crate::kernels::Kernel;
use crate::rng;
use crate::smoothness::TargetFunction;

/// Disjoint blocks of sample indices covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    n: usize,
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    /// Contiguous balanced blocks after an optional seeded shuffle. Sizes
    /// differ by at most one; the first `n mod m` blocks are the larger ones.
    pub fn new(n: usize, m: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if m == 0 || n == 0 {
            return input("partition needs n >= 1 and m >= 1");
        }
        if m > n {
            return input(format!("cannot split {n} samples into {m} blocks"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut rng::stream(seed, &[0x5041_5254]));
        }
        let (base, extra) = (n / m, n % m);
        let mut blocks = Vec::with_capacity(m);
        let mut start = 0;
        for b in 0..m {
            let len = base + usize::from(b < extra);
            blocks.push(idx[start..start + len].to_vec());
            start += len;
        }
        Ok(Partition { n, blocks })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// `(x, y)` restricted to block `b`.
    pub fn gather(&self, b: usize, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let blk = &self.blocks[b];
        (blk.iter().map(|&i| x[i]).collect(), blk.iter().map(|&i| y[i]).collect())
    }
}

pub fn partition(n: usize, m: usize, shuffle_seed: Option<u64>) -> Result<Partition> {
    Partition::new(n, m, shuffle_seed)
}

/// `(1/m) Σ_j f_j` over local estimators.
#[derive(Clone, Debug)]
pub struct AveragedEstimator {
    locals: Vec<KernelExpansion>,
}

impl AveragedEstimator {
    pub fn from_locals(locals: Vec<KernelExpansion>) -> Result<Self> {
        if locals.is_empty() {
            return input("an average needs at least one local estimator");
        }
        Ok(AveragedEstimator { locals })
    }

    pub fn m(&self) -> usize {
        self.locals.len()
    }

    pub fn locals(&self) -> &[KernelExpansion] {
        &self.locals
    }

    pub fn into_locals(self) -> Vec<KernelExpansion> {
        self.locals
    }

    /// Local predictions summed in block order, then divided by `m`.
    pub fn predict(&self, x: f64) -> f64 {
        self.locals.iter().map(|l| l.predict(x)).sum::<f64>() / self.m() as f64
    }

    pub fn predict_many(&self, xs: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; xs.len()];
        for l in &self.locals {
            for (a, v) in acc.iter_mut().zip(l.predict_many(xs)) {
                *a += v;
            }
        }
        let m = self.m() as f64;
        acc.iter().map(|a| a / m).collect()
    }

    /// The average as one expansion with weights `α_j / m` over all anchors.
    pub fn combined(&self) -> KernelExpansion {
        let parts: Vec<&KernelExpansion> = self.locals.iter().collect();
        let w = vec![1.0 / self.m() as f64; parts.len()];
        KernelExpansion::weighted_sum(&parts, &w).expect("nonempty by construction")
    }
}

fn check_partition(partition: &Partition, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return input(format!("{} inputs but {} outputs", x.len(), y.len()));
    }
    if partition.n() != x.len() {
        return input(format!(
            "partition covers {} samples but data has {}",
            partition.n(),
            x.len()
        ));
    }
    Ok(())
}

/// Fits every block for every parameter; returns one averaged estimator per
/// parameter. Blocks run in parallel on the current rayon pool.
pub fn fit_distributed_many(
    kernel: &Kernel,
    filter: &FilterSpec,
    params: &[LambdaParam],
    x: &[f64],
    y: &[f64],
    partition: &Partition,
    path: SolverPath,
) -> Result<Vec<AveragedEstimator>> {
    check_partition(partition, x, y)?;
    let per_block: Vec<Vec<KernelExpansion>> = (0..partition.m())
        .into_par_iter()
        .map(|b| {
            let (xb, yb) = partition.gather(b, x, y);
            BlockSolver::new(kernel, filter, &xb, &yb, path)?.fit_all(params)
        })
        .collect::<Result<_>>()?;
    let mut by_param: Vec<Vec<KernelExpansion>> = (0..params.len()).map(|_| Vec::new()).collect();
    for block in per_block {
        for (p, e) in block.into_iter().enumerate() {
            by_param[p].push(e);
        }
    }
    by_param.into_iter().map(AveragedEstimator::from_locals).collect()
}

pub fn fit_distributed(
    kernel: &Kernel,
    filter: &FilterSpec,
    param: &LambdaParam,
    x: &[f64],
    y: &[f64],
    partition: &Partition,
    path: SolverPath,
) -> Result<AveragedEstimator> {
    Ok(fit_distributed_many(kernel, filter, std::slice::from_ref(param), x, y, partition, path)?.remove(0))
}

/// H_K norms of the approximation part `f_ρ - f̃` and the sample part `f̃ - f̄`,
/// where `f̃ = (1/m) Σ g_λ(T̄_{x_j}) T̄_{x_j} f_ρ`.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticSplit {
    pub approximation_norm: f64,
    pub sample_norm: f64,
    /// `‖f_ρ - f̄‖`, which the two parts sum to.
    pub total_norm: f64,
    /// True when the target norm was unknown and `f_ρ` was replaced by its
    /// interpolant on the union of anchors (an empirical surrogate).
    pub surrogate: bool,
    #[serde(skip)]
    pub noiseless: AveragedEstimator,
    #[serde(skip)]
    pub sample_part: AveragedEstimator,
}

/// Bias/variance split of the averaged estimator against a known target.
///
/// `T̄_x f_ρ` depends on `f_ρ` only through its values on the anchors, so `f̃` is
/// the estimator fitted to noiseless outputs and the sample part is the
/// estimator fitted to `f_ρ(x) - y`.
#[allow(clippy::too_many_arguments)]
pub fn diagnostic_split(
    kernel: &Kernel,
    filter: &FilterSpec,
    param: &LambdaParam,
    x: &[f64],
    y: &[f64],
    partition: &Partition,
    target: &TargetFunction,
    path: SolverPath,
) -> Result<DiagnosticSplit> {
    check_partition(partition, x, y)?;
    let fvals: Vec<f64> = x.iter().map(|&v| target.eval(v)).collect();
    let residual: Vec<f64> = fvals.iter().zip(y).map(|(f, yi)| f - yi).collect();
    let noiseless = fit_distributed(kernel, filter, param, x, &fvals, partition, path)?;
    let sample_part = fit_distributed(kernel, filter, param, x, &residual, partition, path)?;
    let fitted = fit_distributed(kernel, filter, param, x, y, partition, path)?;

    let sample_norm = sample_part.combined().rkhs_norm_sq().max(0.0).sqrt();
    let (approximation_norm, total_norm, surrogate) = match target.rkhs_norm_sq() {
        Some(_) => (
            hk_error(&noiseless.combined(), target)?,
            hk_error(&fitted.combined(), target)?,
            false,
        ),
        None => {
            let proj_sq = projected_norm_sq(kernel, x, &fvals)?;
            let dist = |e: &KernelExpansion| {
                let v = proj_sq - 2.0 * e.inner_with(|t| target.eval(t)) + e.rkhs_norm_sq();
                v.max(0.0).sqrt()
            };
            (dist(&noiseless.combined()), dist(&fitted.combined()), true)
        }
    };
    Ok(DiagnosticSplit {
        approximation_norm,
        sample_norm,
        total_norm,
        surrogate,
        noiseless,
        sample_part,
    })
}

/// `f^T G^+ f`: squared norm of the minimum-norm interpolant of `f` on `x`.
fn projected_norm_sq(kernel: &Kernel, x: &[f64], fvals: &[f64]) -> Result<f64> {
    let model = SpectralModel::new(kernel, x)?;
    let scale = kernel.kappa().powi(2) * x.len() as f64;
    let proj = model.project(fvals);
    Ok(model
        .eigenvalues()
        .iter()
        .zip(&proj)
        .filter(|(&mu, _)| mu > 0.0)
        .map(|(&mu, &c)| c * c / (scale * mu))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fit_spectral;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mean_prediction_gap(a: &AveragedEstimator, xs: &[f64]) -> f64 {
        let direct = a.predict_many(xs);
        let combined = a.combined().predict_many(xs);
        direct.iter().zip(&combined).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
    }

    fn data(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y = x.iter().map(|&v| 0.5 * v * (1.0 - v) + 0.01 * (rng.random::<f64>() - 0.5)).collect();
        (x, y)
    }

    #[test]
    fn partition_examples() {
        let p = partition(6, 3, None).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(partition(6, 1, None).unwrap().blocks(), &[vec![0, 1, 2, 3, 4, 5]]);
        assert_eq!(partition(7, 3, None).unwrap().sizes(), vec![3, 2, 2]);
        assert!(partition(3, 4, None).is_err());
        assert!(partition(3, 0, None).is_err());
    }

    #[test]
    fn shuffled_partition_is_deterministic_and_covers() {
        let a = partition(50, 7, Some(9)).unwrap();
        assert_eq!(a, partition(50, 7, Some(9)).unwrap());
        let mut all: Vec<usize> = a.blocks().concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn single_block_equals_single_machine() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        let p = f.param(0.05).unwrap();
        let (x, y) = data(40, 1);
        let d = fit_distributed(&k, &f, &p, &x, &y, &partition(40, 1, None).unwrap(), SolverPath::Spectral).unwrap();
        let s = fit_spectral(&k, &f, &p, &x, &y).unwrap();
        assert_eq!(d.locals()[0].coefficients(), s.coefficients());
    }

    #[test]
    fn identical_blocks_average_to_the_local() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        let p = f.param(0.05).unwrap();
        let (x0, y0) = data(20, 2);
        let x: Vec<f64> = x0.iter().chain(&x0).copied().collect();
        let y: Vec<f64> = y0.iter().chain(&y0).copied().collect();
        let d = fit_distributed(&k, &f, &p, &x, &y, &partition(40, 2, None).unwrap(), SolverPath::Spectral).unwrap();
        for q in [0.1, 0.5, 0.77] {
            assert!((d.predict(q) - d.locals()[0].predict(q)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_noise_has_no_sample_error() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        let p = f.param(0.01).unwrap();
        let target = TargetFunction::quadratic_bump();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..48).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|&v| target.eval(v)).collect();
        let part = partition(48, 3, None).unwrap();
        let d = diagnostic_split(&k, &f, &p, &x, &y, &part, &target, SolverPath::Spectral).unwrap();
        assert!(d.sample_norm < 1e-10);
        assert!((d.approximation_norm - d.total_norm).abs() < 1e-10);
        assert!(!d.surrogate);

        let zero = TargetFunction::zero();
        let d = diagnostic_split(&k, &f, &p, &x, &vec![0.0; 48], &part, &zero, SolverPath::Spectral).unwrap();
        assert_eq!(d.sample_norm, 0.0);
        assert_eq!(d.approximation_norm, 0.0);
    }

    #[test]
    fn split_parts_bound_the_total() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        let p = f.param(0.003).unwrap();
        let target = TargetFunction::quadratic_bump();
        let (x, y) = data(64, 5);
        let part = partition(64, 4, None).unwrap();
        let d = diagnostic_split(&k, &f, &p, &x, &y, &part, &target, SolverPath::Spectral).unwrap();
        assert!(d.total_norm <= d.approximation_norm + d.sample_norm + 1e-12);
        assert!(d.approximation_norm <= d.total_norm + d.sample_norm + 1e-12);
    }

    #[test]
    fn unknown_target_norm_uses_interpolant_surrogate() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::tikhonov();
        let p = f.param(0.01).unwrap();
        let known = TargetFunction::quadratic_bump();
        let custom = TargetFunction::custom("bump", |x| 0.5 * x * (1.0 - x));
        let (x, y) = data(32, 6);
        let part = partition(32, 2, None).unwrap();
        let a = diagnostic_split(&k, &f, &p, &x, &y, &part, &known, SolverPath::Spectral).unwrap();
        let b = diagnostic_split(&k, &f, &p, &x, &y, &part, &custom, SolverPath::Spectral).unwrap();
        assert!(b.surrogate);
        assert!((a.sample_norm - b.sample_norm).abs() < 1e-12);
        // projecting drops the part of f orthogonal to the anchors
        assert!(b.approximation_norm <= a.approximation_norm + 1e-9);
    }

    #[test]
    fn combined_expansion_matches_mean_of_locals() {
        let k = Kernel::sobolev_min();
        let f = FilterSpec::landweber();
        let p = f.param_from_iterations(20).unwrap();
        let (x, y) = data(45, 7);
        let a = fit_distributed(&k, &f, &p, &x, &y, &partition(45, 4, Some(3)).unwrap(), SolverPath::Auto).unwrap();
        let qs: Vec<f64> = (0..25).map(|i| i as f64 / 24.0).collect();
        assert!(mean_prediction_gap(&a, &qs) < 1e-12);
    }
}
