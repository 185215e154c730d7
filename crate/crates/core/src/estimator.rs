//! Single-block spectral estimator `f = g_λ(T̄_x) S̄*_x y`.
//!
//! In the span of `{K(x_j, ·)}` the normalized empirical operator acts on
//! coefficient vectors as `M = G / (κ² n)`, and `S̄*_x y` has coefficients
//! `y / (κ² n)`. The estimator therefore has coefficients
//! `α = g_λ(M) y / (κ² n)`, computed either from an eigendecomposition of `M`
//! (spectral path) or by running the filter's recurrence with products by `G`
//! (iterative path, Landweber and ν-method only). Both paths produce the same
//! polynomial in `M` and agree to rounding.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::filters::{nu_weights, FilterKind, FilterSpec, LambdaParam};
use crate::kernels::{dot, AnchorOperator, Kernel};

/// Eigenvalues below this are treated as exact zeros of `M`.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Which route computes the filtered coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    Spectral,
    Iterative,
    /// Iterative for iterative filters on kernels with a structured Gram
    /// operator, spectral otherwise.
    #[default]
    Auto,
}

impl SolverPath {
    pub fn resolve(self, kernel: &Kernel, filter: &FilterSpec) -> SolverPath {
        match self {
            SolverPath::Auto => {
                if filter.is_iterative() && matches!(kernel, Kernel::SobolevMin) {
                    SolverPath::Iterative
                } else {
                    SolverPath::Spectral
                }
            }
            p => p,
        }
    }
}

/// `f = Σ α_j K(x_j, ·)`.
#[derive(Clone, Debug)]
pub struct KernelExpansion {
    coefficients: Vec<f64>,
    points: Vec<f64>,
    kernel: Kernel,
}

impl KernelExpansion {
    pub fn new(kernel: Kernel, points: Vec<f64>, coefficients: Vec<f64>) -> Result<Self> {
        if points.len() != coefficients.len() {
            return input(format!(
                "{} coefficients for {} anchors",
                coefficients.len(),
                points.len()
            ));
        }
        Ok(KernelExpansion {
            coefficients,
            points,
            kernel,
        })
    }

    pub fn zero(kernel: Kernel) -> Self {
        KernelExpansion {
            coefficients: Vec::new(),
            points: Vec::new(),
            kernel,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.coefficients)
            .map(|(&p, &a)| a * self.kernel.k(p, x))
            .sum()
    }

    pub fn predict_many(&self, xs: &[f64]) -> Vec<f64> {
        if self.is_empty() {
            return vec![0.0; xs.len()];
        }
        self.kernel.operator(&self.points).evaluate(&self.coefficients, xs)
    }

    /// `α^T G α`; values in `[-1e-10, 0)` are clamped to zero.
    pub fn rkhs_norm_sq(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let v = self.kernel.operator(&self.points).quadratic_form(&self.coefficients);
        if (-1e-10..0.0).contains(&v) {
            0.0
        } else {
            v
        }
    }

    /// `<f, h>_{H_K} = Σ α_j h(x_j)` for any `h` in the space.
    pub fn inner_with<F: Fn(f64) -> f64>(&self, h: F) -> f64 {
        self.points
            .iter()
            .zip(&self.coefficients)
            .map(|(&p, &a)| a * h(p))
            .sum()
    }

    /// `Σ_i w_i f_i` as one expansion over the concatenated anchors.
    pub fn weighted_sum(parts: &[&KernelExpansion], weights: &[f64]) -> Result<Self> {
        let kernel = match parts.first() {
            Some(p) => p.kernel.clone(),
            None => return input("weighted sum of zero expansions"),
        };
        if parts.len() != weights.len() {
            return input("one weight per expansion required");
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut points = Vec::with_capacity(total);
        let mut coefficients = Vec::with_capacity(total);
        for (p, &w) in parts.iter().zip(weights) {
            points.extend_from_slice(&p.points);
            coefficients.extend(p.coefficients.iter().map(|a| a * w));
        }
        Ok(KernelExpansion {
            coefficients,
            points,
            kernel,
        })
    }
}

pub fn predict(expansion: &KernelExpansion, x: f64) -> f64 {
    expansion.predict(x)
}

/// Eigendecomposition `M = V Λ V^T` of `M = G / (κ² n)`, eigenvalues descending
/// and clamped to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SpectralModel {
    eigenvalues: Vec<f64>,
    /// Column-major `n × n`; column `j` belongs to `eigenvalues[j]`.
    eigenvectors: Vec<f64>,
    points: Vec<f64>,
    kappa: f64,
}

impl SpectralModel {
    pub fn new(kernel: &Kernel, points: &[f64]) -> Result<Self> {
        if points.is_empty() {
            return input("spectral model needs at least one point");
        }
        let kappa = kernel.kappa();
        if kappa <= 0.0 {
            return input("kernel bound kappa must be positive to normalize the operator");
        }
        let gram = kernel.gram(points)?;
        let n = points.len();
        let scale = 1.0 / (kappa * kappa * n as f64);
        let m = Mat::<f64>::from_fn(n, n, |i, j| gram.get(i, j) * scale);
        let evd = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let u = evd.U();
        let mut eigenvalues = Vec::with_capacity(n);
        let mut eigenvectors = Vec::with_capacity(n * n);
        // faer returns ascending order
        for j in (0..n).rev() {
            let mut mu = s[j];
            if !mu.is_finite() {
                return Err(Error::Numeric("non-finite eigenvalue".into()));
            }
            if mu < EIGEN_FLOOR {
                mu = 0.0;
            }
            eigenvalues.push(mu.min(1.0));
            eigenvectors.extend((0..n).map(|i| u[(i, j)]));
        }
        Ok(SpectralModel {
            eigenvalues,
            eigenvectors,
            points: points.to_vec(),
            kappa,
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eigenvector(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.eigenvectors[j * n..(j + 1) * n]
    }

    /// `max |V^T V - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in a..n {
                let d = dot(self.eigenvector(a), self.eigenvector(b)) - if a == b { 1.0 } else { 0.0 };
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// `V^T v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|j| dot(self.eigenvector(j), v)).collect()
    }

    /// `V diag(w) c` for a projected vector `c`.
    pub fn reconstruct(&self, weights: impl Fn(usize, f64) -> f64, projected: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (j, (&mu, &c)) in self.eigenvalues.iter().zip(projected).enumerate() {
            let w = weights(j, mu) * c;
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.eigenvector(j)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Coefficients `g_λ(M) (V^T y) / (κ² n)` from a precomputed projection.
    pub fn coefficients_from_projection(
        &self,
        filter: &FilterSpec,
        param: &LambdaParam,
        projected: &[f64],
    ) -> Vec<f64> {
        let scale = 1.0 / (self.kappa * self.kappa * self.n() as f64);
        self.reconstruct(|_, mu| filter.value(param, mu) * scale, projected)
    }

    pub fn coefficients(&self, filter: &FilterSpec, param: &LambdaParam, y: &[f64]) -> Result<Vec<f64>> {
        filter.check_param(param)?;
        if y.len() != self.n() {
            return input(format!("{} outputs for {} inputs", y.len(), self.n()));
        }
        Ok(self.coefficients_from_projection(filter, param, &self.project(y)))
    }
}

fn check_data(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return input("at least one sample required");
    }
    if x.len() != y.len() {
        return input(format!("{} inputs but {} outputs", x.len(), y.len()));
    }
    Ok(())
}

/// Spectral-path estimator.
pub fn fit_spectral(
    kernel: &Kernel,
    filter: &FilterSpec,
    param: &LambdaParam,
    x: &[f64],
    y: &[f64],
) -> Result<KernelExpansion> {
    check_data(x, y)?;
    filter.check_param(param)?;
    let model = SpectralModel::new(kernel, x)?;
    let alpha = model.coefficients(filter, param, y)?;
    KernelExpansion::new(kernel.clone(), x.to_vec(), alpha)
}

/// Iterative-path estimator for Landweber and the ν-method.
pub fn fit_iterative(
    kernel: &Kernel,
    filter: &FilterSpec,
    param: &LambdaParam,
    x: &[f64],
    y: &[f64],
) -> Result<KernelExpansion> {
    check_data(x, y)?;
    filter.check_param(param)?;
    let k = param
        .iterations
        .ok_or_else(|| Error::Input(format!("filter {} is not iterative", filter.kind)))?;
    let mut it = Iterates::new(kernel, filter, x, y)?;
    let mut alpha = Vec::new();
    for _ in 0..k {
        alpha = it.next_coefficients();
    }
    KernelExpansion::new(kernel.clone(), x.to_vec(), alpha)
}

/// Estimator through the selected path.
pub fn fit(
    kernel: &Kernel,
    filter: &FilterSpec,
    param: &LambdaParam,
    x: &[f64],
    y: &[f64],
    path: SolverPath,
) -> Result<KernelExpansion> {
    match path.resolve(kernel, filter) {
        SolverPath::Iterative => fit_iterative(kernel, filter, param, x, y),
        _ => fit_spectral(kernel, filter, param, x, y),
    }
}

/// Coefficient-space iterates `α_k = u_k / (κ² n)` with `u_k = g_k(M) y`.
pub struct Iterates {
    op: AnchorOperator,
    y: Vec<f64>,
    scale: f64,
    nu: Option<f64>,
    step: usize,
    prev: Vec<f64>,
    cur: Vec<f64>,
    work: Vec<f64>,
}

impl Iterates {
    pub fn new(kernel: &Kernel, filter: &FilterSpec, x: &[f64], y: &[f64]) -> Result<Self> {
        check_data(x, y)?;
        kernel.check_points(x)?;
        let nu = match filter.kind {
            FilterKind::Landweber => None,
            FilterKind::NuMethod { nu } => Some(nu),
            _ => return input(format!("filter {} has no iterative form", filter.kind)),
        };
        let kappa = kernel.kappa();
        if kappa <= 0.0 {
            return input("kernel bound kappa must be positive to normalize the operator");
        }
        let n = x.len();
        Ok(Iterates {
            op: kernel.operator(x),
            y: y.to_vec(),
            scale: 1.0 / (kappa * kappa * n as f64),
            nu,
            step: 0,
            prev: vec![0.0; n],
            cur: vec![0.0; n],
            work: vec![0.0; n],
        })
    }

    /// Iteration count of the last returned iterate.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Advances one step and returns the new coefficient vector.
    pub fn next_coefficients(&mut self) -> Vec<f64> {
        self.advance();
        self.cur.iter().map(|u| u * self.scale).collect()
    }

    fn advance(&mut self) {
        self.step += 1;
        let (mu, omega) = match self.nu {
            None => (0.0, 1.0),
            Some(nu) => nu_weights(nu, self.step),
        };
        // work = M u_{k-1}
        self.op.apply(&self.cur, &mut self.work);
        for i in 0..self.y.len() {
            let u = self.cur[i];
            let next = u + mu * (u - self.prev[i]) + omega * (self.y[i] - self.scale * self.work[i]);
            self.prev[i] = u;
            self.cur[i] = next;
        }
    }
}

/// Fits one data block for many parameters, sharing the expensive part
/// (eigendecomposition or the iteration sequence).
pub struct BlockSolver {
    kernel: Kernel,
    filter: FilterSpec,
    x: Vec<f64>,
    y: Vec<f64>,
    spectral: Option<(SpectralModel, Vec<f64>)>,
}

impl BlockSolver {
    pub fn new(kernel: &Kernel, filter: &FilterSpec, x: &[f64], y: &[f64], path: SolverPath) -> Result<Self> {
        check_data(x, y)?;
        let spectral = match path.resolve(kernel, filter) {
            SolverPath::Iterative => {
                if !filter.is_iterative() {
                    return input(format!("filter {} has no iterative form", filter.kind));
                }
                kernel.check_points(x)?;
                None
            }
            _ => {
                let model = SpectralModel::new(kernel, x)?;
                let proj = model.project(y);
                Some((model, proj))
            }
        };
        Ok(BlockSolver {
            kernel: kernel.clone(),
            filter: *filter,
            x: x.to_vec(),
            y: y.to_vec(),
            spectral,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.x
    }

    /// Calls `visit(i, α)` once for every parameter. Iterative solvers visit in
    /// increasing iteration order; spectral solvers in input order.
    pub fn for_each<F: FnMut(usize, &[f64])>(&self, params: &[LambdaParam], mut visit: F) -> Result<()> {
        for p in params {
            self.filter.check_param(p)?;
        }
        match &self.spectral {
            Some((model, proj)) => {
                for (i, p) in params.iter().enumerate() {
                    visit(i, &model.coefficients_from_projection(&self.filter, p, proj));
                }
            }
            None => {
                let mut order: Vec<usize> = (0..params.len()).collect();
                order.sort_by_key(|&i| params[i].iterations.unwrap_or(1));
                let mut it = Iterates::new(&self.kernel, &self.filter, &self.x, &self.y)?;
                let mut alpha = Vec::new();
                for i in order {
                    let k = params[i].iterations.unwrap_or(1);
                    while it.step() < k {
                        alpha = it.next_coefficients();
                    }
                    visit(i, &alpha);
                }
            }
        }
        Ok(())
    }

    pub fn fit_all(&self, params: &[LambdaParam]) -> Result<Vec<KernelExpansion>> {
        let mut out = vec![None; params.len()];
        self.for_each(params, |i, a| {
            out[i] = Some(a.to_vec());
        })?;
        out.into_iter()
            .map(|a| KernelExpansion::new(self.kernel.clone(), self.x.clone(), a.unwrap_or_default()))
            .collect()
    }

    pub fn fit(&self, param: &LambdaParam) -> Result<KernelExpansion> {
        Ok(self.fit_all(std::slice::from_ref(param))?.remove(0))
    }
}
