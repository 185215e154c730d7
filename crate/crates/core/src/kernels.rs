//! Kernel functions, Gram matrices and anchor-space operators.
//!
//! The built-in kernel is `K(x, t) = min(x, t) - x t` on `[0, 1]`, the reproducing
//! kernel of `H^1_0[0, 1]` with inner product `<f, g> = ∫ f' g'`. Its Gram matrix
//! has a prefix-sum structure, so products with it cost `O(n)` once the anchors
//! are sorted; [`AnchorOperator`] exposes that structure and falls back to dense
//! products for user kernels.

use std::fmt;
use std::sync::Arc;

use crate::error::{input, Result};
use crate::estimator::KernelExpansion;

type KernelFn = dyn Fn(f64, f64) -> f64 + Send + Sync;
type DomainFn = dyn Fn(f64) -> bool + Send + Sync;

/// A user-supplied kernel with its own sup bound and domain predicate.
pub struct CustomKernel {
    name: String,
    kappa: f64,
    func: Box<KernelFn>,
    domain: Box<DomainFn>,
}

impl fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomKernel")
            .field("name", &self.name)
            .field("kappa", &self.kappa)
            .finish_non_exhaustive()
    }
}

/// Symmetric positive-semidefinite kernel bounded by `kappa`.
#[derive(Clone, Debug)]
pub enum Kernel {
    /// `min(x, t) - x t` on `[0, 1]`.
    SobolevMin,
    Custom(Arc<CustomKernel>),
}

impl Kernel {
    pub fn sobolev_min() -> Self {
        Kernel::SobolevMin
    }

    /// Wraps a user kernel. `kappa` must bound `sqrt(K(x, x))` on the domain;
    /// it is passed through unchanged.
    pub fn custom<F, D>(name: impl Into<String>, kappa: f64, func: F, domain: D) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> bool + Send + Sync + 'static,
    {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return input(format!("kernel bound must be finite and nonnegative, got {kappa}"));
        }
        Ok(Kernel::Custom(Arc::new(CustomKernel {
            name: name.into(),
            kappa,
            func: Box::new(func),
            domain: Box::new(domain),
        })))
    }

    pub fn name(&self) -> &str {
        match self {
            Kernel::SobolevMin => "sobolev-min",
            Kernel::Custom(c) => &c.name,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self {
            Kernel::SobolevMin => (0.0..=1.0).contains(&x),
            Kernel::Custom(c) => (c.domain)(x),
        }
    }

    /// Checked evaluation of `K(x, t)`.
    pub fn eval(&self, x: f64, t: f64) -> Result<f64> {
        for v in [x, t] {
            if !self.contains(v) {
                return input(format!("point {v} outside the domain of kernel {}", self.name()));
            }
        }
        Ok(self.k(x, t))
    }

    #[inline]
    pub(crate) fn k(&self, x: f64, t: f64) -> f64 {
        match self {
            Kernel::SobolevMin => x.min(t) - x * t,
            Kernel::Custom(c) => (c.func)(x, t),
        }
    }

    /// `sup_x sqrt(K(x, x))`.
    pub fn kappa(&self) -> f64 {
        match self {
            // x - x^2 peaks at 1/4
            Kernel::SobolevMin => 0.5,
            Kernel::Custom(c) => c.kappa,
        }
    }

    pub fn check_points(&self, points: &[f64]) -> Result<()> {
        match points.iter().find(|&&p| !self.contains(p)) {
            Some(p) => input(format!("point {p} outside the domain of kernel {}", self.name())),
            None => Ok(()),
        }
    }

    pub fn gram(&self, points: &[f64]) -> Result<GramMatrix> {
        if points.is_empty() {
            return input("gram matrix needs at least one point");
        }
        self.check_points(points)?;
        Ok(GramMatrix::build(self, points))
    }

    /// Operator for products with the Gram matrix of `anchors` and for evaluating
    /// expansions over those anchors at arbitrary points.
    pub fn operator(&self, anchors: &[f64]) -> AnchorOperator {
        match self {
            Kernel::SobolevMin => AnchorOperator::Sobolev(SortedAnchors::new(anchors)),
            Kernel::Custom(_) => AnchorOperator::Dense {
                kernel: self.clone(),
                anchors: anchors.to_vec(),
            },
        }
    }
}

pub fn eval(kernel: &Kernel, x: f64, t: f64) -> Result<f64> {
    kernel.eval(x, t)
}

pub fn kappa_of(kernel: &Kernel) -> f64 {
    kernel.kappa()
}

pub fn gram(kernel: &Kernel, points: &[f64]) -> Result<GramMatrix> {
    kernel.gram(points)
}

/// `alpha^T G alpha`, clamped at zero when rounding pushes it slightly negative.
pub fn rkhs_norm_sq(expansion: &KernelExpansion) -> f64 {
    expansion.rkhs_norm_sq()
}

/// Dense symmetric matrix `G_ij = K(x_i, x_j)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    entries: Vec<f64>,
    points: Vec<f64>,
}

impl GramMatrix {
    fn build(kernel: &Kernel, points: &[f64]) -> Self {
        let n = points.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = kernel.k(points[i], points[j]);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        GramMatrix {
            entries,
            points: points.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| v[i] * dot(self.row(i), v))
            .sum()
    }
}

/// Anchors sorted ascending, with the permutation back to input order.
#[derive(Clone, Debug)]
pub struct SortedAnchors {
    xs: Vec<f64>,
    order: Vec<usize>,
}

impl SortedAnchors {
    fn new(anchors: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| anchors[a].total_cmp(&anchors[b]));
        let xs = order.iter().map(|&i| anchors[i]).collect();
        SortedAnchors { xs, order }
    }
}

/// Products with a Gram matrix without necessarily materializing it.
#[derive(Clone, Debug)]
pub enum AnchorOperator {
    Sobolev(SortedAnchors),
    Dense { kernel: Kernel, anchors: Vec<f64> },
}

impl AnchorOperator {
    pub fn dim(&self) -> usize {
        match self {
            AnchorOperator::Sobolev(s) => s.xs.len(),
            AnchorOperator::Dense { anchors, .. } => anchors.len(),
        }
    }

    /// `out = G v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            AnchorOperator::Sobolev(s) => {
                let n = s.xs.len();
                // (G v)_i = sum_{x_j <= x_i} x_j v_j + x_i sum_{x_j > x_i} v_j - x_i sum_j x_j v_j
                let mut total_xv = 0.0;
                let mut total_v = 0.0;
                for (&x, &i) in s.xs.iter().zip(&s.order) {
                    total_xv += x * v[i];
                    total_v += v[i];
                }
                let mut prefix_xv = 0.0;
                let mut prefix_v = 0.0;
                for p in 0..n {
                    let i = s.order[p];
                    let x = s.xs[p];
                    prefix_xv += x * v[i];
                    prefix_v += v[i];
                    out[i] = prefix_xv + x * (total_v - prefix_v) - x * total_xv;
                }
            }
            AnchorOperator::Dense { kernel, anchors } => {
                for (o, &xi) in out.iter_mut().zip(anchors) {
                    *o = anchors
                        .iter()
                        .zip(v)
                        .map(|(&xj, &vj)| kernel.k(xi, xj) * vj)
                        .sum();
                }
            }
        }
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply(v, &mut out);
        out
    }

    /// `v^T G v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.apply_vec(v))
    }

    /// Evaluates `sum_j coeffs_j K(x_j, q)` at every query point.
    pub fn evaluate(&self, coeffs: &[f64], queries: &[f64]) -> Vec<f64> {
        match self {
            AnchorOperator::Sobolev(s) => {
                let n = s.xs.len();
                // prefix sums over sorted anchors: sum alpha_j x_j and sum alpha_j
                let mut pre_ax = Vec::with_capacity(n + 1);
                let mut pre_a = Vec::with_capacity(n + 1);
                pre_ax.push(0.0);
                pre_a.push(0.0);
                for (&x, &i) in s.xs.iter().zip(&s.order) {
                    pre_ax.push(pre_ax.last().unwrap() + coeffs[i] * x);
                    pre_a.push(pre_a.last().unwrap() + coeffs[i]);
                }
                let total_ax = pre_ax[n];
                let total_a = pre_a[n];
                queries
                    .iter()
                    .map(|&q| {
                        let p = s.xs.partition_point(|&x| x <= q);
                        pre_ax[p] + q * (total_a - pre_a[p]) - q * total_ax
                    })
                    .collect()
            }
            AnchorOperator::Dense { kernel, anchors } => queries
                .iter()
                .map(|&q| {
                    anchors
                        .iter()
                        .zip(coeffs)
                        .map(|(&x, &a)| a * kernel.k(x, q))
                        .sum()
                })
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_examples() {
        let k = Kernel::sobolev_min();
        assert_eq!(k.eval(0.5, 0.5).unwrap(), 0.25);
        assert_eq!(k.eval(0.25, 0.75).unwrap(), 0.0625);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(k.eval(0.0, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn eval_rejects_out_of_domain() {
        let k = Kernel::sobolev_min();
        assert!(k.eval(-0.1, 0.5).is_err());
        assert!(k.eval(0.5, 1.5).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_of(&Kernel::sobolev_min()), 0.5);
        let zero = Kernel::custom("zero", 0.0, |_, _| 0.0, |_| true).unwrap();
        assert_eq!(kappa_of(&zero), 0.0);
        let user = Kernel::custom("user", 1.0, |x: f64, t: f64| (x * t).cos(), |_| true).unwrap();
        assert_eq!(kappa_of(&user), 1.0);
    }

    #[test]
    fn gram_examples() {
        let k = Kernel::sobolev_min();
        assert_eq!(k.gram(&[0.5]).unwrap().entries(), &[0.25]);
        assert_eq!(k.gram(&[0.0, 1.0]).unwrap().entries(), &[0.0; 4]);
        assert_eq!(
            k.gram(&[0.25, 0.75]).unwrap().entries(),
            &[0.1875, 0.0625, 0.0625, 0.1875]
        );
        assert!(k.gram(&[]).is_err());
    }

    #[test]
    fn symmetry_and_kappa_bound() {
        let k = Kernel::sobolev_min();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (x, t): (f64, f64) = (rng.random(), rng.random());
            assert_eq!(k.eval(x, t).unwrap(), k.eval(t, x).unwrap());
            assert!(k.eval(x, x).unwrap() <= k.kappa().powi(2) + 1e-15);
        }
    }

    #[test]
    fn fast_operator_matches_dense_gram() {
        let k = Kernel::sobolev_min();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        xs.push(xs[3]);
        xs.push(0.0);
        let v: Vec<f64> = (0..xs.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let g = k.gram(&xs).unwrap();
        let fast = k.operator(&xs).apply_vec(&v);
        for i in 0..xs.len() {
            assert!((fast[i] - dot(g.row(i), &v)).abs() < 1e-13);
        }
        let q: Vec<f64> = (0..40).map(|_| rng.random()).chain([0.0, 1.0, xs[5]]).collect();
        let fast_eval = k.operator(&xs).evaluate(&v, &q);
        for (qi, fe) in q.iter().zip(fast_eval) {
            let direct: f64 = xs.iter().zip(&v).map(|(&x, &a)| a * k.k(x, *qi)).sum();
            assert!((fe - direct).abs() < 1e-13);
        }
    }
}
