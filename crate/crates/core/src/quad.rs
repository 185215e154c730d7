//! Composite Gauss–Legendre rules on subintervals of the real line.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

/// Nodes and weights of a composite rule; `Σ w_i f(x_i)` approximates the integral.
#[derive(Clone, Debug)]
pub(crate) struct Composite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Composite {
    /// `order`-point Gauss–Legendre on each of the intervals between consecutive breaks.
    /// Zero-length intervals contribute nothing.
    pub fn on_breaks(breaks: &[f64], order: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(order.max(1)).unwrap());
        let pairs = rule.as_node_weight_pairs();
        let mut nodes = Vec::with_capacity(breaks.len().saturating_sub(1) * order);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for &(z, wt) in pairs {
                nodes.push(mid + half * z);
                weights.push(half * wt);
            }
        }
        Composite { nodes, weights }
    }

    /// `panels` equal panels on `[a, b]`.
    pub fn uniform(a: f64, b: f64, panels: usize, order: usize) -> Self {
        let panels = panels.max(1);
        let breaks: Vec<f64> = (0..=panels)
            .map(|i| a + (b - a) * i as f64 / panels as f64)
            .collect();
        Self::on_breaks(&breaks, order)
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}
