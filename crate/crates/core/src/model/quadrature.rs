//! Quadrature rules: Gauss-Hermite for expectations over Gaussian noise,
//! Gauss-Legendre for smooth integrands on intervals, and the composite
//! midpoint rule used for integrals against the measure `G`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Expectation under a (scaled) standard normal.
    GaussHermite,
    GaussLegendre,
    CompositeMidpoint,
}

/// A quadrature rule in `dim` dimensions. Nodes are stored row-major,
/// one `dim`-vector per node.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
    kind: RuleKind,
}

impl QuadratureRule {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>, dim: usize, kind: RuleKind) -> Result<Self> {
        if dim == 0 || nodes.len() != weights.len() * dim {
            return Err(Error::InvalidInput(format!(
                "quadrature rule: {} node coordinates do not match {} weights in dimension {dim}",
                nodes.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "quadrature weights must be positive and finite, got {w}"
            )));
        }
        Ok(Self { nodes, weights, dim, kind })
    }

    /// `m`-point Gauss-Hermite rule for `E[f(X)]`, `X ~ N(0, 1)`.
    ///
    /// Starting values come from the eigenvalues of the Jacobi matrix; each
    /// node is then polished by Newton steps on the orthonormal Hermite
    /// recurrence and weighted by the Christoffel function, which keeps even
    /// the extreme tail weights positive and accurate.
    pub fn gauss_hermite(m: usize) -> Self {
        assert!(m >= 1, "Gauss-Hermite rule needs at least one node");
        if m == 1 {
            return Self { nodes: vec![0.0], weights: vec![1.0], dim: 1, kind: RuleKind::GaussHermite };
        }
        let mut jacobi = DMatrix::<f64>::zeros(m, m);
        for k in 1..m {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        guesses.sort_by(|a, b| a.total_cmp(b));

        let mut nodes = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for mut x in guesses {
            for _ in 0..50 {
                let (pm, pm1, _) = hermite_orthonormal(m, x);
                let deriv = (m as f64).sqrt() * pm1;
                let dx = pm / deriv;
                x -= dx;
                if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, _, norm_sq) = hermite_orthonormal(m, x);
            nodes.push(x);
            weights.push(1.0 / norm_sq);
        }
        // Symmetrize to remove the last rounding asymmetry.
        for i in 0..m / 2 {
            let j = m - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if m % 2 == 1 {
            nodes[m / 2] = 0.0;
        }
        Self { nodes, weights, dim: 1, kind: RuleKind::GaussHermite }
    }

    /// `m`-point Gauss-Legendre rule on `[lo, hi]`.
    pub fn gauss_legendre(m: usize, lo: f64, hi: f64) -> Self {
        assert!(m >= 1);
        let mut nodes = vec![0.0; m];
        let mut weights = vec![0.0; m];
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for i in 0..m.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
            let mut deriv = 1.0;
            for _ in 0..100 {
                let (p, dp) = legendre(m, x);
                deriv = dp;
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(m, x);
            deriv = if dp.is_finite() { dp } else { deriv };
            let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
            nodes[i] = mid - half * x;
            nodes[m - 1 - i] = mid + half * x;
            weights[i] = half * w;
            weights[m - 1 - i] = half * w;
        }
        Self { nodes, weights, dim: 1, kind: RuleKind::GaussLegendre }
    }

    /// Composite midpoint rule on the box `region` with `counts[j]` cells along
    /// coordinate `j`. Weights are cell volumes (Lebesgue measure).
    pub fn composite_midpoint(region: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if region.is_empty() || region.len() != counts.len() {
            return Err(Error::InvalidInput("midpoint rule: region and counts must have equal, nonzero length".into()));
        }
        let mut axes = Vec::with_capacity(region.len());
        for (&(lo, hi), &m) in region.iter().zip(counts) {
            if !(hi > lo) || m == 0 {
                return Err(Error::InvalidInput(format!("midpoint rule: bad axis [{lo}, {hi}] with {m} cells")));
            }
            let step = (hi - lo) / m as f64;
            let pts: Vec<f64> = (0..m).map(|j| lo + (j as f64 + 0.5) * step).collect();
            axes.push(Self { nodes: pts, weights: vec![step; m], dim: 1, kind: RuleKind::CompositeMidpoint });
        }
        let mut rule = axes[0].clone();
        for axis in &axes[1..] {
            rule = rule.tensor(axis);
        }
        Ok(rule)
    }

    /// Tensor product: nodes are concatenations `(x, y)`, weights products.
    pub fn tensor(&self, other: &QuadratureRule) -> QuadratureRule {
        let dim = self.dim + other.dim;
        let mut nodes = Vec::with_capacity(self.len() * other.len() * dim);
        let mut weights = Vec::with_capacity(self.len() * other.len());
        for i in 0..self.len() {
            for j in 0..other.len() {
                nodes.extend_from_slice(self.node(i));
                nodes.extend_from_slice(other.node(j));
                weights.push(self.weights[i] * other.weights[j]);
            }
        }
        QuadratureRule { nodes, weights, dim, kind: self.kind }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weighted sum of `f` over the nodes.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let terms: Vec<f64> = (0..self.len()).map(|i| self.weights[i] * f(self.node(i))).collect();
        crate::numeric::pairwise_sum(&terms)
    }
}

/// Orthonormal probabilists' Hermite values: returns `(p_m(x), p_{m-1}(x), sum_{k<m} p_k(x)^2)`.
fn hermite_orthonormal(m: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut norm_sq = 0.0;
    for k in 0..m {
        norm_sq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, norm_sq)
}

/// Legendre `P_m(x)` and its derivative.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_odd(k: u32) -> f64 {
        // (k-1)!! for even k: E[X^k] of a standard normal
        (1..k).step_by(2).map(|j| j as f64).product()
    }

    #[test]
    fn gauss_hermite_exact_through_degree_2m_minus_1() {
        for m in 1..=10usize {
            let rule = QuadratureRule::gauss_hermite(m);
            assert!(rule.weights().iter().all(|&w| w > 0.0));
            for k in 0..(2 * m) as u32 {
                let exact = if k % 2 == 1 { 0.0 } else { double_factorial_odd(k) };
                let got = rule.integrate(|x| x[0].powi(k as i32));
                let scale = rule.integrate(|x| x[0].abs().powi(k as i32));
                assert!(
                    (got - exact).abs() <= 1e-12 * scale.max(1.0),
                    "m={m} k={k}: {got} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn gauss_hermite_30_nodes_positive_and_normalized() {
        let rule = QuadratureRule::gauss_hermite(30);
        assert_eq!(rule.len(), 30);
        assert!(rule.weights().iter().all(|&w| w > 0.0));
        assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-14);
        // E[exp(tX)] = exp(t^2/2)
        let t = 0.7;
        assert!((rule.integrate(|x| (t * x[0]).exp()) - (t * t / 2.0).exp()).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_polynomials() {
        let rule = QuadratureRule::gauss_legendre(5, -1.0, 2.0);
        // exact for degree 9
        let got = rule.integrate(|x| x[0].powi(9));
        let exact = (2f64.powi(10) - 1.0) / 10.0;
        assert!((got - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn midpoint_grid_total_mass() {
        let r1 = QuadratureRule::composite_midpoint(&[(-1.0, 1.0)], &[401]).unwrap();
        assert!((r1.weights().iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let r2 = QuadratureRule::composite_midpoint(&[(-1.0, 1.0), (-1.0, 1.0)], &[101, 101]).unwrap();
        assert_eq!(r2.len(), 101 * 101);
        assert!((r2.weights().iter().sum::<f64>() - 4.0).abs() < 1e-10);
        assert!(r2.nodes().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn rejects_nonpositive_weights() {
        assert!(QuadratureRule::new(vec![0.0, 1.0], vec![1.0, 0.0], 1, RuleKind::GaussLegendre).is_err());
        assert!(QuadratureRule::new(vec![0.0], vec![1.0, 1.0], 1, RuleKind::GaussLegendre).is_err());
    }
}
