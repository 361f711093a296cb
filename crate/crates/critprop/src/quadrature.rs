//! Gaussian-measure expectations via Gauss-Hermite quadrature.
//!
//! All expectations in the mean-field theory are taken against the standard
//! normal measure Dz = dz exp(-z^2/2)/sqrt(2*pi). Nodes and weights are
//! built for that measure directly (probabilists' convention), so the
//! weights sum to one and `expect1` of `z*z` is the unit variance.
//!
//! Correlated pairs are never integrated against a two-dimensional Gaussian
//! with an explicit covariance; callers substitute
//! `u2 = sqrt(q2) * (c*z1 + sqrt(1-c^2)*z2)` so the rule stays product-form
//! and remains regular as `c -> 1`.

use nalgebra::DMatrix;
use thiserror::Error;

/// Default node count. The integrands appearing in the theory are entire or
/// piecewise smooth, and 128 nodes push the quadrature error far below every
/// fit tolerance used downstream.
pub const DEFAULT_ORDER: usize = 128;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("integrand returned a non-finite value at node z = {node}")]
    NonFinite { node: f64 },
    #[error("integrand returned a non-finite value at node pair (z1, z2) = ({node1}, {node2})")]
    NonFinitePair { node1: f64, node2: f64 },
}

/// Gauss-Hermite rule for the standard normal measure.
///
/// Nodes are strictly increasing and exactly symmetric about zero; weights
/// are positive and sum to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build a rule with `order` nodes. Nodes start as eigenvalues of the
    /// Jacobi matrix of the (monic, probabilists') Hermite recurrence and are
    /// polished by Newton steps on the orthonormal polynomial; weights come
    /// from the Christoffel function `w_i = 1 / sum_k p_k(x_i)^2`.
    ///
    /// The eigenvector route for the weights fails here: first components of
    /// extreme eigenvectors sit many orders below the eigensolver's absolute
    /// accuracy, so the tail weights would be pure noise.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be at least 1");
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut raw: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        raw.sort_by(f64::total_cmp);

        // Orthonormal Hermite values p_0..p_order at x, via the recurrence
        // p_{k+1} = (x p_k - sqrt(k) p_{k-1}) / sqrt(k+1).
        let eval_all = |x: f64, out: &mut Vec<f64>| {
            out.clear();
            out.push(1.0);
            if order >= 1 {
                out.push(x);
            }
            for k in 1..order {
                let next =
                    (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
                out.push(next);
            }
        };

        let mut p = Vec::with_capacity(order + 1);
        let mut nodes = Vec::with_capacity(order);
        let mut weights = Vec::with_capacity(order);
        for &x0 in &raw {
            // Newton polish: p_order'(x) = sqrt(order) p_{order-1}(x).
            let mut x = x0;
            for _ in 0..3 {
                eval_all(x, &mut p);
                let deriv = (order as f64).sqrt() * p[order - 1];
                if deriv == 0.0 {
                    break;
                }
                let delta = p[order] / deriv;
                x -= delta;
                if delta.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            eval_all(x, &mut p);
            let christoffel: f64 = p[..order].iter().map(|v| v * v).sum();
            nodes.push(x);
            weights.push(1.0 / christoffel);
        }

        // Symmetrize: the measure is even, so pair up mirrored nodes and
        // average away residual rounding asymmetry.
        let n = nodes.len();
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let node = 0.5 * (nodes[j] - nodes[i]);
            let weight = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -node;
            nodes[j] = node;
            weights[i] = weight;
            weights[j] = weight;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        // Christoffel weights of the unit measure sum to one in exact
        // arithmetic; rescale to make it hold exactly in floats.
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        GaussHermite { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E[f(z)] for z ~ N(0,1).
    pub fn expect1(&self, f: impl Fn(f64) -> f64) -> Result<f64, QuadratureError> {
        let mut acc = 0.0;
        for (&z, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(z);
            if !v.is_finite() {
                return Err(QuadratureError::NonFinite { node: z });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// E[f(z1, z2)] for independent z1, z2 ~ N(0,1), by the tensor-product
    /// rule.
    pub fn expect2(&self, f: impl Fn(f64, f64) -> f64) -> Result<f64, QuadratureError> {
        let mut acc = 0.0;
        for (&z1, &w1) in self.nodes.iter().zip(&self.weights) {
            let mut inner = 0.0;
            for (&z2, &w2) in self.nodes.iter().zip(&self.weights) {
                let v = f(z1, z2);
                if !v.is_finite() {
                    return Err(QuadratureError::NonFinitePair { node1: z1, node2: z2 });
                }
                inner += w2 * v;
            }
            acc += w1 * inner;
        }
        Ok(acc)
    }
}

impl Default for GaussHermite {
    fn default() -> Self {
        GaussHermite::new(DEFAULT_ORDER)
    }
}
