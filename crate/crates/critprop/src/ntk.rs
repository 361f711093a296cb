//! Closed-form neural tangent kernel of the infinitely wide network at
//! initialization, its critical scaling collapse, the favorable depth range,
//! and the kernel-linearized training dynamics.
//!
//! The kernel of depth `L` is a sum over layers of the covariance at that
//! layer times the product of per-layer derivative gains from there to the
//! top. The gains hover near one at criticality and shrink below, so the
//! products are accumulated as a running suffix in one backward pass; naive
//! term-by-term products would underflow long before realistic depths.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::activations::{Activation, ActivationClass};
use crate::meanfield::{
    deriv_pair_expectation, run_trace, Hyperparameters, MeanFieldError, MeanFieldState,
    MeanFieldTrace,
};
use crate::metric_factors::CriticalPoint;
use crate::quadrature::GaussHermite;
use crate::scaling::{CollapseCurve, ScalingCollapse, ScalingError};

#[derive(Debug, Error)]
pub enum NtkError {
    #[error("kernel matrix is not symmetric")]
    NonSymmetric,
    #[error("kernel matrix is not positive semidefinite (min eigenvalue {min_eig}, trace {trace})")]
    NotPositiveSemidefinite { min_eig: f64, trace: f64 },
    #[error("series at ({sigma_w}, {sigma_b}) with {activation} does not match the critical point")]
    MismatchedCriticalPoint { sigma_w: f64, sigma_b: f64, activation: String },
    #[error("minimum cosine distance must be positive (identical inputs are excluded)")]
    ZeroMinDistance,
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("residual vector length {got} does not match {expected} training samples")]
    BadResidualLength { expected: usize, got: usize },
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

/// Per-layer derivative gain `sigma_w^2 E[h'(u1) h'(u2)]` at one state of
/// the covariance recursion.
pub fn layer_gain(
    state: &MeanFieldState,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    Ok(hp.sigma_w
        * hp.sigma_w
        * deriv_pair_expectation(act, state.q1, state.q2, state.corr, rule)?)
}

fn check_depth(depth: usize) -> Result<(), NtkError> {
    if depth == 0 {
        Err(NtkError::ZeroDepth)
    } else {
        Ok(())
    }
}

/// Kernel value for a pair of inputs at depth `L`, evaluated from a shared
/// covariance trace with suffix products accumulated in one backward pass.
pub fn ntk_value(
    x1: &[f64],
    x2: &[f64],
    depth: usize,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, NtkError> {
    check_depth(depth)?;
    let trace = run_trace(x1, x2, act, hp, rule, depth + 1)?;
    ntk_from_trace(&trace, depth, act, hp, rule)
}

/// Kernel value at depth `L` from a precomputed trace holding at least
/// `L + 1` states.
pub fn ntk_from_trace(
    trace: &MeanFieldTrace,
    depth: usize,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, NtkError> {
    check_depth(depth)?;
    assert!(trace.states.len() > depth, "trace too short for the requested depth");
    let mut suffix = 1.0;
    let mut theta = trace.states[depth].cov; // layer L+1 term, empty product
    for l in (0..depth).rev() {
        suffix *= layer_gain(&trace.states[l], act, hp, rule)?;
        theta += trace.states[l].cov * suffix;
    }
    Ok(theta)
}

/// Kernel values over a ladder of depths for one input pair, using the
/// forward recursion `Theta(L+1) = gain(L+1) Theta(L) + C(L+2)` (the same
/// suffix evaluation, factored incrementally).
pub fn ntk_depth_series(
    x1: &[f64],
    x2: &[f64],
    depths: &[usize],
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<Vec<f64>, NtkError> {
    let max_depth = *depths.iter().max().ok_or(NtkError::ZeroDepth)?;
    check_depth(*depths.iter().min().unwrap())?;
    let trace = run_trace(x1, x2, act, hp, rule, max_depth + 1)?;
    let mut theta = trace.states[0].cov * layer_gain(&trace.states[0], act, hp, rule)?
        + trace.states[1].cov;
    let mut by_depth = vec![0.0; max_depth + 1];
    by_depth[1] = theta;
    for depth in 2..=max_depth {
        let gain = layer_gain(&trace.states[depth - 1], act, hp, rule)?;
        theta = gain * theta + trace.states[depth].cov;
        by_depth[depth] = theta;
    }
    Ok(depths.iter().map(|&d| by_depth[d]).collect())
}

/// Depth series of the kernel for one initial cosine distance, tagged with
/// the setup it was computed at.
#[derive(Debug, Clone, Serialize)]
pub struct NtkSeries {
    pub rho0: f64,
    pub activation: Activation,
    pub hp: Hyperparameters,
    pub depths: Vec<usize>,
    pub theta: Vec<f64>,
}

/// Rescale kernel depth series at a critical point onto the universal
/// coordinates: `y = Theta / (q* L)` against `x = omega rho0 kappa L`
/// (smooth) or `x = rho0 (kappa L)^2` (scale-invariant).
pub fn ntk_collapse(
    series: &[NtkSeries],
    cp: &CriticalPoint,
    omega: f64,
) -> Result<ScalingCollapse, NtkError> {
    let hp = cp.hyperparameters();
    for s in series {
        let same_hp = (s.hp.sigma_w - hp.sigma_w).abs() < 1e-9
            && (s.hp.sigma_b - hp.sigma_b).abs() < 1e-9;
        if !same_hp || s.activation != cp.activation {
            return Err(NtkError::MismatchedCriticalPoint {
                sigma_w: s.hp.sigma_w,
                sigma_b: s.hp.sigma_b,
                activation: s.activation.to_string(),
            });
        }
    }
    let curves: Vec<CollapseCurve> = series
        .iter()
        .map(|s| {
            let mut pts: Vec<(f64, f64)> = s
                .depths
                .iter()
                .zip(&s.theta)
                .map(|(&d, &theta)| {
                    let depth = d as f64;
                    let x = match cp.activation.class() {
                        ActivationClass::Smooth => omega * s.rho0 * cp.kappa * depth,
                        ActivationClass::ScaleInvariant => {
                            s.rho0 * (cp.kappa * depth) * (cp.kappa * depth)
                        }
                    };
                    (x, theta / (cp.q_star * depth))
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            CollapseCurve {
                label: format!("rho0={}", s.rho0),
                x: pts.iter().map(|p| p.0).collect(),
                y: pts.iter().map(|p| p.1).collect(),
            }
        })
        .collect();
    let quality = crate::scaling::two_sided_quality(&curves, None).unwrap_or(f64::INFINITY);
    Ok(ScalingCollapse { curves, quality })
}

/// Depth interval `[0.1 / (omega rho_max kappa), 10 / (omega rho_min kappa)]`
/// within which the kernel distinguishes the training pairs: both asymptotic
/// regimes are avoided for every pairwise distance in `[rho_min, rho_max]`.
pub fn favorable_depth_range(
    rho_min: f64,
    rho_max: f64,
    omega: f64,
    kappa: f64,
) -> Result<(f64, f64), NtkError> {
    if !(rho_min > 0.0) {
        return Err(NtkError::ZeroMinDistance);
    }
    assert!(rho_max >= rho_min, "rho_max must be at least rho_min");
    Ok((0.1 / (omega * rho_max * kappa), 10.0 / (omega * rho_min * kappa)))
}

/// Symmetric kernel matrix over a training set.
#[derive(Debug, Clone)]
pub struct NtkMatrix {
    pub entries: DMatrix<f64>,
    pub depth: usize,
    pub hp: Hyperparameters,
}

impl NtkMatrix {
    pub fn n_samples(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = &self.entries;
        let scale = m.amax();
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Positive semidefiniteness up to numerical slack: the smallest
    /// eigenvalue must be at least `-1e-8 * trace`.
    pub fn check_psd(&self) -> Result<(), NtkError> {
        let eig = self.entries.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        let trace = self.entries.trace();
        if min_eig < -1e-8 * trace {
            return Err(NtkError::NotPositiveSemidefinite { min_eig, trace });
        }
        Ok(())
    }
}

/// Assemble the kernel matrix of a training set (upper triangle computed,
/// mirrored; diagonal from each input against itself).
pub fn ntk_matrix(
    inputs: &[Vec<f64>],
    depth: usize,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<NtkMatrix, NtkError> {
    let n = inputs.len();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = ntk_value(&inputs[i], &inputs[j], depth, act, hp, rule)?;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(NtkMatrix { entries, depth, hp })
}

/// Kernel rows between test inputs and the training set.
pub fn ntk_test_rows(
    test_inputs: &[Vec<f64>],
    train_inputs: &[Vec<f64>],
    depth: usize,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<DMatrix<f64>, NtkError> {
    let mut rows = DMatrix::zeros(test_inputs.len(), train_inputs.len());
    for (i, x) in test_inputs.iter().enumerate() {
        for (j, t) in train_inputs.iter().enumerate() {
            rows[(i, j)] = ntk_value(x, t, depth, act, hp, rule)?;
        }
    }
    Ok(rows)
}

/// Residual and test-output trajectories of gradient-descent training in the
/// kernel regime.
#[derive(Debug, Clone, Serialize)]
pub struct TrainingDynamics {
    pub eta: f64,
    pub n_samples: usize,
    pub times: Vec<f64>,
    /// Training residuals at each time, `times.len() x N`.
    pub residuals: Vec<Vec<f64>>,
    /// Test outputs at each time, `times.len() x n_test` (empty when no test
    /// rows were supplied). Initial test outputs are taken as zero, the
    /// infinite-width mean.
    pub test_outputs: Vec<Vec<f64>>,
}

impl TrainingDynamics {
    pub fn residual_norms(&self) -> Vec<f64> {
        self.residuals
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Exact solution of the linearized training flow by eigendecomposition:
/// residuals decay as `exp(-(2 eta / N) Theta t)` and test outputs integrate
/// the same modes. The time grid only controls reporting.
pub fn solve_training_dynamics(
    theta_train: &NtkMatrix,
    theta_test: Option<&DMatrix<f64>>,
    dy0: &[f64],
    eta: f64,
    times: &[f64],
) -> Result<TrainingDynamics, NtkError> {
    let n = theta_train.n_samples();
    if dy0.len() != n {
        return Err(NtkError::BadResidualLength { expected: n, got: dy0.len() });
    }
    if !theta_train.is_symmetric(1e-10) {
        return Err(NtkError::NonSymmetric);
    }
    theta_train.check_psd()?;
    let eig = theta_train.entries.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let dy0_vec = nalgebra::DVector::from_column_slice(dy0);
    let modes = v.transpose() * &dy0_vec;
    let a = 2.0 * eta / n as f64;

    let mut residuals = Vec::with_capacity(times.len());
    let mut test_outputs = Vec::with_capacity(times.len());
    for &t in times {
        let decayed = nalgebra::DVector::from_iterator(
            n,
            (0..n).map(|k| modes[k] * (-a * eig.eigenvalues[k] * t).exp()),
        );
        let dy = v * &decayed;
        residuals.push(dy.iter().copied().collect());
        if let Some(test) = theta_test {
            // Integral of each decaying mode: (1 - e^{-a lambda t}) / (a lambda),
            // degenerating to t for null modes.
            let integrated = nalgebra::DVector::from_iterator(
                n,
                (0..n).map(|k| {
                    let lam = eig.eigenvalues[k];
                    let g = if (a * lam * t).abs() < 1e-14 {
                        t
                    } else {
                        (1.0 - (-a * lam * t).exp()) / (a * lam)
                    };
                    modes[k] * g
                }),
            );
            let y = -(test * (v * &integrated)) * a;
            test_outputs.push(y.iter().copied().collect());
        }
    }
    Ok(TrainingDynamics { eta, n_samples: n, times: times.to_vec(), residuals, test_outputs })
}
