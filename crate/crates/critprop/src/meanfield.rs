//! Infinite-width mean-field theory of signal propagation: the variance and
//! covariance recursions, the iterative correlation map and its fixed
//! points, correlation depth, critical-point location, and the map's
//! Lyapunov exponent.
//!
//! Smooth activations evaluate every Gaussian expectation by quadrature with
//! the substitution `u2 = sqrt(q2) (c z1 + sqrt(1-c^2) z2)`, which keeps the
//! rule product-form and is regular at `c -> 1`. Scale-invariant activations
//! dispatch to the analytic arc-cosine kernels since their second derivative
//! is distributional.

use serde::Serialize;
use thiserror::Error;

use crate::activations::{
    arccos_kernel_deg0, arccos_kernel_deg1, Activation, ActivationClass, ActivationError,
};
use crate::quadrature::{GaussHermite, QuadratureError};

/// Convergence tolerance for the variance fixed point. The recursion
/// contracts geometrically away from `sigma_b = 0`, so machine-level
/// tolerance is cheap.
pub const Q_FIXED_POINT_TOL: f64 = 1e-14;
pub const Q_MAX_ITER: usize = 100_000;
/// Anything above this is treated as variance divergence (the
/// scale-invariant super-critical regime diverges exponentially, so any
/// large ceiling detects it).
pub const Q_DIVERGENCE_CEILING: f64 = 1e12;
/// Default starting point for the variance iteration.
pub const DEFAULT_Q0: f64 = 1.0;
/// Critical points are refined until the map Lyapunov exponent is this
/// close to zero.
pub const CRITICAL_REFINE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error("input vectors must be non-empty and of equal length")]
    BadInputs,
    #[error("sigma_w must be > 0 and sigma_b >= 0, got ({sigma_w}, {sigma_b})")]
    BadHyperparameters { sigma_w: f64, sigma_b: f64 },
    #[error("variance iteration did not converge in {iterations} steps (last two iterates {prev}, {last})")]
    QNonConvergence { iterations: usize, prev: f64, last: f64 },
    #[error("variance iteration diverged (q = {q} exceeded ceiling {ceiling})")]
    QDiverged { q: f64, ceiling: f64 },
    #[error("no sign change of the map Lyapunov exponent in [{lo}, {hi}] (values {f_lo}, {f_hi})")]
    NoBracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("no boundary crossing at fixed sigma_w = {sigma_w}: requires sigma_w * h'(0) > 1 (h'(0) = {slope})")]
    NoBoundaryCrossing { sigma_w: f64, slope: f64 },
    #[error("no non-trivial fixed point of the correlation map (is the point ordered or critical?)")]
    NoStableCorrelation,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
}

/// Weight and bias standard deviations used at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl Hyperparameters {
    pub fn new(sigma_w: f64, sigma_b: f64) -> Result<Self, MeanFieldError> {
        if !(sigma_w > 0.0) || !(sigma_b >= 0.0) || !sigma_w.is_finite() || !sigma_b.is_finite() {
            return Err(MeanFieldError::BadHyperparameters { sigma_w, sigma_b });
        }
        Ok(Hyperparameters { sigma_w, sigma_b })
    }
}

/// One level of the covariance recursion: variances of both signals, their
/// covariance, the Pearson correlation, and the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFieldState {
    pub q1: f64,
    pub q2: f64,
    pub cov: f64,
    pub corr: f64,
    pub layer: usize,
}

impl MeanFieldState {
    /// Order parameter: one minus the correlation.
    pub fn rho(&self) -> f64 {
        1.0 - self.corr
    }
}

/// An ordered run of states with layer indices increasing from 1.
#[derive(Debug, Clone)]
pub struct MeanFieldTrace {
    pub states: Vec<MeanFieldState>,
}

impl MeanFieldTrace {
    pub fn rho(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.rho()).collect()
    }

    pub fn layers(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.layer as f64).collect()
    }
}

/// Phase classification by the sign of the map Lyapunov exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Ordered,
    Chaotic,
    Critical,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Ordered => "ordered",
            Phase::Chaotic => "chaotic",
            Phase::Critical => "critical",
        })
    }
}

/// E[h^2(sqrt(q) z)] for z ~ N(0,1).
pub fn sq_expectation(
    act: Activation,
    q: f64,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    match act.class() {
        ActivationClass::Smooth => {
            let s = q.max(0.0).sqrt();
            Ok(rule.expect1(|z| act.eval(s * z).powi(2))?)
        }
        ActivationClass::ScaleInvariant => {
            let a = act.leak().unwrap();
            Ok(q * (1.0 + a * a) / 2.0)
        }
    }
}

/// E[h'(sqrt(q) z)^2] for z ~ N(0,1).
pub fn sq_deriv_expectation(
    act: Activation,
    q: f64,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    match act.class() {
        ActivationClass::Smooth => {
            let s = q.max(0.0).sqrt();
            Ok(rule.expect1(|z| act.d1(s * z).powi(2))?)
        }
        ActivationClass::ScaleInvariant => {
            let a = act.leak().unwrap();
            Ok((1.0 + a * a) / 2.0)
        }
    }
}

/// E[h(u1) h(u2)] with u1 ~ N(0, q1), u2 ~ N(0, q2), correlation c.
pub fn cov_pair_expectation(
    act: Activation,
    q1: f64,
    q2: f64,
    c: f64,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    pair_expectation(act, q1, q2, c, rule, false)
}

/// E[h'(u1) h'(u2)] with the same joint distribution; this is the per-layer
/// gain factor entering the correlation-map slope and the tangent kernel.
pub fn deriv_pair_expectation(
    act: Activation,
    q1: f64,
    q2: f64,
    c: f64,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    pair_expectation(act, q1, q2, c, rule, true)
}

fn pair_expectation(
    act: Activation,
    q1: f64,
    q2: f64,
    c: f64,
    rule: &GaussHermite,
    deriv: bool,
) -> Result<f64, MeanFieldError> {
    let c = c.clamp(-1.0, 1.0);
    match act.class() {
        ActivationClass::ScaleInvariant => {
            let a = act.leak().unwrap();
            if deriv {
                Ok(arccos_kernel_deg0(c, a)?)
            } else {
                Ok((q1 * q2).max(0.0).sqrt() * arccos_kernel_deg1(c, a)?)
            }
        }
        ActivationClass::Smooth => {
            let s1 = q1.max(0.0).sqrt();
            let s2 = q2.max(0.0).sqrt();
            let f = |x: f64| if deriv { act.d1(x) } else { act.eval(x) };
            let spread = (1.0 - c * c).max(0.0).sqrt();
            if spread == 0.0 {
                // Perfectly (anti-)correlated pair: a single integral.
                let sign = if c >= 0.0 { 1.0 } else { -1.0 };
                return Ok(rule.expect1(|z| f(s1 * z) * f(sign * s2 * z))?);
            }
            // Factored tensor quadrature: the first factor depends on z1
            // only, so evaluate it once per outer node.
            let nodes = rule.nodes();
            let weights = rule.weights();
            let mut acc = 0.0;
            for (&z1, &w1) in nodes.iter().zip(weights) {
                let f1 = f(s1 * z1);
                let base = s2 * c * z1;
                let slope = s2 * spread;
                let mut inner = 0.0;
                for (&z2, &w2) in nodes.iter().zip(weights) {
                    inner += w2 * f(base + slope * z2);
                }
                acc += w1 * f1 * inner;
            }
            if !acc.is_finite() {
                return Err(MeanFieldError::Quadrature(QuadratureError::NonFinite {
                    node: f64::NAN,
                }));
            }
            Ok(acc)
        }
    }
}

/// Two inputs of equal Euclidean norm `scale` at cosine distance `rho0`
/// (spanning the first two coordinates).
pub fn inputs_with_cosine_distance(rho0: f64, n_in: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n_in >= 2, "need at least two input dimensions");
    let c = 1.0 - rho0;
    let mut x1 = vec![0.0; n_in];
    x1[0] = scale;
    let mut x2 = vec![0.0; n_in];
    x2[0] = scale * c;
    x2[1] = scale * (1.0 - c * c).max(0.0).sqrt();
    (x1, x2)
}

/// Initial covariance state from a pair of inputs: the first-layer variances
/// are `sigma_w^2 |x|^2 / n_in + sigma_b^2` and the covariance is
/// `sigma_w^2 (x1 . x2) / n_in + sigma_b^2`.
pub fn init_state(
    x1: &[f64],
    x2: &[f64],
    hp: Hyperparameters,
) -> Result<MeanFieldState, MeanFieldError> {
    if x1.is_empty() || x1.len() != x2.len() {
        return Err(MeanFieldError::BadInputs);
    }
    let n_in = x1.len() as f64;
    let w2 = hp.sigma_w * hp.sigma_w;
    let b2 = hp.sigma_b * hp.sigma_b;
    let norm1: f64 = x1.iter().map(|v| v * v).sum();
    let norm2: f64 = x2.iter().map(|v| v * v).sum();
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let q1 = w2 * norm1 / n_in + b2;
    let q2 = w2 * norm2 / n_in + b2;
    let cov = w2 * dot / n_in + b2;
    let corr = if q1 * q2 > 0.0 {
        (cov / (q1 * q2).sqrt()).clamp(-1.0, 1.0)
    } else {
        1.0 // both signals identically zero
    };
    Ok(MeanFieldState { q1, q2, cov, corr, layer: 1 })
}

/// One layer of the variance/covariance recursion.
pub fn step(
    state: &MeanFieldState,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<MeanFieldState, MeanFieldError> {
    let w2 = hp.sigma_w * hp.sigma_w;
    let b2 = hp.sigma_b * hp.sigma_b;
    let q1 = w2 * sq_expectation(act, state.q1, rule)? + b2;
    let q2 = w2 * sq_expectation(act, state.q2, rule)? + b2;
    let cov =
        w2 * cov_pair_expectation(act, state.q1, state.q2, state.corr, rule)? + b2;
    let corr = if q1 * q2 > 0.0 {
        (cov / (q1 * q2).sqrt()).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    Ok(MeanFieldState { q1, q2, cov, corr, layer: state.layer + 1 })
}

/// Iterate the recursion from a pair of inputs, recording `depth` states
/// (layers 1..=depth).
pub fn run_trace(
    x1: &[f64],
    x2: &[f64],
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
    depth: usize,
) -> Result<MeanFieldTrace, MeanFieldError> {
    let mut states = Vec::with_capacity(depth);
    let mut state = init_state(x1, x2, hp)?;
    states.push(state);
    while states.len() < depth {
        state = step(&state, act, hp, rule)?;
        states.push(state);
    }
    Ok(MeanFieldTrace { states })
}

/// Fixed point of the variance recursion starting from `q0`.
///
/// Scale-invariant activations above their critical line diverge; that is
/// reported as [`MeanFieldError::QDiverged`] once the iterate exceeds the
/// ceiling.
pub fn fixed_point_q(
    act: Activation,
    hp: Hyperparameters,
    q0: f64,
    tol: f64,
    max_iter: usize,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let w2 = hp.sigma_w * hp.sigma_w;
    let b2 = hp.sigma_b * hp.sigma_b;
    let mut q = q0;
    for _ in 0..max_iter {
        let next = w2 * sq_expectation(act, q, rule)? + b2;
        if next > Q_DIVERGENCE_CEILING {
            return Err(MeanFieldError::QDiverged { q: next, ceiling: Q_DIVERGENCE_CEILING });
        }
        if (next - q).abs() < tol {
            return Ok(next);
        }
        q = next;
    }
    Err(MeanFieldError::QNonConvergence {
        iterations: max_iter,
        prev: q,
        last: w2 * sq_expectation(act, q, rule)? + b2,
    })
}

/// One application of the iterative correlation map at fixed `q_star`.
pub fn cmap_step(
    c: f64,
    q_star: f64,
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    let w2 = hp.sigma_w * hp.sigma_w;
    let b2 = hp.sigma_b * hp.sigma_b;
    let cov = w2 * cov_pair_expectation(act, q_star, q_star, c, rule)? + b2;
    Ok(cov / q_star)
}

/// Map Lyapunov exponent of the trivial fixed point `c = 1`:
/// `log(sigma_w^2 E[h'(sqrt(q*) z)^2])`.
pub fn lyapunov_cmap(
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    let gain = match act.class() {
        ActivationClass::ScaleInvariant => {
            // q-independent: h' is homogeneous of degree zero.
            let a = act.leak().unwrap();
            (1.0 + a * a) / 2.0
        }
        ActivationClass::Smooth => {
            let q = fixed_point_q(act, hp, DEFAULT_Q0, Q_FIXED_POINT_TOL, Q_MAX_ITER, rule)?;
            sq_deriv_expectation(act, q, rule)?
        }
    };
    Ok((hp.sigma_w * hp.sigma_w * gain).ln())
}

/// Non-trivial fixed point of the correlation map in the chaotic phase.
pub fn cmap_fixed_point(
    act: Activation,
    hp: Hyperparameters,
    q_star: f64,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    if hp.sigma_b == 0.0 {
        // Odd smooth activations decorrelate completely without a bias term.
        return Ok(0.0);
    }
    let g = |c: f64| -> Result<f64, MeanFieldError> {
        Ok(cmap_step(c, q_star, act, hp, rule)? - c)
    };
    let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
    let g_lo = g(lo)?;
    let g_hi = g(hi)?;
    if g_lo <= 0.0 || g_hi >= 0.0 {
        return Err(MeanFieldError::NoStableCorrelation);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Reciprocal correlation depth `1/xi` of the exponential approach of the
/// correlation to its fixed point. The branch is selected by the sign of the
/// map Lyapunov exponent: the ordered side uses the slope at `c = 1`, the
/// chaotic side the slope at the non-trivial fixed point. At criticality the
/// value is zero.
pub fn correlation_depth(
    act: Activation,
    hp: Hyperparameters,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    let lambda = lyapunov_cmap(act, hp, rule)?;
    // Within numerical resolution of the critical point the depth is
    // infinite; locating the near-unity correlation fixed point there would
    // only amplify rounding noise.
    if lambda.abs() < 1e-10 {
        return Ok(0.0);
    }
    if lambda < 0.0 {
        return Ok(-lambda);
    }
    let q = fixed_point_q(act, hp, DEFAULT_Q0, Q_FIXED_POINT_TOL, Q_MAX_ITER, rule)?;
    let c_star = cmap_fixed_point(act, hp, q, rule)?;
    let w2 = hp.sigma_w * hp.sigma_w;
    let slope = w2 * deriv_pair_expectation(act, q, q, c_star, rule)?;
    Ok(-slope.ln())
}

/// Critical weight variance for a fixed `sigma_b`, located by bisection of
/// the map Lyapunov exponent on [0.1, 5] followed by a secant polish.
/// Scale-invariant activations have the analytic critical line
/// `sqrt(2 / (1 + a^2))` independent of `sigma_b`.
pub fn critical_sigma_w(
    sigma_b: f64,
    act: Activation,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    if let ActivationClass::ScaleInvariant = act.class() {
        let a = act.leak().unwrap();
        return Ok((2.0 / (1.0 + a * a)).sqrt());
    }
    let f = |sigma_w: f64| -> Result<f64, MeanFieldError> {
        lyapunov_cmap(act, Hyperparameters { sigma_w, sigma_b }, rule)
    };
    solve_critical(f, 0.1, 5.0)
}

/// Critical bias variance for a fixed `sigma_w`, when the vertical crossing
/// exists (`sigma_w h'(0) > 1`).
pub fn critical_sigma_b(
    sigma_w: f64,
    act: Activation,
    rule: &GaussHermite,
) -> Result<f64, MeanFieldError> {
    let slope = act.d1(0.0);
    if sigma_w * slope <= 1.0 {
        return Err(MeanFieldError::NoBoundaryCrossing { sigma_w, slope });
    }
    let f = |sigma_b: f64| -> Result<f64, MeanFieldError> {
        lyapunov_cmap(act, Hyperparameters { sigma_w, sigma_b }, rule)
    };
    solve_critical(f, 0.0, 5.0)
}

/// Bracketed bisection plus secant polish for a root of `f`; `f` is
/// increasing at `lo` end negative.
fn solve_critical(
    f: impl Fn(f64) -> Result<f64, MeanFieldError>,
    lo0: f64,
    hi0: f64,
) -> Result<f64, MeanFieldError> {
    let (mut lo, mut hi) = (lo0, hi0);
    let mut f_lo = f(lo)?;
    let f_hi = f(hi)?;
    // The exponent increases through the transition; an ordered lower end
    // and chaotic upper end are required.
    if f_lo.signum() == f_hi.signum() {
        return Err(MeanFieldError::NoBracket { lo, hi, f_lo, f_hi });
    }
    let increasing = f_lo < 0.0;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid)?;
        if (f_mid < 0.0) == increasing {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    // Secant polish from the bracket endpoints.
    let mut x0 = lo;
    let mut y0 = f_lo;
    let mut x1 = 0.5 * (lo + hi);
    let mut y1 = f(x1)?;
    for _ in 0..20 {
        if y1.abs() < CRITICAL_REFINE_TOL || (x1 - x0).abs() < f64::EPSILON * x1.abs() {
            return Ok(x1);
        }
        if y1 == y0 {
            break;
        }
        let x2 = (x1 - y1 * (x1 - x0) / (y1 - y0)).clamp(lo0, hi0);
        x0 = x1;
        y0 = y1;
        x1 = x2;
        y1 = f(x1)?;
    }
    Ok(x1)
}

/// Classify a hyperparameter pair by the sign of the map Lyapunov exponent,
/// with a `tol` band mapped to critical.
pub fn phase_of(
    act: Activation,
    hp: Hyperparameters,
    tol: f64,
    rule: &GaussHermite,
) -> Result<Phase, MeanFieldError> {
    let lambda = lyapunov_cmap(act, hp, rule)?;
    Ok(if lambda.abs() < tol {
        Phase::Critical
    } else if lambda > 0.0 {
        Phase::Chaotic
    } else {
        Phase::Ordered
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rule() -> GaussHermite {
        GaussHermite::default()
    }

    fn tanh_critical() -> Hyperparameters {
        Hyperparameters { sigma_w: 1.39558, sigma_b: 0.3 }
    }

    fn orthonormal_inputs(n_in: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x1 = vec![0.0; n_in];
        let mut x2 = vec![0.0; n_in];
        x1[0] = 1.0;
        x2[1] = 1.0;
        (x1, x2)
    }

    #[test]
    fn init_state_identical_and_orthogonal() {
        let hp = tanh_critical();
        let x = vec![0.3, -1.2, 0.8];
        let s = init_state(&x, &x, hp).unwrap();
        assert_abs_diff_eq!(s.corr, 1.0, epsilon = 1e-15);
        assert_eq!(s.layer, 1);

        let (x1, x2) = orthonormal_inputs(4);
        let s = init_state(&x1, &x2, Hyperparameters { sigma_w: 1.0, sigma_b: 0.0 }).unwrap();
        assert_abs_diff_eq!(s.cov, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.corr, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn init_state_hand_value() {
        // Orthogonal unit inputs, n_in = 10, sigma_b = 0.3, sigma_w = 1.39558:
        // c1 = sigma_b^2 / (sigma_w^2 / n_in + sigma_b^2).
        let hp = tanh_critical();
        let (x1, x2) = orthonormal_inputs(10);
        let s = init_state(&x1, &x2, hp).unwrap();
        let w2 = hp.sigma_w * hp.sigma_w;
        let expected = 0.09 / (w2 / 10.0 + 0.09);
        assert_abs_diff_eq!(s.corr, expected, epsilon = 1e-15);
        assert!(init_state(&[], &[], hp).is_err());
        assert!(init_state(&x1, &x1[..5], hp).is_err());
    }

    #[test]
    fn step_keeps_the_absorbing_fixed_point() {
        let r = rule();
        for act in [Activation::Tanh, Activation::Erf, Activation::Sin] {
            let hp = Hyperparameters { sigma_w: 1.7, sigma_b: 0.4 };
            let x = vec![0.5, -0.25, 1.5];
            let mut s = init_state(&x, &x, hp).unwrap();
            for _ in 0..30 {
                s = step(&s, act, hp, &r).unwrap();
                assert!((s.corr - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ordered_and_chaotic_traces_behave_as_expected() {
        let r = rule();
        let (x1, x2) = orthonormal_inputs(10);
        // Ordered side: rho -> 0.
        let hp = Hyperparameters { sigma_w: 1.35, sigma_b: 0.3 };
        let trace = run_trace(&x1, &x2, Activation::Tanh, hp, &r, 400).unwrap();
        let rho = trace.rho();
        assert!(rho[399] < 1e-4, "rho at depth 400: {}", rho[399]);
        // Chaotic side: rho saturates at a positive value.
        let hp = Hyperparameters { sigma_w: 1.45, sigma_b: 0.3 };
        let trace = run_trace(&x1, &x2, Activation::Tanh, hp, &r, 400).unwrap();
        let rho = trace.rho();
        assert!(rho[399] > 1e-2);
        let settle = (rho[399] - rho[398]).abs() / rho[399];
        assert!(settle < 1e-6, "not saturated: relative step {settle:e}");
    }

    #[test]
    fn fixed_point_q_examples() {
        let r = rule();
        // tanh, sigma_b = 0, sigma_w = 0.9: the variance dies out.
        let q = fixed_point_q(
            Activation::Tanh,
            Hyperparameters { sigma_w: 0.9, sigma_b: 0.0 },
            DEFAULT_Q0,
            1e-14,
            Q_MAX_ITER,
            &r,
        )
        .unwrap();
        assert!(q < 1e-12);
        // ReLU at (sqrt(2), 0): the variance stays wherever it starts.
        let q = fixed_point_q(
            Activation::relu(),
            Hyperparameters { sigma_w: 2.0_f64.sqrt(), sigma_b: 0.0 },
            0.37,
            1e-14,
            Q_MAX_ITER,
            &r,
        )
        .unwrap();
        assert_abs_diff_eq!(q, 0.37, epsilon = 1e-13);
        // ReLU above the critical line diverges.
        let err = fixed_point_q(
            Activation::relu(),
            Hyperparameters { sigma_w: 1.6, sigma_b: 0.1 },
            DEFAULT_Q0,
            1e-14,
            Q_MAX_ITER,
            &r,
        )
        .unwrap_err();
        assert!(matches!(err, MeanFieldError::QDiverged { .. }));
    }

    #[test]
    fn fixed_point_q_matches_bisection_oracle() {
        // Independent oracle: bisect q - sigma_w^2 E[h^2(sqrt(q) z)] - sigma_b^2.
        let r = rule();
        let hp = tanh_critical();
        let got = fixed_point_q(Activation::Tanh, hp, DEFAULT_Q0, 1e-14, Q_MAX_ITER, &r).unwrap();
        let residual = |q: f64| {
            let e = r.expect1(|z| (q.sqrt() * z).tanh().powi(2)).unwrap();
            q - hp.sigma_w * hp.sigma_w * e - hp.sigma_b * hp.sigma_b
        };
        let (mut lo, mut hi) = (1e-6, 10.0);
        assert!(residual(lo) < 0.0 && residual(hi) > 0.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
    }

    #[test]
    fn cmap_step_fixed_points() {
        let r = rule();
        let hp = tanh_critical();
        let q = fixed_point_q(Activation::Tanh, hp, DEFAULT_Q0, 1e-14, Q_MAX_ITER, &r).unwrap();
        let c1 = cmap_step(1.0, q, Activation::Tanh, hp, &r).unwrap();
        assert_abs_diff_eq!(c1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cmap_slope_at_one_is_marginal_at_criticality() {
        let r = rule();
        let act = Activation::Tanh;
        let sigma_w = critical_sigma_w(0.3, act, &r).unwrap();
        let hp = Hyperparameters { sigma_w, sigma_b: 0.3 };
        let q = fixed_point_q(act, hp, DEFAULT_Q0, 1e-14, Q_MAX_ITER, &r).unwrap();
        let eps = 1e-7;
        let f1 = cmap_step(1.0, q, act, hp, &r).unwrap();
        let f0 = cmap_step(1.0 - eps, q, act, hp, &r).unwrap();
        let slope = (f1 - f0) / eps;
        assert_abs_diff_eq!(slope, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cmap_fixed_point_matches_long_iteration() {
        let r = rule();
        let act = Activation::Tanh;
        let hp = Hyperparameters { sigma_w: 1.45, sigma_b: 0.3 };
        let q = fixed_point_q(act, hp, DEFAULT_Q0, 1e-14, Q_MAX_ITER, &r).unwrap();
        let c_star = cmap_fixed_point(act, hp, q, &r).unwrap();
        // Oracle: iterate the full recursion until the correlation settles.
        let (x1, x2) = orthonormal_inputs(10);
        let mut s = init_state(&x1, &x2, hp).unwrap();
        for _ in 0..4000 {
            s = step(&s, act, hp, &r).unwrap();
        }
        assert_abs_diff_eq!(c_star, s.corr, epsilon = 1e-10);
    }

    #[test]
    fn correlation_depth_vanishes_at_criticality() {
        let r = rule();
        for act in [Activation::Tanh, Activation::Erf] {
            let sigma_w = critical_sigma_w(0.3, act, &r).unwrap();
            let xi_inv =
                correlation_depth(act, Hyperparameters { sigma_w, sigma_b: 0.3 }, &r).unwrap();
            assert!(xi_inv.abs() < 1e-8, "{act}: {xi_inv}");
        }
    }

    #[test]
    fn correlation_depth_matches_trace_tail_slope() {
        let r = rule();
        let act = Activation::Tanh;
        let hp = Hyperparameters { sigma_w: 1.35, sigma_b: 0.3 };
        let xi_inv = correlation_depth(act, hp, &r).unwrap();
        assert!(xi_inv > 0.0);
        // Oracle: linear regression of log|c(l) - c*| on the tail of a deep
        // trace (ordered phase, so c* = 1). Keep to the layers where the gap
        // is far above the quadrature rounding floor, where the decay would
        // flatten artificially.
        let (x1, x2) = orthonormal_inputs(10);
        let depth = 10_000;
        let trace = run_trace(&x1, &x2, act, hp, &r, depth).unwrap();
        let pts: Vec<(f64, f64)> = trace
            .states
            .iter()
            .filter(|s| s.layer > 200 && (1.0 - s.corr) > 1e-11 && (1.0 - s.corr) < 1e-4)
            .map(|s| (s.layer as f64, (1.0 - s.corr).ln()))
            .collect();
        assert!(pts.len() > 100);
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert_abs_diff_eq!(-slope, xi_inv, epsilon = 1e-4);
    }

    #[test]
    fn lyapunov_cmap_signs() {
        let r = rule();
        let act = Activation::Tanh;
        let sigma_w_c = critical_sigma_w(0.3, act, &r).unwrap();
        let at = |sigma_w: f64| {
            lyapunov_cmap(act, Hyperparameters { sigma_w, sigma_b: 0.3 }, &r).unwrap()
        };
        assert!(at(sigma_w_c).abs() < 1e-8);
        assert!(at(sigma_w_c + 0.05) > 0.0);
        assert!(at(sigma_w_c - 0.05) < 0.0);
    }

    #[test]
    fn lyapunov_cmap_monotone_in_sigma_w() {
        let r = rule();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let sigma_w = 1.0 + i as f64 / 99.0;
            let l = lyapunov_cmap(
                Activation::Tanh,
                Hyperparameters { sigma_w, sigma_b: 0.3 },
                &r,
            )
            .unwrap();
            assert!(l > prev, "not increasing at sigma_w = {sigma_w}");
            prev = l;
        }
    }

    #[test]
    fn critical_sigma_w_reference_values() {
        let r = rule();
        let tanh_c = critical_sigma_w(0.3, Activation::Tanh, &r).unwrap();
        assert_abs_diff_eq!(tanh_c, 1.39558, epsilon = 1e-4);
        let erf_c = critical_sigma_w(0.3, Activation::Erf, &r).unwrap();
        assert_abs_diff_eq!(erf_c, 1.23367, epsilon = 1e-4);
        let relu_c = critical_sigma_w(0.0, Activation::relu(), &r).unwrap();
        assert_eq!(relu_c, 2.0_f64.sqrt());
        let lrelu_c = critical_sigma_w(0.7, Activation::LeakyRelu { leak: 0.5 }, &r).unwrap();
        assert_abs_diff_eq!(lrelu_c, (2.0_f64 / 1.25).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn critical_sigma_b_inverse_consistency() {
        let r = rule();
        for (act, sigma_w) in [(Activation::Tanh, 1.39558), (Activation::Erf, 1.23367)] {
            let sigma_b = critical_sigma_b(sigma_w, act, &r).unwrap();
            assert_abs_diff_eq!(sigma_b, 0.3, epsilon = 1e-4);
        }
        // Precondition: tanh with sigma_w <= 1/h'(0) has no crossing.
        let err = critical_sigma_b(0.9, Activation::Tanh, &r).unwrap_err();
        assert!(matches!(err, MeanFieldError::NoBoundaryCrossing { .. }));
    }

    #[test]
    fn phase_classification() {
        let r = rule();
        let act = Activation::Tanh;
        let classify = |sigma_w: f64, tol: f64| {
            phase_of(act, Hyperparameters { sigma_w, sigma_b: 0.3 }, tol, &r).unwrap()
        };
        assert_eq!(classify(1.35, 1e-4), Phase::Ordered);
        assert_eq!(classify(1.45, 1e-4), Phase::Chaotic);
        let sigma_w_c = critical_sigma_w(0.3, act, &r).unwrap();
        assert_eq!(classify(sigma_w_c, 1e-4), Phase::Critical);
    }

    #[test]
    fn quadrature_pair_matches_closed_forms() {
        // erf and sin have closed-form pair kernels; use them as oracles for
        // the factored tensor quadrature.
        let r = rule();
        let (q1, q2, c) = (0.8, 1.3, 0.6);
        let got = cov_pair_expectation(Activation::Erf, q1, q2, c, &r).unwrap();
        let want = 2.0 / std::f64::consts::PI
            * (2.0 * c * (q1 * q2).sqrt() / ((1.0 + 2.0 * q1) * (1.0 + 2.0 * q2)).sqrt()).asin();
        assert_abs_diff_eq!(got, want, epsilon = 1e-13);

        let got = cov_pair_expectation(Activation::Sin, q1, q2, c, &r).unwrap();
        let cov = c * (q1 * q2).sqrt();
        let want = (-0.5 * (q1 + q2)).exp() * cov.sinh();
        assert_abs_diff_eq!(got, want, epsilon = 1e-13);
    }
}
