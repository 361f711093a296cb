//! Scaling-collapse transformations, collapse-quality scoring, power-law
//! exponent fits, and the finite-width metric-factor fit against the
//! phenomenological flow.
//!
//! Every rescaling here is an exact, invertible change of coordinates; the
//! inverse maps are provided so round-trips can be checked. Fits run in log
//! space throughout: the observables span several decades and multiplicative
//! errors dominate.

use serde::Serialize;
use thiserror::Error;

use crate::activations::ActivationClass;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("curves do not overlap inside the requested window")]
    NoOverlap,
    #[error("need at least {needed} usable points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-positive values inside the fit window")]
    NonPositiveData,
    #[error("traces mix activation classes; rescale them separately")]
    MixedClasses,
    #[error("rescaling is not invertible at tau = 0")]
    DegenerateRescaling,
}

/// Critical exponents of a universality class. `beta` governs the onset of
/// the order parameter, `nu_parallel` the correlation depth, `nu_perp` the
/// spatial correlation length where spatial structure exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingExponents {
    pub beta: f64,
    pub nu_parallel: f64,
    pub nu_perp: Option<f64>,
    pub label: &'static str,
}

impl ScalingExponents {
    /// Mean-field exponents of the fully connected transition.
    pub fn mean_field() -> Self {
        ScalingExponents { beta: 1.0, nu_parallel: 1.0, nu_perp: Some(0.5), label: "meanfield" }
    }

    /// Directed percolation in 1+1 dimensions.
    pub fn dp_1d() -> Self {
        ScalingExponents {
            beta: 0.27649,
            nu_parallel: 1.73385,
            nu_perp: Some(1.096854),
            label: "dp1d",
        }
    }

    /// Directed percolation in 2+1 dimensions.
    pub fn dp_2d() -> Self {
        ScalingExponents { beta: 0.58, nu_parallel: 1.29, nu_perp: Some(0.73), label: "dp2d" }
    }
}

/// A raw order-parameter series: layer indices with matching values.
#[derive(Debug, Clone)]
pub struct TraceData {
    pub label: String,
    pub layers: Vec<f64>,
    pub rho: Vec<f64>,
}

impl TraceData {
    pub fn new(label: impl Into<String>, layers: Vec<f64>, rho: Vec<f64>) -> Self {
        assert_eq!(layers.len(), rho.len(), "layer and value columns must match");
        TraceData { label: label.into(), layers, rho }
    }

    /// Restrict to layers within `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> TraceData {
        let mut layers = Vec::new();
        let mut rho = Vec::new();
        for (&l, &r) in self.layers.iter().zip(&self.rho) {
            if l >= lo && l <= hi {
                layers.push(l);
                rho.push(r);
            }
        }
        TraceData { label: self.label.clone(), layers, rho }
    }
}

/// One rescaled curve; `x` ascends.
#[derive(Debug, Clone)]
pub struct CollapseCurve {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Rescaled curves plus a scalar quality score (lower is better; zero for a
/// perfect collapse, infinite when there is nothing to compare).
#[derive(Debug, Clone)]
pub struct ScalingCollapse {
    pub curves: Vec<CollapseCurve>,
    pub quality: f64,
}

impl ScalingCollapse {
    fn from_curves(curves: Vec<CollapseCurve>) -> Self {
        let quality = two_sided_quality(&curves, None).unwrap_or(f64::INFINITY);
        ScalingCollapse { curves, quality }
    }
}

fn sort_curve(label: String, mut pts: Vec<(f64, f64)>) -> CollapseCurve {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    CollapseCurve {
        label,
        x: pts.iter().map(|p| p.0).collect(),
        y: pts.iter().map(|p| p.1).collect(),
    }
}

/// Off-critical trace with its distance to criticality and the metric
/// factors of its own critical point.
#[derive(Debug, Clone)]
pub struct OffCriticalTrace {
    pub data: TraceData,
    pub tau: f64,
    pub kappa: f64,
    pub zeta: f64,
}

/// Rescale off-critical traces under the absorbing-transition ansatz:
/// `x = (kappa l)^(1/nu_par) * zeta * tau`, `y = (kappa l)^(beta/nu_par) * rho`.
pub fn rescale_offcritical(
    traces: &[OffCriticalTrace],
    exponents: &ScalingExponents,
) -> ScalingCollapse {
    let curves = traces
        .iter()
        .map(|t| {
            let pts = t
                .data
                .layers
                .iter()
                .zip(&t.data.rho)
                .map(|(&l, &r)| {
                    let kl = t.kappa * l;
                    (
                        kl.powf(1.0 / exponents.nu_parallel) * t.zeta * t.tau,
                        kl.powf(exponents.beta / exponents.nu_parallel) * r,
                    )
                })
                .collect();
            sort_curve(t.data.label.clone(), pts)
        })
        .collect();
    ScalingCollapse::from_curves(curves)
}

/// Inverse of [`rescale_offcritical`] for a single curve.
pub fn unrescale_offcritical(
    curve: &CollapseCurve,
    exponents: &ScalingExponents,
    kappa: f64,
    zeta: f64,
    tau: f64,
) -> Result<TraceData, ScalingError> {
    if tau == 0.0 {
        return Err(ScalingError::DegenerateRescaling);
    }
    let mut layers = Vec::with_capacity(curve.x.len());
    let mut rho = Vec::with_capacity(curve.x.len());
    for (&x, &y) in curve.x.iter().zip(&curve.y) {
        let kl = (x / (zeta * tau)).powf(exponents.nu_parallel);
        layers.push(kl / kappa);
        rho.push(y / kl.powf(exponents.beta / exponents.nu_parallel));
    }
    Ok(TraceData { label: curve.label.clone(), layers, rho })
}

/// Critical trace started from a small input distance `rho0`.
#[derive(Debug, Clone)]
pub struct InitialSlipTrace {
    pub data: TraceData,
    pub rho0: f64,
    pub kappa: f64,
    /// Initial-condition metric factor; ignored for the scale-invariant
    /// class where it is identically one.
    pub omega: f64,
    pub class: ActivationClass,
}

/// Rescale critical initial-slip traces: smooth class
/// `x = omega rho0 kappa l`, `y = kappa l rho`; scale-invariant class
/// `x = rho0 (kappa l)^2`, `y = (kappa l)^2 rho`.
pub fn rescale_initial_slip(traces: &[InitialSlipTrace]) -> Result<ScalingCollapse, ScalingError> {
    let Some(first) = traces.first() else {
        return Ok(ScalingCollapse { curves: Vec::new(), quality: 0.0 });
    };
    if traces.iter().any(|t| t.class != first.class) {
        return Err(ScalingError::MixedClasses);
    }
    let curves = traces
        .iter()
        .map(|t| {
            let pts = t
                .data
                .layers
                .iter()
                .zip(&t.data.rho)
                .map(|(&l, &r)| {
                    let kl = t.kappa * l;
                    match t.class {
                        ActivationClass::Smooth => (t.omega * t.rho0 * kl, kl * r),
                        ActivationClass::ScaleInvariant => (t.rho0 * kl * kl, kl * kl * r),
                    }
                })
                .collect();
            sort_curve(t.data.label.clone(), pts)
        })
        .collect();
    Ok(ScalingCollapse::from_curves(curves))
}

/// Inverse of [`rescale_initial_slip`] for a single curve.
pub fn unrescale_initial_slip(
    curve: &CollapseCurve,
    rho0: f64,
    kappa: f64,
    omega: f64,
    class: ActivationClass,
) -> TraceData {
    let mut layers = Vec::with_capacity(curve.x.len());
    let mut rho = Vec::with_capacity(curve.x.len());
    for (&x, &y) in curve.x.iter().zip(&curve.y) {
        let kl = match class {
            ActivationClass::Smooth => x / (omega * rho0),
            ActivationClass::ScaleInvariant => (x / rho0).sqrt(),
        };
        layers.push(kl / kappa);
        let denom = match class {
            ActivationClass::Smooth => kl,
            ActivationClass::ScaleInvariant => kl * kl,
        };
        rho.push(y / denom);
    }
    TraceData { label: curve.label.clone(), layers, rho }
}

/// Rescale critical traces at several widths under finite-size scaling:
/// `x = l/n` with `y = n rho` (smooth) or `y = n^2 rho` (scale-invariant).
pub fn rescale_finite_size(
    traces: &[(TraceData, usize)],
    class: ActivationClass,
) -> ScalingCollapse {
    let curves = traces
        .iter()
        .map(|(data, width)| {
            let n = *width as f64;
            let factor = match class {
                ActivationClass::Smooth => n,
                ActivationClass::ScaleInvariant => n * n,
            };
            let pts = data
                .layers
                .iter()
                .zip(&data.rho)
                .map(|(&l, &r)| (l / n, factor * r))
                .collect();
            sort_curve(data.label.clone(), pts)
        })
        .collect();
    ScalingCollapse::from_curves(curves)
}

/// Inverse of [`rescale_finite_size`] for a single curve.
pub fn unrescale_finite_size(
    curve: &CollapseCurve,
    width: usize,
    class: ActivationClass,
) -> TraceData {
    let n = width as f64;
    let factor = match class {
        ActivationClass::Smooth => n,
        ActivationClass::ScaleInvariant => n * n,
    };
    TraceData {
        label: curve.label.clone(),
        layers: curve.x.iter().map(|&x| x * n).collect(),
        rho: curve.y.iter().map(|&y| y / factor).collect(),
    }
}

/// Rescale off-critical traces with bare exponents only (metric factors
/// unknown, absorbed into the axes): `x = tau l^(1/nu_par)`,
/// `y = l^(beta/nu_par) rho`. Used for architectures whose metric factors
/// have no closed form.
pub fn rescale_dp(traces: &[(TraceData, f64)], exponents: &ScalingExponents) -> ScalingCollapse {
    let curves = traces
        .iter()
        .map(|(data, tau)| {
            let pts = data
                .layers
                .iter()
                .zip(&data.rho)
                .map(|(&l, &r)| {
                    (
                        tau * l.powf(1.0 / exponents.nu_parallel),
                        l.powf(exponents.beta / exponents.nu_parallel) * r,
                    )
                })
                .collect();
            sort_curve(data.label.clone(), pts)
        })
        .collect();
    ScalingCollapse::from_curves(curves)
}

/// Inverse of [`rescale_dp`] for a single curve.
pub fn unrescale_dp(
    curve: &CollapseCurve,
    exponents: &ScalingExponents,
    tau: f64,
) -> Result<TraceData, ScalingError> {
    if tau == 0.0 {
        return Err(ScalingError::DegenerateRescaling);
    }
    let mut layers = Vec::with_capacity(curve.x.len());
    let mut rho = Vec::with_capacity(curve.x.len());
    for (&x, &y) in curve.x.iter().zip(&curve.y) {
        let l = (x / tau).powf(exponents.nu_parallel);
        layers.push(l);
        rho.push(y / l.powf(exponents.beta / exponents.nu_parallel));
    }
    Ok(TraceData { label: curve.label.clone(), layers, rho })
}

const QUALITY_GRID: usize = 64;

/// Mutual overlap `[max of min x, min of max x]` of the positive-x parts of
/// all curves, intersected with an optional window.
pub fn full_overlap_window(
    curves: &[CollapseCurve],
    window: Option<(f64, f64)>,
) -> Option<(f64, f64)> {
    let mut lo = f64::MIN_POSITIVE;
    let mut hi = f64::MAX;
    for c in curves {
        let xs: Vec<f64> =
            c.x.iter()
                .zip(&c.y)
                .filter(|(&x, &y)| x > 0.0 && y > 0.0)
                .map(|(&x, _)| x)
                .collect();
        let first = *xs.first()?;
        let last = *xs.last()?;
        lo = lo.max(first);
        hi = hi.min(last);
    }
    if let Some((wlo, whi)) = window {
        lo = lo.max(wlo);
        hi = hi.min(whi);
    }
    (lo < hi).then_some((lo, hi))
}

/// Collapse quality: mean pairwise squared vertical distance between log-y
/// curves after piecewise-linear interpolation onto a common log-x grid
/// inside the window. Zero or one curve scores a perfect 0.
pub fn collapse_quality(
    curves: &[CollapseCurve],
    window: (f64, f64),
) -> Result<f64, ScalingError> {
    if curves.len() < 2 {
        return Ok(0.0);
    }
    let (lo, hi) = full_overlap_window(curves, Some(window)).ok_or(ScalingError::NoOverlap)?;
    let log_lo = lo.ln();
    let log_hi = hi.ln();
    let grid: Vec<f64> = (0..QUALITY_GRID)
        .map(|i| log_lo + (log_hi - log_lo) * i as f64 / (QUALITY_GRID - 1) as f64)
        .collect();

    // Interpolate each curve's log-y onto the grid.
    let mut logs: Vec<Vec<f64>> = Vec::with_capacity(curves.len());
    for c in curves {
        let pts: Vec<(f64, f64)> =
            c.x.iter()
                .zip(&c.y)
                .filter(|(&x, &y)| x > 0.0 && y > 0.0)
                .map(|(&x, &y)| (x.ln(), y.ln()))
                .collect();
        if pts.len() < 2 {
            return Err(ScalingError::TooFewPoints { needed: 2, got: pts.len() });
        }
        let values = grid.iter().map(|&g| interp(&pts, g)).collect();
        logs.push(values);
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..logs.len() {
        for j in (i + 1)..logs.len() {
            for k in 0..QUALITY_GRID {
                let d = logs[i][k] - logs[j][k];
                total += d * d;
            }
            count += QUALITY_GRID;
        }
    }
    Ok(total / count as f64)
}

/// Piecewise-linear interpolation in presorted `(x, y)` pairs, clamped at
/// the ends (the grid never exceeds the data range by construction).
fn interp(pts: &[(f64, f64)], x: f64) -> f64 {
    match pts.binary_search_by(|p| p.0.total_cmp(&x)) {
        Ok(i) => pts[i].1,
        Err(0) => pts[0].1,
        Err(i) if i >= pts.len() => pts[pts.len() - 1].1,
        Err(i) => {
            let (x0, y0) = pts[i - 1];
            let (x1, y1) = pts[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// Quality for collapses whose rescaled abscissa carries the sign of `tau`:
/// curves are grouped by sign, the negative group is mirrored to positive
/// `x`, each group is scored over its own mutual overlap (optionally
/// intersected with `|x|` in `window_abs`), and the scores are combined
/// weighted by pair count.
pub fn two_sided_quality(
    curves: &[CollapseCurve],
    window_abs: Option<(f64, f64)>,
) -> Result<f64, ScalingError> {
    if curves.len() < 2 {
        return Ok(0.0);
    }
    let mut positive: Vec<CollapseCurve> = Vec::new();
    let mut negative: Vec<CollapseCurve> = Vec::new();
    for c in curves {
        let median = c.x[c.x.len() / 2];
        if median >= 0.0 {
            positive.push(c.clone());
        } else {
            let mut pts: Vec<(f64, f64)> = c.x.iter().zip(&c.y).map(|(&x, &y)| (-x, y)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            negative.push(CollapseCurve {
                label: c.label.clone(),
                x: pts.iter().map(|p| p.0).collect(),
                y: pts.iter().map(|p| p.1).collect(),
            });
        }
    }
    let window = window_abs.unwrap_or((f64::MIN_POSITIVE, f64::MAX));
    let mut total = 0.0;
    let mut pairs = 0usize;
    for group in [&positive, &negative] {
        if group.len() < 2 {
            continue;
        }
        if let Ok(q) = collapse_quality(group, window) {
            let p = group.len() * (group.len() - 1) / 2;
            total += q * p as f64;
            pairs += p;
        }
    }
    if pairs == 0 {
        return Err(ScalingError::NoOverlap);
    }
    Ok(total / pairs as f64)
}

/// Result of the one-parameter finite-width fit.
#[derive(Debug, Clone, Serialize)]
pub struct FiniteSizeFit {
    pub mu: f64,
    pub kappa: f64,
    pub rho0: f64,
    /// Mean squared log residual at the optimum.
    pub residual: f64,
}

/// Log of the model `n rho(l)` solving `d rho/dl = -(mu/n) rho - kappa rho^2`
/// from `rho(0) = rho0`.
fn log_model_smooth(l: f64, n: f64, mu: f64, kappa: f64, rho0: f64) -> f64 {
    let t = mu * l / n;
    // n rho = rho0 mu / (rho0 kappa (e^t - 1) + (mu/n) e^t), evaluated in log
    // form so deep tails do not overflow.
    (rho0 * mu).ln() - t - (rho0 * kappa + mu / n - rho0 * kappa * (-t).exp()).ln()
}

/// Log of the model `n^2 rho(l)` solving
/// `d rho/dl = -(mu/n) rho - 2 kappa rho^(3/2)` from `rho(0) = rho0`.
fn log_model_scale_invariant(l: f64, n: f64, mu: f64, kappa: f64, rho0: f64) -> f64 {
    let t = 0.5 * mu * l / n;
    let s = rho0.sqrt();
    (mu * mu * rho0).ln()
        - 2.0 * (t + (2.0 * kappa * s + mu / n - 2.0 * kappa * s * (-t).exp()).ln())
}

/// Model value `n rho(l)` (smooth) or `n^2 rho(l)` (scale-invariant) used by
/// [`fit_mu`]; exposed for plotting fitted curves.
pub fn finite_size_model(
    l: f64,
    n: f64,
    mu: f64,
    kappa: f64,
    rho0: f64,
    class: ActivationClass,
) -> f64 {
    match class {
        ActivationClass::Smooth => log_model_smooth(l, n, mu, kappa, rho0).exp(),
        ActivationClass::ScaleInvariant => log_model_scale_invariant(l, n, mu, kappa, rho0).exp(),
    }
}

/// Fit the finite-width metric factor `mu` by least squares in log space,
/// with `kappa` fixed from theory and `rho0` fixed to the measured value at
/// the first layer (overridable). Scalar minimization is a coarse log-grid
/// bracket refined by golden-section to 1e-6 relative.
pub fn fit_mu(
    layers: &[f64],
    rho: &[f64],
    width: usize,
    kappa: f64,
    class: ActivationClass,
    rho0: Option<f64>,
) -> Result<FiniteSizeFit, ScalingError> {
    if layers.len() < 20 {
        return Err(ScalingError::TooFewPoints { needed: 20, got: layers.len() });
    }
    let rho0 = rho0.unwrap_or(rho[0]);
    if !(rho0 > 0.0) {
        return Err(ScalingError::NonPositiveData);
    }
    let n = width as f64;
    let pts: Vec<(f64, f64)> = layers
        .iter()
        .zip(rho)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&l, &r)| {
            let scaled = match class {
                ActivationClass::Smooth => n * r,
                ActivationClass::ScaleInvariant => n * n * r,
            };
            (l, scaled.ln())
        })
        .collect();
    if pts.len() < 10 {
        return Err(ScalingError::TooFewPoints { needed: 10, got: pts.len() });
    }

    let sse = |mu: f64| -> f64 {
        pts.iter()
            .map(|&(l, logy)| {
                let m = match class {
                    ActivationClass::Smooth => log_model_smooth(l, n, mu, kappa, rho0),
                    ActivationClass::ScaleInvariant => {
                        log_model_scale_invariant(l, n, mu, kappa, rho0)
                    }
                };
                (m - logy) * (m - logy)
            })
            .sum()
    };

    // Coarse bracket on a log grid.
    let grid: Vec<f64> = (0..=120)
        .map(|i| 1e-3_f64 * (30.0_f64 / 1e-3).powf(i as f64 / 120.0))
        .collect();
    let best = grid
        .iter()
        .enumerate()
        .map(|(i, &mu)| (i, sse(mu)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty grid")
        .0;
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];

    // Golden-section refinement.
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = sse(c);
    let mut fd = sse(d);
    while (hi - lo) > 1e-6 * hi.abs().max(1e-12) {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = sse(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = sse(d);
        }
    }
    let mu = 0.5 * (lo + hi);
    Ok(FiniteSizeFit { mu, kappa, rho0, residual: sse(mu) / pts.len() as f64 })
}

/// Weighted least-squares power-law fit on log-log axes.
#[derive(Debug, Clone, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub amplitude: f64,
    pub exponent_stderr: f64,
}

/// Fit `rho = amplitude * l^exponent` over the points whose abscissa falls
/// in `window`. When standard errors accompany the data they enter as
/// weights `(rho/sigma)^2`, the usual log-space propagation.
pub fn fit_power_law(
    points: &[(f64, f64)],
    stderr: Option<&[f64]>,
    window: (f64, f64),
) -> Result<PowerLawFit, ScalingError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (i, &(l, r)) in points.iter().enumerate() {
        if l < window.0 || l > window.1 {
            continue;
        }
        if !(r > 0.0) {
            return Err(ScalingError::NonPositiveData);
        }
        xs.push(l.ln());
        ys.push(r.ln());
        let w = match stderr {
            Some(s) => {
                let sigma = s[i].max(1e-6 * r);
                (r / sigma) * (r / sigma)
            }
            None => 1.0,
        };
        ws.push(w);
    }
    let m = xs.len();
    if m < 10 {
        return Err(ScalingError::TooFewPoints { needed: 10, got: m });
    }
    let wsum: f64 = ws.iter().sum();
    let xbar: f64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let ybar: f64 = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let sxx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .zip(&ws)
        .map(|((x, y), w)| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .zip(&ws)
        .map(|((x, y), w)| {
            let r = y - (intercept + slope * x);
            w * r * r
        })
        .sum();
    let dof = (m - 2) as f64;
    // Scale the weighted residual variance so uniform weights reduce to the
    // ordinary least-squares stderr.
    let sigma2 = rss / dof * (m as f64 / wsum);
    let slope_var = sigma2 / (sxx * m as f64 / wsum);
    Ok(PowerLawFit {
        exponent: slope,
        amplitude: intercept.exp(),
        exponent_stderr: slope_var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Continuum solution of `d rho/dl = a rho - kappa rho^2` with the
    /// initial transient already forgotten (the universal branch).
    fn logistic_trace(label: &str, tau: f64, gamma: f64, kappa: f64, depth: usize) -> TraceData {
        let a = gamma * tau;
        let layers: Vec<f64> = (1..=depth).map(|l| l as f64).collect();
        let rho = layers
            .iter()
            .map(|&l| {
                let e = (a * l).exp();
                a * e / (kappa * (e - 1.0))
            })
            .collect();
        TraceData::new(label, layers, rho)
    }

    #[test]
    fn offcritical_rescaling_collapses_the_universal_branch() {
        // Two synthetic systems with different metric factors fall on the
        // same curve once rescaled, and do not before.
        let exps = ScalingExponents::mean_field();
        let traces = vec![
            OffCriticalTrace {
                data: logistic_trace("a+", 0.01, 1.4, 0.23, 2000),
                tau: 0.01,
                kappa: 0.23,
                zeta: 1.4 / 0.23,
            },
            OffCriticalTrace {
                data: logistic_trace("b+", 0.02, 0.8, 0.4, 2000),
                tau: 0.02,
                kappa: 0.4,
                zeta: 0.8 / 0.4,
            },
            OffCriticalTrace {
                data: logistic_trace("a-", -0.01, 1.4, 0.23, 2000),
                tau: -0.01,
                kappa: 0.23,
                zeta: 1.4 / 0.23,
            },
            OffCriticalTrace {
                data: logistic_trace("b-", -0.02, 0.8, 0.4, 2000),
                tau: -0.02,
                kappa: 0.4,
                zeta: 0.8 / 0.4,
            },
        ];
        let collapse = rescale_offcritical(&traces, &exps);
        assert!(collapse.quality < 1e-4, "quality {}", collapse.quality);

        // Raw curves (identity rescaling: all factors absorbed) are far off.
        let raw: Vec<OffCriticalTrace> = traces
            .iter()
            .map(|t| OffCriticalTrace { data: t.data.clone(), tau: 1.0, kappa: 1.0, zeta: 1.0 })
            .collect();
        let raw_collapse = rescale_offcritical(&raw, &exps);
        assert!(raw_collapse.quality > 100.0 * collapse.quality);
    }

    #[test]
    fn offcritical_branches_bend_in_opposite_directions() {
        let exps = ScalingExponents::mean_field();
        let up = OffCriticalTrace {
            data: logistic_trace("chaotic", 0.02, 1.0, 0.3, 4000),
            tau: 0.02,
            kappa: 0.3,
            zeta: 1.0 / 0.3,
        };
        let down = OffCriticalTrace {
            data: logistic_trace("ordered", -0.02, 1.0, 0.3, 4000),
            tau: -0.02,
            kappa: 0.3,
            zeta: 1.0 / 0.3,
        };
        let collapse = rescale_offcritical(&[up, down], &exps);
        // y -> 1 as |x| -> 0; the chaotic side bends up, the ordered down.
        for c in &collapse.curves {
            let first_y = if c.x[0].abs() < c.x[c.x.len() - 1].abs() {
                c.y[0]
            } else {
                c.y[c.y.len() - 1]
            };
            assert!((first_y - 1.0).abs() < 0.1, "{}: y near x=0 is {first_y}", c.label);
        }
        let chaotic = &collapse.curves[0];
        let ordered = &collapse.curves[1];
        assert!(*chaotic.y.last().unwrap() > 1.5);
        assert!(ordered.y[0] < 0.5);
    }

    #[test]
    fn quality_examples() {
        let c1 = CollapseCurve {
            label: "a".into(),
            x: (1..=100).map(|i| i as f64).collect(),
            y: (1..=100).map(|i| 1.0 / i as f64).collect(),
        };
        // Duplicated curve: perfect collapse.
        let q = collapse_quality(&[c1.clone(), c1.clone()], (1.0, 100.0)).unwrap();
        assert_abs_diff_eq!(q, 0.0);
        // Single curve: trivially perfect.
        let q = collapse_quality(&[c1.clone()], (1.0, 100.0)).unwrap();
        assert_eq!(q, 0.0);
        // Doubling one curve vertically adds (ln 2)^2 to the score.
        let c2 = CollapseCurve {
            label: "b".into(),
            x: c1.x.clone(),
            y: c1.y.iter().map(|v| 2.0 * v).collect(),
        };
        let q = collapse_quality(&[c1.clone(), c2], (1.0, 100.0)).unwrap();
        assert_abs_diff_eq!(q, 2.0_f64.ln().powi(2), epsilon = 1e-12);
        // Disjoint windows cannot be compared.
        let c3 = CollapseCurve { label: "c".into(), x: vec![200.0, 300.0], y: vec![1.0, 2.0] };
        assert!(matches!(
            collapse_quality(&[c1, c3], (1.0, 300.0)),
            Err(ScalingError::NoOverlap)
        ));
    }

    #[test]
    fn fit_power_law_recovers_exact_input() {
        let kappa = 0.2335;
        let pts: Vec<(f64, f64)> =
            (1..=2000).map(|l| (l as f64, 1.0 / (kappa * l as f64))).collect();
        let fit = fit_power_law(&pts, None, (10.0, 2000.0)).unwrap();
        assert_abs_diff_eq!(fit.exponent, -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.amplitude, 1.0 / kappa, epsilon = 1e-6);
        assert!(fit.exponent_stderr < 1e-6);
    }

    #[test]
    fn fit_power_law_error_paths() {
        let pts: Vec<(f64, f64)> = (1..=30).map(|l| (l as f64, 1.0 / l as f64)).collect();
        assert!(matches!(
            fit_power_law(&pts[..5], None, (0.5, 40.0)),
            Err(ScalingError::TooFewPoints { .. })
        ));
        let mut bad = pts.clone();
        bad[7].1 = 0.0;
        assert!(matches!(
            fit_power_law(&bad, None, (0.5, 40.0)),
            Err(ScalingError::NonPositiveData)
        ));
    }

    #[test]
    fn fit_mu_recovers_noise_free_synthetic_data() {
        for &mu in &[0.1, 0.4, 1.0, 2.0] {
            for &n in &[50usize, 200, 800] {
                let kappa = 0.2335;
                let rho0 = 0.7;
                let depth = 6 * n;
                let layers: Vec<f64> = (1..=depth).map(|l| l as f64).collect();
                let rho: Vec<f64> = layers
                    .iter()
                    .map(|&l| {
                        finite_size_model(l, n as f64, mu, kappa, rho0, ActivationClass::Smooth)
                            / n as f64
                    })
                    .collect();
                let fit =
                    fit_mu(&layers, &rho, n, kappa, ActivationClass::Smooth, Some(rho0)).unwrap();
                assert!(
                    ((fit.mu - mu) / mu).abs() < 1e-4,
                    "mu {mu}, n {n}: fitted {}",
                    fit.mu
                );
            }
        }
    }

    #[test]
    fn fit_mu_tolerates_multiplicative_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let (mu, kappa, rho0, n) = (0.66, 0.2335, 0.7, 400usize);
        let depth = 2000;
        let layers: Vec<f64> = (1..=depth).map(|l| l as f64).collect();
        let rho: Vec<f64> = layers
            .iter()
            .map(|&l| {
                let exact =
                    finite_size_model(l, n as f64, mu, kappa, rho0, ActivationClass::Smooth)
                        / n as f64;
                exact * (1.0 + rng.random_range(-0.01..0.01))
            })
            .collect();
        let fit = fit_mu(&layers, &rho, n, kappa, ActivationClass::Smooth, Some(rho0)).unwrap();
        assert!(((fit.mu - mu) / mu).abs() < 0.02, "fitted {}", fit.mu);
    }

    #[test]
    fn fit_mu_scale_invariant_round_trip() {
        let (mu, kappa, rho0, n) = (0.2676, 0.150053, 1.0, 200usize);
        let layers: Vec<f64> = (1..=1000).map(|l| l as f64).collect();
        let rho: Vec<f64> = layers
            .iter()
            .map(|&l| {
                finite_size_model(l, n as f64, mu, kappa, rho0, ActivationClass::ScaleInvariant)
                    / (n * n) as f64
            })
            .collect();
        let fit =
            fit_mu(&layers, &rho, n, kappa, ActivationClass::ScaleInvariant, Some(rho0)).unwrap();
        assert!(((fit.mu - mu) / mu).abs() < 1e-4, "fitted {}", fit.mu);
    }

    #[test]
    fn fit_mu_needs_enough_usable_points() {
        let layers: Vec<f64> = (1..=30).map(|l| l as f64).collect();
        let mut rho = vec![0.0; 30];
        rho[0] = 0.5;
        let err = fit_mu(&layers, &rho, 100, 0.2, ActivationClass::Smooth, None).unwrap_err();
        assert!(matches!(err, ScalingError::TooFewPoints { .. }));
        let err =
            fit_mu(&layers[..10], &rho[..10], 100, 0.2, ActivationClass::Smooth, None).unwrap_err();
        assert!(matches!(err, ScalingError::TooFewPoints { .. }));
    }

    #[test]
    fn initial_slip_rejects_mixed_classes() {
        let t = TraceData::new("x", vec![1.0, 2.0], vec![0.5, 0.4]);
        let a = InitialSlipTrace {
            data: t.clone(),
            rho0: 0.1,
            kappa: 0.2,
            omega: 1.0,
            class: ActivationClass::Smooth,
        };
        let b = InitialSlipTrace { class: ActivationClass::ScaleInvariant, ..a.clone() };
        assert!(matches!(rescale_initial_slip(&[a, b]), Err(ScalingError::MixedClasses)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rescale_round_trips_are_exact(
            kappa in 0.05_f64..1.0,
            zeta in 0.5_f64..8.0,
            tau in prop_oneof![(-0.1_f64..-1e-3), (1e-3_f64..0.1)],
            rho0 in 1e-4_f64..0.9,
            width in 10_usize..500,
        ) {
            let data = TraceData::new(
                "t",
                (1..=40).map(|l| l as f64).collect(),
                (1..=40).map(|l| 0.8 / l as f64).collect(),
            );
            let exps = ScalingExponents::dp_1d();

            let col = rescale_offcritical(
                &[OffCriticalTrace { data: data.clone(), tau, kappa, zeta }],
                &exps,
            );
            let back = unrescale_offcritical(&col.curves[0], &exps, kappa, zeta, tau).unwrap();
            let mut got: Vec<(f64, f64)> =
                back.layers.iter().copied().zip(back.rho.iter().copied()).collect();
            got.sort_by(|a, b| a.0.total_cmp(&b.0));
            for i in 0..40 {
                prop_assert!((got[i].0 - data.layers[i]).abs() < 1e-9 * data.layers[i]);
                prop_assert!((got[i].1 - data.rho[i]).abs() < 1e-12);
            }

            for class in [ActivationClass::Smooth, ActivationClass::ScaleInvariant] {
                let col = rescale_initial_slip(&[InitialSlipTrace {
                    data: data.clone(), rho0, kappa, omega: 0.7, class,
                }]).unwrap();
                let back = unrescale_initial_slip(&col.curves[0], rho0, kappa, 0.7, class);
                for i in 0..40 {
                    prop_assert!((back.layers[i] - data.layers[i]).abs() < 1e-9 * data.layers[i]);
                    prop_assert!((back.rho[i] - data.rho[i]).abs() < 1e-12);
                }

                let col = rescale_finite_size(&[(data.clone(), width)], class);
                let back = unrescale_finite_size(&col.curves[0], width, class);
                for i in 0..40 {
                    prop_assert!((back.layers[i] - data.layers[i]).abs() < 1e-9 * data.layers[i]);
                    prop_assert!((back.rho[i] - data.rho[i]).abs() < 1e-14);
                }
            }

            let col = rescale_dp(&[(data.clone(), tau)], &exps);
            let back = unrescale_dp(&col.curves[0], &exps, tau).unwrap();
            let mut got: Vec<(f64, f64)> =
                back.layers.iter().copied().zip(back.rho.iter().copied()).collect();
            got.sort_by(|a, b| a.0.total_cmp(&b.0));
            for i in 0..40 {
                prop_assert!((got[i].0 - data.layers[i]).abs() < 1e-9 * data.layers[i]);
                prop_assert!((got[i].1 - data.rho[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn fit_power_law_is_scale_equivariant(scale in 0.01_f64..100.0) {
            let pts: Vec<(f64, f64)> =
                (1..=200).map(|l| (l as f64, 2.0 * (l as f64).powf(-0.7))).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(l, r)| (l, scale * r)).collect();
            let f0 = fit_power_law(&pts, None, (1.0, 200.0)).unwrap();
            let f1 = fit_power_law(&scaled, None, (1.0, 200.0)).unwrap();
            prop_assert!((f0.exponent - f1.exponent).abs() < 1e-9);
            prop_assert!((f1.amplitude / f0.amplitude - scale).abs() < 1e-6 * scale);
        }
    }
}
