//! Activation functions with analytic derivatives and the closed-form
//! Gaussian kernels of the scale-invariant (leaky-ReLU) family.
//!
//! Two universality classes appear in the transition analysis:
//!
//! * smooth activations with `h(0) = 0` and finite, nonzero `h'(0)` (tanh,
//!   erf, sin) — all Gaussian expectations go through quadrature;
//! * scale-invariant activations `h(lambda x) = lambda h(x)` for
//!   `lambda > 0` (leaky ReLU with leak `a >= 0`) — the second derivative is
//!   distributional, so every expectation is evaluated with the analytic
//!   arc-cosine kernels below instead of quadrature.

use std::f64::consts::PI;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("correlation must lie in [-1, 1], got {value}")]
    CorrelationOutOfRange { value: f64 },
    #[error("unknown activation name {name:?} (expected tanh, erf, sin, relu or leaky-relu)")]
    UnknownName { name: String },
    #[error("leak parameter must be non-negative, got {leak}")]
    NegativeLeak { leak: f64 },
}

/// Universality class of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ActivationClass {
    /// Smooth with h(0) = 0: transition driven by the covariance map.
    Smooth,
    /// Positively homogeneous of degree one: transition driven by the
    /// variance map, treated with analytic kernels.
    ScaleInvariant,
}

/// An activation together with its derivatives up to third order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Activation {
    Tanh,
    Erf,
    Sin,
    /// `h(x) = x` for `x >= 0`, `a x` otherwise. `leak = 0` is ReLU and
    /// `leak = 1` is the identity.
    LeakyRelu { leak: f64 },
}

impl Activation {
    pub fn relu() -> Self {
        Activation::LeakyRelu { leak: 0.0 }
    }

    /// Look an activation up by name; `leak` is only consulted for the
    /// scale-invariant family ("relu" pins it to zero).
    pub fn from_name(name: &str, leak: Option<f64>) -> Result<Self, ActivationError> {
        let ok_leak = |a: f64| {
            if a < 0.0 {
                Err(ActivationError::NegativeLeak { leak: a })
            } else {
                Ok(Activation::LeakyRelu { leak: a })
            }
        };
        match name.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "erf" => Ok(Activation::Erf),
            "sin" => Ok(Activation::Sin),
            "relu" => ok_leak(0.0),
            "leaky-relu" | "leaky_relu" | "lrelu" => ok_leak(leak.unwrap_or(0.01)),
            other => Err(ActivationError::UnknownName { name: other.to_string() }),
        }
    }

    /// Representative members of both classes.
    pub fn catalogue() -> Vec<Activation> {
        vec![
            Activation::Tanh,
            Activation::Erf,
            Activation::Sin,
            Activation::relu(),
            Activation::LeakyRelu { leak: 0.01 },
        ]
    }

    pub fn class(&self) -> ActivationClass {
        match self {
            Activation::LeakyRelu { .. } => ActivationClass::ScaleInvariant,
            _ => ActivationClass::Smooth,
        }
    }

    pub fn leak(&self) -> Option<f64> {
        match self {
            Activation::LeakyRelu { leak } => Some(*leak),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Erf => "erf",
            Activation::Sin => "sin",
            Activation::LeakyRelu { leak } if *leak == 0.0 => "relu",
            Activation::LeakyRelu { .. } => "leaky-relu",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Erf => libm::erf(x),
            Activation::Sin => x.sin(),
            Activation::LeakyRelu { leak } => {
                if x >= 0.0 {
                    x
                } else {
                    leak * x
                }
            }
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
            Activation::Sin => x.cos(),
            Activation::LeakyRelu { leak } => {
                if x >= 0.0 {
                    1.0
                } else {
                    *leak
                }
            }
        }
    }

    /// Second derivative. For the scale-invariant family this is the
    /// almost-everywhere value (zero); the delta contribution at the origin
    /// is handled by the analytic kernels, never through this method.
    pub fn d2(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Erf => -4.0 * x / PI.sqrt() * (-x * x).exp(),
            Activation::Sin => -x.sin(),
            Activation::LeakyRelu { .. } => 0.0,
        }
    }

    /// Third derivative, with the same caveat as [`Activation::d2`].
    pub fn d3(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                -2.0 * s * (1.0 - 3.0 * t * t)
            }
            Activation::Erf => (8.0 * x * x - 4.0) / PI.sqrt() * (-x * x).exp(),
            Activation::Sin => -x.cos(),
            Activation::LeakyRelu { .. } => 0.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::LeakyRelu { leak } if *leak != 0.0 => {
                write!(f, "leaky-relu(a={leak})")
            }
            other => f.write_str(other.name()),
        }
    }
}

fn clamp_correlation(c: f64) -> Result<f64, ActivationError> {
    if c.abs() > 1.0 + 1e-12 || c.is_nan() {
        return Err(ActivationError::CorrelationOutOfRange { value: c });
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// E[h(v1) h(v2)] for a standard bivariate normal pair with correlation `c`
/// and leaky-ReLU `h` with leak `a` (the degree-one arc-cosine kernel,
/// extended to nonzero leak).
pub fn arccos_kernel_deg1(c: f64, leak: f64) -> Result<f64, ActivationError> {
    let c = clamp_correlation(c)?;
    let theta = c.acos();
    let relu_part = ((1.0 - c * c).max(0.0).sqrt() + (PI - theta) * c) / (2.0 * PI);
    Ok(leak * c + (1.0 - leak) * (1.0 - leak) * relu_part)
}

/// E[h'(v1) h'(v2)] for the same pair (the degree-zero arc-cosine kernel).
pub fn arccos_kernel_deg0(c: f64, leak: f64) -> Result<f64, ActivationError> {
    let c = clamp_correlation(c)?;
    let plus = (1.0 + leak) * (1.0 + leak) / 4.0;
    let minus = (1.0 - leak) * (1.0 - leak);
    Ok(plus + minus * c.asin() / (2.0 * PI))
}

/// One-step increment `rho(l+1) - rho(l)` of the scale-invariant
/// correlation map at the critical line:
/// `-(sigma_w^2 (1-a)^2 / 2 pi) * (sqrt(1-c^2) - c * arccos(c))`.
///
/// Values of `c` within 1e-12 of +-1 are clamped; anything further outside
/// is a domain error.
pub fn arccos_kernel_rho_step(c: f64, sigma_w: f64, leak: f64) -> Result<f64, ActivationError> {
    let c = clamp_correlation(c)?;
    let wedge = (1.0 - c * c).max(0.0).sqrt() - c * c.acos();
    Ok(-(sigma_w * sigma_w * (1.0 - leak) * (1.0 - leak)) / (2.0 * PI) * wedge)
}
