//! Numerical laboratory for the order-to-chaos transition in deep neural
//! networks.
//!
//! The crate covers the infinite-width mean-field theory of signal
//! propagation (variance/covariance recursions, correlation depth, critical
//! points), closed-form nonuniversal metric factors at criticality, the
//! neural tangent kernel and its linearized training dynamics, Monte-Carlo
//! simulation of finite-width multilayer perceptrons and circular-padded
//! convolutional networks, and the scaling-collapse and exponent-fitting
//! analyses used to compare the two.
//!
//! Everything is deterministic: quadrature-based expectations are pure, and
//! the simulators draw from counter-keyed streams so that ensembles are
//! bit-reproducible regardless of thread count.

pub mod activations;
pub mod io;
pub mod meanfield;
pub mod metric_factors;
pub mod ntk;
pub mod quadrature;
pub mod scaling;
pub mod simulate;

pub use activations::{Activation, ActivationClass};
pub use meanfield::{Hyperparameters, MeanFieldState, MeanFieldTrace, Phase};
pub use metric_factors::CriticalPoint;
pub use quadrature::GaussHermite;
