//! Monte-Carlo simulation of finite-width networks: order-parameter traces
//! for fully connected and circular-padded convolutional architectures,
//! finite-network Lyapunov exponents, and single-pixel noise-spread
//! measurement.
//!
//! Randomness comes from counter-keyed ChaCha8 streams, one per
//! (master seed, run, layer). Runs are embarrassingly parallel and the
//! ensemble reduction walks them in run order, so serial and parallel
//! execution produce bit-identical results. Weights are drawn on the fly
//! while accumulating, never stored network-wide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::activations::Activation;
use crate::meanfield::Hyperparameters;

/// Below this centered sum of squares the correlation denominator is treated
/// as collapsed: the run reports zero for that and all deeper layers.
const COLLAPSE_GUARD: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration invalid: {0}")]
    BadConfig(String),
    #[error("operation requires the {expected} architecture")]
    WrongArchitecture { expected: &'static str },
    #[error("input length {got} does not match the expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("direction norm underflowed at step {step}; this signals a defect, not physics")]
    NormUnderflow { step: usize },
    #[error("burn-in {burn_in} must be smaller than the total steps {l_max}")]
    BurnInTooLong { burn_in: usize, l_max: usize },
}

/// Network architecture; `width` in [`NetworkConfig`] is the unit count for
/// the fully connected case and the spatial extent per dimension for the
/// convolutional ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Architecture {
    Mlp { n_in: usize },
    Conv1d { channels: usize, kernel: usize },
    Conv2d { channels: usize, kernel: usize },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::Conv1d { .. } => "conv1d",
            Architecture::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NetworkConfig {
    pub arch: Architecture,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub hp: Hyperparameters,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.width == 0 || self.depth == 0 {
            return Err(SimError::BadConfig("width and depth must be positive".into()));
        }
        match self.arch {
            Architecture::Mlp { n_in } => {
                if n_in == 0 {
                    return Err(SimError::BadConfig("n_in must be positive".into()));
                }
            }
            Architecture::Conv1d { channels, kernel } | Architecture::Conv2d { channels, kernel } => {
                if channels == 0 {
                    return Err(SimError::BadConfig("channel count must be positive".into()));
                }
                if kernel % 2 == 0 {
                    return Err(SimError::BadConfig(format!(
                        "kernel width must be odd, got {kernel}"
                    )));
                }
                if kernel > self.width {
                    return Err(SimError::BadConfig(format!(
                        "kernel width {kernel} exceeds spatial extent {}",
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of elements of one input signal.
    pub fn input_len(&self) -> usize {
        match self.arch {
            Architecture::Mlp { n_in } => n_in,
            Architecture::Conv1d { .. } => self.width,
            Architecture::Conv2d { .. } => self.width * self.width,
        }
    }
}

/// Ensemble description; per-run streams are derived deterministically from
/// the master seed, so any two runs use distinct, reproducible randomness.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnsembleSpec {
    pub runs: usize,
    pub master_seed: u64,
}

/// Ensemble-averaged order-parameter trace; index `l-1` holds layer `l`.
#[derive(Debug, Clone, Serialize)]
pub struct PropagationTrace {
    pub rho_mean: Vec<f64>,
    pub rho_stderr: Vec<f64>,
    pub config: NetworkConfig,
    pub ensemble: EnsembleSpec,
}

impl PropagationTrace {
    pub fn layers(&self) -> Vec<f64> {
        (1..=self.rho_mean.len()).map(|l| l as f64).collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream ids for non-layer randomness; layers use their 1-based index.
const STREAM_INPUT: u64 = 1 << 48;
const STREAM_DIRECTION: u64 = (1 << 48) + 1;

/// Counter-keyed stream for (master seed, run, stream id).
fn stream(master: u64, run: u64, stream_id: u64) -> ChaCha8Rng {
    let mut x = splitmix64(master ^ run.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x = splitmix64(x ^ stream_id.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        x = splitmix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Mean-centered Pearson order parameter of two unit vectors, with the
/// degenerate-denominator guard.
fn pair_rho(z1: &[f64], z2: &[f64], collapsed: &mut bool) -> f64 {
    if *collapsed {
        return 0.0;
    }
    let n = z1.len() as f64;
    let m1: f64 = z1.iter().sum::<f64>() / n;
    let m2: f64 = z2.iter().sum::<f64>() / n;
    let mut ss1 = 0.0;
    let mut ss2 = 0.0;
    let mut cross = 0.0;
    for (&a, &b) in z1.iter().zip(z2) {
        let da = a - m1;
        let db = b - m2;
        ss1 += da * da;
        ss2 += db * db;
        cross += da * db;
    }
    if ss1 < COLLAPSE_GUARD || ss2 < COLLAPSE_GUARD {
        *collapsed = true;
        return 0.0;
    }
    (1.0 - cross / (ss1 * ss2).sqrt()).clamp(0.0, 2.0)
}

/// Reduce per-run traces (in run order) to means and standard errors.
fn reduce_runs(per_run: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let runs = per_run.len();
    let depth = per_run[0].len();
    let mut mean = vec![0.0; depth];
    let mut stderr = vec![0.0; depth];
    for l in 0..depth {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for trace in per_run {
            sum += trace[l];
            sumsq += trace[l] * trace[l];
        }
        let m = sum / runs as f64;
        mean[l] = m;
        if runs > 1 {
            let var = ((sumsq - runs as f64 * m * m) / (runs as f64 - 1.0)).max(0.0);
            stderr[l] = (var / runs as f64).sqrt();
        }
    }
    (mean, stderr)
}

/// One fully connected layer applied to a pair of signals sharing the same
/// weights; weights stream row by row and are never stored.
fn mlp_layer(
    input1: &[f64],
    input2: &[f64],
    out1: &mut [f64],
    out2: &mut [f64],
    sigma_w: f64,
    sigma_b: f64,
    rng: &mut ChaCha8Rng,
) {
    let fan_in = input1.len();
    let scale = sigma_w / (fan_in as f64).sqrt();
    for i in 0..out1.len() {
        let mut acc1 = 0.0;
        let mut acc2 = 0.0;
        for j in 0..fan_in {
            let w = normal(rng);
            acc1 += w * input1[j];
            acc2 += w * input2[j];
        }
        out1[i] = scale * acc1;
        out2[i] = scale * acc2;
    }
    for i in 0..out1.len() {
        let b = sigma_b * normal(rng);
        out1[i] += b;
        out2[i] += b;
    }
}

/// Propagate a pair of inputs through one sampled fully connected network,
/// recording the order parameter per hidden layer.
fn mlp_pair_run(x1: &[f64], x2: &[f64], config: &NetworkConfig, run: u64, seed: u64) -> Vec<f64> {
    let n = config.width;
    let (sw, sb) = (config.hp.sigma_w, config.hp.sigma_b);
    let act = config.activation;
    let mut z1 = vec![0.0; n];
    let mut z2 = vec![0.0; n];
    let mut rng = stream(seed, run, 1);
    mlp_layer(x1, x2, &mut z1, &mut z2, sw, sb, &mut rng);

    let mut rho = Vec::with_capacity(config.depth);
    let mut collapsed = false;
    rho.push(pair_rho(&z1, &z2, &mut collapsed));

    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut y2 = vec![0.0; n];
    for layer in 2..=config.depth {
        for j in 0..n {
            h1[j] = act.eval(z1[j]);
            h2[j] = act.eval(z2[j]);
        }
        let mut rng = stream(seed, run, layer as u64);
        mlp_layer(&h1, &h2, &mut y1, &mut y2, sw, sb, &mut rng);
        std::mem::swap(&mut z1, &mut y1);
        std::mem::swap(&mut z2, &mut y2);
        rho.push(pair_rho(&z1, &z2, &mut collapsed));
    }
    rho
}

/// Ensemble-averaged order-parameter trace of a fully connected network for
/// a fixed input pair.
pub fn mlp_pair_trace(
    x1: &[f64],
    x2: &[f64],
    config: &NetworkConfig,
    ensemble: &EnsembleSpec,
) -> Result<PropagationTrace, SimError> {
    config.validate()?;
    let Architecture::Mlp { n_in } = config.arch else {
        return Err(SimError::WrongArchitecture { expected: "mlp" });
    };
    if x1.len() != n_in || x2.len() != n_in {
        return Err(SimError::InputLength { expected: n_in, got: x1.len().max(x2.len()) });
    }
    let per_run: Vec<Vec<f64>> = (0..ensemble.runs as u64)
        .into_par_iter()
        .map(|run| mlp_pair_run(x1, x2, config, run, ensemble.master_seed))
        .collect();
    let (rho_mean, rho_stderr) = reduce_runs(&per_run);
    Ok(PropagationTrace { rho_mean, rho_stderr, config: *config, ensemble: *ensemble })
}

/// One circular cross-correlation layer for a pair of multichannel 1-D
/// signals sharing filters. Filter taps stream in (out-channel, in-channel,
/// tap) order, then per-site biases in (channel, site) order.
#[allow(clippy::too_many_arguments)]
fn conv1d_layer(
    input1: &[f64],
    input2: &[f64],
    out1: &mut [f64],
    out2: &mut [f64],
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
    sigma_w: f64,
    sigma_b: f64,
    rng: &mut ChaCha8Rng,
) {
    let scale = sigma_w / ((c_in * k) as f64).sqrt();
    let half = (k - 1) / 2;
    out1.fill(0.0);
    out2.fill(0.0);
    for alpha in 0..c_out {
        let o1 = &mut out1[alpha * n..(alpha + 1) * n];
        let o2 = &mut out2[alpha * n..(alpha + 1) * n];
        for m in 0..c_in {
            let s1 = &input1[m * n..(m + 1) * n];
            let s2 = &input2[m * n..(m + 1) * n];
            for tap in 0..k {
                let w = normal(rng);
                // Source index j = i + tap - half, wrapped circularly:
                // split the site loop at the wrap point.
                let shift = (n + tap - half) % n;
                let head = n - shift;
                for i in 0..head {
                    o1[i] += w * s1[i + shift];
                    o2[i] += w * s2[i + shift];
                }
                for i in head..n {
                    o1[i] += w * s1[i + shift - n];
                    o2[i] += w * s2[i + shift - n];
                }
            }
        }
    }
    for v in out1.iter_mut().zip(out2.iter_mut()) {
        let b = sigma_b * normal(rng);
        *v.0 = scale * *v.0 + b;
        *v.1 = scale * *v.1 + b;
    }
}

/// One circular cross-correlation layer in two dimensions; sites are stored
/// row-major per channel.
#[allow(clippy::too_many_arguments)]
fn conv2d_layer(
    input1: &[f64],
    input2: &[f64],
    out1: &mut [f64],
    out2: &mut [f64],
    c_in: usize,
    c_out: usize,
    n: usize,
    k: usize,
    sigma_w: f64,
    sigma_b: f64,
    rng: &mut ChaCha8Rng,
) {
    let area = n * n;
    let scale = sigma_w / ((c_in * k * k) as f64).sqrt();
    let half = (k - 1) / 2;
    out1.fill(0.0);
    out2.fill(0.0);
    for alpha in 0..c_out {
        let o1 = &mut out1[alpha * area..(alpha + 1) * area];
        let o2 = &mut out2[alpha * area..(alpha + 1) * area];
        for m in 0..c_in {
            let s1 = &input1[m * area..(m + 1) * area];
            let s2 = &input2[m * area..(m + 1) * area];
            for ty in 0..k {
                for tx in 0..k {
                    let w = normal(rng);
                    let shift_x = (n + tx - half) % n;
                    let head = n - shift_x;
                    for iy in 0..n {
                        let sy = (iy + n + ty - half) % n;
                        let orow = iy * n;
                        let srow = sy * n;
                        for ix in 0..head {
                            o1[orow + ix] += w * s1[srow + ix + shift_x];
                            o2[orow + ix] += w * s2[srow + ix + shift_x];
                        }
                        for ix in head..n {
                            o1[orow + ix] += w * s1[srow + ix + shift_x - n];
                            o2[orow + ix] += w * s2[srow + ix + shift_x - n];
                        }
                    }
                }
            }
        }
    }
    for v in out1.iter_mut().zip(out2.iter_mut()) {
        let b = sigma_b * normal(rng);
        *v.0 = scale * *v.0 + b;
        *v.1 = scale * *v.1 + b;
    }
}

/// Channel-averaged order parameter of a pair of multichannel signals.
fn conv_rho(z1: &[f64], z2: &[f64], channels: usize, sites: usize, collapsed: &mut bool) -> f64 {
    if *collapsed {
        return 0.0;
    }
    let mut total = 0.0;
    for m in 0..channels {
        let r = pair_rho(&z1[m * sites..(m + 1) * sites], &z2[m * sites..(m + 1) * sites], collapsed);
        if *collapsed {
            return 0.0;
        }
        total += r;
    }
    total / channels as f64
}

struct ConvDims {
    channels: usize,
    kernel: usize,
    sites: usize,
    two_d: bool,
}

fn conv_dims(config: &NetworkConfig) -> Result<ConvDims, SimError> {
    match config.arch {
        Architecture::Conv1d { channels, kernel } => {
            Ok(ConvDims { channels, kernel, sites: config.width, two_d: false })
        }
        Architecture::Conv2d { channels, kernel } => {
            Ok(ConvDims { channels, kernel, sites: config.width * config.width, two_d: true })
        }
        Architecture::Mlp { .. } => Err(SimError::WrongArchitecture { expected: "conv" }),
    }
}

fn conv_pair_run(
    x1: &[f64],
    x2: &[f64],
    config: &NetworkConfig,
    dims: &ConvDims,
    run: u64,
    seed: u64,
) -> Vec<f64> {
    let (c, k, sites) = (dims.channels, dims.kernel, dims.sites);
    let n = config.width;
    let (sw, sb) = (config.hp.sigma_w, config.hp.sigma_b);
    let act = config.activation;
    let apply = |i1: &[f64], i2: &[f64], o1: &mut [f64], o2: &mut [f64], c_in: usize, rng: &mut ChaCha8Rng| {
        if dims.two_d {
            conv2d_layer(i1, i2, o1, o2, c_in, c, n, k, sw, sb, rng);
        } else {
            conv1d_layer(i1, i2, o1, o2, c_in, c, n, k, sw, sb, rng);
        }
    };

    let mut z1 = vec![0.0; c * sites];
    let mut z2 = vec![0.0; c * sites];
    let mut rng = stream(seed, run, 1);
    apply(x1, x2, &mut z1, &mut z2, 1, &mut rng);

    let mut rho = Vec::with_capacity(config.depth);
    let mut collapsed = false;
    rho.push(conv_rho(&z1, &z2, c, sites, &mut collapsed));

    let mut h1 = vec![0.0; c * sites];
    let mut h2 = vec![0.0; c * sites];
    let mut y1 = vec![0.0; c * sites];
    let mut y2 = vec![0.0; c * sites];
    for layer in 2..=config.depth {
        for j in 0..c * sites {
            h1[j] = act.eval(z1[j]);
            h2[j] = act.eval(z2[j]);
        }
        let mut rng = stream(seed, run, layer as u64);
        apply(&h1, &h2, &mut y1, &mut y2, c, &mut rng);
        std::mem::swap(&mut z1, &mut y1);
        std::mem::swap(&mut z2, &mut y2);
        rho.push(conv_rho(&z1, &z2, c, sites, &mut collapsed));
    }
    rho
}

/// Ensemble-averaged order-parameter trace of a convolutional network for a
/// fixed pair of (single-channel) spatial inputs.
pub fn conv_pair_trace(
    x1: &[f64],
    x2: &[f64],
    config: &NetworkConfig,
    ensemble: &EnsembleSpec,
) -> Result<PropagationTrace, SimError> {
    config.validate()?;
    let dims = conv_dims(config)?;
    if x1.len() != dims.sites || x2.len() != dims.sites {
        return Err(SimError::InputLength { expected: dims.sites, got: x1.len().max(x2.len()) });
    }
    let per_run: Vec<Vec<f64>> = (0..ensemble.runs as u64)
        .into_par_iter()
        .map(|run| conv_pair_run(x1, x2, config, &dims, run, ensemble.master_seed))
        .collect();
    let (rho_mean, rho_stderr) = reduce_runs(&per_run);
    Ok(PropagationTrace { rho_mean, rho_stderr, config: *config, ensemble: *ensemble })
}

/// Maximum Lyapunov exponent estimate with its run-to-run standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LyapunovEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
    pub l_max: usize,
    pub burn_in: usize,
}

fn lyapunov_run(
    config: &NetworkConfig,
    n_in: usize,
    l_max: usize,
    burn_in: usize,
    run: u64,
    seed: u64,
) -> Result<f64, SimError> {
    let n = config.width;
    let (sw, sb) = (config.hp.sigma_w, config.hp.sigma_b);
    let act = config.activation;

    let mut rng = stream(seed, run, STREAM_INPUT);
    let x: Vec<f64> = (0..n_in).map(|_| normal(&mut rng)).collect();
    let mut rng = stream(seed, run, STREAM_DIRECTION);
    let mut u: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);

    // Input layer for the state only; the direction evolves through the
    // hidden-layer Jacobians.
    let mut z = vec![0.0; n];
    let mut rng = stream(seed, run, 1);
    let scale_in = sw / (n_in as f64).sqrt();
    for zi in z.iter_mut() {
        let mut acc = 0.0;
        for &xv in &x {
            acc += normal(&mut rng) * xv;
        }
        *zi = scale_in * acc;
    }
    for zi in z.iter_mut() {
        *zi += sb * normal(&mut rng);
    }

    let mut hz = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut z_new = vec![0.0; n];
    let mut u_new = vec![0.0; n];
    let scale = sw / (n as f64).sqrt();
    let mut acc_log = 0.0;
    for step in 1..=l_max {
        for j in 0..n {
            hz[j] = act.eval(z[j]);
            du[j] = act.d1(z[j]) * u[j];
        }
        let mut rng = stream(seed, run, (step + 1) as u64);
        for i in 0..n {
            let mut az = 0.0;
            let mut au = 0.0;
            for j in 0..n {
                let w = normal(&mut rng);
                az += w * hz[j];
                au += w * du[j];
            }
            z_new[i] = scale * az;
            u_new[i] = scale * au;
        }
        for zi in z_new.iter_mut() {
            *zi += sb * normal(&mut rng);
        }
        let gain = u_new.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gain < 1e-300 {
            return Err(SimError::NormUnderflow { step });
        }
        u_new.iter_mut().for_each(|v| *v /= gain);
        std::mem::swap(&mut z, &mut z_new);
        std::mem::swap(&mut u, &mut u_new);
        if step > burn_in {
            acc_log += gain.ln();
        }
    }
    Ok(acc_log / (l_max - burn_in) as f64)
}

/// Finite-network maximum Lyapunov exponent of the front-propagation
/// dynamics: a random unit direction is pushed through the layer Jacobians
/// `J_ij = (sigma_w/sqrt(n)) W_ij h'(z_j)`, renormalized each layer, and the
/// log gains are averaged after a burn-in.
pub fn lyapunov_finite(
    config: &NetworkConfig,
    ensemble: &EnsembleSpec,
    l_max: usize,
    burn_in: usize,
) -> Result<LyapunovEstimate, SimError> {
    config.validate()?;
    let Architecture::Mlp { n_in } = config.arch else {
        return Err(SimError::WrongArchitecture { expected: "mlp" });
    };
    if burn_in >= l_max {
        return Err(SimError::BurnInTooLong { burn_in, l_max });
    }
    let per_run: Vec<Result<f64, SimError>> = (0..ensemble.runs as u64)
        .into_par_iter()
        .map(|run| lyapunov_run(config, n_in, l_max, burn_in, run, ensemble.master_seed))
        .collect();
    let mut values = Vec::with_capacity(per_run.len());
    for r in per_run {
        values.push(r?);
    }
    let runs = values.len();
    let mean = values.iter().sum::<f64>() / runs as f64;
    let stderr = if runs > 1 {
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (runs as f64 - 1.0);
        (var / runs as f64).sqrt()
    } else {
        0.0
    };
    Ok(LyapunovEstimate { mean, stderr, runs, l_max, burn_in })
}

/// Ensemble-averaged spatial spread of a single-pixel perturbation.
#[derive(Debug, Clone, Serialize)]
pub struct SpreadTrace {
    pub width_mean: Vec<f64>,
    pub width_stderr: Vec<f64>,
    pub threshold: f64,
    pub config: NetworkConfig,
    pub ensemble: EnsembleSpec,
}

impl SpreadTrace {
    pub fn layers(&self) -> Vec<f64> {
        (1..=self.width_mean.len()).map(|l| l as f64).collect()
    }
}

fn spread_run(
    config: &NetworkConfig,
    dims: &ConvDims,
    threshold: f64,
    run: u64,
    seed: u64,
) -> Vec<f64> {
    let (c, k, sites) = (dims.channels, dims.kernel, dims.sites);
    let n = config.width;
    let (sw, sb) = (config.hp.sigma_w, config.hp.sigma_b);
    let act = config.activation;

    let mut rng = stream(seed, run, STREAM_INPUT);
    let x1: Vec<f64> = (0..sites).map(|_| normal(&mut rng)).collect();
    let mut x2 = x1.clone();
    // Perturb the central pixel by one unit.
    let center = if dims.two_d { (n / 2) * n + n / 2 } else { sites / 2 };
    x2[center] += 1.0;

    let apply = |i1: &[f64], i2: &[f64], o1: &mut [f64], o2: &mut [f64], c_in: usize, rng: &mut ChaCha8Rng| {
        if dims.two_d {
            conv2d_layer(i1, i2, o1, o2, c_in, c, n, k, sw, sb, rng);
        } else {
            conv1d_layer(i1, i2, o1, o2, c_in, c, n, k, sw, sb, rng);
        }
    };

    let measure = |z1: &[f64], z2: &[f64]| -> f64 {
        let rms = (z1.iter().map(|v| v * v).sum::<f64>() / (c * sites) as f64).sqrt();
        let cut = threshold * rms;
        let mut count = 0usize;
        for site in 0..sites {
            let mut d2 = 0.0;
            for m in 0..c {
                let d = z1[m * sites + site] - z2[m * sites + site];
                d2 += d * d;
            }
            if (d2 / c as f64).sqrt() > cut {
                count += 1;
            }
        }
        count as f64
    };

    let mut z1 = vec![0.0; c * sites];
    let mut z2 = vec![0.0; c * sites];
    let mut rng = stream(seed, run, 1);
    apply(&x1, &x2, &mut z1, &mut z2, 1, &mut rng);
    let mut widths = Vec::with_capacity(config.depth);
    widths.push(measure(&z1, &z2));

    let mut h1 = vec![0.0; c * sites];
    let mut h2 = vec![0.0; c * sites];
    let mut y1 = vec![0.0; c * sites];
    let mut y2 = vec![0.0; c * sites];
    for layer in 2..=config.depth {
        for j in 0..c * sites {
            h1[j] = act.eval(z1[j]);
            h2[j] = act.eval(z2[j]);
        }
        let mut rng = stream(seed, run, layer as u64);
        apply(&h1, &h2, &mut y1, &mut y2, c, &mut rng);
        std::mem::swap(&mut z1, &mut y1);
        std::mem::swap(&mut z2, &mut y2);
        widths.push(measure(&z1, &z2));
    }
    widths
}

/// Propagate a pair of inputs differing in exactly one pixel and count, per
/// layer, the spatial sites whose channel-RMS preactivation difference
/// exceeds `threshold` times the RMS preactivation.
pub fn measure_spread(
    config: &NetworkConfig,
    ensemble: &EnsembleSpec,
    threshold: f64,
) -> Result<SpreadTrace, SimError> {
    config.validate()?;
    let dims = conv_dims(config)?;
    let per_run: Vec<Vec<f64>> = (0..ensemble.runs as u64)
        .into_par_iter()
        .map(|run| spread_run(config, &dims, threshold, run, ensemble.master_seed))
        .collect();
    let (width_mean, width_stderr) = reduce_runs(&per_run);
    Ok(SpreadTrace { width_mean, width_stderr, threshold, config: *config, ensemble: *ensemble })
}
