//! Forward engine: controlled-state simulation, the mean constraint curve
//! m(t) = E[Phi(X(t))], its rate curve h(t), and the varying terminal time
//! with its three-case classification.
//!
//! The terminal time is deterministic even for noisy dynamics: it is the
//! first time the *mean* curve reaches the threshold, so no per-path hitting
//! logic appears anywhere.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::problem::{CoeffBuffers, ControlPath, ProblemSpec, TimeGrid};
use crate::util;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("path count must be at least 1")]
    ZeroPaths,
    #[error("control grid does not match the requested simulation grid")]
    GridMismatch,
    #[error("control dimension {got} does not match problem dimension {expected}")]
    ControlDimension { got: usize, expected: usize },
    #[error("state became non-finite first at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("mean curve contains a non-finite value at node {node}")]
    NonFiniteMean { node: usize },
    #[error("fourth-order refinement requires a deterministic problem (sigma = 0)")]
    RefinementRequiresDeterministic,
    #[error("hitting-time case tolerance must be positive, got {0}")]
    NonPositiveCaseTol(f64),
}

/// Time-stepping scheme for the forward pass. Euler-Maruyama is the default
/// everywhere; the classical fourth-order step is available for deterministic
/// problems when an example needs tighter reproduction than first order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    EulerMaruyama,
    RungeKutta4,
}

/// Monte Carlo configuration for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub path_count: usize,
    pub seed: u64,
    pub integrator: Integrator,
}

impl McConfig {
    /// Single deterministic path under the default scheme.
    pub fn deterministic() -> Self {
        Self { path_count: 1, seed: 0, integrator: Integrator::EulerMaruyama }
    }

    pub fn sampled(path_count: usize, seed: u64) -> Self {
        Self { path_count, seed, integrator: Integrator::EulerMaruyama }
    }
}

/// Monte Carlo forward trajectories with their Brownian increments retained,
/// so perturbed controls can be re-simulated under common random numbers.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    path_count: usize,
    state_dim: usize,
    noise_dim: usize,
    seed: u64,
    integrator: Integrator,
    /// States laid out path-major: states[p][i][dim].
    states: Vec<f64>,
    /// Brownian increments path-major: increments[p][i][j].
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn path_count(&self) -> usize {
        self.path_count
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    /// State of path p at node i.
    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let m = self.state_dim;
        let stride = self.grid.node_count() * m;
        &self.states[p * stride + i * m..p * stride + i * m + m]
    }

    /// Brownian increment of path p over cell [t_i, t_{i+1}).
    pub fn increment(&self, p: usize, i: usize) -> &[f64] {
        let d = self.noise_dim;
        let stride = self.grid.step_count() * d;
        &self.increments[p * stride + i * d..p * stride + i * d + d]
    }

    /// Linearly interpolated state of path p at time t in cell `cell`.
    pub fn state_at(&self, p: usize, cell: usize, t: f64, out: &mut [f64]) {
        let dt = self.grid.dt();
        let frac = ((t - self.grid.node(cell)) / dt).clamp(0.0, 1.0);
        let a = self.state(p, cell);
        let b = self.state(p, cell + 1);
        for dim in 0..self.state_dim {
            out[dim] = a[dim] + frac * (b[dim] - a[dim]);
        }
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }
}

/// Simulate the controlled dynamics under `control` with `mc.path_count`
/// paths. Deterministic problems use the same recursion with zero noise.
pub fn simulate(
    spec: &ProblemSpec,
    control: &ControlPath,
    mc: &McConfig,
) -> Result<PathEnsemble, ForwardError> {
    if mc.path_count == 0 {
        return Err(ForwardError::ZeroPaths);
    }
    if control.control_dim() != spec.control_dim() {
        return Err(ForwardError::ControlDimension {
            got: control.control_dim(),
            expected: spec.control_dim(),
        });
    }
    if mc.integrator == Integrator::RungeKutta4 && !spec.is_deterministic() {
        return Err(ForwardError::RefinementRequiresDeterministic);
    }
    let grid = control.grid();
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let n = grid.step_count();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut increments = vec![0.0; mc.path_count * n * d];
    if !spec.is_deterministic() {
        increments
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(p, chunk)| {
                let mut rng = util::path_rng(mc.seed, p);
                for slot in chunk.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = z * sqrt_dt;
                }
            });
    }

    let mut states = vec![0.0; mc.path_count * grid.node_count() * m];
    let first_bad = std::sync::Mutex::new(None::<(usize, usize)>);
    states
        .par_chunks_mut(grid.node_count() * m)
        .enumerate()
        .for_each(|(p, chunk)| {
            let inc = &increments[p * n * d..(p + 1) * n * d];
            if let Err(step) = integrate_path(spec, control, mc.integrator, chunk, inc) {
                let mut guard = first_bad.lock().unwrap();
                let replace = match *guard {
                    None => true,
                    Some((bp, bs)) => (p, step) < (bp, bs),
                };
                if replace {
                    *guard = Some((p, step));
                }
            }
        });
    if let Some((path, step)) = first_bad.into_inner().unwrap() {
        return Err(ForwardError::NonFiniteState { path, step });
    }

    Ok(PathEnsemble {
        grid,
        path_count: mc.path_count,
        state_dim: m,
        noise_dim: d,
        seed: mc.seed,
        integrator: mc.integrator,
        states,
        increments,
    })
}

/// Re-simulate under a different control while reusing the base ensemble's
/// Brownian increments exactly (the common-random-numbers contract).
pub fn resimulate_with_control(
    base: &PathEnsemble,
    spec: &ProblemSpec,
    control: &ControlPath,
) -> Result<PathEnsemble, ForwardError> {
    if control.grid() != base.grid() {
        return Err(ForwardError::GridMismatch);
    }
    if control.control_dim() != spec.control_dim() {
        return Err(ForwardError::ControlDimension {
            got: control.control_dim(),
            expected: spec.control_dim(),
        });
    }
    let grid = base.grid();
    let (m, d) = (base.state_dim, base.noise_dim);
    let n = grid.step_count();
    let mut states = vec![0.0; base.path_count * grid.node_count() * m];
    let first_bad = std::sync::Mutex::new(None::<(usize, usize)>);
    states
        .par_chunks_mut(grid.node_count() * m)
        .enumerate()
        .for_each(|(p, chunk)| {
            let inc = &base.increments[p * n * d..(p + 1) * n * d];
            if let Err(step) = integrate_path(spec, control, base.integrator, chunk, inc) {
                let mut guard = first_bad.lock().unwrap();
                let replace = match *guard {
                    None => true,
                    Some((bp, bs)) => (p, step) < (bp, bs),
                };
                if replace {
                    *guard = Some((p, step));
                }
            }
        });
    if let Some((path, step)) = first_bad.into_inner().unwrap() {
        return Err(ForwardError::NonFiniteState { path, step });
    }
    Ok(PathEnsemble {
        grid,
        path_count: base.path_count,
        state_dim: m,
        noise_dim: d,
        seed: base.seed,
        integrator: base.integrator,
        states,
        increments: base.increments.clone(),
    })
}

/// One path of the state recursion. Returns Err(step) at the first
/// non-finite state.
fn integrate_path(
    spec: &ProblemSpec,
    control: &ControlPath,
    integrator: Integrator,
    states: &mut [f64],
    increments: &[f64],
) -> Result<(), usize> {
    let grid = control.grid();
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let n = grid.step_count();
    let dt = grid.dt();
    let coeffs = spec.coefficients();
    let mut buf = CoeffBuffers::for_spec(spec);
    states[..m].copy_from_slice(spec.initial_state());
    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut stage = vec![0.0; m];
    for i in 0..n {
        let u = control.cell(i);
        let (prev, next) = states[i * m..(i + 2) * m].split_at_mut(m);
        match integrator {
            Integrator::EulerMaruyama => {
                coeffs.drift(prev, u, &mut buf.drift);
                for dim in 0..m {
                    next[dim] = prev[dim] + buf.drift[dim] * dt;
                }
                if !spec.is_deterministic() {
                    coeffs.diffusion(prev, u, &mut buf.diffusion);
                    let dw = &increments[i * d..(i + 1) * d];
                    for j in 0..d {
                        for dim in 0..m {
                            next[dim] += buf.diffusion[j * m + dim] * dw[j];
                        }
                    }
                }
            }
            Integrator::RungeKutta4 => {
                // Classical RK4 within the cell; the control is frozen there.
                coeffs.drift(prev, u, &mut k1);
                for dim in 0..m {
                    stage[dim] = prev[dim] + 0.5 * dt * k1[dim];
                }
                coeffs.drift(&stage, u, &mut k2);
                for dim in 0..m {
                    stage[dim] = prev[dim] + 0.5 * dt * k2[dim];
                }
                coeffs.drift(&stage, u, &mut k3);
                for dim in 0..m {
                    stage[dim] = prev[dim] + dt * k3[dim];
                }
                coeffs.drift(&stage, u, &mut buf.drift);
                for dim in 0..m {
                    next[dim] = prev[dim]
                        + dt / 6.0 * (k1[dim] + 2.0 * k2[dim] + 2.0 * k3[dim] + buf.drift[dim]);
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(i + 1);
        }
    }
    Ok(())
}

/// Monte Carlo estimate of t -> E[Phi(X(t))] with per-node standard errors.
#[derive(Debug, Clone)]
pub struct MeanCurve {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// A generic sampled curve (rate curve h, directional rate curve, ...).
#[derive(Debug, Clone)]
pub struct SampledCurve {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl SampledCurve {
    pub fn interp(&self, t: f64) -> f64 {
        util::interp_uniform(&self.values, self.grid.dt(), t)
    }
}

impl MeanCurve {
    pub fn interp(&self, t: f64) -> f64 {
        util::interp_uniform(&self.values, self.grid.dt(), t)
    }
}

/// Per-node mean and se of a per-path node functional, parallel over nodes
/// with order-stable collection.
fn node_statistics(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    eval: impl Fn(&[f64], usize, &mut CoeffBuffers) -> f64 + Sync,
) -> (Vec<f64>, Vec<f64>) {
    let nodes = ensemble.grid().node_count();
    let paths = ensemble.path_count();
    let stats: Vec<(f64, f64)> = (0..nodes)
        .into_par_iter()
        .map_init(
            || (CoeffBuffers::for_spec(spec), vec![0.0; paths]),
            |(buf, samples), i| {
                for (p, slot) in samples.iter_mut().enumerate() {
                    *slot = eval(ensemble.state(p, i), i, buf);
                }
                util::mean_and_se(samples)
            },
        )
        .collect();
    stats.into_iter().unzip()
}

/// Estimate the mean constraint curve m(t) = E[Phi(X(t))].
pub fn mean_phi(ensemble: &PathEnsemble, spec: &ProblemSpec) -> MeanCurve {
    let coeffs = spec.coefficients();
    let (values, std_errors) = node_statistics(spec, ensemble, |x, _, _| coeffs.constraint(x));
    MeanCurve { grid: ensemble.grid(), values, std_errors }
}

/// Estimate the rate curve
/// h(t) = E[Phi_x(X)' b(X,u) + 1/2 sum_j sigma_j' Phi_xx sigma_j].
pub fn h_curve(ensemble: &PathEnsemble, spec: &ProblemSpec, control: &ControlPath) -> SampledCurve {
    let coeffs = spec.coefficients();
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let deterministic = spec.is_deterministic();
    let (values, std_errors) = node_statistics(spec, ensemble, |x, i, buf| {
        let u = control.at_node(i);
        coeffs.constraint_x(x, &mut buf.constraint_x);
        coeffs.drift(x, u, &mut buf.drift);
        let mut h: f64 = (0..m).map(|r| buf.constraint_x[r] * buf.drift[r]).sum();
        if !deterministic {
            coeffs.constraint_xx(x, &mut buf.constraint_xx);
            coeffs.diffusion(x, u, &mut buf.diffusion);
            for j in 0..d {
                let sig = &buf.diffusion[j * m..(j + 1) * m];
                let mut quad = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        quad += sig[a] * buf.constraint_xx[a * m + b] * sig[b];
                    }
                }
                h += 0.5 * quad;
            }
        }
        h
    });
    SampledCurve { grid: ensemble.grid(), values, std_errors }
}

/// Largest defect of the integral identity m(t) = Phi(x0) + int_0^t h.
///
/// Expected bound: quadrature error plus 3x the combined standard error.
pub fn mean_rate_crosscheck(mean: &MeanCurve, h: &SampledCurve, spec: &ProblemSpec) -> f64 {
    let phi_x0 = spec.coefficients().constraint(spec.initial_state());
    let partials = util::trapezoid_partials(&h.values, h.grid.dt());
    mean.values
        .iter()
        .zip(partials.iter())
        .map(|(m_i, integral)| (m_i - phi_x0 - integral).abs())
        .fold(0.0f64, f64::max)
}

/// Case classification of the terminal time: interior crossing of the
/// threshold, crossing exactly at the horizon, or no crossing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TauCase {
    InteriorCrossing,
    BoundaryCrossing,
    NoCrossing,
}

impl std::fmt::Display for TauCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauCase::InteriorCrossing => write!(f, "I"),
            TauCase::BoundaryCrossing => write!(f, "II"),
            TauCase::NoCrossing => write!(f, "III"),
        }
    }
}

/// Terminal-time estimate with the diagnostics the variation analysis needs.
#[derive(Debug, Clone, Serialize)]
pub struct TerminalTimeResult {
    pub tau: f64,
    pub case_tag: TauCase,
    /// First grid node i with m_i >= alpha, if any.
    pub crossing_index: Option<usize>,
    /// Interpolated rate value h(tau).
    pub h_at_tau: f64,
    /// |h(tau)| below the degeneracy threshold: the rate hypothesis of the
    /// variation analysis fails (tangential-touch counterexample).
    pub degenerate_h: bool,
    /// Window statistic around tau detected a rate jump (kink counterexample).
    pub h_discontinuous: bool,
    /// m(T) - alpha; meaningful diagnostics for the no-crossing case.
    pub alpha_gap: f64,
}

/// Thresholds used by [`hitting_time`]. Defaults follow the toolkit-wide
/// conventions; `case_tol` falls back to two grid cells.
#[derive(Debug, Clone, Copy)]
pub struct HittingOptions {
    /// Time band below T within which a crossing counts as boundary (case II).
    pub case_tol: Option<f64>,
    /// |h(tau)| < degeneracy_rel_tol * max|h| flags a degenerate rate.
    pub degeneracy_rel_tol: f64,
    /// Half-width of the jump-statistic window, in grid cells.
    pub jump_window_cells: usize,
    /// Jump must exceed jump_se_factor * window se ...
    pub jump_se_factor: f64,
    /// ... plus jump_step_factor * median one-step variation of h.
    pub jump_step_factor: f64,
    /// Half-width, in cells, of the neighborhood around tau over which the
    /// median one-step variation is taken. A local median tracks the local
    /// slope scale, so steep-but-continuous rates do not false-positive,
    /// while a genuine jump still towers over it (the median is robust to
    /// the single jump cell).
    pub step_median_window_cells: usize,
    /// Relative slack on the threshold comparison m_i >= alpha, guarding the
    /// tangential-touch case against roundoff in the Euler sum.
    pub crossing_slack: f64,
}

impl Default for HittingOptions {
    fn default() -> Self {
        Self {
            case_tol: None,
            degeneracy_rel_tol: 1e-3,
            jump_window_cells: 5,
            jump_se_factor: 5.0,
            jump_step_factor: 10.0,
            step_median_window_cells: 50,
            crossing_slack: 1e-9,
        }
    }
}

/// Locate the varying terminal time on the mean curve and classify its case.
///
/// The first node where the mean curve reaches the threshold wins; tau is
/// then placed by linear interpolation inside the bracketing cell. The rate
/// curve is consulted for h(tau), the degeneracy flag, and the jump
/// statistic.
pub fn hitting_time(
    mean: &MeanCurve,
    h: &SampledCurve,
    spec: &ProblemSpec,
    opts: &HittingOptions,
) -> Result<TerminalTimeResult, ForwardError> {
    let grid = mean.grid;
    let alpha = spec.threshold();
    let case_tol = match opts.case_tol {
        Some(tol) if tol <= 0.0 => return Err(ForwardError::NonPositiveCaseTol(tol)),
        Some(tol) => tol,
        None => 2.0 * grid.dt(),
    };
    if let Some(node) = mean.values.iter().position(|v| !v.is_finite()) {
        return Err(ForwardError::NonFiniteMean { node });
    }

    let max_abs_h = h.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let (tau, case_tag, crossing_index) =
        crossing_scan(mean, alpha, case_tol, case_tol * max_abs_h, opts.crossing_slack);

    let h_at_tau = h.interp(tau);
    let degenerate_h = h_at_tau.abs() < opts.degeneracy_rel_tol * max_abs_h;
    let h_discontinuous = jump_statistic(h, tau, opts);
    let alpha_gap = mean.values[grid.step_count()] - alpha;

    Ok(TerminalTimeResult {
        tau,
        case_tag,
        crossing_index,
        h_at_tau,
        degenerate_h,
        h_discontinuous,
        alpha_gap,
    })
}

/// First crossing of the threshold on the mean curve: interpolated tau,
/// case tag, crossing node. `boundary_value_tol` is the |m(T) - alpha| band
/// declaring a boundary touch when no node crosses.
fn crossing_scan(
    mean: &MeanCurve,
    alpha: f64,
    case_tol: f64,
    boundary_value_tol: f64,
    crossing_slack: f64,
) -> (f64, TauCase, Option<usize>) {
    let grid = mean.grid;
    let dt = grid.dt();
    let horizon = grid.horizon();
    let slack = crossing_slack * alpha.abs().max(1.0);
    let crossing_index = mean.values.iter().position(|&v| v >= alpha - slack);
    let (tau, case_tag) = match crossing_index {
        Some(0) => (0.0, TauCase::InteriorCrossing),
        Some(i) => {
            let below = mean.values[i - 1];
            let above = mean.values[i];
            let frac =
                if above > below { ((alpha - below) / (above - below)).clamp(0.0, 1.0) } else { 1.0 };
            let tau = grid.node(i - 1) + frac * dt;
            if tau >= horizon - case_tol {
                (horizon, TauCase::BoundaryCrossing)
            } else {
                (tau, TauCase::InteriorCrossing)
            }
        }
        None => {
            let gap = (mean.values[grid.step_count()] - alpha).abs();
            if gap <= boundary_value_tol {
                (horizon, TauCase::BoundaryCrossing)
            } else {
                (horizon, TauCase::NoCrossing)
            }
        }
    };
    (tau, case_tag, crossing_index)
}

/// Terminal time alone, without the rate-curve diagnostics: the cheap path
/// for finite-difference studies that re-locate tau per perturbation.
pub fn crossing_tau(
    mean: &MeanCurve,
    spec: &ProblemSpec,
    opts: &HittingOptions,
) -> Result<(f64, TauCase), ForwardError> {
    if let Some(node) = mean.values.iter().position(|v| !v.is_finite()) {
        return Err(ForwardError::NonFiniteMean { node });
    }
    let case_tol = match opts.case_tol {
        Some(tol) if tol <= 0.0 => return Err(ForwardError::NonPositiveCaseTol(tol)),
        Some(tol) => tol,
        None => 2.0 * mean.grid.dt(),
    };
    let (tau, case_tag, _) =
        crossing_scan(mean, spec.threshold(), case_tol, 0.0, opts.crossing_slack);
    Ok((tau, case_tag))
}

/// Compare the mean of h over (tau - w, tau) against (tau, tau + w); flag a
/// jump exceeding the combined-se and typical-step thresholds. Windows that
/// do not fit inside the grid yield no flag (insufficient data).
fn jump_statistic(h: &SampledCurve, tau: f64, opts: &HittingOptions) -> bool {
    let grid = h.grid;
    let dt = grid.dt();
    let w = opts.jump_window_cells;
    let mut left = Vec::with_capacity(w);
    let mut left_se2 = 0.0;
    let mut right = Vec::with_capacity(w);
    let mut right_se2 = 0.0;
    for i in 0..=grid.step_count() {
        let t = grid.node(i);
        if t > tau - (w as f64) * dt && t < tau {
            left.push(h.values[i]);
            left_se2 += h.std_errors[i] * h.std_errors[i];
        } else if t > tau && t < tau + (w as f64) * dt {
            right.push(h.values[i]);
            right_se2 += h.std_errors[i] * h.std_errors[i];
        }
    }
    if left.is_empty() || right.is_empty() {
        return false;
    }
    let mean_left = left.iter().sum::<f64>() / left.len() as f64;
    let mean_right = right.iter().sum::<f64>() / right.len() as f64;
    let se_left = left_se2.sqrt() / left.len() as f64;
    let se_right = right_se2.sqrt() / right.len() as f64;
    let combined_se = (se_left * se_left + se_right * se_right).sqrt();
    let center = (tau / dt).round() as usize;
    let lo = center.saturating_sub(opts.step_median_window_cells);
    let hi = (center + opts.step_median_window_cells).min(grid.step_count());
    let local = &h.values[lo..=hi];
    let typical_step =
        if local.len() >= 8 { util::median_abs_step(local) } else { util::median_abs_step(&h.values) };
    (mean_right - mean_left).abs()
        > opts.jump_se_factor * combined_se + opts.jump_step_factor * typical_step
}

/// Cost functional estimate J = E[int_0^tau f dt + Psi(X(tau))] on the grid,
/// with a fractional final cell up to the interpolated terminal time.
///
/// Returns (estimate, standard error).
pub fn cost_functional(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    control: &ControlPath,
    tau: f64,
) -> (f64, f64) {
    let grid = ensemble.grid();
    let dt = grid.dt();
    let coeffs = spec.coefficients();
    let m = spec.state_dim();
    let last_cell = if tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(tau) };
    let samples: Vec<f64> = (0..ensemble.path_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; m],
            |x_tau, p| {
                let mut acc = 0.0;
                for i in 0..last_cell {
                    let u = control.cell(i);
                    let f0 = coeffs.running_cost(ensemble.state(p, i), u);
                    let f1 = coeffs.running_cost(ensemble.state(p, i + 1), u);
                    acc += 0.5 * (f0 + f1) * dt;
                }
                let u = control.cell(last_cell);
                ensemble.state_at(p, last_cell, tau, x_tau);
                let f0 = coeffs.running_cost(ensemble.state(p, last_cell), u);
                let f1 = coeffs.running_cost(x_tau, u);
                acc += 0.5 * (f0 + f1) * (tau - grid.node(last_cell));
                acc + coeffs.terminal_cost(x_tau)
            },
        )
        .collect();
    util::mean_and_se(&samples)
}

/// One full forward pass: ensemble, mean curve, rate curve, terminal time.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub ensemble: PathEnsemble,
    pub mean: MeanCurve,
    pub h: SampledCurve,
    pub ttr: TerminalTimeResult,
}

pub fn run_forward(
    spec: &ProblemSpec,
    control: &ControlPath,
    mc: &McConfig,
    opts: &HittingOptions,
) -> Result<ForwardRun, ForwardError> {
    let ensemble = simulate(spec, control, mc)?;
    let mean = mean_phi(&ensemble, spec);
    let h = h_curve(&ensemble, spec, control);
    let ttr = hitting_time(&mean, &h, spec, opts)?;
    Ok(ForwardRun { ensemble, mean, h, ttr })
}

/// Re-run the mean/rate/hitting pipeline under a new control with the base
/// ensemble's random numbers (the CRN path used by every perturbation study).
pub fn rerun_with_control(
    base: &PathEnsemble,
    spec: &ProblemSpec,
    control: &ControlPath,
    opts: &HittingOptions,
) -> Result<ForwardRun, ForwardError> {
    let ensemble = resimulate_with_control(base, spec, control)?;
    let mean = mean_phi(&ensemble, spec);
    let h = h_curve(&ensemble, spec, control);
    let ttr = hitting_time(&mean, &h, spec, opts)?;
    Ok(ForwardRun { ensemble, mean, h, ttr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn affine_run(n: usize, u: f64) -> (ProblemSpec, ForwardRun) {
        let spec = registry::builtin("example-affine").unwrap();
        let grid = TimeGrid::new(n, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[u], spec.control_box()).unwrap();
        let run = run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
            .unwrap();
        (spec, run)
    }

    #[test]
    fn affine_state_matches_exponential_solution() {
        let (_, run) = affine_run(2000, 1.0);
        let grid = run.ensemble.grid();
        let mut worst = 0.0f64;
        for i in 0..=grid.step_count() {
            let t = grid.node(i);
            let exact = t.exp() - 1.0;
            worst = worst.max((run.ensemble.state(0, i)[0] - exact).abs());
        }
        assert!(worst <= 2e-3, "max abs error {worst}");
    }

    #[test]
    fn affine_mean_curve_hits_threshold_at_ln_two() {
        let (_, run) = affine_run(2000, 1.0);
        assert!((run.mean.interp(2.0f64.ln()) - 1.0).abs() < 2e-3);
        assert_eq!(run.mean.values[0], 0.0);
    }

    #[test]
    fn affine_hitting_time_is_interior_with_rate_two() {
        let (_, run) = affine_run(2000, 1.0);
        let ttr = &run.ttr;
        assert_eq!(ttr.case_tag, TauCase::InteriorCrossing);
        assert!((ttr.tau - 2.0f64.ln()).abs() < 1e-3, "tau = {}", ttr.tau);
        assert!((ttr.h_at_tau - 2.0).abs() < 5e-3);
        assert!(!ttr.degenerate_h);
        assert!(!ttr.h_discontinuous);
    }

    #[test]
    fn h_curve_is_exponential_for_affine_unit_control() {
        let (_, run) = affine_run(2000, 1.0);
        let grid = run.h.grid;
        for i in [0, 500, 1000, 1500] {
            let t = grid.node(i);
            assert!((run.h.values[i] - t.exp()).abs() < 2e-3);
        }
    }

    #[test]
    fn kink_rate_curve_equals_the_piecewise_control() {
        let spec = registry::builtin("example-kink").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let ens = simulate(&spec, &control, &McConfig::deterministic()).unwrap();
        let h = h_curve(&ens, &spec, &control);
        for i in 0..=grid.step_count() {
            let t = grid.node(i);
            // node values carry the cell's control: 1 before the jump at
            // t = 1, one half after
            let expected = if t < 1.0 { 1.0 } else { 0.5 };
            assert_eq!(h.values[i], expected, "node {i} at t = {t}");
        }
    }

    #[test]
    fn simulation_is_bit_reproducible_under_same_seed() {
        let spec = registry::builtin("toy-linear-sde").unwrap();
        let grid = TimeGrid::new(64, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
        let mc = McConfig::sampled(128, 9001);
        let a = simulate(&spec, &control, &mc).unwrap();
        let b = simulate(&spec, &control, &mc).unwrap();
        assert_eq!(a.raw_states(), b.raw_states());
    }

    #[test]
    fn crn_resimulation_with_same_control_is_identical() {
        let spec = registry::builtin("toy-linear-sde").unwrap();
        let grid = TimeGrid::new(64, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
        let base = simulate(&spec, &control, &McConfig::sampled(64, 5)).unwrap();
        let again = resimulate_with_control(&base, &spec, &control).unwrap();
        assert_eq!(base.raw_states(), again.raw_states());
    }

    #[test]
    fn sde_toy_mean_is_within_three_standard_errors() {
        let spec = registry::builtin("toy-linear-sde").unwrap();
        let grid = TimeGrid::new(200, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
        let ens = simulate(&spec, &control, &McConfig::sampled(100_000, 77)).unwrap();
        let mean = mean_phi(&ens, &spec);
        let n = grid.step_count();
        // E[X(1)] = 0.5 for theta = 1, u = 0.5
        let err = (mean.values[n] - 0.5).abs();
        assert!(err <= 3.0 * mean.std_errors[n].max(1e-12), "err {err}, se {}", mean.std_errors[n]);
    }

    #[test]
    fn crosscheck_defect_is_small_under_refinement() {
        let spec = registry::builtin("example-affine").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let mc = McConfig { path_count: 1, seed: 0, integrator: Integrator::RungeKutta4 };
        let ens = simulate(&spec, &control, &mc).unwrap();
        let mean = mean_phi(&ens, &spec);
        let h = h_curve(&ens, &spec, &control);
        let defect = mean_rate_crosscheck(&mean, &h, &spec);
        assert!(defect <= 1e-4, "defect {defect}");
    }

    #[test]
    fn refinement_is_rejected_on_noisy_problems() {
        let spec = registry::builtin("toy-linear-sde").unwrap();
        let grid = TimeGrid::new(32, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
        let mc = McConfig { path_count: 8, seed: 0, integrator: Integrator::RungeKutta4 };
        let err = simulate(&spec, &control, &mc).unwrap_err();
        assert!(matches!(err, ForwardError::RefinementRequiresDeterministic));
    }

    #[test]
    fn crosscheck_defect_is_zero_for_constant_dynamics() {
        // b = 0 via theta = 0: m stays at x0, h = 0.
        let params: registry::Params =
            [("theta".to_string(), 0.0), ("alpha".to_string(), 0.5)].into_iter().collect();
        let spec = registry::builtin_with("toy-linear-deterministic", &params).unwrap();
        let grid = TimeGrid::new(100, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let ens = simulate(&spec, &control, &McConfig::deterministic()).unwrap();
        let mean = mean_phi(&ens, &spec);
        let h = h_curve(&ens, &spec, &control);
        assert_eq!(mean_rate_crosscheck(&mean, &h, &spec), 0.0);
    }

    #[test]
    fn unattainable_threshold_gives_no_crossing_case() {
        let params: registry::Params = [("alpha".to_string(), 50.0)].into_iter().collect();
        let spec = registry::builtin_with("example-affine", &params).unwrap();
        let grid = TimeGrid::new(500, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let run = run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
            .unwrap();
        assert_eq!(run.ttr.case_tag, TauCase::NoCrossing);
        assert_eq!(run.ttr.tau, spec.horizon());
        assert!(run.ttr.crossing_index.is_none());
    }

    #[test]
    fn kink_reference_pair_flags_discontinuity_only() {
        let spec = registry::builtin("example-kink").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let run = run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
            .unwrap();
        assert_eq!(run.ttr.case_tag, TauCase::InteriorCrossing);
        assert!((run.ttr.tau - 1.0).abs() < 1e-9, "tau = {}", run.ttr.tau);
        assert!(run.ttr.h_discontinuous);
        assert!(!run.ttr.degenerate_h);
    }

    #[test]
    fn flat_reference_pair_flags_degenerate_rate_only() {
        let spec = registry::builtin("example-flat").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let run = run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
            .unwrap();
        assert_eq!(run.ttr.case_tag, TauCase::InteriorCrossing);
        assert!((run.ttr.tau - 1.0).abs() < 1e-6, "tau = {}", run.ttr.tau);
        assert!(run.ttr.degenerate_h, "h(tau) = {}", run.ttr.h_at_tau);
        assert!(!run.ttr.h_discontinuous);
    }

    #[test]
    fn euler_tau_error_shrinks_when_grid_is_halved() {
        let spec = registry::builtin("example-affine").unwrap();
        let tau_at = |n: usize| {
            let grid = TimeGrid::new(n, spec.horizon()).unwrap();
            let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap()
                .ttr
                .tau
        };
        let d1 = (tau_at(250) - tau_at(500)).abs();
        let d2 = (tau_at(500) - tau_at(1000)).abs();
        assert!(d2 < d1, "d1 = {d1}, d2 = {d2}");
    }

    #[test]
    fn cost_functional_of_affine_candidate_is_ln_two() {
        let (spec, run) = affine_run(2000, 1.0);
        let (j, se) = cost_functional(&spec, &run.ensemble, &ControlPath::constant(
            run.ensemble.grid(),
            &[1.0],
            spec.control_box(),
        ).unwrap(), run.ttr.tau);
        assert!(se.abs() < 1e-12);
        assert!((j - 2.0f64.ln()).abs() < 1e-3, "J = {j}");
    }
}
