//! Variation engine: the first-order state sensitivity y, the directional
//! rate h_bar(v, t) for a general constraint functional, the terminal-time
//! derivative with its three cases, and the directional derivative of the
//! cost including the two penalty terms.
//!
//! Every quantity here admits a finite-difference oracle (perturb the
//! control by rho*v, re-simulate under common random numbers, difference);
//! the tests and the acceptance suite lean on that throughout.

use rayon::prelude::*;
use thiserror::Error;

use crate::forward::{
    rerun_with_control, resimulate_with_control, run_forward, ForwardError, ForwardRun,
    HittingOptions, McConfig, PathEnsemble, SampledCurve, TauCase, TerminalTimeResult,
};
use crate::problem::{CoeffBuffers, ControlPath, ProblemError, ProblemSpec};
use crate::util;

#[derive(Debug, Error)]
pub enum VariationError {
    #[error("terminal-time derivative does not exist: h(tau) = {h_at_tau} is degenerate (tangential threshold touch); the rate hypothesis h(tau) != 0 fails")]
    DegenerateRate { h_at_tau: f64 },
    #[error("terminal-time derivative does not exist: the rate curve jumps across tau, so one-sided limits differ")]
    Discontinuity,
    #[error("direction grid does not match the base ensemble grid")]
    GridMismatch,
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// First-order state sensitivities aligned path-by-path with a base
/// ensemble (same Brownian increments).
#[derive(Debug, Clone)]
pub struct VariationalEnsemble {
    grid: crate::problem::TimeGrid,
    path_count: usize,
    state_dim: usize,
    values: Vec<f64>,
}

impl VariationalEnsemble {
    pub fn grid(&self) -> crate::problem::TimeGrid {
        self.grid
    }

    pub fn path_count(&self) -> usize {
        self.path_count
    }

    /// Sensitivity of path p at node i.
    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let m = self.state_dim;
        let stride = self.grid.node_count() * m;
        &self.values[p * stride + i * m..p * stride + i * m + m]
    }

    pub fn state_at(&self, p: usize, cell: usize, t: f64, out: &mut [f64]) {
        let dt = self.grid.dt();
        let frac = ((t - self.grid.node(cell)) / dt).clamp(0.0, 1.0);
        let a = self.state(p, cell);
        let b = self.state(p, cell + 1);
        for dim in 0..self.state_dim {
            out[dim] = a[dim] + frac * (b[dim] - a[dim]);
        }
    }
}

/// Propagate the linearized dynamics
/// dy = [b_x y + b_u v] dt + sum_j [sigma_x^j y + sigma_u^j v] dW^j, y(0) = 0,
/// along the base ensemble's Brownian increments.
pub fn variational_paths(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    direction: &ControlPath,
) -> Result<VariationalEnsemble, VariationError> {
    if direction.grid() != base.grid() || control.grid() != base.grid() {
        return Err(VariationError::GridMismatch);
    }
    let grid = base.grid();
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let n = grid.step_count();
    let dt = grid.dt();
    let coeffs = spec.coefficients();
    let deterministic = spec.is_deterministic();

    let mut values = vec![0.0; base.path_count() * grid.node_count() * m];
    values
        .par_chunks_mut(grid.node_count() * m)
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut buf = CoeffBuffers::for_spec(spec);
            for slot in chunk[..m].iter_mut() {
                *slot = 0.0;
            }
            for i in 0..n {
                let x = base.state(p, i);
                let u = control.cell(i);
                let v = direction.cell(i);
                coeffs.drift_x(x, u, &mut buf.drift_x);
                coeffs.drift_u(x, u, &mut buf.drift_u);
                let (prev, next) = chunk[i * m..(i + 2) * m].split_at_mut(m);
                for r in 0..m {
                    let mut dy = 0.0;
                    for c in 0..m {
                        dy += buf.drift_x[r * m + c] * prev[c];
                    }
                    for c in 0..k {
                        dy += buf.drift_u[r * k + c] * v[c];
                    }
                    next[r] = prev[r] + dy * dt;
                }
                if !deterministic {
                    coeffs.diffusion_x(x, u, &mut buf.diffusion_x);
                    coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
                    let dw = base.increment(p, i);
                    for j in 0..d {
                        let sx = &buf.diffusion_x[j * m * m..(j + 1) * m * m];
                        let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
                        for r in 0..m {
                            let mut g = 0.0;
                            for c in 0..m {
                                g += sx[r * m + c] * prev[c];
                            }
                            for c in 0..k {
                                g += su[r * k + c] * v[c];
                            }
                            next[r] += g * dw[j];
                        }
                    }
                }
            }
        });

    Ok(VariationalEnsemble { grid, path_count: base.path_count(), state_dim: m, values })
}

/// Defect of the first-order Taylor expansion at one perturbation size.
#[derive(Debug, Clone, Copy)]
pub struct TaylorDefect {
    pub rho: f64,
    /// sup over grid nodes of the mean norm |(X^rho - X)/rho - y|.
    pub sup_defect: f64,
}

/// For each rho, re-simulate under u + rho v with common random numbers and
/// measure how far the scaled state difference sits from the variational
/// solution. Defects shrink like O(rho) down to the discretization floor.
pub fn taylor_expansion_check(
    spec: &ProblemSpec,
    control: &ControlPath,
    direction: &ControlPath,
    rhos: &[f64],
    mc: &McConfig,
) -> Result<Vec<TaylorDefect>, VariationError> {
    let base = crate::forward::simulate(spec, control, mc)?;
    let y = variational_paths(spec, &base, control, direction)?;
    let grid = base.grid();
    let m = spec.state_dim();
    let mut out = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let perturbed = control.perturbed(direction, rho, spec.control_box())?;
        let shifted = resimulate_with_control(&base, spec, &perturbed)?;
        let mut sup = 0.0f64;
        for i in 0..grid.node_count() {
            let mut acc = 0.0;
            for p in 0..base.path_count() {
                let xr = shifted.state(p, i);
                let x = base.state(p, i);
                let yv = y.state(p, i);
                let mut norm2 = 0.0;
                for dim in 0..m {
                    let defect = (xr[dim] - x[dim]) / rho - yv[dim];
                    norm2 += defect * defect;
                }
                acc += norm2.sqrt();
            }
            sup = sup.max(acc / base.path_count() as f64);
        }
        out.push(TaylorDefect { rho, sup_defect: sup });
    }
    Ok(out)
}

/// Evaluate the derivative pair (g_x, g_u) of the rate integrand
/// g(x, u) = Phi_x' b + 1/2 sum_j sigma_j' Phi_xx sigma_j at one sample.
///
/// g_x picks up the third derivative of the constraint through the diffusion
/// term; both reduce to (b_x' Phi_x, b_u' Phi_x) for linear constraints with
/// control-free diffusion.
pub(crate) fn eval_g_derivatives(
    spec: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    buf: &mut CoeffBuffers,
    g_x: &mut [f64],
    g_u: &mut [f64],
) {
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    coeffs.constraint_x(x, &mut buf.constraint_x);
    coeffs.constraint_xx(x, &mut buf.constraint_xx);
    coeffs.drift(x, u, &mut buf.drift);
    coeffs.drift_x(x, u, &mut buf.drift_x);
    coeffs.drift_u(x, u, &mut buf.drift_u);

    // g_x = Phi_xx b + b_x' Phi_x (+ diffusion blocks below)
    for a in 0..m {
        let mut acc = 0.0;
        for b in 0..m {
            acc += buf.constraint_xx[a * m + b] * buf.drift[b];
        }
        for r in 0..m {
            acc += buf.drift_x[r * m + a] * buf.constraint_x[r];
        }
        g_x[a] = acc;
    }
    // g_u = b_u' Phi_x (+ diffusion block below)
    for c in 0..k {
        let mut acc = 0.0;
        for r in 0..m {
            acc += buf.drift_u[r * k + c] * buf.constraint_x[r];
        }
        g_u[c] = acc;
    }

    if !spec.is_deterministic() {
        coeffs.diffusion(x, u, &mut buf.diffusion);
        coeffs.diffusion_x(x, u, &mut buf.diffusion_x);
        coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
        coeffs.constraint_xxx(x, &mut buf.constraint_xxx);
        for j in 0..d {
            // w = Phi_xx sigma_j
            for r in 0..m {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += buf.constraint_xx[r * m + c] * buf.diffusion[j * m + c];
                }
                buf.scratch_state[r] = acc;
            }
            let sig = &buf.diffusion[j * m..(j + 1) * m];
            let sx = &buf.diffusion_x[j * m * m..(j + 1) * m * m];
            let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
            let w = &buf.scratch_state;
            for a in 0..m {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += sx[r * m + a] * w[r];
                }
                // 1/2 Phi_xxx[a, ., .] contracted twice with sigma_j
                let mut third = 0.0;
                for b in 0..m {
                    for c in 0..m {
                        third += buf.constraint_xxx[a * m * m + b * m + c] * sig[b] * sig[c];
                    }
                }
                g_x[a] += acc + 0.5 * third;
            }
            for cc in 0..k {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += su[r * k + cc] * w[r];
                }
                g_u[cc] += acc;
            }
        }
    }
}

/// Directional rate curve h_bar(v(t_i), t_i) = E[g_x' y + g_u' v].
pub fn hbar(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    y: &VariationalEnsemble,
    control: &ControlPath,
    direction: &ControlPath,
) -> SampledCurve {
    let grid = base.grid();
    let (m, k) = (spec.state_dim(), spec.control_dim());
    let stats: Vec<(f64, f64)> = (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || (CoeffBuffers::for_spec(spec), vec![0.0; m], vec![0.0; k], vec![0.0; base.path_count()]),
            |(buf, g_x, g_u, samples), i| {
                let u = control.at_node(i);
                let v = direction.at_node(i);
                for (p, slot) in samples.iter_mut().enumerate() {
                    eval_g_derivatives(spec, base.state(p, i), u, buf, g_x, g_u);
                    let yv = y.state(p, i);
                    let mut acc = 0.0;
                    for a in 0..m {
                        acc += g_x[a] * yv[a];
                    }
                    for c in 0..k {
                        acc += g_u[c] * v[c];
                    }
                    *slot = acc;
                }
                util::mean_and_se(samples)
            },
        )
        .collect();
    let (values, std_errors) = stats.into_iter().unzip();
    SampledCurve { grid, values, std_errors }
}

/// h_bar at node i for a direction supported on the single cell
/// [t_i, t_{i+1}) with value w there. The sensitivity y vanishes at the
/// start of the direction's support, so only the g_u term survives.
///
/// Returns (value, standard error).
pub fn hbar_single_cell(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    node: usize,
    w: &[f64],
) -> (f64, f64) {
    let (m, k) = (spec.state_dim(), spec.control_dim());
    let mut buf = CoeffBuffers::for_spec(spec);
    let mut g_x = vec![0.0; m];
    let mut g_u = vec![0.0; k];
    let u = control.at_node(node);
    let mut samples = vec![0.0; base.path_count()];
    for (p, slot) in samples.iter_mut().enumerate() {
        eval_g_derivatives(spec, base.state(p, node), u, &mut buf, &mut g_x, &mut g_u);
        *slot = (0..k).map(|c| g_u[c] * w[c]).sum();
    }
    util::mean_and_se(&samples)
}

/// Mean g_u vector at a node (the per-cell penalty direction coefficient).
pub fn mean_g_u(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    node: usize,
) -> Vec<f64> {
    let (m, k) = (spec.state_dim(), spec.control_dim());
    let mut buf = CoeffBuffers::for_spec(spec);
    let mut g_x = vec![0.0; m];
    let mut g_u = vec![0.0; k];
    let u = control.at_node(node);
    let mut acc = vec![0.0; k];
    for p in 0..base.path_count() {
        eval_g_derivatives(spec, base.state(p, node), u, &mut buf, &mut g_x, &mut g_u);
        for c in 0..k {
            acc[c] += g_u[c];
        }
    }
    for slot in acc.iter_mut() {
        *slot /= base.path_count() as f64;
    }
    acc
}

/// Terminal-time derivative in direction v, assembled from the directional
/// rate curve.
#[derive(Debug, Clone)]
pub struct TauDerivativeResult {
    pub case_tag: TauCase,
    /// Case I value; case II primary candidate; 0 in case III.
    pub value: f64,
    /// Case II candidates (value, 0): the limit along a subsequence is one
    /// of the two, with no selection rule available.
    pub candidate_pair: Option<(f64, f64)>,
    pub ambiguous: bool,
    /// Numerator trace: integral of h_bar over [0, tau].
    pub hbar_integral: f64,
    pub h_at_tau: f64,
}

/// Gate on the standing rate hypotheses of the variation analysis: the rate at
/// tau must be nonzero and continuous across tau.
fn check_rate_hypotheses(ttr: &TerminalTimeResult) -> Result<(), VariationError> {
    if ttr.degenerate_h {
        return Err(VariationError::DegenerateRate { h_at_tau: ttr.h_at_tau });
    }
    if ttr.h_discontinuous {
        return Err(VariationError::Discontinuity);
    }
    Ok(())
}

/// Case I: integral of h_bar over [0, tau] divided by h(tau). Case II only
/// pins the limit along a subsequence to that value or zero, so both
/// candidates come back with an ambiguity flag. Case III: zero.
pub fn tau_derivative(
    ttr: &TerminalTimeResult,
    hbar_curve: &SampledCurve,
) -> Result<TauDerivativeResult, VariationError> {
    match ttr.case_tag {
        TauCase::NoCrossing => Ok(TauDerivativeResult {
            case_tag: ttr.case_tag,
            value: 0.0,
            candidate_pair: None,
            ambiguous: false,
            hbar_integral: 0.0,
            h_at_tau: ttr.h_at_tau,
        }),
        TauCase::InteriorCrossing | TauCase::BoundaryCrossing => {
            check_rate_hypotheses(ttr)?;
            let integral = util::trapezoid_to(&hbar_curve.values, hbar_curve.grid.dt(), ttr.tau);
            let value = integral / ttr.h_at_tau;
            let boundary = ttr.case_tag == TauCase::BoundaryCrossing;
            Ok(TauDerivativeResult {
                case_tag: ttr.case_tag,
                value,
                candidate_pair: boundary.then_some((value, 0.0)),
                ambiguous: boundary,
                hbar_integral: integral,
                h_at_tau: ttr.h_at_tau,
            })
        }
    }
}

/// One-sided difference quotients (tau(u) - tau(u + rho v)) / rho under
/// common random numbers, for diagnosing existence and one-sidedness of the
/// terminal-time derivative. Signed rho values are allowed.
pub fn tau_derivative_fd(
    spec: &ProblemSpec,
    control: &ControlPath,
    direction: &ControlPath,
    rhos: &[f64],
    mc: &McConfig,
    opts: &HittingOptions,
) -> Result<Vec<(f64, f64)>, VariationError> {
    let base = run_forward(spec, control, mc, opts)?;
    let mut out = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let perturbed = control.perturbed(direction, rho, spec.control_box())?;
        let shifted = rerun_with_control(&base.ensemble, spec, &perturbed, opts)?;
        out.push((rho, (base.ttr.tau - shifted.ttr.tau) / rho));
    }
    Ok(out)
}

/// Terminal-state penalty data shared by the cost variation, the verifier
/// and the optimizer: the generator of Psi along the dynamics at tau, the
/// mean running cost at tau, and the rate value there.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyData {
    pub psi_tilde: f64,
    pub psi_tilde_se: f64,
    pub mean_running_cost_at_tau: f64,
    pub mean_running_cost_at_tau_se: f64,
    pub h_at_tau: f64,
}

impl PenaltyData {
    /// Combined penalty factor (Psi_tilde + E f(tau)) / h(tau).
    pub fn kappa(&self) -> f64 {
        (self.psi_tilde + self.mean_running_cost_at_tau) / self.h_at_tau
    }
}

/// Evaluate Psi_tilde(tau) and E[f(X(tau), u(tau))] on interpolated terminal
/// states, with the control taken as its left limit at tau.
pub fn penalty_data(spec: &ProblemSpec, run: &ForwardRun, control: &ControlPath) -> PenaltyData {
    let grid = run.ensemble.grid();
    let tau = run.ttr.tau;
    let cell = if tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(tau) };
    let u = control.cell(cell);
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let coeffs = spec.coefficients();
    let mut buf = CoeffBuffers::for_spec(spec);
    let mut x_tau = vec![0.0; m];
    let mut psi_samples = vec![0.0; run.ensemble.path_count()];
    let mut f_samples = vec![0.0; run.ensemble.path_count()];
    for p in 0..run.ensemble.path_count() {
        run.ensemble.state_at(p, cell, tau, &mut x_tau);
        coeffs.terminal_cost_x(&x_tau, &mut buf.terminal_cost_x);
        coeffs.drift(&x_tau, u, &mut buf.drift);
        let mut psi = (0..m).map(|r| buf.terminal_cost_x[r] * buf.drift[r]).sum::<f64>();
        if !spec.is_deterministic() {
            coeffs.terminal_cost_xx(&x_tau, &mut buf.terminal_cost_xx);
            coeffs.diffusion(&x_tau, u, &mut buf.diffusion);
            for j in 0..d {
                let sig = &buf.diffusion[j * m..(j + 1) * m];
                let mut quad = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        quad += sig[a] * buf.terminal_cost_xx[a * m + b] * sig[b];
                    }
                }
                psi += 0.5 * quad;
            }
        }
        psi_samples[p] = psi;
        f_samples[p] = coeffs.running_cost(&x_tau, u);
    }
    let (psi_tilde, psi_tilde_se) = util::mean_and_se(&psi_samples);
    let (f_mean, f_se) = util::mean_and_se(&f_samples);
    PenaltyData {
        psi_tilde,
        psi_tilde_se,
        mean_running_cost_at_tau: f_mean,
        mean_running_cost_at_tau_se: f_se,
        h_at_tau: run.ttr.h_at_tau,
    }
}

/// Directional derivative of the cost functional, split into its four
/// contributions: the two terminal-time penalties, the terminal-cost
/// variation, and the running-cost variation.
#[derive(Debug, Clone)]
pub struct CostVariationResult {
    pub case_tag: TauCase,
    /// -integral of Psi_tilde(tau) h_bar / h(tau).
    pub penalty_psi: f64,
    /// -integral of E[f(tau)] h_bar / h(tau).
    pub penalty_f: f64,
    /// E[Psi_x(X(tau))' y(tau)].
    pub terminal: f64,
    /// integral of E[f_x' y + f_u' v].
    pub running: f64,
    /// Sum of the four components (the with-penalty branch in case II).
    pub total: f64,
    /// Case II second branch (penalties dropped); None otherwise.
    pub total_without_penalties: Option<f64>,
    pub ambiguous: bool,
    /// Rough standard error of `total` (0 in deterministic mode).
    pub std_error: f64,
}

pub fn cost_directional_derivative(
    spec: &ProblemSpec,
    run: &ForwardRun,
    control: &ControlPath,
    direction: &ControlPath,
) -> Result<CostVariationResult, VariationError> {
    let y = variational_paths(spec, &run.ensemble, control, direction)?;
    cost_directional_derivative_with(spec, run, control, direction, &y)
}

/// Variant reusing an existing variational ensemble.
pub fn cost_directional_derivative_with(
    spec: &ProblemSpec,
    run: &ForwardRun,
    control: &ControlPath,
    direction: &ControlPath,
    y: &VariationalEnsemble,
) -> Result<CostVariationResult, VariationError> {
    let ttr = &run.ttr;
    let grid = run.ensemble.grid();
    let dt = grid.dt();
    let tau = ttr.tau;
    let paths = run.ensemble.path_count();
    let (m, k) = (spec.state_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    let cell = if tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(tau) };

    // Per-path running-cost variation integral and terminal variation.
    let pairs: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    CoeffBuffers::for_spec(spec),
                    vec![0.0; m],
                    vec![0.0; m],
                    vec![0.0; grid.node_count()],
                )
            },
            |(buf, x_tau, y_tau, integrand), p| {
                for i in 0..grid.node_count() {
                    let x = run.ensemble.state(p, i);
                    let u = control.at_node(i);
                    let v = direction.at_node(i);
                    coeffs.running_cost_x(x, u, &mut buf.running_cost_x);
                    coeffs.running_cost_u(x, u, &mut buf.running_cost_u);
                    let yv = y.state(p, i);
                    let mut acc = 0.0;
                    for a in 0..m {
                        acc += buf.running_cost_x[a] * yv[a];
                    }
                    for c in 0..k {
                        acc += buf.running_cost_u[c] * v[c];
                    }
                    integrand[i] = acc;
                }
                let running = util::trapezoid_to(integrand, dt, tau);
                run.ensemble.state_at(p, cell, tau, x_tau);
                y.state_at(p, cell, tau, y_tau);
                coeffs.terminal_cost_x(x_tau, &mut buf.terminal_cost_x);
                let terminal = (0..m).map(|r| buf.terminal_cost_x[r] * y_tau[r]).sum();
                (running, terminal)
            },
        )
        .collect();
    let running_samples: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let terminal_samples: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (running, running_se) = util::mean_and_se(&running_samples);
    let (terminal, terminal_se) = util::mean_and_se(&terminal_samples);

    match ttr.case_tag {
        TauCase::NoCrossing => {
            // Classical fixed-horizon variation: penalty terms are zero.
            let total = terminal + running;
            Ok(CostVariationResult {
                case_tag: ttr.case_tag,
                penalty_psi: 0.0,
                penalty_f: 0.0,
                terminal,
                running,
                total,
                total_without_penalties: None,
                ambiguous: false,
                std_error: (running_se * running_se + terminal_se * terminal_se).sqrt(),
            })
        }
        TauCase::InteriorCrossing | TauCase::BoundaryCrossing => {
            check_rate_hypotheses(ttr)?;
            let pen = penalty_data(spec, run, control);
            let hbar_curve = hbar(spec, &run.ensemble, y, control, direction);
            let hbar_integral = util::trapezoid_to(&hbar_curve.values, dt, tau);
            let hbar_integral_se = util::trapezoid_to(&hbar_curve.std_errors, dt, tau);
            let penalty_psi = -pen.psi_tilde * hbar_integral / pen.h_at_tau;
            let penalty_f = -pen.mean_running_cost_at_tau * hbar_integral / pen.h_at_tau;
            // Delta-method scale for the penalty noise.
            let rel = |value: f64, se: f64| if value.abs() > 1e-300 { se / value.abs() } else { 0.0 };
            let source_se = (pen.psi_tilde_se * pen.psi_tilde_se
                + pen.mean_running_cost_at_tau_se * pen.mean_running_cost_at_tau_se)
                .sqrt();
            let pen_rel = (rel(pen.psi_tilde + pen.mean_running_cost_at_tau, source_se).powi(2)
                + rel(hbar_integral, hbar_integral_se).powi(2))
            .sqrt();
            let penalty_se = (penalty_psi + penalty_f).abs() * pen_rel;
            let total = penalty_psi + penalty_f + terminal + running;
            let std_error = (running_se * running_se
                + terminal_se * terminal_se
                + penalty_se * penalty_se)
                .sqrt();
            let boundary = ttr.case_tag == TauCase::BoundaryCrossing;
            Ok(CostVariationResult {
                case_tag: ttr.case_tag,
                penalty_psi,
                penalty_f,
                terminal,
                running,
                total,
                total_without_penalties: boundary.then_some(terminal + running),
                ambiguous: boundary,
                std_error,
            })
        }
    }
}

/// Central finite-difference quotient of the cost in direction v at size rho,
/// with the terminal time recomputed for each perturbed control and the base
/// ensemble's random numbers reused.
pub fn cost_fd_quotient(
    spec: &ProblemSpec,
    base: &ForwardRun,
    control: &ControlPath,
    direction: &ControlPath,
    rho: f64,
    opts: &HittingOptions,
) -> Result<f64, VariationError> {
    let j_at = |signed: f64| -> Result<f64, VariationError> {
        let perturbed = control.perturbed(direction, signed, spec.control_box())?;
        let shifted = resimulate_with_control(&base.ensemble, spec, &perturbed)?;
        let mean = crate::forward::mean_phi(&shifted, spec);
        let (tau, _) = crate::forward::crossing_tau(&mean, spec, opts)?;
        Ok(crate::forward::cost_functional(spec, &shifted, &perturbed, tau).0)
    };
    Ok((j_at(rho)? - j_at(-rho)?) / (2.0 * rho))
}

/// Richardson-extrapolated central finite difference of the cost over a
/// decreasing rho schedule.
pub fn cost_fd_extrapolated(
    spec: &ProblemSpec,
    base: &ForwardRun,
    control: &ControlPath,
    direction: &ControlPath,
    rhos: &[f64],
    opts: &HittingOptions,
) -> Result<f64, VariationError> {
    let mut table = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        table.push((rho, cost_fd_quotient(spec, base, control, direction, rho, opts)?));
    }
    Ok(util::richardson_extrapolate(&table, 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{run_forward, McConfig};
    use crate::problem::{Coefficients, ControlPath, ProblemData, TimeGrid};
    use crate::registry;
    use std::sync::Arc;

    fn affine_setup(n: usize) -> (ProblemSpec, ForwardRun, ControlPath, ControlPath) {
        let spec = registry::builtin("example-affine").unwrap();
        let grid = TimeGrid::new(n, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        (spec, run, control, v)
    }

    #[test]
    fn zero_direction_gives_zero_sensitivity_and_rate() {
        let (spec, run, control, _) = affine_setup(400);
        let zero = ControlPath::constant_direction(run.ensemble.grid(), &[0.0]);
        let y = variational_paths(&spec, &run.ensemble, &control, &zero).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &zero);
        assert!(curve.values.iter().all(|&v| v == 0.0));
        assert!(y.state(0, 400).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_sensitivity_solves_linear_ode() {
        let (spec, run, control, v) = affine_setup(2000);
        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let grid = run.ensemble.grid();
        let mut worst = 0.0f64;
        for i in 0..=grid.step_count() {
            let exact = grid.node(i).exp() - 1.0;
            worst = worst.max((y.state(0, i)[0] - exact).abs());
        }
        assert!(worst < 2e-3, "max error {worst}");
    }

    #[test]
    fn sensitivity_is_linear_in_the_direction() {
        let (spec, run, control, _) = affine_setup(200);
        let grid = run.ensemble.grid();
        let v1: Vec<f64> = (0..grid.step_count()).map(|i| (i as f64 * 0.1).sin()).collect();
        let v2: Vec<f64> = (0..grid.step_count()).map(|i| (i as f64 * 0.05).cos()).collect();
        let d1 = ControlPath::direction(grid, 1, v1);
        let d2 = ControlPath::direction(grid, 1, v2);
        let combo = d1.linear_combination(2.0, &d2, -0.5);
        let y1 = variational_paths(&spec, &run.ensemble, &control, &d1).unwrap();
        let y2 = variational_paths(&spec, &run.ensemble, &control, &d2).unwrap();
        let yc = variational_paths(&spec, &run.ensemble, &control, &combo).unwrap();
        for i in (0..=grid.step_count()).step_by(17) {
            let expect = 2.0 * y1.state(0, i)[0] - 0.5 * y2.state(0, i)[0];
            assert!((yc.state(0, i)[0] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_hbar_is_exponential() {
        let (spec, run, control, v) = affine_setup(2000);
        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &v);
        let grid = run.ensemble.grid();
        for i in [0, 700, 1400, 2000] {
            let t = grid.node(i);
            assert!((curve.values[i] - t.exp()).abs() < 2e-3, "node {i}");
        }
    }

    #[test]
    fn taylor_defect_vanishes_for_zero_direction() {
        let (spec, _, control, _) = affine_setup(200);
        let zero = ControlPath::constant_direction(control.grid(), &[0.0]);
        let defects = taylor_expansion_check(
            &spec,
            &control,
            &zero,
            &[0.1, 0.05],
            &McConfig::deterministic(),
        )
        .unwrap();
        assert!(defects.iter().all(|d| d.sup_defect == 0.0));
    }

    #[test]
    fn taylor_defect_sits_at_float_floor_for_linear_dynamics() {
        // Linear dynamics make the scaled difference equal y exactly, so the
        // defect is pure roundoff.
        let (spec, _, control, v) = affine_setup(400);
        let defects =
            taylor_expansion_check(&spec, &control, &v, &[0.1], &McConfig::deterministic())
                .unwrap();
        assert!(defects[0].sup_defect < 1e-10, "defect {}", defects[0].sup_defect);
    }

    /// Logistic drift: a genuinely nonlinear problem for the order check.
    struct LogisticCoefficients;

    impl Coefficients for LogisticCoefficients {
        fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = x[0] * (1.0 - x[0]) + u[0];
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
            u[0] * u[0]
        }
        fn terminal_cost(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn constraint(&self, x: &[f64]) -> f64 {
            x[0]
        }
        fn drift_x(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 1.0 - 2.0 * x[0];
        }
        fn drift_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn diffusion_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost_u(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * u[0];
        }
        fn terminal_cost_x(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn terminal_cost_xx(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn constraint_x(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn constraint_xx(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn constraint_xxx(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    fn logistic_spec() -> ProblemSpec {
        ProblemSpec::new(
            ProblemData {
                name: "logistic-test".to_string(),
                state_dim: 1,
                noise_dim: 1,
                control_dim: 1,
                horizon: 1.0,
                threshold: 0.75,
                initial_state: vec![0.1],
                control_box: vec![(0.0, 2.0)],
                deterministic: true,
            },
            Arc::new(LogisticCoefficients),
        )
        .unwrap()
    }

    #[test]
    fn taylor_defect_decays_first_order_for_nonlinear_dynamics() {
        let spec = logistic_spec();
        let grid = TimeGrid::new(1000, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let defects = taylor_expansion_check(
            &spec,
            &control,
            &v,
            &[0.2, 0.1, 0.05, 0.025],
            &McConfig::deterministic(),
        )
        .unwrap();
        for pair in defects.windows(2) {
            let ratio = pair[1].sup_defect / pair[0].sup_defect;
            assert!(ratio <= 0.6, "ratio {ratio} at rho {}", pair[1].rho);
        }
    }

    #[test]
    fn tau_derivative_matches_closed_form_on_linear_toy() {
        let spec = registry::builtin("toy-linear-deterministic").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        assert!((run.ttr.tau - 0.5).abs() < 1e-9);
        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &v);
        let deriv = tau_derivative(&run.ttr, &curve).unwrap();
        assert!((deriv.value - 0.5).abs() < 1e-3, "value {}", deriv.value);
        // closed form: tau under u = 1 + rho is 0.5 / (1 + rho)
        let quotients = tau_derivative_fd(
            &spec,
            &control,
            &v,
            &[0.01],
            &McConfig::deterministic(),
            &HittingOptions::default(),
        )
        .unwrap();
        assert!((quotients[0].1 - 0.5 / 1.01).abs() < 1e-6);
    }

    #[test]
    fn tau_derivative_refuses_kink_with_discontinuity_error() {
        let spec = registry::builtin("example-kink").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &v);
        let err = tau_derivative(&run.ttr, &curve).unwrap_err();
        assert!(matches!(err, VariationError::Discontinuity));
    }

    #[test]
    fn tau_derivative_refuses_flat_with_degenerate_rate_error() {
        let spec = registry::builtin("example-flat").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &v);
        let err = tau_derivative(&run.ttr, &curve).unwrap_err();
        assert!(matches!(err, VariationError::DegenerateRate { .. }));
    }

    #[test]
    fn kink_one_sided_quotients_match_closed_form_fractions() {
        let spec = registry::builtin("example-kink").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = spec.reference_control_path(grid).unwrap().unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let q = tau_derivative_fd(
            &spec,
            &control,
            &v,
            &[0.1, -0.1],
            &McConfig::deterministic(),
            &HittingOptions::default(),
        )
        .unwrap();
        // tau(rho) = 1/(1+rho) for rho > 0 and 0.5/(0.5+rho) for rho < 0
        assert!((q[0].1 - (1.0 - 1.0 / 1.1) / 0.1).abs() < 1e-6, "got {}", q[0].1);
        assert!((q[1].1 - (1.0 - 0.5 / 0.4) / (-0.1)).abs() < 1e-6, "got {}", q[1].1);
    }

    #[test]
    fn affine_cost_variation_matches_hand_computation() {
        let (spec, run, control, v) = affine_setup(2000);
        let result = cost_directional_derivative(&spec, &run, &control, &v).unwrap();
        // penalty_f = -0.5, running = ln 2, others zero
        assert!((result.penalty_psi).abs() < 1e-12);
        assert!((result.penalty_f + 0.5).abs() < 2e-3, "penalty_f {}", result.penalty_f);
        assert!((result.running - 2.0f64.ln()).abs() < 2e-3);
        assert!(result.terminal.abs() < 1e-12);
        assert!((result.total - (2.0f64.ln() - 0.5)).abs() < 3e-3);
    }

    #[test]
    fn cost_variation_matches_central_differences_at_interior_control() {
        // Central differences need room on both sides of the box, so probe
        // the affine problem at u = 1.5; dJ = ln(1 + 1/c) - 1/(1 + c) there.
        let spec = registry::builtin("example-affine").unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.5], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        let result = cost_directional_derivative(&spec, &run, &control, &v).unwrap();
        let exact = (1.0f64 + 1.0 / 1.5).ln() - 1.0 / 2.5;
        assert!((result.total - exact).abs() < 2e-3, "total {} vs {exact}", result.total);
        let fd = cost_fd_extrapolated(
            &spec,
            &run,
            &control,
            &v,
            &[1e-2, 5e-3, 2.5e-3],
            &HittingOptions::default(),
        )
        .unwrap();
        assert!((result.total - fd).abs() < 1e-3, "analytic {}, fd {}", result.total, fd);
    }

    #[test]
    fn perturbation_outside_the_box_is_rejected() {
        let (spec, run, control, v) = affine_setup(100);
        // u = 1 sits on the lower box corner, so a downward probe must fail.
        let err = cost_fd_quotient(&spec, &run, &control, &v, 1e-2, &HittingOptions::default())
            .unwrap_err();
        assert!(matches!(err, VariationError::Problem(ProblemError::ControlOutsideBox { .. })));
    }

    #[test]
    fn boundary_case_reports_both_branches_matching_one_sided_quotients() {
        // alpha reached exactly at the horizon: u = 1 on the linear toy with
        // alpha = 1 = m(T). Positive perturbations pull the crossing inside
        // (penalty branch), negative ones lose it (classical branch), so the
        // two one-sided derivatives of J are the two reported branch values.
        let params: registry::Params = [("alpha".to_string(), 1.0)].into_iter().collect();
        let spec = registry::builtin_with("toy-linear-deterministic", &params).unwrap();
        let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        assert_eq!(run.ttr.case_tag, TauCase::BoundaryCrossing);
        assert_eq!(run.ttr.tau, spec.horizon());

        let result = cost_directional_derivative(&spec, &run, &control, &v).unwrap();
        assert!(result.ambiguous);
        // with penalties: -E f(tau) int hbar / h + int 2uv = -1 + 2 = 1
        assert!((result.total - 1.0).abs() < 3e-3, "branch 1 {}", result.total);
        // without penalties: int 2uv = 2
        let branch2 = result.total_without_penalties.unwrap();
        assert!((branch2 - 2.0).abs() < 3e-3, "branch 2 {branch2}");

        let quotient = |rho: f64| {
            let perturbed = control.perturbed(&v, rho, spec.control_box()).unwrap();
            let shifted =
                rerun_with_control(&run.ensemble, &spec, &perturbed, &HittingOptions::default())
                    .unwrap();
            let j1 =
                crate::forward::cost_functional(&spec, &shifted.ensemble, &perturbed, shifted.ttr.tau).0;
            let j0 = crate::forward::cost_functional(&spec, &run.ensemble, &control, run.ttr.tau).0;
            (j1 - j0) / rho
        };
        // rho must push the perturbed crossing out of the 2*dt boundary band
        // around the horizon, where tau legitimately snaps to T.
        let right = quotient(0.02);
        assert!((right - 1.0).abs() < 1e-3, "right quotient {right} vs branch 1");
        let left = quotient(-0.02);
        assert!((left - (2.0 - 0.02)).abs() < 1e-3, "left quotient {left} vs branch 2");

        let y = variational_paths(&spec, &run.ensemble, &control, &v).unwrap();
        let curve = hbar(&spec, &run.ensemble, &y, &control, &v);
        let deriv = tau_derivative(&run.ttr, &curve).unwrap();
        assert!(deriv.ambiguous);
        let (candidate, zero) = deriv.candidate_pair.unwrap();
        assert!((candidate - 1.0).abs() < 2e-3);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn case_three_reduction_drops_penalties_exactly() {
        let params: registry::Params = [("alpha".to_string(), 50.0)].into_iter().collect();
        let spec = registry::builtin_with("example-affine", &params).unwrap();
        let grid = TimeGrid::new(500, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let v = ControlPath::constant_direction(grid, &[1.0]);
        let run =
            run_forward(&spec, &control, &McConfig::deterministic(), &HittingOptions::default())
                .unwrap();
        let result = cost_directional_derivative(&spec, &run, &control, &v).unwrap();
        assert_eq!(result.case_tag, TauCase::NoCrossing);
        assert_eq!(result.penalty_psi, 0.0);
        assert_eq!(result.penalty_f, 0.0);
        assert!((result.total - (result.terminal + result.running)).abs() < 1e-12);
    }

    /// Power-law constraints with constant diffusion: exercises the Phi_xx
    /// and Phi_xxx blocks of g_x against a rate finite difference.
    struct PowerConstraint {
        power: i32,
        sigma: f64,
    }

    impl Coefficients for PowerConstraint {
        fn drift(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = u[0];
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = self.sigma;
        }
        fn running_cost(&self, _x: &[f64], _u: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn constraint(&self, x: &[f64]) -> f64 {
            x[0].powi(self.power)
        }
        fn drift_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn drift_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn diffusion_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn terminal_cost_x(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn terminal_cost_xx(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn constraint_x(&self, x: &[f64], out: &mut [f64]) {
            let p = self.power as f64;
            out[0] = p * x[0].powi(self.power - 1);
        }
        fn constraint_xx(&self, x: &[f64], out: &mut [f64]) {
            let p = self.power as f64;
            out[0] = p * (p - 1.0) * x[0].powi(self.power - 2);
        }
        fn constraint_xxx(&self, x: &[f64], out: &mut [f64]) {
            let p = self.power as f64;
            out[0] = if self.power >= 3 {
                p * (p - 1.0) * (p - 2.0) * x[0].powi(self.power - 3)
            } else {
                0.0
            };
        }
    }

    #[test]
    fn hbar_matches_rate_finite_difference_for_curved_constraints() {
        for power in [2, 3] {
            let spec = ProblemSpec::new(
                ProblemData {
                    name: format!("power-{power}"),
                    state_dim: 1,
                    noise_dim: 1,
                    control_dim: 1,
                    horizon: 1.0,
                    threshold: 40.0,
                    initial_state: vec![1.0],
                    control_box: vec![(0.0, 2.0)],
                    deterministic: false,
                },
                Arc::new(PowerConstraint { power, sigma: 0.2 }),
            )
            .unwrap();
            let grid = TimeGrid::new(100, spec.horizon()).unwrap();
            let control = ControlPath::constant(grid, &[0.5], spec.control_box()).unwrap();
            let v = ControlPath::constant_direction(grid, &[1.0]);
            let mc = McConfig::sampled(20_000, 314);
            let base = crate::forward::simulate(&spec, &control, &mc).unwrap();
            let y = variational_paths(&spec, &base, &control, &v).unwrap();
            let curve = hbar(&spec, &base, &y, &control, &v);

            let rho = 1e-4;
            let perturbed = control.perturbed(&v, rho, spec.control_box()).unwrap();
            let shifted = resimulate_with_control(&base, &spec, &perturbed).unwrap();
            let h0 = crate::forward::h_curve(&base, &spec, &control);
            let h1 = crate::forward::h_curve(&shifted, &spec, &perturbed);
            for i in [25, 50, 75, 100] {
                let fd = (h1.values[i] - h0.values[i]) / rho;
                let tol = (3.0 * curve.std_errors[i]).max(1e-3).max(0.02 * fd.abs());
                assert!(
                    (curve.values[i] - fd).abs() <= tol,
                    "power {power} node {i}: hbar {} vs fd {fd}",
                    curve.values[i]
                );
            }
        }
    }

    #[test]
    fn tau_perturbation_gap_shrinks_with_rho_on_nondegenerate_builtins() {
        // Continuity of tau in the control: |tau(u + rho v) - tau(u)| is
        // non-increasing to zero along a halving rho schedule when the rate
        // hypotheses hold.
        let cases = [("example-affine", 1.5), ("toy-linear-deterministic", 1.0)];
        for (name, u0) in cases {
            let spec = registry::builtin(name).unwrap();
            let grid = TimeGrid::new(2000, spec.horizon()).unwrap();
            let control = ControlPath::constant(grid, &[u0], spec.control_box()).unwrap();
            let v = ControlPath::constant_direction(grid, &[0.25]);
            let run = run_forward(
                &spec,
                &control,
                &McConfig::deterministic(),
                &HittingOptions::default(),
            )
            .unwrap();
            assert!(!run.ttr.degenerate_h && !run.ttr.h_discontinuous);
            let mut gaps = Vec::new();
            for rho in [0.1, 0.05, 0.025, 0.0125] {
                let perturbed = control.perturbed(&v, rho, spec.control_box()).unwrap();
                let shifted =
                    rerun_with_control(&run.ensemble, &spec, &perturbed, &HittingOptions::default())
                        .unwrap();
                gaps.push((run.ttr.tau - shifted.ttr.tau).abs());
            }
            for pair in gaps.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{name}: gaps {gaps:?}");
            }
            assert!(gaps.last().unwrap() < &0.02, "{name}: gaps {gaps:?}");
        }
    }

    #[test]
    fn single_cell_hbar_equals_mean_g_u_contraction() {
        let (spec, run, control, _) = affine_setup(200);
        let (value, se) = hbar_single_cell(&spec, &run.ensemble, &control, 50, &[0.7]);
        // g_u = b_u' Phi_x = 1 for the affine example
        assert!((value - 0.7).abs() < 1e-12);
        assert_eq!(se, 0.0);
        let gu = mean_g_u(&spec, &run.ensemble, &control, 50);
        assert!((gu[0] - 1.0).abs() < 1e-12);
    }
}
