//! Conditional-gradient descent on the cost functional, with the terminal
//! time recomputed at every trial control and the case-dependent penalty
//! coefficients folded into the per-cell linearization.
//!
//! The descent direction comes from the cost variation: the per-cell
//! coefficient is E[H_u] plus, in the crossing cases,
//! kappa * (E[g_u] - b_u' p0 - sum_j sigma_u_j' q0_j), the dual pointwise
//! form of the integrated penalty term. The linearized subproblem over the
//! box has a closed-form corner solution; ties go to the box midpoint. A
//! certified verdict from the verifier is the stopping rule.

use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{hamiltonian_u, solve_adjoint, solve_auxiliary_adjoint, AdjointError, AdjointMode};
use crate::forward::{
    cost_functional, rerun_with_control, run_forward, ForwardError, ForwardRun, HittingOptions,
    McConfig, TauCase,
};
use crate::problem::{CoeffBuffers, ControlPath, ProblemError, ProblemSpec};
use crate::variation::{eval_g_derivatives, penalty_data, VariationError};
use crate::verifier::{verify_with_run, SmpOptions, Verdict, VerifierError};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Variation(#[from] VariationError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Backtracking line-search parameters.
#[derive(Debug, Clone, Copy)]
pub struct ArmijoParams {
    pub initial_step: f64,
    pub shrink: f64,
    pub slope_fraction: f64,
    pub step_floor: f64,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self { initial_step: 1.0, shrink: 0.5, slope_fraction: 1e-4, step_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    pub armijo: ArmijoParams,
    pub mc: McConfig,
    pub hitting: HittingOptions,
    pub smp: SmpOptions,
}

impl OptimizerOptions {
    pub fn deterministic() -> Self {
        Self {
            max_iters: 100,
            armijo: ArmijoParams::default(),
            mc: McConfig::deterministic(),
            hitting: HittingOptions::default(),
            smp: SmpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterateRecord {
    pub iter: usize,
    pub cost: f64,
    pub tau: f64,
    pub case_tag: TauCase,
    pub max_violation: f64,
    /// Accepted step size out of this iterate (0 on the final record).
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    SmpSatisfied,
    StepFloor,
    MaxIters,
    DegenerateEncountered,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerTrace {
    pub iterates: Vec<IterateRecord>,
    pub termination: Termination,
}

/// Componentwise solution of the linearized subproblem argmax_u c' u over
/// the box: the corner picked by the sign of each coefficient, the box
/// midpoint on an exact tie. Invariant under positive rescaling of c.
pub fn frank_wolfe_target(coeff: &[f64], control_box: &[(f64, f64)]) -> Vec<f64> {
    coeff
        .iter()
        .zip(control_box.iter())
        .map(|(&c, &(lo, hi))| {
            if c > 0.0 {
                hi
            } else if c < 0.0 {
                lo
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect()
}

/// Improve an admissible control until the verifier certifies it, the step
/// size collapses, the iteration budget runs out, or a degenerate rate is
/// encountered. Returns the best iterate by cost together with the trace.
pub fn improve(
    spec: &ProblemSpec,
    initial: &ControlPath,
    opts: &OptimizerOptions,
) -> Result<(ControlPath, OptimizerTrace), OptimizerError> {
    let grid = initial.grid();
    let k = spec.control_dim();
    let n = grid.step_count();
    let mut control = initial.clone();
    let mut iterates = Vec::new();
    let mut best = (f64::INFINITY, control.clone());

    for iter in 0..=opts.max_iters {
        let run = run_forward(spec, &control, &opts.mc, &opts.hitting)?;
        let (cost, _) = cost_functional(spec, &run.ensemble, &control, run.ttr.tau);
        if cost < best.0 {
            best = (cost, control.clone());
        }
        let report = verify_with_run(spec, &run, &control, &opts.smp)?;
        let mut record = IterateRecord {
            iter,
            cost,
            tau: run.ttr.tau,
            case_tag: run.ttr.case_tag,
            max_violation: report.max_violation,
            step: 0.0,
        };

        if report.verdict == Verdict::Degenerate {
            iterates.push(record);
            return Ok((best.1, OptimizerTrace { iterates, termination: Termination::DegenerateEncountered }));
        }
        if report.verdict == Verdict::Certified {
            iterates.push(record);
            return Ok((control, OptimizerTrace { iterates, termination: Termination::SmpSatisfied }));
        }
        if iter == opts.max_iters {
            iterates.push(record);
            return Ok((best.1, OptimizerTrace { iterates, termination: Termination::MaxIters }));
        }

        // Per-cell linearization coefficients at the current iterate.
        let coeffs = descent_coefficients(spec, &run, &control)?;

        // Linearized subproblem and direction. Cells at or beyond tau do not
        // enter the cost to first order; they follow the last in-scope
        // cell's target so the control (and hence the rate curve) stays
        // continuous across tau, matching the convention of extending a
        // candidate pair slightly past its terminal time.
        let in_scope = (0..n).filter(|&i| grid.node(i) < run.ttr.tau).count().max(1);
        let mut target = Vec::with_capacity(n * k);
        for i in 0..in_scope {
            target.extend(frank_wolfe_target(&coeffs[i * k..(i + 1) * k], spec.control_box()));
        }
        for _ in in_scope..n {
            let boundary: Vec<f64> = target[(in_scope - 1) * k..in_scope * k].to_vec();
            target.extend(boundary);
        }
        let target = ControlPath::new(grid, k, target, spec.control_box())?;
        let direction = target.linear_combination(1.0, &control, -1.0);
        let dt = grid.dt();
        let gap: f64 = (0..n)
            .map(|i| {
                (0..k).map(|c| coeffs[i * k + c] * direction.cell(i)[c]).sum::<f64>() * dt
            })
            .sum();
        if gap <= 1e-14 * (1.0 + cost.abs()) {
            iterates.push(record);
            return Ok((best.1, OptimizerTrace { iterates, termination: Termination::StepFloor }));
        }

        // Backtracking on the true cost, terminal time recomputed per trial,
        // random numbers frozen to this iterate's ensemble.
        let mut step = opts.armijo.initial_step;
        let mut accepted = None;
        while step >= opts.armijo.step_floor {
            let trial = control.perturbed(&direction, step, spec.control_box())?;
            let trial_run = rerun_with_control(&run.ensemble, spec, &trial, &opts.hitting)?;
            let (trial_cost, _) = cost_functional(spec, &trial_run.ensemble, &trial, trial_run.ttr.tau);
            if trial_cost <= cost - opts.armijo.slope_fraction * step * gap {
                accepted = Some((step, trial));
                break;
            }
            step *= opts.armijo.shrink;
        }
        match accepted {
            Some((step, trial)) => {
                record.step = step;
                iterates.push(record);
                control = trial;
            }
            None => {
                iterates.push(record);
                return Ok((best.1, OptimizerTrace { iterates, termination: Termination::StepFloor }));
            }
        }
    }
    unreachable!("loop returns on certification, budget, or step floor");
}

/// Per-cell gradient coefficients c_i: E[H_u] plus the dual pointwise form
/// of the penalty block in the crossing cases. Cells at or beyond tau have
/// zero coefficients (the cost does not see them to first order).
fn descent_coefficients(
    spec: &ProblemSpec,
    run: &ForwardRun,
    control: &ControlPath,
) -> Result<Vec<f64>, OptimizerError> {
    let grid = run.ensemble.grid();
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let n = grid.step_count();
    let paths = run.ensemble.path_count();
    let mode = AdjointMode::for_spec(spec);
    let adjoint = solve_adjoint(spec, &run.ensemble, control, &run.ttr, mode)?;
    let needs_penalties =
        matches!(run.ttr.case_tag, TauCase::InteriorCrossing | TauCase::BoundaryCrossing);
    let aux = if needs_penalties {
        Some(solve_auxiliary_adjoint(spec, &run.ensemble, control, &run.ttr, mode)?)
    } else {
        None
    };
    let kappa = if needs_penalties { penalty_data(spec, run, control).kappa() } else { 0.0 };

    let mut out = vec![0.0; n * k];
    let mut buf = CoeffBuffers::for_spec(spec);
    let mut hu = vec![0.0; k];
    let mut g_x = vec![0.0; m];
    let mut g_u = vec![0.0; k];
    let problem_coeffs = spec.coefficients();
    // Full adjoint entries sit at grid nodes below tau.
    for l in 0..adjoint.len() - 1 {
        let u = control.cell(l);
        let slot = &mut out[l * k..(l + 1) * k];
        for path in 0..paths {
            let x = run.ensemble.state(path, l);
            hamiltonian_u(spec, x, u, adjoint.p_path(path, l), adjoint.q_path(path, l), &mut buf, &mut hu);
            for c in 0..k {
                slot[c] += hu[c];
            }
            if let Some(aux) = &aux {
                eval_g_derivatives(spec, x, u, &mut buf, &mut g_x, &mut g_u);
                let p0 = aux.p_path(path, l);
                let q0 = aux.q_path(path, l);
                problem_coeffs.drift_u(x, u, &mut buf.drift_u);
                for c in 0..k {
                    let mut minus_script_hu = g_u[c];
                    for r in 0..m {
                        minus_script_hu -= buf.drift_u[r * k + c] * p0[r];
                    }
                    if !spec.is_deterministic() {
                        problem_coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
                        for j in 0..d {
                            let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
                            for r in 0..m {
                                minus_script_hu -= su[r * k + c] * q0[j * m + r];
                            }
                        }
                    }
                    slot[c] += kappa * minus_script_hu;
                }
            }
        }
        for c in slot.iter_mut() {
            *c /= paths as f64;
        }
    }
    Ok(out)
}
