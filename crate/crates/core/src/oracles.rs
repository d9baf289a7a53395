//! Independent reference solutions used to check the main pipeline: closed
//! forms for the builtin problems and a plain grid dynamic-programming
//! solver for deterministic fixed-horizon baselines.
//!
//! Nothing here touches the forward/variation/adjoint machinery; these are
//! the oracles the machinery is judged against.

use crate::problem::{CoeffBuffers, ProblemSpec, TimeGrid};

/// Closed forms for the affine worked example (b = x + u, Phi = x, alpha = 1,
/// x0 = 0) under a constant control.
pub mod affine {
    /// State X(t) = u (e^t - 1).
    pub fn state(u: f64, t: f64) -> f64 {
        u * (t.exp() - 1.0)
    }

    /// First time u (e^t - 1) = 1.
    pub fn tau(u: f64) -> f64 {
        (1.0 + 1.0 / u).ln()
    }

    /// Cost of the constant control: u * tau(u).
    pub fn cost(u: f64) -> f64 {
        u * tau(u)
    }

    /// Directional derivative of the cost at constant control u in the
    /// constant direction v = 1.
    pub fn cost_derivative(u: f64) -> f64 {
        tau(u) - 1.0 / (1.0 + u)
    }
}

/// Closed forms for the rate-jump counterexample (piecewise control 1 then
/// 1/2, threshold 1 at tau = 1, horizon 2), perturbed by a constant rho.
pub mod kink {
    /// Terminal time of the perturbed control, by sign of rho.
    pub fn tau_perturbed(rho: f64) -> f64 {
        if rho >= 0.0 {
            1.0 / (1.0 + rho)
        } else {
            0.5 / (0.5 + rho)
        }
    }

    pub fn quotient(rho: f64) -> f64 {
        (1.0 - tau_perturbed(rho)) / rho
    }
}

/// Closed forms for the tangential-touch counterexample (control 2 - 2t,
/// state 2t - t^2, threshold 1, horizon 2), perturbed by a constant rho.
pub mod flat {
    /// Terminal time of the perturbed control: the crossing root for rho > 0,
    /// the horizon for rho < 0 (the perturbed curve never reaches 1).
    pub fn tau_perturbed(rho: f64) -> f64 {
        if rho > 0.0 {
            (2.0 + rho - (4.0 * rho + rho * rho).sqrt()) / 2.0
        } else {
            2.0
        }
    }

    pub fn quotient(rho: f64) -> f64 {
        (1.0 - tau_perturbed(rho)) / rho
    }
}

/// Discrete-time grid dynamic programming for the deterministic
/// fixed-horizon problem min int_0^T f dt + Psi(X(T)) on a state grid with
/// linear interpolation and a uniform control lattice.
#[derive(Debug, Clone, Copy)]
pub struct DpOracleConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub u_points: usize,
}

/// Optimal cost from the problem's initial state. Scalar state only; the
/// baseline problems here are all one-dimensional.
pub fn dp_grid_cost(spec: &ProblemSpec, grid: TimeGrid, cfg: &DpOracleConfig) -> f64 {
    assert_eq!(spec.state_dim(), 1, "grid oracle handles scalar states");
    assert!(spec.is_deterministic(), "grid oracle handles deterministic problems");
    let coeffs = spec.coefficients();
    let dt = grid.dt();
    let nx = cfg.x_points;
    let dx = (cfg.x_max - cfg.x_min) / (nx - 1) as f64;
    let xs: Vec<f64> = (0..nx).map(|i| cfg.x_min + i as f64 * dx).collect();
    let (u_lo, u_hi) = spec.control_box()[0];
    let us: Vec<f64> = if u_lo == u_hi {
        vec![u_lo]
    } else {
        (0..cfg.u_points)
            .map(|i| u_lo + (u_hi - u_lo) * i as f64 / (cfg.u_points - 1) as f64)
            .collect()
    };

    let interp = |values: &[f64], x: f64| -> f64 {
        let s = ((x - cfg.x_min) / dx).clamp(0.0, (nx - 1) as f64);
        let i = (s.floor() as usize).min(nx - 2);
        let frac = s - i as f64;
        values[i] + frac * (values[i + 1] - values[i])
    };

    let mut value: Vec<f64> = xs.iter().map(|&x| coeffs.terminal_cost(&[x])).collect();
    let mut next = vec![0.0; nx];
    let mut buf = CoeffBuffers::for_spec(spec);
    for _step in 0..grid.step_count() {
        for (j, &x) in xs.iter().enumerate() {
            let mut best = f64::INFINITY;
            for &u in &us {
                coeffs.drift(&[x], &[u], &mut buf.drift);
                let x_next = x + buf.drift[0] * dt;
                let candidate = coeffs.running_cost(&[x], &[u]) * dt + interp(&value, x_next);
                if candidate < best {
                    best = candidate;
                }
            }
            next[j] = best;
        }
        std::mem::swap(&mut value, &mut next);
    }
    interp(&value, spec.initial_state()[0])
}
