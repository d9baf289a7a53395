//! Builtin problem registry.
//!
//! Five problems ship with the toolkit: two counterexamples where the
//! terminal-time derivative fails to exist (a rate jump and a tangential
//! threshold touch), one affine worked example with a known optimal pair,
//! and two linear toys (deterministic and noisy) with closed-form oracles.
//! Each builtin carries analytic derivatives and, where a candidate pair is
//! part of its definition, a stored reference control.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::problem::{Coefficients, ProblemData, ProblemError, ProblemSpec};

pub const BUILTIN_NAMES: [&str; 5] = [
    "example-kink",
    "example-flat",
    "example-affine",
    "toy-linear-deterministic",
    "toy-linear-sde",
];

/// Parameter overrides for a builtin (keys depend on the builtin; unknown
/// keys are rejected).
pub type Params = BTreeMap<String, f64>;

/// Look up a builtin under its default parameters.
pub fn builtin(name: &str) -> Result<ProblemSpec, ProblemError> {
    builtin_with(name, &Params::new())
}

/// Look up a builtin with parameter overrides.
///
/// Common keys: `alpha`, `horizon`, `x0`, `u_lo`, `u_hi`. The linear toys
/// additionally accept `theta` (drift gain) and, for the noisy toy, `sigma`
/// (constant diffusion level; `sigma = 0` yields its deterministic variant
/// with the quadratic terminal cost kept).
pub fn builtin_with(name: &str, params: &Params) -> Result<ProblemSpec, ProblemError> {
    match name {
        "example-affine" => affine_example(params),
        "example-kink" => kink_example(params),
        "example-flat" => flat_example(params),
        "toy-linear-deterministic" => linear_toy(name, params, 0.0, false),
        "toy-linear-sde" => linear_toy(name, params, 0.2, true),
        _ => Err(ProblemError::UnknownBuiltin {
            name: name.to_string(),
            valid: BUILTIN_NAMES.join(", "),
        }),
    }
}

struct ParamReader<'a> {
    name: &'a str,
    params: &'a Params,
    known: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(name: &'a str, params: &'a Params) -> Self {
        Self { name, params, known: Vec::new() }
    }

    fn get(&mut self, key: &'static str, default: f64) -> f64 {
        self.known.push(key);
        self.params.get(key).copied().unwrap_or(default)
    }

    fn finish(self) -> Result<(), ProblemError> {
        for key in self.params.keys() {
            if !self.known.contains(&key.as_str()) {
                return Err(ProblemError::UnknownParameter {
                    name: self.name.to_string(),
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// example-affine: b = x + u, f = u, Psi = 0, Phi = x on U = [1, 2].
// Candidate pair: u = 1, X(t) = e^t - 1, terminal time ln 2.
// ---------------------------------------------------------------------------

struct AffineCoefficients;

impl Coefficients for AffineCoefficients {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] + u[0];
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
        u[0]
    }
    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constraint(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn drift_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
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
        out[0] = 1.0;
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

fn affine_example(params: &Params) -> Result<ProblemSpec, ProblemError> {
    let mut p = ParamReader::new("example-affine", params);
    let horizon = p.get("horizon", 1.0);
    let alpha = p.get("alpha", 1.0);
    let x0 = p.get("x0", 0.0);
    let u_lo = p.get("u_lo", 1.0);
    let u_hi = p.get("u_hi", 2.0);
    p.finish()?;
    let spec = ProblemSpec::new(
        ProblemData {
            name: "example-affine".to_string(),
            state_dim: 1,
            noise_dim: 1,
            control_dim: 1,
            horizon,
            threshold: alpha,
            initial_state: vec![x0],
            control_box: vec![(u_lo, u_hi)],
            deterministic: true,
        },
        Arc::new(AffineCoefficients),
    )?;
    Ok(spec.with_reference_control(Arc::new(|_t| vec![1.0])))
}

// ---------------------------------------------------------------------------
// example-kink / example-flat: b = u, sigma = 0, f = 0, Psi = 0, Phi = x.
// The stored candidates are the two counterexample pairs: a control with a
// jump at the crossing time, and the tangential pair u = 2 - 2t.
// ---------------------------------------------------------------------------

struct PureControlDrift;

impl Coefficients for PureControlDrift {
    fn drift(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constraint(&self, x: &[f64]) -> f64 {
        x[0]
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

fn kink_example(params: &Params) -> Result<ProblemSpec, ProblemError> {
    let mut p = ParamReader::new("example-kink", params);
    let horizon = p.get("horizon", 2.0);
    let alpha = p.get("alpha", 1.0);
    let x0 = p.get("x0", 0.0);
    let u_lo = p.get("u_lo", 0.0);
    let u_hi = p.get("u_hi", 2.0);
    p.finish()?;
    let spec = ProblemSpec::new(
        ProblemData {
            name: "example-kink".to_string(),
            state_dim: 1,
            noise_dim: 1,
            control_dim: 1,
            horizon,
            threshold: alpha,
            initial_state: vec![x0],
            control_box: vec![(u_lo, u_hi)],
            deterministic: true,
        },
        Arc::new(PureControlDrift),
    )?;
    Ok(spec.with_reference_control(Arc::new(|t| vec![if t <= 1.0 { 1.0 } else { 0.5 }])))
}

fn flat_example(params: &Params) -> Result<ProblemSpec, ProblemError> {
    let mut p = ParamReader::new("example-flat", params);
    let horizon = p.get("horizon", 2.0);
    let alpha = p.get("alpha", 1.0);
    let x0 = p.get("x0", 0.0);
    let u_lo = p.get("u_lo", -3.0);
    let u_hi = p.get("u_hi", 3.0);
    p.finish()?;
    let spec = ProblemSpec::new(
        ProblemData {
            name: "example-flat".to_string(),
            state_dim: 1,
            noise_dim: 1,
            control_dim: 1,
            horizon,
            threshold: alpha,
            initial_state: vec![x0],
            control_box: vec![(u_lo, u_hi)],
            deterministic: true,
        },
        Arc::new(PureControlDrift),
    )?;
    Ok(spec.with_reference_control(Arc::new(|t| vec![2.0 - 2.0 * t])))
}

// ---------------------------------------------------------------------------
// Linear toys: b = theta * u, sigma = s (constant), f = u^2, Phi = x.
// The deterministic toy has Psi = 0; the noisy toy has Psi = x^2, which makes
// its s = 0 variant the quadratic-terminal-cost deterministic problem used by
// the duality checks.
// ---------------------------------------------------------------------------

struct LinearToyCoefficients {
    theta: f64,
    sigma: f64,
    quadratic_terminal: bool,
}

impl Coefficients for LinearToyCoefficients {
    fn drift(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.theta * u[0];
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn running_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
        u[0] * u[0]
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        if self.quadratic_terminal {
            x[0] * x[0]
        } else {
            0.0
        }
    }
    fn constraint(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn drift_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_u(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.theta;
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
    fn terminal_cost_x(&self, x: &[f64], out: &mut [f64]) {
        out[0] = if self.quadratic_terminal { 2.0 * x[0] } else { 0.0 };
    }
    fn terminal_cost_xx(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = if self.quadratic_terminal { 2.0 } else { 0.0 };
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

fn linear_toy(name: &str, params: &Params, default_sigma: f64, noisy: bool) -> Result<ProblemSpec, ProblemError> {
    let mut p = ParamReader::new(name, params);
    let horizon = p.get("horizon", 1.0);
    let theta = p.get("theta", 1.0);
    let (alpha_default, u_lo_default, u_hi_default, reference) =
        if noisy { (0.4, -2.0, 2.0, 0.5) } else { (0.5, 0.0, 2.0, 1.0) };
    let alpha = p.get("alpha", alpha_default);
    let x0 = p.get("x0", 0.0);
    let u_lo = p.get("u_lo", u_lo_default);
    let u_hi = p.get("u_hi", u_hi_default);
    let sigma = if noisy { p.get("sigma", default_sigma) } else { default_sigma };
    p.finish()?;
    if sigma < 0.0 {
        return Err(ProblemError::BadParameter {
            name: name.to_string(),
            key: "sigma".to_string(),
            value: sigma,
            reason: "diffusion level must be nonnegative".to_string(),
        });
    }
    let spec = ProblemSpec::new(
        ProblemData {
            name: name.to_string(),
            state_dim: 1,
            noise_dim: 1,
            control_dim: 1,
            horizon,
            threshold: alpha,
            initial_state: vec![x0],
            control_box: vec![(u_lo, u_hi)],
            deterministic: sigma == 0.0,
        },
        Arc::new(LinearToyCoefficients { theta, sigma, quadratic_terminal: noisy }),
    )?;
    Ok(spec.with_reference_control(Arc::new(move |_t| vec![reference])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finitediff::max_relative_derivative_mismatch;
    use rand::SeedableRng;

    #[test]
    fn unknown_name_reports_valid_names() {
        let err = builtin("unknown").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("example-affine"));
        assert!(msg.contains("toy-linear-sde"));
    }

    #[test]
    fn affine_matches_published_data() {
        let spec = builtin("example-affine").unwrap();
        assert_eq!(spec.horizon(), 1.0);
        assert_eq!(spec.threshold(), 1.0);
        assert_eq!(spec.control_box(), &[(1.0, 2.0)]);
        let mut b = [0.0];
        spec.coefficients().drift(&[0.5], &[1.0], &mut b);
        assert_eq!(b[0], 1.5);
    }

    #[test]
    fn kink_matches_published_data() {
        let spec = builtin("example-kink").unwrap();
        assert_eq!(spec.horizon(), 2.0);
        assert_eq!(spec.threshold(), 1.0);
        let reference = spec.reference_control().unwrap();
        assert_eq!(reference(0.5), vec![1.0]);
        assert_eq!(reference(1.5), vec![0.5]);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let params: Params = [("bogus".to_string(), 1.0)].into_iter().collect();
        let err = builtin_with("example-affine", &params).unwrap_err();
        assert!(matches!(err, ProblemError::UnknownParameter { .. }));
    }

    #[test]
    fn sde_toy_with_zero_sigma_is_deterministic() {
        let params: Params = [("sigma".to_string(), 0.0)].into_iter().collect();
        let spec = builtin_with("toy-linear-sde", &params).unwrap();
        assert!(spec.is_deterministic());
        let mut psi_x = [0.0];
        spec.coefficients().terminal_cost_x(&[1.5], &mut psi_x);
        assert_eq!(psi_x[0], 3.0);
    }

    #[test]
    fn all_builtin_derivatives_match_finite_differences() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let worst = max_relative_derivative_mismatch(&spec, 100, &mut rng);
            assert!(worst < 1e-5, "{name}: worst relative mismatch {worst}");
        }
    }
}
