//! Problem data for the varying-terminal-time optimal control model.
//!
//! A problem couples controlled dynamics dX = b(X,u)dt + σ(X,u)dW with a
//! running cost f, terminal cost Ψ, and a constraint functional Φ whose mean
//! curve E[Φ(X(t))] defines the terminal time: the first time the curve
//! reaches the threshold α, capped at the horizon T. Coefficients carry
//! their own derivatives (analytic for builtins, finite-difference backed
//! for generic problems) because every variational quantity downstream
//! differentiates them.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors raised while building or validating problem data.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("threshold alpha = {alpha} must exceed Phi(x0) = {phi_x0}; the stopping problem is trivial otherwise")]
    TrivialThreshold { alpha: f64, phi_x0: f64 },
    #[error("control box coordinate {index} has lo = {lo} > hi = {hi}")]
    InvalidBox { index: usize, lo: f64, hi: f64 },
    #[error("dimension fields must be positive (m = {m}, d = {d}, k = {k})")]
    ZeroDimension { m: usize, d: usize, k: usize },
    #[error("initial state has {got} coordinates, expected {expected}")]
    InitialStateDimension { got: usize, expected: usize },
    #[error("horizon T = {0} must be positive")]
    NonPositiveHorizon(f64),
    #[error("time grid needs at least one step")]
    EmptyGrid,
    #[error("control value {value} at cell {cell}, coordinate {coord} lies outside [{lo}, {hi}]")]
    ControlOutsideBox { cell: usize, coord: usize, value: f64, lo: f64, hi: f64 },
    #[error("control path carries {got} values, expected {expected} (cells x control dim)")]
    ControlLength { got: usize, expected: usize },
    #[error("unknown builtin problem '{name}'; valid names: {valid}")]
    UnknownBuiltin { name: String, valid: String },
    #[error("unknown parameter '{key}' for builtin '{name}'")]
    UnknownParameter { name: String, key: String },
    #[error("invalid parameter {key} = {value} for builtin '{name}': {reason}")]
    BadParameter { name: String, key: String, value: f64, reason: String },
}

/// Uniform discretization of [0, T] with nodes t_i = i T / N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    step_count: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(step_count: usize, horizon: f64) -> Result<Self, ProblemError> {
        if step_count == 0 {
            return Err(ProblemError::EmptyGrid);
        }
        if horizon <= 0.0 {
            return Err(ProblemError::NonPositiveHorizon(horizon));
        }
        Ok(Self { step_count, horizon })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn node_count(&self) -> usize {
        self.step_count + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.step_count as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.step_count {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// Midpoint of cell [t_i, t_{i+1}).
    pub fn cell_midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dt()
    }

    /// Index of the cell containing time t, clamped to [0, N-1].
    pub fn cell_of(&self, t: f64) -> usize {
        ((t / self.dt()).floor() as usize).min(self.step_count - 1)
    }
}

/// Piecewise-constant control on a time grid: value u_i holds on [t_i, t_{i+1}).
///
/// Admissible controls are box-checked at construction. Perturbation
/// directions v reuse the same representation through [`ControlPath::direction`],
/// which skips the box check (admissibility of u + ρv is checked where the
/// perturbed control is built).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: TimeGrid,
    control_dim: usize,
    values: Vec<f64>,
}

impl ControlPath {
    /// Box-checked construction from per-cell values laid out cell-major.
    pub fn new(
        grid: TimeGrid,
        control_dim: usize,
        values: Vec<f64>,
        control_box: &[(f64, f64)],
    ) -> Result<Self, ProblemError> {
        let expected = grid.step_count() * control_dim;
        if values.len() != expected {
            return Err(ProblemError::ControlLength { got: values.len(), expected });
        }
        for cell in 0..grid.step_count() {
            for coord in 0..control_dim {
                let v = values[cell * control_dim + coord];
                let (lo, hi) = control_box[coord];
                if !(lo..=hi).contains(&v) {
                    return Err(ProblemError::ControlOutsideBox { cell, coord, value: v, lo, hi });
                }
            }
        }
        Ok(Self { grid, control_dim, values })
    }

    /// Unchecked construction for perturbation directions.
    pub fn direction(grid: TimeGrid, control_dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.step_count() * control_dim);
        Self { grid, control_dim, values }
    }

    /// Constant admissible control.
    pub fn constant(
        grid: TimeGrid,
        value: &[f64],
        control_box: &[(f64, f64)],
    ) -> Result<Self, ProblemError> {
        let values: Vec<f64> =
            (0..grid.step_count()).flat_map(|_| value.iter().copied()).collect();
        Self::new(grid, value.len(), values, control_box)
    }

    /// Constant direction (no box check).
    pub fn constant_direction(grid: TimeGrid, value: &[f64]) -> Self {
        let values: Vec<f64> =
            (0..grid.step_count()).flat_map(|_| value.iter().copied()).collect();
        Self::direction(grid, value.len(), values)
    }

    /// Sample a continuous-time control at cell midpoints (second-order
    /// representation of smooth reference controls) and box-check it.
    pub fn from_fn(
        grid: TimeGrid,
        control_dim: usize,
        f: impl Fn(f64) -> Vec<f64>,
        control_box: &[(f64, f64)],
    ) -> Result<Self, ProblemError> {
        let mut values = Vec::with_capacity(grid.step_count() * control_dim);
        for i in 0..grid.step_count() {
            let v = f(grid.cell_midpoint(i));
            assert_eq!(v.len(), control_dim);
            values.extend_from_slice(&v);
        }
        Self::new(grid, control_dim, values, control_box)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Control value on cell [t_i, t_{i+1}).
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.control_dim..(i + 1) * self.control_dim]
    }

    /// Control value attached to node i (left limit at the final node).
    pub fn at_node(&self, i: usize) -> &[f64] {
        self.cell(i.min(self.grid.step_count() - 1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// u + rho * v, box-checked against the given box.
    pub fn perturbed(
        &self,
        direction: &ControlPath,
        rho: f64,
        control_box: &[(f64, f64)],
    ) -> Result<Self, ProblemError> {
        assert_eq!(self.grid, direction.grid);
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(direction.values.iter())
            .map(|(u, v)| u + rho * v)
            .collect();
        Self::new(self.grid, self.control_dim, values, control_box)
    }

    /// Random admissible control: a low-order trigonometric polynomial per
    /// coordinate, scaled to stay `margin` inside the box (so perturbations
    /// up to `margin` remain admissible). Smooth in time, since the
    /// variational formulas evaluate the control at the terminal time.
    pub fn random_interior(
        grid: TimeGrid,
        control_box: &[(f64, f64)],
        margin: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let k = control_box.len();
        let waves: Vec<RandomWave> = (0..k).map(|_| RandomWave::draw(rng)).collect();
        let mut values = Vec::with_capacity(grid.step_count() * k);
        for i in 0..grid.step_count() {
            let t = grid.cell_midpoint(i) / grid.horizon();
            for (coord, &(lo, hi)) in control_box.iter().enumerate() {
                let (a, b) = (lo + margin, hi - margin);
                if a < b {
                    let center = 0.5 * (a + b);
                    let halfwidth = 0.5 * (b - a);
                    values.push(center + halfwidth * waves[coord].eval(t));
                } else {
                    values.push(0.5 * (lo + hi));
                }
            }
        }
        Self::direction(grid, k, values)
    }

    /// Random smooth direction with values in [-amplitude, amplitude].
    pub fn random_direction(
        grid: TimeGrid,
        control_dim: usize,
        amplitude: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let waves: Vec<RandomWave> = (0..control_dim).map(|_| RandomWave::draw(rng)).collect();
        let mut values = Vec::with_capacity(grid.step_count() * control_dim);
        for i in 0..grid.step_count() {
            let t = grid.cell_midpoint(i) / grid.horizon();
            for wave in &waves {
                values.push(amplitude * wave.eval(t));
            }
        }
        Self::direction(grid, control_dim, values)
    }

    /// Componentwise a*self + c*other without box checks (direction algebra).
    pub fn linear_combination(&self, a: f64, other: &ControlPath, c: f64) -> Self {
        assert_eq!(self.grid, other.grid);
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(x, y)| a * x + c * y)
            .collect();
        Self::direction(self.grid, self.control_dim, values)
    }
}

/// A bounded random trigonometric polynomial on [0, 1]: constant plus three
/// harmonics, normalized so |eval| < 1.
struct RandomWave {
    coeffs: [f64; 7],
}

impl RandomWave {
    fn draw(rng: &mut impl rand::Rng) -> Self {
        let mut coeffs = [0.0; 7];
        coeffs[0] = 0.4 * rng.random_range(-1.0..1.0);
        for slot in coeffs.iter_mut().skip(1) {
            *slot = 0.2 * rng.random_range(-1.0..1.0);
        }
        Self { coeffs }
    }

    fn eval(&self, t: f64) -> f64 {
        let mut s = self.coeffs[0];
        for j in 1..=3 {
            let phase = 2.0 * std::f64::consts::PI * j as f64 * t;
            s += self.coeffs[2 * j - 1] * phase.sin() + self.coeffs[2 * j] * phase.cos();
        }
        s / 1.6
    }
}

/// Coefficient functions of a control problem together with the derivatives
/// the variational machinery needs.
///
/// Layout conventions (all row-major, σ column j is the m-vector σ^j):
/// - `diffusion`: out[j*m + i] = σ^j_i (noise-major),
/// - `drift_x`: out[r*m + c] = ∂b_r/∂x_c; `drift_u`: out[r*k + c] = ∂b_r/∂u_c,
/// - `diffusion_x`: out[j*m*m + r*m + c] = ∂σ^j_r/∂x_c; `diffusion_u` analogous with k columns,
/// - `constraint_xxx`: out[a*m*m + b*m + c] = ∂³Φ/∂x_a∂x_b∂x_c.
///
/// Coefficient functions must be pure: problems are shared across workers.
pub trait Coefficients: Send + Sync {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn constraint(&self, x: &[f64]) -> f64;

    fn drift_x(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_u(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_x(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_u(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_cost_x(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_cost_u(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn terminal_cost_x(&self, x: &[f64], out: &mut [f64]);
    fn terminal_cost_xx(&self, x: &[f64], out: &mut [f64]);
    fn constraint_x(&self, x: &[f64], out: &mut [f64]);
    fn constraint_xx(&self, x: &[f64], out: &mut [f64]);
    fn constraint_xxx(&self, x: &[f64], out: &mut [f64]);
}

/// Closure over time of a stored reference (candidate optimal) control.
pub type ReferenceControl = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// Immutable problem definition. Shareable across threads; all evaluation
/// goes through the [`Coefficients`] trait object.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    state_dim: usize,
    noise_dim: usize,
    control_dim: usize,
    horizon: f64,
    threshold: f64,
    initial_state: Vec<f64>,
    control_box: Vec<(f64, f64)>,
    deterministic: bool,
    coeffs: Arc<dyn Coefficients>,
    reference_control: Option<ReferenceControl>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("threshold", &self.threshold)
            .field("initial_state", &self.initial_state)
            .field("control_box", &self.control_box)
            .field("deterministic", &self.deterministic)
            .finish()
    }
}

/// Plain-data part of a problem definition, validated by [`ProblemSpec::new`].
pub struct ProblemData {
    pub name: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub threshold: f64,
    pub initial_state: Vec<f64>,
    pub control_box: Vec<(f64, f64)>,
    /// Declares σ ≡ 0; enables the deterministic simulation and adjoint paths.
    pub deterministic: bool,
}

impl ProblemSpec {
    pub fn new(data: ProblemData, coeffs: Arc<dyn Coefficients>) -> Result<Self, ProblemError> {
        if data.state_dim == 0 || data.noise_dim == 0 || data.control_dim == 0 {
            return Err(ProblemError::ZeroDimension {
                m: data.state_dim,
                d: data.noise_dim,
                k: data.control_dim,
            });
        }
        if data.initial_state.len() != data.state_dim {
            return Err(ProblemError::InitialStateDimension {
                got: data.initial_state.len(),
                expected: data.state_dim,
            });
        }
        if data.horizon <= 0.0 {
            return Err(ProblemError::NonPositiveHorizon(data.horizon));
        }
        for (index, &(lo, hi)) in data.control_box.iter().enumerate() {
            if lo > hi {
                return Err(ProblemError::InvalidBox { index, lo, hi });
            }
        }
        let phi_x0 = coeffs.constraint(&data.initial_state);
        if data.threshold <= phi_x0 {
            return Err(ProblemError::TrivialThreshold { alpha: data.threshold, phi_x0 });
        }
        Ok(Self {
            name: data.name,
            state_dim: data.state_dim,
            noise_dim: data.noise_dim,
            control_dim: data.control_dim,
            horizon: data.horizon,
            threshold: data.threshold,
            initial_state: data.initial_state,
            control_box: data.control_box,
            deterministic: data.deterministic,
            coeffs,
            reference_control: None,
        })
    }

    pub fn with_reference_control(mut self, reference: ReferenceControl) -> Self {
        self.reference_control = Some(reference);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn control_box(&self) -> &[(f64, f64)] {
        &self.control_box
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    /// The registry-stored candidate pair's control, if this problem has one.
    pub fn reference_control(&self) -> Option<&ReferenceControl> {
        self.reference_control.as_ref()
    }

    /// Sample the stored reference control onto a grid.
    pub fn reference_control_path(&self, grid: TimeGrid) -> Option<Result<ControlPath, ProblemError>> {
        let f = self.reference_control.as_ref()?;
        let f = Arc::clone(f);
        Some(ControlPath::from_fn(grid, self.control_dim, move |t| f(t), &self.control_box))
    }

    /// Midpoint of the control box, used for deterministic tie-breaking.
    pub fn box_midpoint(&self) -> Vec<f64> {
        self.control_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

/// Scratch buffers for coefficient evaluation, sized once per worker.
#[derive(Debug, Clone)]
pub struct CoeffBuffers {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub drift_x: Vec<f64>,
    pub drift_u: Vec<f64>,
    pub diffusion_x: Vec<f64>,
    pub diffusion_u: Vec<f64>,
    pub running_cost_x: Vec<f64>,
    pub running_cost_u: Vec<f64>,
    pub terminal_cost_x: Vec<f64>,
    pub terminal_cost_xx: Vec<f64>,
    pub constraint_x: Vec<f64>,
    pub constraint_xx: Vec<f64>,
    pub constraint_xxx: Vec<f64>,
    /// m-sized scratch for intermediate contractions.
    pub scratch_state: Vec<f64>,
}

impl CoeffBuffers {
    pub fn for_spec(spec: &ProblemSpec) -> Self {
        let (m, d, k) = (spec.state_dim, spec.noise_dim, spec.control_dim);
        Self {
            drift: vec![0.0; m],
            diffusion: vec![0.0; m * d],
            drift_x: vec![0.0; m * m],
            drift_u: vec![0.0; m * k],
            diffusion_x: vec![0.0; d * m * m],
            diffusion_u: vec![0.0; d * m * k],
            running_cost_x: vec![0.0; m],
            running_cost_u: vec![0.0; k],
            terminal_cost_x: vec![0.0; m],
            terminal_cost_xx: vec![0.0; m * m],
            constraint_x: vec![0.0; m],
            constraint_xx: vec![0.0; m * m],
            constraint_xxx: vec![0.0; m * m * m],
            scratch_state: vec![0.0; m],
        }
    }
}
