//! Adjoint engine: the first-order costate pair (p, q) solved backward on
//! [0, tau], the Hamiltonian and its control gradient, the duality identity
//! behind the maximum principle, and the auxiliary adjoint pair (p0, q0)
//! giving the dual representation of the integrated directional rate.
//!
//! Two backends share one backward loop: a pointwise scheme for
//! deterministic problems (q = 0 there), and least-squares backward
//! induction for noisy ones, with conditional expectations fitted on a
//! polynomial basis in the state.

use thiserror::Error;

use crate::forward::{PathEnsemble, TerminalTimeResult};
use crate::problem::{CoeffBuffers, ControlPath, ProblemSpec, TimeGrid};
use crate::util;
use crate::variation::{eval_g_derivatives, VariationalEnsemble};

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("adjoint interval is degenerate: tau = 0")]
    DegenerateInterval,
    #[error("regression needs at least {needed} paths for a basis of size {basis}, got {paths}")]
    IllConditioned { paths: usize, basis: usize, needed: usize },
    #[error("deterministic adjoint mode requires sigma = 0")]
    NotDeterministic,
    #[error("control grid does not match the ensemble grid")]
    GridMismatch,
}

/// Backward solver backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointMode {
    /// Pointwise backward stepping; requires sigma = 0 and yields q = 0.
    Deterministic,
    /// Least-squares backward induction on a monomial state basis.
    Regression { basis_degree: usize },
}

impl AdjointMode {
    pub fn regression() -> Self {
        AdjointMode::Regression { basis_degree: 2 }
    }

    /// Default backend for a problem.
    pub fn for_spec(spec: &ProblemSpec) -> Self {
        if spec.is_deterministic() {
            AdjointMode::Deterministic
        } else {
            AdjointMode::regression()
        }
    }
}

/// Costate trajectories on [0, tau]: values at every full grid node below
/// tau plus the interpolated terminal point tau itself.
///
/// Entry l < len-1 sits at grid node t_l; the last entry sits at tau.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    times: Vec<f64>,
    state_dim: usize,
    noise_dim: usize,
    path_count: usize,
    /// Per-path costate values, laid out [path][entry][m].
    p: Vec<f64>,
    /// Per-path martingale-integrand values, laid out [path][entry][m*d].
    q: Vec<f64>,
    /// Fitted regression coefficients per backward step (regression mode).
    pub regression_coefficients: Option<Vec<Vec<f64>>>,
    mode: AdjointMode,
}

impl AdjointPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mode(&self) -> AdjointMode {
        self.mode
    }

    pub fn time(&self, l: usize) -> f64 {
        self.times[l]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn tau(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn p_path(&self, path: usize, l: usize) -> &[f64] {
        let m = self.state_dim;
        let stride = self.times.len() * m;
        &self.p[path * stride + l * m..path * stride + l * m + m]
    }

    pub fn q_path(&self, path: usize, l: usize) -> &[f64] {
        let md = self.state_dim * self.noise_dim;
        let stride = self.times.len() * md;
        &self.q[path * stride + l * md..path * stride + l * md + md]
    }

    pub fn p_mean(&self, l: usize) -> Vec<f64> {
        let m = self.state_dim;
        let mut acc = vec![0.0; m];
        for p in 0..self.path_count {
            for (slot, v) in acc.iter_mut().zip(self.p_path(p, l)) {
                *slot += v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= self.path_count as f64);
        acc
    }

    pub fn q_mean(&self, l: usize) -> Vec<f64> {
        let md = self.state_dim * self.noise_dim;
        let mut acc = vec![0.0; md];
        for p in 0..self.path_count {
            for (slot, v) in acc.iter_mut().zip(self.q_path(p, l)) {
                *slot += v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= self.path_count as f64);
        acc
    }

    pub fn path_count(&self) -> usize {
        self.path_count
    }
}

/// Adjoint node times below tau: every full grid node strictly before tau,
/// then tau itself. The final interval has width in (0, dt].
fn adjoint_times(grid: TimeGrid, tau: f64) -> Result<Vec<f64>, AdjointError> {
    if tau <= 0.0 {
        return Err(AdjointError::DegenerateInterval);
    }
    let dt = grid.dt();
    let j = ((tau / dt).ceil() as usize).clamp(1, grid.step_count());
    let mut times: Vec<f64> = (0..j).map(|i| grid.node(i)).collect();
    times.push(tau);
    Ok(times)
}

/// Source term of the backward drift: the running-cost gradient for the
/// principal adjoint, or the rate-integrand gradient for the auxiliary one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceKind {
    RunningCostGradient,
    RateGradient,
}

fn eval_source(
    kind: SourceKind,
    spec: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    buf: &mut CoeffBuffers,
    out: &mut [f64],
) {
    match kind {
        SourceKind::RunningCostGradient => {
            spec.coefficients().running_cost_x(x, u, out);
        }
        SourceKind::RateGradient => {
            let k = spec.control_dim();
            let mut g_u = vec![0.0; k];
            eval_g_derivatives(spec, x, u, buf, out, &mut g_u);
        }
    }
}

/// Solve the first-order adjoint pair backward on [0, tau]:
/// -dp = [b_x' p + sum_j sigma_x_j' q_j - f_x] dt - q dW,
/// p(tau) = -Psi_x(X(tau))'.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    ttr: &TerminalTimeResult,
    mode: AdjointMode,
) -> Result<AdjointPath, AdjointError> {
    solve_linear_backward(spec, base, control, ttr, mode, SourceKind::RunningCostGradient, true)
}

/// Solve the auxiliary adjoint pair (p0, q0): same backward dynamics with
/// the rate gradient g_x as source and zero terminal value.
pub fn solve_auxiliary_adjoint(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    ttr: &TerminalTimeResult,
    mode: AdjointMode,
) -> Result<AdjointPath, AdjointError> {
    solve_linear_backward(spec, base, control, ttr, mode, SourceKind::RateGradient, false)
}

fn solve_linear_backward(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    ttr: &TerminalTimeResult,
    mode: AdjointMode,
    source: SourceKind,
    terminal_from_psi: bool,
) -> Result<AdjointPath, AdjointError> {
    if control.grid() != base.grid() {
        return Err(AdjointError::GridMismatch);
    }
    let grid = base.grid();
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let paths = base.path_count();
    let times = adjoint_times(grid, ttr.tau)?;
    let entries = times.len();
    let coeffs = spec.coefficients();

    let basis = match mode {
        AdjointMode::Deterministic => {
            if !spec.is_deterministic() {
                return Err(AdjointError::NotDeterministic);
            }
            None
        }
        AdjointMode::Regression { basis_degree } => {
            let nb = basis_size(m, basis_degree);
            if paths < 10 * nb {
                return Err(AdjointError::IllConditioned { paths, basis: nb, needed: 10 * nb });
            }
            Some(basis_degree)
        }
    };

    let mut p = vec![0.0; paths * entries * m];
    let mut q = vec![0.0; paths * entries * m * d];
    let mut regression_coefficients: Vec<Vec<f64>> = Vec::new();

    // Terminal values at tau on interpolated terminal states.
    let last_cell = grid.cell_of(times[entries - 2].min(grid.horizon() - 0.5 * grid.dt()));
    let tau_cell =
        if ttr.tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(ttr.tau).max(last_cell) };
    {
        let mut buf = CoeffBuffers::for_spec(spec);
        let mut x_tau = vec![0.0; m];
        for path in 0..paths {
            base.state_at(path, tau_cell, ttr.tau, &mut x_tau);
            let stride = entries * m;
            let slot = &mut p[path * stride + (entries - 1) * m..path * stride + entries * m];
            if terminal_from_psi {
                coeffs.terminal_cost_x(&x_tau, &mut buf.terminal_cost_x);
                for r in 0..m {
                    slot[r] = -buf.terminal_cost_x[r];
                }
            } else {
                slot.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    // Backward sweep. Coefficients are evaluated at the interval's left node.
    let mut buf = CoeffBuffers::for_spec(spec);
    let mut src = vec![0.0; m];
    let mut p_next = vec![0.0; m];
    let mut targets = vec![0.0; paths * m];
    let mut q_targets = vec![0.0; paths * m * d];
    for l in (0..entries - 1).rev() {
        let delta = times[l + 1] - times[l];
        let cell = grid.cell_of(times[l]);
        let u = control.cell(cell);
        match basis {
            None => {
                // sigma = 0: single pointwise backward step per path, q = 0.
                for path in 0..paths {
                    let x = base.state(path, l);
                    eval_source(source, spec, x, u, &mut buf, &mut src);
                    coeffs.drift_x(x, u, &mut buf.drift_x);
                    let stride = entries * m;
                    p_next.copy_from_slice(&p[path * stride + (l + 1) * m..path * stride + (l + 2) * m]);
                    let slot = &mut p[path * stride + l * m..path * stride + (l + 1) * m];
                    for r in 0..m {
                        let mut drift = -src[r];
                        for c in 0..m {
                            drift += buf.drift_x[c * m + r] * p_next[c];
                        }
                        slot[r] = p_next[r] + drift * delta;
                    }
                }
            }
            Some(degree) => {
                // q_j(x) ~ E[p(t_{l+1}) dW_j / dt | X_l], then
                // p(x) ~ E[p(t_{l+1}) + (b_x' p + sum sigma_x_j' q_j - src) delta | X_l].
                let design = DesignMatrix::build(base, l, degree);
                let mut step_coefs = Vec::new();
                for path in 0..paths {
                    let stride = entries * m;
                    let p_next = &p[path * stride + (l + 1) * m..path * stride + (l + 2) * m];
                    let dw = base.increment(path, cell);
                    for j in 0..d {
                        for r in 0..m {
                            q_targets[path * m * d + j * m + r] = p_next[r] * dw[j] / grid.dt();
                        }
                    }
                }
                for jr in 0..m * d {
                    let column: Vec<f64> =
                        (0..paths).map(|path| q_targets[path * m * d + jr]).collect();
                    let (fitted, coefs) = design.fit(&column);
                    step_coefs.extend_from_slice(&coefs);
                    let qstride = entries * m * d;
                    for path in 0..paths {
                        q[path * qstride + l * m * d + jr] = fitted[path];
                    }
                }
                for path in 0..paths {
                    let x = base.state(path, l);
                    eval_source(source, spec, x, u, &mut buf, &mut src);
                    coeffs.drift_x(x, u, &mut buf.drift_x);
                    coeffs.diffusion_x(x, u, &mut buf.diffusion_x);
                    let stride = entries * m;
                    let qstride = entries * m * d;
                    p_next.copy_from_slice(
                        &p[path * stride + (l + 1) * m..path * stride + (l + 2) * m],
                    );
                    let q_here = &q[path * qstride + l * m * d..path * qstride + (l + 1) * m * d];
                    for r in 0..m {
                        let mut drift = -src[r];
                        for c in 0..m {
                            drift += buf.drift_x[c * m + r] * p_next[c];
                        }
                        for j in 0..d {
                            let sx = &buf.diffusion_x[j * m * m..(j + 1) * m * m];
                            for c in 0..m {
                                drift += sx[c * m + r] * q_here[j * m + c];
                            }
                        }
                        targets[path * m + r] = p_next[r] + drift * delta;
                    }
                }
                for r in 0..m {
                    let column: Vec<f64> = (0..paths).map(|path| targets[path * m + r]).collect();
                    let (fitted, coefs) = design.fit(&column);
                    step_coefs.extend_from_slice(&coefs);
                    let stride = entries * m;
                    for path in 0..paths {
                        p[path * stride + l * m + r] = fitted[path];
                    }
                }
                regression_coefficients.push(step_coefs);
            }
        }
    }

    // q at the terminal entry repeats the last regression step.
    if basis.is_some() && entries >= 2 {
        let qstride = entries * m * d;
        for path in 0..paths {
            let (head, tail) = q[path * qstride..(path + 1) * qstride].split_at_mut((entries - 1) * m * d);
            tail.copy_from_slice(&head[(entries - 2) * m * d..(entries - 1) * m * d]);
        }
    }

    regression_coefficients.reverse();
    Ok(AdjointPath {
        times,
        state_dim: m,
        noise_dim: d,
        path_count: paths,
        p,
        q,
        regression_coefficients: basis.map(|_| regression_coefficients),
        mode,
    })
}

fn basis_size(m: usize, degree: usize) -> usize {
    match degree {
        0 => 1,
        1 => 1 + m,
        _ => 1 + m + m * (m + 1) / 2,
    }
}

/// Monomial design matrix in the state at one grid node, with degenerate
/// columns dropped so that collapsed ensembles (all paths equal) reduce the
/// regression to a plain mean.
struct DesignMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
    kept: Vec<usize>,
    normal: Vec<f64>,
    full_width: usize,
}

impl DesignMatrix {
    fn build(base: &PathEnsemble, node: usize, degree: usize) -> Self {
        let m = base.state_dim();
        let paths = base.path_count();
        let full_width = basis_size(m, degree);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(full_width);
        columns.push(vec![1.0; paths]);
        if degree >= 1 {
            for a in 0..m {
                columns.push((0..paths).map(|p| base.state(p, node)[a]).collect());
            }
        }
        if degree >= 2 {
            for a in 0..m {
                for b in a..m {
                    columns.push(
                        (0..paths).map(|p| base.state(p, node)[a] * base.state(p, node)[b]).collect(),
                    );
                }
            }
        }
        // Keep the intercept and any column with real variation.
        let mut kept = vec![0usize];
        for (idx, col) in columns.iter().enumerate().skip(1) {
            let mean = col.iter().sum::<f64>() / paths as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / paths as f64;
            if var.sqrt() > 1e-10 * (1.0 + mean.abs()) {
                kept.push(idx);
            }
        }
        let nb = kept.len();
        let mut normal = vec![0.0; nb * nb];
        for (i, &ci) in kept.iter().enumerate() {
            for (j, &cj) in kept.iter().enumerate() {
                normal[i * nb + j] =
                    columns[ci].iter().zip(columns[cj].iter()).map(|(a, b)| a * b).sum();
            }
        }
        Self { rows: paths, columns, kept, normal, full_width }
    }

    /// Least-squares fit; returns fitted values per path and the coefficient
    /// vector padded to the full basis width (dropped columns get zero).
    fn fit(&self, target: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nb = self.kept.len();
        let mut rhs = vec![0.0; nb];
        for (i, &ci) in self.kept.iter().enumerate() {
            rhs[i] = self.columns[ci].iter().zip(target.iter()).map(|(a, b)| a * b).sum();
        }
        let coef = solve_symmetric(&self.normal, &rhs, nb);
        let mut fitted = vec![0.0; self.rows];
        for (i, &ci) in self.kept.iter().enumerate() {
            let c = coef[i];
            for (slot, v) in fitted.iter_mut().zip(self.columns[ci].iter()) {
                *slot += c * v;
            }
        }
        let mut padded = vec![0.0; self.full_width];
        for (i, &ci) in self.kept.iter().enumerate() {
            padded[ci] = coef[i];
        }
        (fitted, padded)
    }
}

/// Gaussian elimination with partial pivoting on a small dense system; a
/// vanishing pivot falls back to a tiny ridge on the diagonal.
fn solve_symmetric(matrix: &[f64], rhs: &[f64], n: usize) -> Vec<f64> {
    let mut a = matrix.to_vec();
    let mut b = rhs.to_vec();
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max).max(1.0);
    for i in 0..n {
        a[i * n + i] += 1e-12 * scale;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1 * n + col].abs().partial_cmp(&a[r2 * n + col].abs()).unwrap())
            .unwrap();
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            for c in col..n {
                a[row * n + c] -= factor * a[col * n + c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[row * n + c] * x[c];
        }
        x[row] = acc / a[row * n + row];
    }
    x
}

/// Hamiltonian H(x, u, p, q) = b' p + sum_j sigma_j' q_j - f.
pub fn hamiltonian(
    spec: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    buf: &mut CoeffBuffers,
) -> f64 {
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let coeffs = spec.coefficients();
    coeffs.drift(x, u, &mut buf.drift);
    let mut h: f64 = (0..m).map(|r| buf.drift[r] * p[r]).sum();
    if !spec.is_deterministic() {
        coeffs.diffusion(x, u, &mut buf.diffusion);
        for j in 0..d {
            for r in 0..m {
                h += buf.diffusion[j * m + r] * q[j * m + r];
            }
        }
    }
    h - coeffs.running_cost(x, u)
}

/// Control gradient H_u = b_u' p + sum_j sigma_u_j' q_j - f_u.
pub fn hamiltonian_u(
    spec: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    buf: &mut CoeffBuffers,
    out: &mut [f64],
) {
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    coeffs.drift_u(x, u, &mut buf.drift_u);
    coeffs.running_cost_u(x, u, &mut buf.running_cost_u);
    for c in 0..k {
        let mut acc = -buf.running_cost_u[c];
        for r in 0..m {
            acc += buf.drift_u[r * k + c] * p[r];
        }
        out[c] = acc;
    }
    if !spec.is_deterministic() {
        coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
        for j in 0..d {
            let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
            for c in 0..k {
                for r in 0..m {
                    out[c] += su[r * k + c] * q[j * m + r];
                }
            }
        }
    }
}

/// Both sides of the duality identity behind the maximum principle:
/// E[-Psi_x(X(tau))' y(tau)] =
/// int_0^tau E[p' b_u v + sum_j q_j' sigma_u_j v + f_x' y] dt.
#[derive(Debug, Clone, Copy)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
    /// Combined standard error of the two sides (0 in deterministic mode).
    pub std_error: f64,
}

pub fn duality_check(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    direction: &ControlPath,
    ttr: &TerminalTimeResult,
    adjoint: &AdjointPath,
    y: &VariationalEnsemble,
) -> DualityReport {
    let grid = base.grid();
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    let entries = adjoint.len();
    let tau = ttr.tau;
    let tau_cell = if tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(tau) };

    let mut buf = CoeffBuffers::for_spec(spec);
    let mut x_here = vec![0.0; m];
    let mut y_here = vec![0.0; m];
    let mut lhs_samples = vec![0.0; base.path_count()];
    let mut rhs_samples = vec![0.0; base.path_count()];
    let mut integrand = vec![0.0; entries];
    for path in 0..base.path_count() {
        base.state_at(path, tau_cell, tau, &mut x_here);
        y.state_at(path, tau_cell, tau, &mut y_here);
        coeffs.terminal_cost_x(&x_here, &mut buf.terminal_cost_x);
        lhs_samples[path] = -(0..m).map(|r| buf.terminal_cost_x[r] * y_here[r]).sum::<f64>();

        for l in 0..entries {
            let t = adjoint.time(l);
            let cell = grid.cell_of(t.min(grid.horizon() - 0.5 * grid.dt()));
            let u = control.cell(cell);
            let v = direction.cell(cell);
            let (x, yv): (&[f64], &[f64]) = if l + 1 == entries {
                base.state_at(path, tau_cell, tau, &mut x_here);
                y.state_at(path, tau_cell, tau, &mut y_here);
                (&x_here, &y_here)
            } else {
                (base.state(path, l), y.state(path, l))
            };
            let p_val = adjoint.p_path(path, l);
            let q_val = adjoint.q_path(path, l);
            coeffs.drift_u(x, u, &mut buf.drift_u);
            coeffs.running_cost_x(x, u, &mut buf.running_cost_x);
            let mut acc = 0.0;
            for r in 0..m {
                for c in 0..k {
                    acc += p_val[r] * buf.drift_u[r * k + c] * v[c];
                }
                acc += buf.running_cost_x[r] * yv[r];
            }
            if !spec.is_deterministic() {
                coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
                for j in 0..d {
                    let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
                    for r in 0..m {
                        for c in 0..k {
                            acc += q_val[j * m + r] * su[r * k + c] * v[c];
                        }
                    }
                }
            }
            integrand[l] = acc;
        }
        rhs_samples[path] = util::trapezoid_times(adjoint.times(), &integrand);
    }
    let (lhs, lhs_se) = util::mean_and_se(&lhs_samples);
    let (rhs, rhs_se) = util::mean_and_se(&rhs_samples);
    DualityReport {
        lhs,
        rhs,
        defect: (lhs - rhs).abs(),
        std_error: (lhs_se * lhs_se + rhs_se * rhs_se).sqrt(),
    }
}

/// Dual representation of the integrated directional rate:
/// int_0^tau E[g_x' y + g_u' v] dt = int_0^tau E[-script_H_u v] dt with
/// -script_H_u = g_u - b_u' p0 - sum_j sigma_u_j' q0_j.
///
/// Cross-validates the variation engine's directional rate against the
/// auxiliary adjoint pair.
pub fn rate_dual_check(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    control: &ControlPath,
    direction: &ControlPath,
    ttr: &TerminalTimeResult,
    aux: &AdjointPath,
    y: &VariationalEnsemble,
) -> DualityReport {
    let grid = base.grid();
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    let entries = aux.len();
    let tau = ttr.tau;
    let tau_cell = if tau >= grid.horizon() { grid.step_count() - 1 } else { grid.cell_of(tau) };

    let mut buf = CoeffBuffers::for_spec(spec);
    let mut g_x = vec![0.0; m];
    let mut g_u = vec![0.0; k];
    let mut x_here = vec![0.0; m];
    let mut y_here = vec![0.0; m];
    let mut lhs_samples = vec![0.0; base.path_count()];
    let mut rhs_samples = vec![0.0; base.path_count()];
    let mut lhs_integrand = vec![0.0; entries];
    let mut rhs_integrand = vec![0.0; entries];
    for path in 0..base.path_count() {
        for l in 0..entries {
            let t = aux.time(l);
            let cell = grid.cell_of(t.min(grid.horizon() - 0.5 * grid.dt()));
            let u = control.cell(cell);
            let v = direction.cell(cell);
            let (x, yv): (&[f64], &[f64]) = if l + 1 == entries {
                base.state_at(path, tau_cell, tau, &mut x_here);
                y.state_at(path, tau_cell, tau, &mut y_here);
                (&x_here, &y_here)
            } else {
                (base.state(path, l), y.state(path, l))
            };
            eval_g_derivatives(spec, x, u, &mut buf, &mut g_x, &mut g_u);
            let mut lhs_acc = 0.0;
            for r in 0..m {
                lhs_acc += g_x[r] * yv[r];
            }
            for c in 0..k {
                lhs_acc += g_u[c] * v[c];
            }
            lhs_integrand[l] = lhs_acc;

            let p0 = aux.p_path(path, l);
            let q0 = aux.q_path(path, l);
            coeffs.drift_u(x, u, &mut buf.drift_u);
            let mut rhs_acc = 0.0;
            for c in 0..k {
                let mut minus_hu = g_u[c];
                for r in 0..m {
                    minus_hu -= buf.drift_u[r * k + c] * p0[r];
                }
                if !spec.is_deterministic() {
                    coeffs.diffusion_u(x, u, &mut buf.diffusion_u);
                    for j in 0..d {
                        let su = &buf.diffusion_u[j * m * k..(j + 1) * m * k];
                        for r in 0..m {
                            minus_hu -= su[r * k + c] * q0[j * m + r];
                        }
                    }
                }
                rhs_acc += minus_hu * v[c];
            }
            rhs_integrand[l] = rhs_acc;
        }
        lhs_samples[path] = util::trapezoid_times(aux.times(), &lhs_integrand);
        rhs_samples[path] = util::trapezoid_times(aux.times(), &rhs_integrand);
    }
    let (lhs, lhs_se) = util::mean_and_se(&lhs_samples);
    let (rhs, rhs_se) = util::mean_and_se(&rhs_samples);
    DualityReport {
        lhs,
        rhs,
        defect: (lhs - rhs).abs(),
        std_error: (lhs_se * lhs_se + rhs_se * rhs_se).sqrt(),
    }
}
