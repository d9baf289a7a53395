//! Shared numerical helpers: quadrature, interpolation, sample statistics
//! and reproducible per-path random streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Composite trapezoid rule over uniformly spaced nodes `values[0..=n]`.
pub fn trapezoid_uniform(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    dt * (0.5 * (values[0] + values[values.len() - 1]) + interior)
}

/// Trapezoid rule over explicitly listed (possibly non-uniform) node times.
pub fn trapezoid_times(times: &[f64], values: &[f64]) -> f64 {
    assert_eq!(times.len(), values.len());
    let mut acc = 0.0;
    for i in 1..times.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (times[i] - times[i - 1]);
    }
    acc
}

/// Running trapezoid partial sums: out[i] = integral over [t_0, t_i].
pub fn trapezoid_partials(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..values.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * dt;
        out.push(acc);
    }
    out
}

/// Trapezoid integral of a uniformly sampled curve over [0, t], with a
/// fractional final cell ending at the interpolated value.
pub fn trapezoid_to(values: &[f64], dt: f64, t: f64) -> f64 {
    let n = values.len() - 1;
    let s = (t / dt).clamp(0.0, n as f64);
    let cell = (s.floor() as usize).min(n.saturating_sub(1));
    let mut acc = 0.0;
    for i in 0..cell {
        acc += 0.5 * (values[i] + values[i + 1]) * dt;
    }
    let t_cell = cell as f64 * dt;
    acc + 0.5 * (values[cell] + interp_uniform(values, dt, t)) * (t - t_cell)
}

/// Linear interpolation of a curve sampled at uniform nodes, evaluated at `t`.
///
/// `t` is clamped to the sampled range.
pub fn interp_uniform(values: &[f64], dt: f64, t: f64) -> f64 {
    let n = values.len() - 1;
    let s = (t / dt).clamp(0.0, n as f64);
    let i = (s.floor() as usize).min(n.saturating_sub(1));
    let frac = s - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// Sample mean and standard error of the mean.
///
/// Returns (mean, se). With fewer than two samples the se is 0.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Median of the absolute successive differences |x[i+1] - x[i]|.
///
/// Robust scale of one-step variation; 0 for constant or single-node input.
pub fn median_abs_step(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut steps: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    steps.sort_by(|a, b| a.partial_cmp(b).expect("non-finite step"));
    let n = steps.len();
    if n % 2 == 1 {
        steps[n / 2]
    } else {
        0.5 * (steps[n / 2 - 1] + steps[n / 2])
    }
}

/// Reproducible random stream for one simulated path.
///
/// The stream is a pure function of (seed, path index), so ensembles are
/// bit-identical regardless of how paths are scheduled across workers.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(path as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"vttpaths");
    ChaCha8Rng::from_seed(key)
}

/// Neville polynomial extrapolation of tabulated (h, value) pairs to h = 0.
///
/// Used for Richardson extrapolation of finite-difference quotients; `order`
/// is the power of h in the leading error term (1 for one-sided, 2 for
/// central differences).
pub fn richardson_extrapolate(pairs: &[(f64, f64)], order: u32) -> f64 {
    assert!(!pairs.is_empty());
    let n = pairs.len();
    let xs: Vec<f64> = pairs.iter().map(|(h, _)| h.powi(order as i32)).collect();
    let mut tableau: Vec<f64> = pairs.iter().map(|&(_, v)| v).collect();
    for level in 1..n {
        for i in 0..n - level {
            let denom = xs[i] - xs[i + level];
            tableau[i] = (xs[i] * tableau[i + 1] - xs[i + level] * tableau[i]) / denom;
        }
    }
    tableau[0]
}
