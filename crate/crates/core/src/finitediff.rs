//! Finite-difference backing for problems without analytic derivatives, and
//! the consistency probe that cross-checks supplied derivatives against
//! central differences.

use std::sync::Arc;

use rand::Rng;

use crate::problem::{Coefficients, ProblemSpec};

/// Base coefficient functions only; derivatives are filled in numerically by
/// [`FiniteDifferenceCoefficients`].
pub trait BaseFunctions: Send + Sync {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn constraint(&self, x: &[f64]) -> f64;
}

/// Step size h = eps^(1/3) * max(1, |coordinate|) for first differences.
fn first_order_step(coord: f64) -> f64 {
    f64::EPSILON.cbrt() * coord.abs().max(1.0)
}

/// Larger step for the nested third-derivative stencil. The cube-root step
/// leaves O(eps/h^3) = O(1) roundoff noise in a third difference, so the
/// exponent backs off to 1/5 there.
fn third_order_step(coord: f64) -> f64 {
    f64::EPSILON.powf(0.2) * coord.abs().max(1.0)
}

/// Derivatives of the base functions via central finite differences.
pub struct FiniteDifferenceCoefficients<F: BaseFunctions> {
    base: F,
    state_dim: usize,
    noise_dim: usize,
    control_dim: usize,
}

impl<F: BaseFunctions> FiniteDifferenceCoefficients<F> {
    pub fn new(base: F, state_dim: usize, noise_dim: usize, control_dim: usize) -> Self {
        Self { base, state_dim, noise_dim, control_dim }
    }

    /// Central difference in state coordinate `c` of a vector-valued map.
    fn central_x(
        &self,
        eval: impl Fn(&[f64], &mut [f64]),
        x: &[f64],
        c: usize,
        out_len: usize,
    ) -> Vec<f64> {
        let h = first_order_step(x[c]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let mut fp = vec![0.0; out_len];
        let mut fm = vec![0.0; out_len];
        eval(&xp, &mut fp);
        eval(&xm, &mut fm);
        fp.iter().zip(fm.iter()).map(|(p, m)| (p - m) / (2.0 * h)).collect()
    }

    fn constraint_hessian_at(&self, x: &[f64], step: fn(f64) -> f64, out: &mut [f64]) {
        let m = self.state_dim;
        for a in 0..m {
            let ha = step(x[a]);
            for b in a..m {
                let v = if a == b {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[a] += ha;
                    xm[a] -= ha;
                    (self.base.constraint(&xp) - 2.0 * self.base.constraint(x)
                        + self.base.constraint(&xm))
                        / (ha * ha)
                } else {
                    let hb = step(x[b]);
                    let mut xpp = x.to_vec();
                    let mut xpm = x.to_vec();
                    let mut xmp = x.to_vec();
                    let mut xmm = x.to_vec();
                    xpp[a] += ha;
                    xpp[b] += hb;
                    xpm[a] += ha;
                    xpm[b] -= hb;
                    xmp[a] -= ha;
                    xmp[b] += hb;
                    xmm[a] -= ha;
                    xmm[b] -= hb;
                    (self.base.constraint(&xpp) - self.base.constraint(&xpm)
                        - self.base.constraint(&xmp)
                        + self.base.constraint(&xmm))
                        / (4.0 * ha * hb)
                };
                out[a * m + b] = v;
                out[b * m + a] = v;
            }
        }
    }
}

fn scalar_gradient(
    f: impl Fn(&[f64]) -> f64,
    point: &[f64],
    out: &mut [f64],
) {
    for c in 0..point.len() {
        let h = first_order_step(point[c]);
        let mut xp = point.to_vec();
        let mut xm = point.to_vec();
        xp[c] += h;
        xm[c] -= h;
        out[c] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
}

fn scalar_hessian(f: impl Fn(&[f64]) -> f64 + Copy, point: &[f64], out: &mut [f64]) {
    let m = point.len();
    for a in 0..m {
        let ha = first_order_step(point[a]);
        for b in a..m {
            let v = if a == b {
                let mut xp = point.to_vec();
                let mut xm = point.to_vec();
                xp[a] += ha;
                xm[a] -= ha;
                (f(&xp) - 2.0 * f(point) + f(&xm)) / (ha * ha)
            } else {
                let hb = first_order_step(point[b]);
                let mut xpp = point.to_vec();
                let mut xpm = point.to_vec();
                let mut xmp = point.to_vec();
                let mut xmm = point.to_vec();
                xpp[a] += ha;
                xpp[b] += hb;
                xpm[a] += ha;
                xpm[b] -= hb;
                xmp[a] -= ha;
                xmp[b] += hb;
                xmm[a] -= ha;
                xmm[b] -= hb;
                (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * ha * hb)
            };
            out[a * m + b] = v;
            out[b * m + a] = v;
        }
    }
}

impl<F: BaseFunctions> Coefficients for FiniteDifferenceCoefficients<F> {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.base.drift(x, u, out);
    }

    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.base.diffusion(x, u, out);
    }

    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.base.running_cost(x, u)
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.base.terminal_cost(x)
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        self.base.constraint(x)
    }

    fn drift_x(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let m = self.state_dim;
        for c in 0..m {
            let col = self.central_x(|xx, o| self.base.drift(xx, u, o), x, c, m);
            for r in 0..m {
                out[r * m + c] = col[r];
            }
        }
    }

    fn drift_u(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (m, k) = (self.state_dim, self.control_dim);
        for c in 0..k {
            let h = first_order_step(u[c]);
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[c] += h;
            um[c] -= h;
            let mut fp = vec![0.0; m];
            let mut fm = vec![0.0; m];
            self.base.drift(x, &up, &mut fp);
            self.base.drift(x, &um, &mut fm);
            for r in 0..m {
                out[r * k + c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
    }

    fn diffusion_x(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (m, d) = (self.state_dim, self.noise_dim);
        for c in 0..m {
            let col = self.central_x(|xx, o| self.base.diffusion(xx, u, o), x, c, m * d);
            for j in 0..d {
                for r in 0..m {
                    out[j * m * m + r * m + c] = col[j * m + r];
                }
            }
        }
    }

    fn diffusion_u(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (m, d, k) = (self.state_dim, self.noise_dim, self.control_dim);
        for c in 0..k {
            let h = first_order_step(u[c]);
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[c] += h;
            um[c] -= h;
            let mut fp = vec![0.0; m * d];
            let mut fm = vec![0.0; m * d];
            self.base.diffusion(x, &up, &mut fp);
            self.base.diffusion(x, &um, &mut fm);
            for j in 0..d {
                for r in 0..m {
                    out[j * m * k + r * k + c] = (fp[j * m + r] - fm[j * m + r]) / (2.0 * h);
                }
            }
        }
    }

    fn running_cost_x(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        scalar_gradient(|xx| self.base.running_cost(xx, u), x, out);
    }

    fn running_cost_u(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        scalar_gradient(|uu| self.base.running_cost(x, uu), u, out);
    }

    fn terminal_cost_x(&self, x: &[f64], out: &mut [f64]) {
        scalar_gradient(|xx| self.base.terminal_cost(xx), x, out);
    }

    fn terminal_cost_xx(&self, x: &[f64], out: &mut [f64]) {
        scalar_hessian(|xx| self.base.terminal_cost(xx), x, out);
    }

    fn constraint_x(&self, x: &[f64], out: &mut [f64]) {
        scalar_gradient(|xx| self.base.constraint(xx), x, out);
    }

    fn constraint_xx(&self, x: &[f64], out: &mut [f64]) {
        scalar_hessian(|xx| self.base.constraint(xx), x, out);
    }

    fn constraint_xxx(&self, x: &[f64], out: &mut [f64]) {
        // Nested central difference of the Hessian stencil, both at the
        // backed-off step size.
        let m = self.state_dim;
        let mut hp = vec![0.0; m * m];
        let mut hm = vec![0.0; m * m];
        for c in 0..m {
            let h = third_order_step(x[c]);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            self.constraint_hessian_at(&xp, third_order_step, &mut hp);
            self.constraint_hessian_at(&xm, third_order_step, &mut hm);
            for a in 0..m {
                for b in 0..m {
                    out[a * m * m + b * m + c] = (hp[a * m + b] - hm[a * m + b]) / (2.0 * h);
                }
            }
        }
    }
}

/// Worst relative mismatch between a problem's supplied derivatives and
/// central finite differences of its own base functions, probed at `samples`
/// random points drawn inside the control box and a state cube around x0.
///
/// First-order fields are probed against differences of the functions; the
/// Hessians against differences of the supplied gradients, and the third
/// derivative against differences of the supplied Hessian, giving every
/// field an independent reference.
pub fn max_relative_derivative_mismatch(
    spec: &ProblemSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    let (m, d, k) = (spec.state_dim(), spec.noise_dim(), spec.control_dim());
    let coeffs = spec.coefficients();
    let mut worst: f64 = 0.0;

    let mut record = |analytic: &[f64], numeric: &[f64]| {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let scale = a.abs().max(n.abs()).max(1.0);
            worst = worst.max((a - n).abs() / scale);
        }
    };

    for _ in 0..samples {
        let x: Vec<f64> = (0..m)
            .map(|i| spec.initial_state()[i] + rng.random_range(-1.0..1.0))
            .collect();
        let u: Vec<f64> = spec
            .control_box()
            .iter()
            .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
            .collect();

        // First-order blocks vs differences of the base functions.
        let probe = ProbeFunctions { coeffs };
        let fd = FiniteDifferenceCoefficients::new(probe, m, d, k);

        let mut a = vec![0.0; m * m];
        let mut n = vec![0.0; m * m];
        coeffs.drift_x(&x, &u, &mut a);
        fd.drift_x(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; m * k];
        let mut n = vec![0.0; m * k];
        coeffs.drift_u(&x, &u, &mut a);
        fd.drift_u(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; d * m * m];
        let mut n = vec![0.0; d * m * m];
        coeffs.diffusion_x(&x, &u, &mut a);
        fd.diffusion_x(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; d * m * k];
        let mut n = vec![0.0; d * m * k];
        coeffs.diffusion_u(&x, &u, &mut a);
        fd.diffusion_u(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; m];
        let mut n = vec![0.0; m];
        coeffs.running_cost_x(&x, &u, &mut a);
        fd.running_cost_x(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; k];
        let mut n = vec![0.0; k];
        coeffs.running_cost_u(&x, &u, &mut a);
        fd.running_cost_u(&x, &u, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; m];
        let mut n = vec![0.0; m];
        coeffs.terminal_cost_x(&x, &mut a);
        fd.terminal_cost_x(&x, &mut n);
        record(&a, &n);

        let mut a = vec![0.0; m];
        let mut n = vec![0.0; m];
        coeffs.constraint_x(&x, &mut a);
        fd.constraint_x(&x, &mut n);
        record(&a, &n);

        // Second and third order vs differences of the supplied lower order.
        let mut a = vec![0.0; m * m];
        coeffs.terminal_cost_xx(&x, &mut a);
        let mut n = vec![0.0; m * m];
        for c in 0..m {
            let h = first_order_step(x[c]);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let mut gp = vec![0.0; m];
            let mut gm = vec![0.0; m];
            coeffs.terminal_cost_x(&xp, &mut gp);
            coeffs.terminal_cost_x(&xm, &mut gm);
            for r in 0..m {
                n[r * m + c] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        record(&a, &n);

        let mut a = vec![0.0; m * m];
        coeffs.constraint_xx(&x, &mut a);
        let mut n = vec![0.0; m * m];
        for c in 0..m {
            let h = first_order_step(x[c]);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let mut gp = vec![0.0; m];
            let mut gm = vec![0.0; m];
            coeffs.constraint_x(&xp, &mut gp);
            coeffs.constraint_x(&xm, &mut gm);
            for r in 0..m {
                n[r * m + c] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        record(&a, &n);

        let mut a = vec![0.0; m * m * m];
        coeffs.constraint_xxx(&x, &mut a);
        let mut n = vec![0.0; m * m * m];
        for c in 0..m {
            let h = first_order_step(x[c]);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let mut gp = vec![0.0; m * m];
            let mut gm = vec![0.0; m * m];
            coeffs.constraint_xx(&xp, &mut gp);
            coeffs.constraint_xx(&xm, &mut gm);
            for r in 0..m * m {
                n[r * m + c] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        record(&a, &n);
    }
    worst
}

/// Adapter viewing any [`Coefficients`] as bare base functions, so the
/// consistency probe can re-differentiate them numerically.
struct ProbeFunctions<'a> {
    coeffs: &'a dyn Coefficients,
}

impl BaseFunctions for ProbeFunctions<'_> {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.coeffs.drift(x, u, out);
    }
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.coeffs.diffusion(x, u, out);
    }
    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.coeffs.running_cost(x, u)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.coeffs.terminal_cost(x)
    }
    fn constraint(&self, x: &[f64]) -> f64 {
        self.coeffs.constraint(x)
    }
}

/// Wrap base functions into a full coefficient set with finite-difference
/// derivatives (the generic-problem path).
pub fn finite_difference_derivatives<F: BaseFunctions + 'static>(
    base: F,
    state_dim: usize,
    noise_dim: usize,
    control_dim: usize,
) -> Arc<dyn Coefficients> {
    Arc::new(FiniteDifferenceCoefficients::new(base, state_dim, noise_dim, control_dim))
}
