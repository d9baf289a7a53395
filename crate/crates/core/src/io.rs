//! File emission: fixed-header CSV artifacts and stable JSON reports.
//!
//! Float formatting goes through the shortest-roundtrip Display path, so a
//! bit-identical computation yields byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::adjoint::AdjointPath;
use crate::forward::{MeanCurve, SampledCurve};
use crate::optimizer::OptimizerTrace;
use crate::problem::ControlPath;
use crate::verifier::SmpReport;

fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)
}

/// `t,m,se` rows of a mean curve.
pub fn mean_curve_csv(curve: &MeanCurve) -> String {
    let mut out = String::from("t,m,se\n");
    for i in 0..curve.grid.node_count() {
        let _ = writeln!(out, "{},{},{}", curve.grid.node(i), curve.values[i], curve.std_errors[i]);
    }
    out
}

/// `t,<name>,se` rows of a sampled curve (h, hbar, ...).
pub fn sampled_curve_csv(curve: &SampledCurve, name: &str) -> String {
    let mut out = format!("t,{name},se\n");
    for i in 0..curve.grid.node_count() {
        let _ = writeln!(out, "{},{},{}", curve.grid.node(i), curve.values[i], curve.std_errors[i]);
    }
    out
}

/// `rho,quotient` rows of a difference-quotient table.
pub fn quotients_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("rho,quotient\n");
    for (rho, quotient) in rows {
        let _ = writeln!(out, "{rho},{quotient}");
    }
    out
}

/// `component,value` rows of a cost-variation breakdown.
pub fn components_csv(components: &[(&str, f64)]) -> String {
    let mut out = String::from("component,value\n");
    for (name, value) in components {
        let _ = writeln!(out, "{name},{value}");
    }
    out
}

/// `t,u_1..u_k` rows of a control path (cell values at cell left edges).
pub fn control_csv(control: &ControlPath) -> String {
    let k = control.control_dim();
    let mut out = String::from("t");
    for c in 1..=k {
        let _ = write!(out, ",u_{c}");
    }
    out.push('\n');
    for i in 0..control.grid().step_count() {
        let _ = write!(out, "{}", control.grid().node(i));
        for c in 0..k {
            let _ = write!(out, ",{}", control.cell(i)[c]);
        }
        out.push('\n');
    }
    out
}

/// `t,p_1..p_m,q_11..q_md` rows of mean adjoint trajectories.
pub fn adjoint_csv(adjoint: &AdjointPath, state_dim: usize, noise_dim: usize) -> String {
    let mut out = String::from("t");
    for r in 1..=state_dim {
        let _ = write!(out, ",p_{r}");
    }
    for r in 1..=state_dim {
        for j in 1..=noise_dim {
            let _ = write!(out, ",q_{r}{j}");
        }
    }
    out.push('\n');
    for l in 0..adjoint.len() {
        let _ = write!(out, "{}", adjoint.time(l));
        let p = adjoint.p_mean(l);
        for value in &p {
            let _ = write!(out, ",{value}");
        }
        let q = adjoint.q_mean(l);
        for r in 0..state_dim {
            for j in 0..noise_dim {
                let _ = write!(out, ",{}", q[j * state_dim + r]);
            }
        }
        out.push('\n');
    }
    out
}

/// `step,coef_index,value` rows of the fitted regression coefficients per
/// backward step (regression-mode adjoints only).
pub fn regression_coefficients_csv(adjoint: &AdjointPath) -> Option<String> {
    let coefs = adjoint.regression_coefficients.as_ref()?;
    let mut out = String::from("step,coef_index,value\n");
    for (step, row) in coefs.iter().enumerate() {
        for (idx, value) in row.iter().enumerate() {
            let _ = writeln!(out, "{step},{idx},{value}");
        }
    }
    Some(out)
}

/// `iter,J,tau,case,violation,step` rows of an optimizer trace.
pub fn trace_csv(trace: &OptimizerTrace) -> String {
    let mut out = String::from("iter,J,tau,case,violation,step\n");
    for rec in &trace.iterates {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            rec.iter, rec.cost, rec.tau, rec.case_tag, rec.max_violation, rec.step
        );
    }
    out
}

/// `t,u,lhs` rows of an inequality probe table (scalar controls; higher
/// control dimensions list the probe coordinates joined by ';').
pub fn probe_table_csv(report: &SmpReport) -> String {
    let mut out = String::from("t,u,lhs\n");
    for row in &report.probes {
        let probe = row
            .probe
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(out, "{},{},{}", row.time, probe, row.lhs);
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> io::Result<()> {
    write_atomic(path, contents)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    body.push('\n');
    write_atomic(path, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{mean_phi, simulate, McConfig};
    use crate::problem::TimeGrid;
    use crate::registry;

    #[test]
    fn csv_headers_match_the_interface_contract() {
        let spec = registry::builtin("example-affine").unwrap();
        let grid = TimeGrid::new(10, spec.horizon()).unwrap();
        let control = ControlPath::constant(grid, &[1.0], spec.control_box()).unwrap();
        let ens = simulate(&spec, &control, &McConfig::deterministic()).unwrap();
        let mean = mean_phi(&ens, &spec);
        assert!(mean_curve_csv(&mean).starts_with("t,m,se\n"));
        let h = crate::forward::h_curve(&ens, &spec, &control);
        assert!(sampled_curve_csv(&h, "h").starts_with("t,h,se\n"));
        assert!(control_csv(&control).starts_with("t,u_1\n"));
        assert!(quotients_csv(&[(0.1, 0.9)]).contains("rho,quotient"));
    }
}
