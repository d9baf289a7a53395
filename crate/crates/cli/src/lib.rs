//! Batch experiment front end: problem configuration, subcommand dispatch,
//! machine-readable artifacts, and one-command reproduction of the
//! reference results.
//!
//! Exit codes: 0 on success, 1 when a requested certification fails
//! (refuted or degenerate verdicts, failing reproduction rows), 2 on usage
//! or configuration errors.

pub mod config;
pub mod reproduce;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use vtt_core::adjoint::{
    duality_check, rate_dual_check, solve_adjoint, solve_auxiliary_adjoint, AdjointError,
    AdjointMode,
};
use vtt_core::finitediff;
use vtt_core::forward::{run_forward, ForwardError, HittingOptions};
use vtt_core::io;
use vtt_core::optimizer::{improve, OptimizerError, OptimizerOptions, Termination};
use vtt_core::problem::ProblemError;
use vtt_core::variation::{
    cost_directional_derivative_with, hbar, tau_derivative, tau_derivative_fd, variational_paths,
    TauDerivativeResult, VariationError,
};
use vtt_core::verifier::{verify_with_run, SmpOptions, Verdict, VerifierError};

use config::{ConfigError, Experiment, FileConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Variation(#[from] VariationError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("unknown example '{0}'; valid: affine, kink, flat")]
    UnknownExample(String),
    #[error("cannot write artifact: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Usage/configuration errors exit 2; runtime failures also map there
    /// because only certification outcomes use exit 1.
    fn exit_code(&self) -> i32 {
        2
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vtt",
    version,
    about = "Stochastic optimal control with a mean-constraint varying terminal time"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON experiment configuration (strict keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $VTT_OUT_DIR or ./vtt-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results are independent of this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Time grid steps N.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Monte Carlo path count M.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Builtin problem name.
    #[arg(long, global = true)]
    problem: Option<String>,
    /// Problem parameter override key=value (repeatable).
    #[arg(long = "param", global = true)]
    params: Vec<String>,
    /// Control selection: reference | constant:<v1,..,vk> | csv:<path>.
    #[arg(long, global = true)]
    control: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the controlled dynamics; emit mean and rate curves.
    Simulate {
        /// Fourth-order deterministic refinement.
        #[arg(long)]
        refine: bool,
    },
    /// Locate the varying terminal time and classify its case.
    Tau,
    /// Emit the rate curve h only.
    HCurve,
    /// Probe analytic derivatives against central finite differences.
    DerivativeCheck {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Terminal-time derivative: analytic value plus one-sided quotients.
    TauDerivative {
        /// Comma-separated signed rho values.
        #[arg(long)]
        rho_list: Option<String>,
        /// Direction spec (constant:<v1,..,vk>).
        #[arg(long)]
        direction: Option<String>,
    },
    /// Certify or refute a candidate control against the inequality.
    VerifySmp {
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Conditional-gradient descent to a certified control.
    Optimize {
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Duality identities: costate pairing and the dual rate representation.
    DualityCheck {
        #[arg(long)]
        direction: Option<String>,
        /// Fail (exit 1) if either defect exceeds this bound.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Re-run the packaged examples and oracle checks.
    Reproduce {
        /// One of: affine, kink, flat. Omit for the full table.
        #[arg(long)]
        example: Option<String>,
    },
}

/// Entry point behind `main`; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let overrides = Overrides {
        problem: cli.global.problem.clone(),
        params: cli.global.params.clone(),
        grid: cli.global.grid,
        paths: cli.global.paths,
        seed: cli.global.seed,
        out: cli.global.out.clone(),
        threads: cli.global.threads,
        control: cli.global.control.clone(),
    };
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };

    // Reproduce needs no problem selection; resolve lazily for the rest.
    if let Command::Reproduce { example } = &cli.command {
        let out_dir = overrides
            .out
            .clone()
            .or(file.output_dir.clone())
            .or_else(|| std::env::var_os("VTT_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("vtt-out"));
        let threads = overrides.threads.or(file.threads);
        let n = overrides.grid.or(file.grid_steps).unwrap_or(reproduce::DEFAULT_GRID_N);
        if n < 10 {
            return Err(ConfigError::GridTooCoarse(n).into());
        }
        return in_pool(threads, || {
            let summary = match example {
                Some(name) => reproduce::reproduce_example(name, n, &out_dir)?,
                None => reproduce::reproduce_all(n, &out_dir)?,
            };
            print!("{}", summary.render_table());
            Ok(if summary.all_passed { 0 } else { 1 })
        });
    }

    let exp = Experiment::resolve(file, &overrides)?;
    let threads = exp.threads;
    in_pool(threads, || run_command(&cli.command, &exp))
}

/// Run inside a dedicated rayon pool when a thread count is requested.
fn in_pool<F>(threads: Option<usize>, f: F) -> Result<i32, CliError>
where
    F: FnOnce() -> Result<i32, CliError> + Send,
{
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

#[derive(Serialize)]
struct TauReport<'a> {
    problem: &'a str,
    grid_steps: usize,
    path_count: usize,
    seed: u64,
    ttr: &'a vtt_core::TerminalTimeResult,
}

#[derive(Serialize)]
struct TauDerivativeReport<'a> {
    problem: &'a str,
    case_tag: String,
    value: f64,
    candidate_pair: Option<(f64, f64)>,
    ambiguous: bool,
    hbar_integral: f64,
    h_at_tau: f64,
    quotients: &'a [(f64, f64)],
}

#[derive(Serialize)]
struct DualityArtifact {
    problem: String,
    duality: DualitySide,
    dual_rate: DualitySide,
}

#[derive(Serialize)]
struct DualitySide {
    lhs: f64,
    rhs: f64,
    defect: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    problem: &'a str,
    termination: &'a Termination,
    iterates: usize,
    final_cost: f64,
    final_tau: f64,
}

fn run_command(command: &Command, exp: &Experiment) -> Result<i32, CliError> {
    let spec = &exp.spec;
    let out = &exp.out_dir;
    let hitting = HittingOptions::default();
    match command {
        Command::Simulate { refine } => {
            let mut mc = exp.mc;
            if *refine {
                // The core rejects refinement on noisy problems.
                mc.integrator = vtt_core::Integrator::RungeKutta4;
            }
            let control = exp.control()?;
            let run = run_forward(spec, &control, &mc, &hitting)?;
            io::write_text(&out.join("mean.csv"), &io::mean_curve_csv(&run.mean))?;
            io::write_text(&out.join("h.csv"), &io::sampled_curve_csv(&run.h, "h"))?;
            #[derive(Serialize)]
            struct EnsembleSummary<'a> {
                problem: &'a str,
                grid_steps: usize,
                path_count: usize,
                seed: u64,
                terminal_mean: f64,
                terminal_se: f64,
            }
            let n = run.mean.grid.step_count();
            io::write_json(
                &out.join("ensemble.json"),
                &EnsembleSummary {
                    problem: spec.name(),
                    grid_steps: n,
                    path_count: run.ensemble.path_count(),
                    seed: exp.mc.seed,
                    terminal_mean: run.mean.values[n],
                    terminal_se: run.mean.std_errors[n],
                },
            )?;
            println!(
                "simulated {} paths of {}; m(T) = {:.6}",
                run.ensemble.path_count(),
                spec.name(),
                run.mean.values[n]
            );
            Ok(0)
        }
        Command::Tau => {
            let control = exp.control()?;
            let run = run_forward(spec, &control, &exp.mc, &hitting)?;
            io::write_text(&out.join("mean.csv"), &io::mean_curve_csv(&run.mean))?;
            io::write_text(&out.join("h.csv"), &io::sampled_curve_csv(&run.h, "h"))?;
            io::write_json(
                &out.join("tau_report.json"),
                &TauReport {
                    problem: spec.name(),
                    grid_steps: exp.grid.step_count(),
                    path_count: exp.mc.path_count,
                    seed: exp.mc.seed,
                    ttr: &run.ttr,
                },
            )?;
            println!(
                "tau = {:.6} (case {}), h(tau) = {:.6}, degenerate = {}, discontinuous = {}",
                run.ttr.tau, run.ttr.case_tag, run.ttr.h_at_tau, run.ttr.degenerate_h,
                run.ttr.h_discontinuous
            );
            Ok(0)
        }
        Command::HCurve => {
            let control = exp.control()?;
            let run = run_forward(spec, &control, &exp.mc, &hitting)?;
            io::write_text(&out.join("h.csv"), &io::sampled_curve_csv(&run.h, "h"))?;
            println!("wrote rate curve for {}", spec.name());
            Ok(0)
        }
        Command::DerivativeCheck { samples } => {
            let samples = samples.or(exp.file.samples).unwrap_or(100);
            let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(exp.mc.seed);
            let worst = finitediff::max_relative_derivative_mismatch(spec, samples, &mut rng);
            #[derive(Serialize)]
            struct DerivativeReport<'a> {
                problem: &'a str,
                samples: usize,
                worst_relative_mismatch: f64,
                tolerance: f64,
                pass: bool,
            }
            let pass = worst <= 1e-5;
            io::write_json(
                &out.join("derivative_check.json"),
                &DerivativeReport {
                    problem: spec.name(),
                    samples,
                    worst_relative_mismatch: worst,
                    tolerance: 1e-5,
                    pass,
                },
            )?;
            println!("worst relative derivative mismatch: {worst:.3e}");
            Ok(if pass { 0 } else { 1 })
        }
        Command::TauDerivative { rho_list, direction } => {
            let control = exp.control()?;
            let v = exp.direction(direction.as_deref())?;
            let rhos = match rho_list.as_deref() {
                Some(raw) => config::parse_rho_list(raw)?,
                None => exp.file.rho_list.clone().unwrap_or_else(|| vec![0.1, 0.01, -0.1, -0.01]),
            };
            let quotients = tau_derivative_fd(spec, &control, &v, &rhos, &exp.mc, &hitting)?;
            io::write_text(&out.join("quotients.csv"), &io::quotients_csv(&quotients))?;
            let run = run_forward(spec, &control, &exp.mc, &hitting)?;
            let y = variational_paths(spec, &run.ensemble, &control, &v)?;
            let curve = hbar(spec, &run.ensemble, &y, &control, &v);
            io::write_text(&out.join("hbar.csv"), &io::sampled_curve_csv(&curve, "hbar"))?;
            match tau_derivative(&run.ttr, &curve) {
                Ok(TauDerivativeResult {
                    case_tag,
                    value,
                    candidate_pair,
                    ambiguous,
                    hbar_integral,
                    h_at_tau,
                }) => {
                    io::write_json(
                        &out.join("tau_derivative.json"),
                        &TauDerivativeReport {
                            problem: spec.name(),
                            case_tag: case_tag.to_string(),
                            value,
                            candidate_pair,
                            ambiguous,
                            hbar_integral,
                            h_at_tau,
                            quotients: &quotients,
                        },
                    )?;
                    let variation =
                        cost_directional_derivative_with(spec, &run, &control, &v, &y)?;
                    io::write_text(
                        &out.join("cost_variation.csv"),
                        &io::components_csv(&[
                            ("penalty_psi", variation.penalty_psi),
                            ("penalty_f", variation.penalty_f),
                            ("terminal", variation.terminal),
                            ("running", variation.running),
                            ("total", variation.total),
                        ]),
                    )?;
                    println!("terminal-time derivative = {value:.6} (case {case_tag})");
                    Ok(0)
                }
                Err(err @ (VariationError::DegenerateRate { .. } | VariationError::Discontinuity)) => {
                    #[derive(Serialize)]
                    struct Refusal<'a> {
                        problem: &'a str,
                        error: String,
                        quotients: &'a [(f64, f64)],
                    }
                    io::write_json(
                        &out.join("tau_derivative.json"),
                        &Refusal { problem: spec.name(), error: err.to_string(), quotients: &quotients },
                    )?;
                    println!("{err}");
                    Ok(1)
                }
                Err(err) => Err(err.into()),
            }
        }
        Command::VerifySmp { probes, tol } => {
            let control = exp.control()?;
            let run = run_forward(spec, &control, &exp.mc, &hitting)?;
            let mut opts = SmpOptions::default();
            if let Some(p) = probes.or(exp.file.probes) {
                opts.probes_per_dim = p;
            }
            if let Some(t) = tol.or(exp.file.tol) {
                opts.tol = t;
            }
            let report = verify_with_run(spec, &run, &control, &opts)?;
            io::write_json(&out.join("smp_report.json"), &report)?;
            io::write_text(&out.join("probes.csv"), &io::probe_table_csv(&report))?;
            println!(
                "verdict: {} (case {}, max violation {:.3e}, tol {:.3e})",
                report.verdict, report.case_tag, report.max_violation, report.certification_tol
            );
            Ok(if report.verdict == Verdict::Certified { 0 } else { 1 })
        }
        Command::Optimize { max_iters, tol } => {
            let initial = exp.control()?;
            let mut opts = OptimizerOptions {
                mc: exp.mc,
                ..OptimizerOptions::deterministic()
            };
            if let Some(iters) = max_iters.or(exp.file.max_iters) {
                opts.max_iters = iters;
            }
            if let Some(t) = tol.or(exp.file.tol) {
                opts.smp.tol = t;
            }
            let (control, trace) = improve(spec, &initial, &opts)?;
            io::write_text(&out.join("trace.csv"), &io::trace_csv(&trace))?;
            io::write_text(&out.join("final_control.csv"), &io::control_csv(&control))?;
            let last = trace.iterates.last().expect("at least one iterate");
            io::write_json(
                &out.join("optimize_report.json"),
                &OptimizeReport {
                    problem: spec.name(),
                    termination: &trace.termination,
                    iterates: trace.iterates.len(),
                    final_cost: last.cost,
                    final_tau: last.tau,
                },
            )?;
            println!(
                "termination: {:?} after {} iterates; J = {:.6}, tau = {:.6}",
                trace.termination,
                trace.iterates.len(),
                last.cost,
                last.tau
            );
            Ok(if trace.termination == Termination::SmpSatisfied { 0 } else { 1 })
        }
        Command::DualityCheck { direction, tol } => {
            let control = exp.control()?;
            let v = exp.direction(direction.as_deref())?;
            let run = run_forward(spec, &control, &exp.mc, &hitting)?;
            let mode = AdjointMode::for_spec(spec);
            let adj = solve_adjoint(spec, &run.ensemble, &control, &run.ttr, mode)?;
            let aux = solve_auxiliary_adjoint(spec, &run.ensemble, &control, &run.ttr, mode)?;
            let y = variational_paths(spec, &run.ensemble, &control, &v)?;
            let pairing = duality_check(spec, &run.ensemble, &control, &v, &run.ttr, &adj, &y);
            let dual_rate = rate_dual_check(spec, &run.ensemble, &control, &v, &run.ttr, &aux, &y);
            io::write_text(
                &out.join("adjoint.csv"),
                &io::adjoint_csv(&adj, spec.state_dim(), spec.noise_dim()),
            )?;
            if let Some(coefs) = io::regression_coefficients_csv(&adj) {
                io::write_text(&out.join("adjoint_coefficients.csv"), &coefs)?;
            }
            io::write_json(
                &out.join("duality.json"),
                &DualityArtifact {
                    problem: spec.name().to_string(),
                    duality: DualitySide {
                        lhs: pairing.lhs,
                        rhs: pairing.rhs,
                        defect: pairing.defect,
                        std_error: pairing.std_error,
                    },
                    dual_rate: DualitySide {
                        lhs: dual_rate.lhs,
                        rhs: dual_rate.rhs,
                        defect: dual_rate.defect,
                        std_error: dual_rate.std_error,
                    },
                },
            )?;
            println!(
                "duality defect {:.3e}; dual rate defect {:.3e}",
                pairing.defect, dual_rate.defect
            );
            let bound = tol.or(exp.file.tol);
            let pass = bound.map_or(true, |b| pairing.defect <= b && dual_rate.defect <= b);
            Ok(if pass { 0 } else { 1 })
        }
        Command::Reproduce { .. } => unreachable!("handled before problem resolution"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_with_usage_error() {
        assert_eq!(run(["vtt", "frobnicate"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["vtt", "--help"]), 0);
    }

    #[test]
    fn missing_problem_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert_eq!(run(["vtt", "--out", out.to_str().unwrap(), "tau"]), 2);
    }

    #[test]
    fn tau_subcommand_writes_report_and_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run([
            "vtt",
            "--problem",
            "example-affine",
            "--control",
            "constant:1",
            "--grid",
            "500",
            "--out",
            out.to_str().unwrap(),
            "tau",
        ]);
        assert_eq!(code, 0);
        let report = std::fs::read_to_string(out.join("tau_report.json")).unwrap();
        assert!(report.contains("InteriorCrossing"));
        assert!(out.join("mean.csv").exists());
    }

    #[test]
    fn verify_smp_exit_codes_follow_the_verdict() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let base = ["--problem", "example-affine", "--grid", "500", "--out", out.to_str().unwrap()];
        let mut ok = vec!["vtt"];
        ok.extend(base);
        ok.extend(["--control", "constant:1", "verify-smp"]);
        assert_eq!(run(ok), 0);
        let mut bad = vec!["vtt"];
        bad.extend(base);
        bad.extend(["--control", "constant:2", "verify-smp"]);
        assert_eq!(run(bad), 1);
    }

    #[test]
    fn reproduce_single_example_passes_and_writes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(["vtt", "--out", out.to_str().unwrap(), "reproduce", "--example", "affine"]);
        assert_eq!(code, 0);
        let summary = std::fs::read_to_string(out.join("affine/summary.json")).unwrap();
        assert!(summary.contains("\"all_passed\": true"));
        assert!(out.join("affine/smp_report.json").exists());
    }

    #[test]
    fn identical_invocations_emit_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
        for (out, threads) in [(&out_a, "1"), (&out_b, "2")] {
            let code = run([
                "vtt",
                "--problem",
                "toy-linear-sde",
                "--control",
                "constant:0.5",
                "--grid",
                "100",
                "--paths",
                "5000",
                "--seed",
                "11",
                "--threads",
                threads,
                "--out",
                out.to_str().unwrap(),
                "tau",
            ]);
            assert_eq!(code, 0);
        }
        for name in ["mean.csv", "h.csv", "tau_report.json"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across thread counts");
        }
    }

    #[test]
    fn refine_on_noisy_problems_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run([
            "vtt",
            "--problem",
            "toy-linear-sde",
            "--control",
            "constant:0.5",
            "--grid",
            "50",
            "--paths",
            "32",
            "--out",
            out.to_str().unwrap(),
            "simulate",
            "--refine",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn kink_tau_report_carries_the_discontinuity_flag() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run([
            "vtt",
            "--problem",
            "example-kink",
            "--control",
            "reference",
            "--out",
            out.to_str().unwrap(),
            "tau",
        ]);
        assert_eq!(code, 0);
        let report = std::fs::read_to_string(out.join("tau_report.json")).unwrap();
        assert!(report.contains("\"h_discontinuous\": true"), "report: {report}");
    }

    #[test]
    fn kink_tau_derivative_reports_refusal_via_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run([
            "vtt",
            "--problem",
            "example-kink",
            "--control",
            "reference",
            "--grid",
            "2000",
            "--out",
            out.to_str().unwrap(),
            "tau-derivative",
        ]);
        assert_eq!(code, 1);
        let report = std::fs::read_to_string(out.join("tau_derivative.json")).unwrap();
        assert!(report.contains("jump"), "report: {report}");
    }
}
