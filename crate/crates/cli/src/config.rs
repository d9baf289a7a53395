//! Experiment configuration: strict JSON file plus command-line overrides.
//!
//! Unknown keys in the file are rejected outright; a misspelled tolerance
//! must fail loudly rather than run with a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use vtt_core::forward::{Integrator, McConfig};
use vtt_core::problem::{ControlPath, ProblemError, ProblemSpec, TimeGrid};
use vtt_core::registry;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file {path} is invalid: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("key 'grid_steps' = {0} is below the minimum of 10")]
    GridTooCoarse(usize),
    #[error("key 'path_count' must be at least 1")]
    NoPaths,
    #[error("no problem selected: pass --problem or set 'problem.name' in the config")]
    NoProblem,
    #[error("bad --param '{0}': expected key=value with a numeric value")]
    BadParam(String),
    #[error("bad control spec '{0}': expected 'reference', 'constant:<v1,..,vk>' or 'csv:<path>'")]
    BadControlSpec(String),
    #[error("problem '{0}' stores no reference control")]
    NoReferenceControl(String),
    #[error("control file {path}: {reason}")]
    ControlFile { path: PathBuf, reason: String },
    #[error("bad rho list '{0}': expected comma-separated nonzero numbers")]
    BadRhoList(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// On-disk configuration. Every field is optional; the command line wins
/// where both are given.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<ProblemSection>,
    pub grid_steps: Option<usize>,
    pub path_count: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub control: Option<String>,
    pub direction: Option<String>,
    pub rho_list: Option<Vec<f64>>,
    pub probes: Option<usize>,
    pub tol: Option<f64>,
    pub refine: Option<bool>,
    pub max_iters: Option<usize>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        serde_json::from_str(&body)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }
}

/// Command-line overrides collected by the argument parser.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub params: Vec<String>,
    pub grid: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub control: Option<String>,
}

/// Fully resolved experiment setup.
#[derive(Debug)]
pub struct Experiment {
    pub spec: ProblemSpec,
    pub grid: TimeGrid,
    pub mc: McConfig,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub control_spec: String,
    pub file: FileConfig,
}

impl Experiment {
    pub fn resolve(file: FileConfig, cli: &Overrides) -> Result<Self, ConfigError> {
        let mut params: BTreeMap<String, f64> = file
            .problem
            .as_ref()
            .map(|p| p.params.clone())
            .unwrap_or_default();
        for raw in &cli.params {
            let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::BadParam(raw.clone()))?;
            let value: f64 =
                value.trim().parse().map_err(|_| ConfigError::BadParam(raw.clone()))?;
            params.insert(key.trim().to_string(), value);
        }
        let name = cli
            .problem
            .clone()
            .or_else(|| file.problem.as_ref().map(|p| p.name.clone()))
            .ok_or(ConfigError::NoProblem)?;
        let spec = registry::builtin_with(&name, &params)?;

        let grid_steps = cli.grid.or(file.grid_steps).unwrap_or(2000);
        if grid_steps < 10 {
            return Err(ConfigError::GridTooCoarse(grid_steps));
        }
        let grid = TimeGrid::new(grid_steps, spec.horizon())?;

        let default_paths = if spec.is_deterministic() { 1 } else { 10_000 };
        let path_count = cli.paths.or(file.path_count).unwrap_or(default_paths);
        if path_count == 0 {
            return Err(ConfigError::NoPaths);
        }
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let integrator = if file.refine.unwrap_or(false) {
            Integrator::RungeKutta4
        } else {
            Integrator::EulerMaruyama
        };
        let out_dir = cli
            .out
            .clone()
            .or(file.output_dir.clone())
            .or_else(|| std::env::var_os("VTT_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("vtt-out"));
        let control_spec = cli
            .control
            .clone()
            .or(file.control.clone())
            .unwrap_or_else(|| "reference".to_string());
        Ok(Self {
            spec,
            grid,
            mc: McConfig { path_count, seed, integrator },
            out_dir,
            threads: cli.threads.or(file.threads),
            control_spec,
            file,
        })
    }

    /// Materialize a control from a spec string: the registry-stored
    /// reference pair, a constant vector, or a previously emitted CSV.
    pub fn control(&self) -> Result<ControlPath, ConfigError> {
        parse_control(&self.control_spec, &self.spec, self.grid)
    }

    /// A perturbation direction from the same spec grammar (box unchecked).
    pub fn direction(&self, spec_string: Option<&str>) -> Result<ControlPath, ConfigError> {
        let raw = spec_string
            .map(str::to_string)
            .or_else(|| self.file.direction.clone())
            .unwrap_or_else(|| "constant:1".to_string());
        if let Some(rest) = raw.strip_prefix("constant:") {
            let values = parse_vector(rest).map_err(|_| ConfigError::BadControlSpec(raw.clone()))?;
            if values.len() != self.spec.control_dim() {
                return Err(ConfigError::BadControlSpec(raw));
            }
            return Ok(ControlPath::constant_direction(self.grid, &values));
        }
        Err(ConfigError::BadControlSpec(raw))
    }
}

pub fn parse_control(
    raw: &str,
    spec: &ProblemSpec,
    grid: TimeGrid,
) -> Result<ControlPath, ConfigError> {
    if raw == "reference" {
        return spec
            .reference_control_path(grid)
            .ok_or_else(|| ConfigError::NoReferenceControl(spec.name().to_string()))?
            .map_err(ConfigError::from);
    }
    if let Some(rest) = raw.strip_prefix("constant:") {
        let values = parse_vector(rest).map_err(|_| ConfigError::BadControlSpec(raw.to_string()))?;
        if values.len() != spec.control_dim() {
            return Err(ConfigError::BadControlSpec(raw.to_string()));
        }
        return Ok(ControlPath::constant(grid, &values, spec.control_box())?);
    }
    if let Some(rest) = raw.strip_prefix("csv:") {
        let path = PathBuf::from(rest);
        let body = std::fs::read_to_string(&path).map_err(|e| ConfigError::ControlFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let k = spec.control_dim();
        let mut values = Vec::with_capacity(grid.step_count() * k);
        for (lineno, line) in body.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != k + 1 {
                return Err(ConfigError::ControlFile {
                    path,
                    reason: format!("line {}: expected {} columns", lineno + 1, k + 1),
                });
            }
            for field in &fields[1..] {
                let v: f64 = field.trim().parse().map_err(|_| ConfigError::ControlFile {
                    path: path.clone(),
                    reason: format!("line {}: bad number '{field}'", lineno + 1),
                })?;
                values.push(v);
            }
        }
        if values.len() != grid.step_count() * k {
            return Err(ConfigError::ControlFile {
                path,
                reason: format!(
                    "expected {} control cells for the grid, found {}",
                    grid.step_count(),
                    values.len() / k.max(1)
                ),
            });
        }
        return Ok(ControlPath::new(grid, k, values, spec.control_box())?);
    }
    Err(ConfigError::BadControlSpec(raw.to_string()))
}

fn parse_vector(raw: &str) -> Result<Vec<f64>, std::num::ParseFloatError> {
    raw.split(',').map(|s| s.trim().parse()).collect()
}

pub fn parse_rho_list(raw: &str) -> Result<Vec<f64>, ConfigError> {
    let values: Result<Vec<f64>, _> = raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match values {
        Ok(list) if !list.is_empty() && list.iter().all(|v| *v != 0.0 && v.is_finite()) => Ok(list),
        _ => Err(ConfigError::BadRhoList(raw.to_string())),
    }
}
