//! Configuration, presets and CSV export for the `rdmfc` command.

pub mod config;
pub mod output;
pub mod presets;

use std::path::{Path, PathBuf};

use rdmfc::alg2::Alg2Solver;
use rdmfc::grid::SpaceTimeGrid;
use rdmfc::model::{rasterize_density, validate, DensitySpec, DriftShape, ProblemSpec, Violation};

pub use config::{parse_config, parse_config_str, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in {origin}: {message}")]
    Config { origin: String, message: String },

    #[error("io error at {path}: {reason}")]
    Io { path: PathBuf, reason: String },

    #[error("{} violation(s):\n  {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Violation>),

    #[error(transparent)]
    Solver(#[from] rdmfc::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A configuration together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    /// Reads a config file, or an embedded preset when `arg` names one and
    /// no such file exists.
    pub fn load(arg: &str) -> Result<Self, CliError> {
        let path = Path::new(arg);
        if !path.exists() {
            if let Some(preset) = presets::find(arg) {
                return Ok(Self {
                    config: preset.config()?,
                    base: presets::asset_dir(),
                });
            }
        }
        let config = parse_config(path)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { config, base })
    }

    pub fn build(&self) -> Result<(ProblemSpec, SpaceTimeGrid), CliError> {
        Ok((self.config.problem_spec(&self.base)?, self.config.grid()?))
    }
}

fn referenced_densities(spec: &ProblemSpec) -> Vec<&DensitySpec> {
    let mut out: Vec<&DensitySpec> = spec.initial.iter().chain(&spec.terminal.targets).collect();
    out.extend(
        spec.v1
            .iter()
            .chain(&spec.v2)
            .chain(&spec.v3)
            .filter_map(|m| m.weight.as_ref()),
    );
    if let DriftShape::Field(w) = &spec.potential.shape {
        out.push(w);
    }
    out
}

/// Full validation: every referenced density must load and every problem
/// invariant must hold.
pub fn check(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<(), CliError> {
    for density in referenced_densities(spec) {
        match rasterize_density(density, grid) {
            Err(rdmfc::Error::Io { path, reason }) => return Err(CliError::Io { path, reason }),
            Err(e) => return Err(e.into()),
            Ok(_) => {}
        }
    }
    let violations = validate(spec, grid);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(violations))
    }
}

/// Summary of a finished solve.
#[derive(Debug, Clone)]
pub struct SolveSummary {
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub files: Vec<PathBuf>,
}

/// Validates, iterates and writes snapshots plus `report.csv` into `out_dir`.
pub fn run_solve(
    loaded: &LoadedConfig,
    iterations: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<SolveSummary, CliError> {
    let (spec, grid) = loaded.build()?;
    check(&spec, &grid)?;
    let cfg = &loaded.config;
    let iterations = iterations.unwrap_or(cfg.solver.iterations);
    if iterations == 0 {
        return Err(CliError::Config {
            origin: "iterations".into(),
            message: "must be at least 1".into(),
        });
    }
    let out_dir = out_dir.map_or_else(|| cfg.output.directory.clone(), Path::to_path_buf);
    let solver = Alg2Solver::new(spec, grid, cfg.solver_options())?;
    let mut states = solver.init_states();
    let every = cfg.output.report_every.max(1);
    let reports = solver.run(&mut states, iterations, |_, _| {})?;
    let kept: Vec<_> = reports
        .iter()
        .filter(|r| r.iteration % every == 0 || r.iteration == iterations)
        .collect();
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io {
        path: out_dir.clone(),
        reason: e.to_string(),
    })?;
    let mut files = output::write_snapshots(&solver, &states, &cfg.output, &out_dir)?;
    files.push(output::write_report(&kept, &out_dir)?);
    let last = reports.last().expect("at least one iteration");
    Ok(SolveSummary {
        iterations,
        objective: last.objective,
        primal_residual: last.primal_residual,
        files,
    })
}
