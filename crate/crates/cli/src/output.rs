//! CSV export of density snapshots and iteration reports.

use std::path::{Path, PathBuf};

use rdmfc::alg2::{Alg2Solver, IterationReport, States};
use rdmfc::grid::SpaceTimeGrid;

use crate::config::OutputSection;
use crate::CliError;

pub fn snapshot_name(t: f64) -> String {
    format!("snapshot_t{t:.4}.csv")
}

/// One file per snapshot time with columns `x[, y], rho_1..rho_M` on a
/// uniform sample grid, x fastest.
pub fn write_snapshots(
    solver: &Alg2Solver,
    states: &States,
    output: &OutputSection,
    dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let grid = solver.grid();
    let species = solver.spec().species;
    let res = output.sample_resolution;
    let coords = SpaceTimeGrid::sample_coordinates(res);
    let fields: Vec<Vec<f64>> = (0..species)
        .map(|i| states.phys.species_density(species, i))
        .collect();
    let dim = grid.dim();
    let mut header: Vec<String> = ["x", "y"][..dim].iter().map(|s| s.to_string()).collect();
    header.extend((1..=species).map(|i| format!("rho_{i}")));

    let mut files = Vec::with_capacity(output.snapshot_times.len());
    for &t in &output.snapshot_times {
        let samples = fields
            .iter()
            .map(|f| grid.sample_l2_field(f, t, res))
            .collect::<Result<Vec<_>, _>>()?;
        let path = dir.join(snapshot_name(t));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&header)?;
        for k in 0..res.pow(dim as u32) {
            let mut row: Vec<String> = Vec::with_capacity(dim + species);
            row.push(coords[k % res].to_string());
            if dim == 2 {
                row.push(coords[k / res].to_string());
            }
            row.extend(samples.iter().map(|s| s[k].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CliError::Io {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        files.push(path);
    }
    Ok(files)
}

/// `report.csv`: residual history plus time-averaged species masses and the
/// relative spread of the total mass over time.
pub fn write_report(reports: &[&IterationReport], dir: &Path) -> Result<PathBuf, CliError> {
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let species = reports.first().map_or(0, |r| r.masses.len());
    let mut header: Vec<String> = ["iteration", "objective", "primal_residual", "kkt_m", "kkt_s", "kkt_n"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=species).map(|i| format!("mass_{i}")));
    header.push("mass_spread".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.iteration.to_string(),
            r.objective.to_string(),
            r.primal_residual.to_string(),
            r.kkt.m.to_string(),
            r.kkt.s.to_string(),
            r.kkt.n.to_string(),
        ];
        row.extend(
            r.masses
                .iter()
                .map(|m| (m.iter().sum::<f64>() / m.len() as f64).to_string()),
        );
        row.push(mass_spread(&r.masses).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok(path)
}

fn mass_spread(masses: &[Vec<f64>]) -> f64 {
    let n = masses.first().map_or(0, Vec::len);
    let total: Vec<f64> = (0..n).map(|j| masses.iter().map(|m| m[j]).sum()).collect();
    match total.first() {
        Some(&first) if first != 0.0 => {
            total.iter().map(|v| (v - first).abs()).fold(0.0, f64::max) / first.abs()
        }
        _ => 0.0,
    }
}
