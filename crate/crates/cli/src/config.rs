//! TOML run configuration and its translation into a problem and grid.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rdmfc::alg2::{Preconditioning, SolverOptions};
use rdmfc::grid::SpaceTimeGrid;
use rdmfc::model::{
    build_pairwise_reactions, DensitySpec, DriftShape, Energy, Mobility, MobilityKind, Potential,
    ProblemSpec, ReactionMatrix, TerminalCondition,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub discretization: Discretization,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub mobility: MobilitySection,
    #[serde(default)]
    pub potential: PotentialSection,
    #[serde(default)]
    pub terminal: TerminalSection,
    pub density: DensitySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub dimension: usize,
    #[serde(default = "one")]
    pub species: usize,
    /// Expected reaction count; checked against the built matrix.
    pub reactions: Option<usize>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "unit")]
    pub final_time: f64,
    /// Pairwise reactions `(p0, p1)`: species `p0` gains, `p1` loses.
    #[serde(default)]
    pub reaction_pairs: Vec<[usize; 2]>,
    /// Explicit columns of the reaction matrix; overrides `reaction_pairs`.
    pub reaction_columns: Option<Vec<Vec<i32>>>,
    pub energy: Option<EnergyConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub nx: usize,
    pub nt: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerName {
    None,
    Jacobi,
    #[default]
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "unit")]
    pub r: f64,
    #[serde(default = "default_tol")]
    pub pcg_tol: f64,
    pub pcg_maxit: Option<usize>,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "one")]
    pub inner_sweeps: usize,
    #[serde(default)]
    pub preconditioner: PreconditionerName,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            r: 1.0,
            pcg_tol: default_tol(),
            pcg_maxit: None,
            newton_tol: default_tol(),
            inner_sweeps: 1,
            preconditioner: PreconditionerName::Tensor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityName {
    Zero,
    Constant,
    Power,
    LogShift,
    PairArithmetic,
    PairGeometric,
    PairHarmonic,
    PairLogmean,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityConfig {
    pub kind: MobilityName,
    #[serde(default = "unit")]
    pub alpha: f64,
    #[serde(default = "unit")]
    pub exponent: f64,
    /// Species pair of a pair kind; defaults to the reaction's pair.
    pub pair: Option<[usize; 2]>,
    pub weight: Option<DensityConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MobilitySection {
    /// Transport mobility per species; identity when omitted.
    pub v1: Option<Vec<MobilityConfig>>,
    /// Reaction mobility per reaction.
    #[serde(default)]
    pub v2: Vec<MobilityConfig>,
    /// Diffusion mobility per species; zero when omitted.
    pub v3: Option<Vec<MobilityConfig>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PotentialName {
    #[default]
    None,
    EntropyDrift,
    PowerDrift,
    WeightedLinear,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    #[serde(default)]
    pub kind: PotentialName,
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub drift: Vec<f64>,
    pub power: Option<f64>,
    /// Spatial drift field replacing the cosine shape.
    pub weight: Option<DensityConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalName {
    #[default]
    Planning,
    Quadratic,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    #[serde(default)]
    pub kind: TerminalName,
    #[serde(default = "unit")]
    pub gamma: f64,
}

impl Default for TerminalSection {
    fn default() -> Self {
        Self {
            kind: TerminalName::Planning,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyConfig {
    None,
    Boltzmann {
        #[serde(default = "unit")]
        scale: f64,
    },
    Power {
        coeff: f64,
        exponent: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Gaussian {
        center: Vec<f64>,
        #[serde(default = "default_sharpness")]
        sharpness: f64,
        #[serde(default)]
        floor: f64,
    },
    Image {
        path: PathBuf,
        #[serde(default)]
        floor: f64,
    },
    Uniform {
        level: f64,
        #[serde(default)]
        floor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySection {
    pub initial: Vec<DensityConfig>,
    /// Planning targets, or the reference densities of the terminal cost.
    pub terminal: Vec<DensityConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_snapshots")]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub sample_resolution: usize,
    #[serde(default = "one")]
    pub report_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            snapshot_times: default_snapshots(),
            sample_resolution: default_resolution(),
            report_every: 1,
        }
    }
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_degree() -> usize {
    2
}

fn default_iterations() -> usize {
    400
}

fn default_tol() -> f64 {
    1e-10
}

fn default_sharpness() -> f64 {
    50.0
}

fn default_directory() -> PathBuf {
    PathBuf::from("output")
}

fn default_snapshots() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

fn default_resolution() -> usize {
    64
}

/// Parses configuration text. `origin` labels error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config {
        origin: origin.to_owned(),
        message: e.to_string(),
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string())
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::Config {
        origin: "configuration".into(),
        message: message.into(),
    }
}

impl DensityConfig {
    /// Builds the density; relative image paths are taken from `base`.
    pub fn build(&self, base: &Path) -> DensitySpec {
        match self {
            DensityConfig::Gaussian {
                center,
                sharpness,
                floor,
            } => DensitySpec::gaussian(center.clone(), *sharpness).with_floor(*floor),
            DensityConfig::Image { path, floor } => {
                DensitySpec::image(base.join(path)).with_floor(*floor)
            }
            DensityConfig::Uniform { level, floor } => {
                DensitySpec::uniform(*level).with_floor(*floor)
            }
        }
    }
}

impl MobilityConfig {
    fn build(&self, base: &Path, species: usize, pair: Option<[usize; 2]>) -> Result<Mobility, CliError> {
        let pair_kind = |kind| {
            let [p0, p1] = self
                .pair
                .or(pair)
                .ok_or_else(|| config_error(format!("{kind:?} mobility needs a species pair")))?;
            Ok::<_, CliError>(Mobility::pair(kind, self.alpha, p0, p1))
        };
        let mobility = match self.kind {
            MobilityName::Zero => Mobility::zero(),
            MobilityName::Constant => Mobility::constant(self.alpha),
            MobilityName::Power => Mobility::power(self.alpha, self.exponent),
            MobilityName::LogShift => Mobility::log_shift(self.alpha),
            MobilityName::PairArithmetic => pair_kind(MobilityKind::PairArithmetic)?,
            MobilityName::PairGeometric => pair_kind(MobilityKind::PairGeometric)?,
            MobilityName::PairHarmonic => pair_kind(MobilityKind::PairHarmonic)?,
            MobilityName::PairLogmean => pair_kind(MobilityKind::PairLogmean)?,
        };
        let mobility = if mobility.kind.is_pair() {
            mobility
        } else {
            mobility.on_species(species)
        };
        Ok(match &self.weight {
            Some(w) => mobility.with_weight(w.build(base)),
            None => mobility,
        })
    }
}

impl RunConfig {
    /// Builds the grid described by the discretization section.
    pub fn grid(&self) -> Result<SpaceTimeGrid, CliError> {
        let d = &self.discretization;
        Ok(SpaceTimeGrid::new(
            self.problem.dimension,
            d.nx,
            d.nt,
            d.degree,
            self.problem.final_time,
        )?)
    }

    pub fn solver_options(&self) -> SolverOptions {
        let s = &self.solver;
        SolverOptions {
            pcg_tol: s.pcg_tol,
            pcg_maxit: s.pcg_maxit,
            inner_sweeps: s.inner_sweeps,
            newton_tol: s.newton_tol,
            preconditioner: match s.preconditioner {
                PreconditionerName::None => Preconditioning::None,
                PreconditionerName::Jacobi => Preconditioning::Jacobi,
                PreconditionerName::Tensor => Preconditioning::Tensor,
            },
        }
    }

    fn reactions(&self) -> Result<(ReactionMatrix, Vec<Option<[usize; 2]>>), CliError> {
        let p = &self.problem;
        let (matrix, pairs) = if let Some(columns) = &p.reaction_columns {
            (
                ReactionMatrix::from_columns(p.species, columns)?,
                vec![None; columns.len()],
            )
        } else if !p.reaction_pairs.is_empty() {
            let pairs: Vec<(usize, usize)> = p.reaction_pairs.iter().map(|&[a, b]| (a, b)).collect();
            (
                build_pairwise_reactions(p.species, &pairs)?,
                p.reaction_pairs.iter().copied().map(Some).collect(),
            )
        } else if p.species == 1 && !self.mobility.v2.is_empty() {
            (ReactionMatrix::scalar(), vec![None])
        } else {
            (ReactionMatrix::empty(p.species), Vec::new())
        };
        if let Some(expected) = p.reactions {
            if expected != matrix.reactions() {
                return Err(config_error(format!(
                    "problem.reactions = {expected} but {} reactions were defined",
                    matrix.reactions()
                )));
            }
        }
        Ok((matrix, pairs))
    }

    /// Translates the configuration into a problem. Relative paths are
    /// resolved against `base`.
    pub fn problem_spec(&self, base: &Path) -> Result<ProblemSpec, CliError> {
        let p = &self.problem;
        let m = p.species;
        let per_species = |list: &Option<Vec<MobilityConfig>>, fallback: Mobility, label: &str| {
            match list {
                None => Ok(vec![fallback; m]),
                Some(list) if list.len() != m => Err(config_error(format!(
                    "mobility.{label} has {} entries for {m} species",
                    list.len()
                ))),
                Some(list) => list
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.build(base, i, None))
                    .collect(),
            }
        };
        let v1 = per_species(&self.mobility.v1, Mobility::linear(), "v1")?;
        let v3 = per_species(&self.mobility.v3, Mobility::zero(), "v3")?;
        let (reactions, pairs) = self.reactions()?;
        if self.mobility.v2.len() != reactions.reactions() {
            return Err(config_error(format!(
                "mobility.v2 has {} entries for {} reactions",
                self.mobility.v2.len(),
                reactions.reactions()
            )));
        }
        let v2 = self
            .mobility
            .v2
            .iter()
            .zip(&pairs)
            .map(|(c, &pair)| c.build(base, 0, pair))
            .collect::<Result<Vec<_>, _>>()?;

        let pot = &self.potential;
        let shape = pot.weight.as_ref().map(|w| DriftShape::Field(w.build(base)));
        let potential = match pot.kind {
            PotentialName::None => Potential::none(),
            PotentialName::EntropyDrift => Potential::entropy_drift(pot.tau.clone(), pot.drift.clone()),
            PotentialName::PowerDrift => {
                let power = pot
                    .power
                    .ok_or_else(|| config_error("power_drift potential needs `power`"))?;
                Potential::power_drift(pot.tau.clone(), pot.drift.clone(), power)
            }
            PotentialName::WeightedLinear => {
                let weight = pot
                    .weight
                    .as_ref()
                    .ok_or_else(|| config_error("weighted_linear potential needs `weight`"))?;
                Potential::weighted_linear(pot.drift.clone(), weight.build(base))
            }
        };
        let potential = match shape {
            Some(shape) if !potential.is_none() => Potential { shape, ..potential },
            _ => potential,
        };

        let targets: Vec<DensitySpec> = self.density.terminal.iter().map(|d| d.build(base)).collect();
        let gamma = self.terminal.gamma;
        let terminal = match self.terminal.kind {
            TerminalName::Planning => TerminalCondition::planning(targets),
            TerminalName::Quadratic => TerminalCondition::quadratic(gamma, targets),
            TerminalName::Kl => TerminalCondition::kl(gamma, targets),
        };

        let energy = match &p.energy {
            Some(EnergyConfig::None) => Energy::None,
            Some(EnergyConfig::Boltzmann { scale }) => Energy::Boltzmann { scale: *scale },
            Some(EnergyConfig::Power { coeff, exponent }) => Energy::Power {
                coeff: *coeff,
                exponent: *exponent,
            },
            None if p.beta > 0.0 => {
                Energy::compatible_with(&v1[0], &v3[0]).unwrap_or(Energy::None)
            }
            None => Energy::None,
        };

        Ok(ProblemSpec {
            species: m,
            reactions,
            v1,
            v2,
            v3,
            beta: p.beta,
            potential,
            terminal,
            initial: self.density.initial.iter().map(|d| d.build(base)).collect(),
            energy,
            r: self.solver.r,
            final_time: p.final_time,
        })
    }
}
