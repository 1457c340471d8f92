//! Problem catalog: mobilities, potentials, terminal costs, reaction graphs,
//! energies and density fields, plus validation of a full problem.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::grid::SpaceTimeGrid;

/// Floor applied inside logarithms.
pub const RHO_FLOOR: f64 = 1e-12;
/// Cap for derivatives that blow up at zero density.
pub const DERIVATIVE_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MobilityKind {
    Zero,
    Constant,
    Power,
    LogShift,
    PairArithmetic,
    PairGeometric,
    PairHarmonic,
    PairLogmean,
}

impl MobilityKind {
    pub fn is_pair(self) -> bool {
        matches!(
            self,
            Self::PairArithmetic | Self::PairGeometric | Self::PairHarmonic | Self::PairLogmean
        )
    }
}

/// Mobility function. Scalar kinds read the density of `species[0]`; pair
/// kinds read `species[0]` and `species[1]`. An optional spatial weight
/// multiplies the value pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mobility {
    pub kind: MobilityKind,
    pub alpha: f64,
    pub exponent: f64,
    pub species: [usize; 2],
    pub weight: Option<DensitySpec>,
}

/// Value, partial derivatives and pure second derivatives with respect to
/// the two density arguments.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MobilityEval {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 2],
}

impl Mobility {
    fn with_kind(kind: MobilityKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            exponent: 1.0,
            species: [0, 1],
            weight: None,
        }
    }

    pub fn zero() -> Self {
        Self::with_kind(MobilityKind::Zero, 0.0)
    }

    pub fn constant(alpha: f64) -> Self {
        Self::with_kind(MobilityKind::Constant, alpha)
    }

    /// `α ρ^γ`.
    pub fn power(alpha: f64, exponent: f64) -> Self {
        Self {
            exponent,
            ..Self::with_kind(MobilityKind::Power, alpha)
        }
    }

    /// Identity mobility `V(ρ) = ρ`.
    pub fn linear() -> Self {
        Self::power(1.0, 1.0)
    }

    /// `α (ρ − 1) / log ρ`.
    pub fn log_shift(alpha: f64) -> Self {
        Self::with_kind(MobilityKind::LogShift, alpha)
    }

    pub fn pair(kind: MobilityKind, alpha: f64, p0: usize, p1: usize) -> Self {
        Self {
            species: [p0, p1],
            ..Self::with_kind(kind, alpha)
        }
    }

    /// Scalar mobility reading species `s`.
    pub fn on_species(mut self, s: usize) -> Self {
        self.species[0] = s;
        self
    }

    pub fn with_weight(mut self, weight: DensitySpec) -> Self {
        self.weight = Some(weight);
        self
    }

    /// True when the mobility vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.kind == MobilityKind::Zero || self.alpha == 0.0
    }

    /// Species whose densities enter the mobility.
    pub fn arguments(&self) -> &[usize] {
        if self.kind.is_pair() {
            &self.species
        } else {
            &self.species[..1]
        }
    }

    /// Checked evaluation (spatial weight excluded).
    pub fn eval(&self, a: f64, b: f64) -> Result<MobilityEval> {
        if a < 0.0 || (self.kind.is_pair() && b < 0.0) || a.is_nan() || b.is_nan() {
            return Err(invalid(format!("negative density ({a}, {b}) in mobility")));
        }
        Ok(self.eval_unchecked(a, b))
    }

    pub(crate) fn eval_unchecked(&self, a: f64, b: f64) -> MobilityEval {
        let alpha = self.alpha;
        let scaled = |value: f64, grad: [f64; 2], hess: [f64; 2]| MobilityEval {
            value: alpha * value,
            grad: grad.map(|g| (alpha * g).clamp(-DERIVATIVE_CAP, DERIVATIVE_CAP)),
            hess: hess.map(|h| (alpha * h).clamp(-DERIVATIVE_CAP, DERIVATIVE_CAP)),
        };
        match self.kind {
            MobilityKind::Zero => MobilityEval::default(),
            MobilityKind::Constant => scaled(1.0, [0.0; 2], [0.0; 2]),
            MobilityKind::Power => {
                let g = self.exponent;
                if g == 0.0 {
                    scaled(1.0, [0.0; 2], [0.0; 2])
                } else if a == 0.0 {
                    let d = if g == 1.0 { 1.0 } else { DERIVATIVE_CAP };
                    let h = if g == 1.0 { 0.0 } else { -DERIVATIVE_CAP };
                    scaled(0.0, [d, 0.0], [h, 0.0])
                } else {
                    let v = a.powf(g);
                    scaled(v, [g * v / a, 0.0], [g * (g - 1.0) * v / (a * a), 0.0])
                }
            }
            MobilityKind::LogShift => {
                let (v, da, _) = logmean(a, 1.0);
                let h = fd_second(|x| logmean(x, 1.0).1, a);
                scaled(v, [da, 0.0], [h, 0.0])
            }
            MobilityKind::PairArithmetic => scaled(0.5 * (a + b), [0.5, 0.5], [0.0; 2]),
            MobilityKind::PairGeometric => {
                if a == 0.0 && b == 0.0 {
                    scaled(0.0, [0.5, 0.5], [0.0; 2])
                } else {
                    let v = (a * b).sqrt();
                    let da = if a == 0.0 { DERIVATIVE_CAP } else { 0.5 * v / a };
                    let db = if b == 0.0 { DERIVATIVE_CAP } else { 0.5 * v / b };
                    let ha = if a == 0.0 { -DERIVATIVE_CAP } else { -0.25 * v / (a * a) };
                    let hb = if b == 0.0 { -DERIVATIVE_CAP } else { -0.25 * v / (b * b) };
                    scaled(v, [da, db], [ha, hb])
                }
            }
            MobilityKind::PairHarmonic => {
                let s = a + b;
                if s == 0.0 {
                    scaled(0.0, [0.25, 0.25], [0.0; 2])
                } else {
                    let s2 = s * s;
                    scaled(
                        a * b / s,
                        [b * b / s2, a * a / s2],
                        [-2.0 * b * b / (s2 * s), -2.0 * a * a / (s2 * s)],
                    )
                }
            }
            MobilityKind::PairLogmean => {
                let (v, da, db) = logmean(a, b);
                let ha = fd_second(|x| logmean(x, b).1, a);
                let hb = fd_second(|x| logmean(a, x).2, b);
                scaled(v, [da, db], [ha, hb])
            }
        }
    }
}

/// Free-function form of [`Mobility::eval`]: one argument for scalar
/// kinds, two for pair kinds. Returns the weighted-free value and partials.
pub fn eval_mobility(mob: &Mobility, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
    let needed = mob.arguments().len();
    if rho.len() != needed {
        return Err(invalid(format!(
            "mobility expects {needed} density arguments, got {}",
            rho.len()
        )));
    }
    let b = rho.get(1).copied().unwrap_or(0.0);
    let e = mob.eval(rho[0], b)?;
    Ok((e.value, e.grad[..needed].to_vec()))
}

/// Central difference of a derivative, kept inside `[0, ∞)`.
fn fd_second(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6 * x.max(1e-6);
    let lo = (x - h).max(0.0);
    let hi = x + h;
    (f(hi) - f(lo)) / (hi - lo)
}

/// Logarithmic mean `(a − b)/(log a − log b)` and its partials. A Taylor
/// expansion in `ε = (a − b)/(a + b)` is used near the diagonal.
pub fn logmean(a: f64, b: f64) -> (f64, f64, f64) {
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.5, 0.5);
    }
    if a == 0.0 {
        return (0.0, DERIVATIVE_CAP, 0.0);
    }
    if b == 0.0 {
        return (0.0, 0.0, DERIVATIVE_CAP);
    }
    if (a - b).abs() < 1e-8 * a.max(b).max(1.0) {
        let mu = 0.5 * (a + b);
        let eps = (a - b) / (a + b);
        let e2 = eps * eps;
        let f = 1.0 - e2 / 3.0 - 4.0 * e2 * e2 / 45.0;
        let fp = -2.0 * eps / 3.0 - 16.0 * eps * e2 / 45.0;
        return (mu * f, 0.5 * (f + fp * (1.0 - eps)), 0.5 * (f - fp * (1.0 + eps)));
    }
    let ld = a.ln() - b.ln();
    let l = (a - b) / ld;
    let da = (1.0 - l / a) / ld;
    let db = (l / b - 1.0) / ld;
    (
        l,
        da.min(DERIVATIVE_CAP),
        db.min(DERIVATIVE_CAP),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    None,
    EntropyDrift,
    PowerDrift,
    WeightedLinear,
}

/// Spatial dependence of the drift term.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftShape {
    /// `cos(4πt) ∏ cos(4πx_a)`.
    Cosine,
    /// Time-independent field `w(x)`.
    Field(DensitySpec),
}

/// Potential `F = Σ_i f_i(t, x, ρ_i)`:
/// entropy_drift `f_i = −(τ_i ρ log ρ + c_i ρ w)`,
/// power_drift `f_i = −(τ_i ρ^m + c_i ρ w)`,
/// weighted_linear `f_i = −c_i w ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub kind: PotentialKind,
    pub tau: Vec<f64>,
    pub drift: Vec<f64>,
    pub power: f64,
    pub shape: DriftShape,
}

impl Default for Potential {
    fn default() -> Self {
        Self::none()
    }
}

impl Potential {
    pub fn none() -> Self {
        Self {
            kind: PotentialKind::None,
            tau: Vec::new(),
            drift: Vec::new(),
            power: 2.0,
            shape: DriftShape::Cosine,
        }
    }

    pub fn entropy_drift(tau: Vec<f64>, drift: Vec<f64>) -> Self {
        Self {
            kind: PotentialKind::EntropyDrift,
            tau,
            drift,
            ..Self::none()
        }
    }

    pub fn power_drift(tau: Vec<f64>, drift: Vec<f64>, power: f64) -> Self {
        Self {
            kind: PotentialKind::PowerDrift,
            tau,
            drift,
            power,
            ..Self::none()
        }
    }

    pub fn weighted_linear(drift: Vec<f64>, weight: DensitySpec) -> Self {
        Self {
            kind: PotentialKind::WeightedLinear,
            drift,
            shape: DriftShape::Field(weight),
            ..Self::none()
        }
    }

    pub fn is_none(&self) -> bool {
        self.kind == PotentialKind::None
    }

    /// Drift shape `w(t, x)`; `field` is the field value at `x` when the
    /// shape is tabulated.
    pub fn shape_value(&self, t: f64, x: &[f64], field: Option<f64>) -> f64 {
        match (&self.shape, field) {
            (DriftShape::Field(_), Some(w)) => w,
            (DriftShape::Field(_), None) => 0.0,
            (DriftShape::Cosine, _) => {
                use std::f64::consts::PI;
                (4.0 * PI * t).cos() * x.iter().map(|xi| (4.0 * PI * xi).cos()).product::<f64>()
            }
        }
    }

    /// `(f_i, f_i', f_i'')` for species `i` at density `rho` and shape `w`.
    pub fn species_term(&self, i: usize, rho: f64, w: f64) -> (f64, f64, f64) {
        let tau = self.tau.get(i).copied().unwrap_or(0.0);
        let c = self.drift.get(i).copied().unwrap_or(0.0);
        match self.kind {
            PotentialKind::None => (0.0, 0.0, 0.0),
            PotentialKind::EntropyDrift => {
                let r = rho.max(RHO_FLOOR);
                let ent = if rho > 0.0 { rho * rho.ln() } else { 0.0 };
                (
                    -(tau * ent + c * rho * w),
                    -(tau * (r.ln() + 1.0) + c * w),
                    -tau / r,
                )
            }
            PotentialKind::PowerDrift => {
                let m = self.power;
                let pm = rho.powf(m);
                let d1 = if rho > 0.0 { m * pm / rho } else { 0.0 };
                let d2 = if rho > 0.0 {
                    m * (m - 1.0) * pm / (rho * rho)
                } else if m >= 2.0 {
                    m * (m - 1.0) * rho.powf(m - 2.0)
                } else {
                    DERIVATIVE_CAP
                };
                (-(tau * pm + c * rho * w), -(tau * d1 + c * w), -tau * d2)
            }
            PotentialKind::WeightedLinear => (-c * w * rho, -c * w, 0.0),
        }
    }

    /// Value and gradient of `F` at one point.
    pub fn eval(&self, t: f64, x: &[f64], field: Option<f64>, rho: &[f64]) -> (f64, Vec<f64>) {
        let w = self.shape_value(t, x, field);
        let mut value = 0.0;
        let grad = rho
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let (f, df, _) = self.species_term(i, r, w);
                value += f;
                df
            })
            .collect();
        (value, grad)
    }
}

/// Free-function form of [`Potential::eval`].
pub fn eval_potential(
    pot: &Potential,
    t: f64,
    x: &[f64],
    field: Option<f64>,
    rho: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if rho.iter().any(|&r| !(r >= 0.0)) {
        return Err(invalid("negative density in potential"));
    }
    Ok(pot.eval(t, x, field, rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    Planning,
    Quadratic,
    Kl,
}

/// Terminal condition: prescribed density (planning) or a terminal cost
/// `G = γ Σ (ρ − ρ¹)²` or `G = γ Σ ρ log(ρ / ρ¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCondition {
    pub kind: TerminalKind,
    pub gamma: f64,
    pub targets: Vec<DensitySpec>,
}

impl TerminalCondition {
    pub fn planning(targets: Vec<DensitySpec>) -> Self {
        Self {
            kind: TerminalKind::Planning,
            gamma: 0.0,
            targets,
        }
    }

    pub fn quadratic(gamma: f64, targets: Vec<DensitySpec>) -> Self {
        Self {
            kind: TerminalKind::Quadratic,
            gamma,
            targets,
        }
    }

    pub fn kl(gamma: f64, targets: Vec<DensitySpec>) -> Self {
        Self {
            kind: TerminalKind::Kl,
            gamma,
            targets,
        }
    }

    pub fn is_planning(&self) -> bool {
        self.kind == TerminalKind::Planning
    }

    /// `(g, g', g'')` of the per-species terminal cost at density `rho`
    /// with target value `target`.
    pub fn species_term(&self, rho: f64, target: f64) -> (f64, f64, f64) {
        let g = self.gamma;
        match self.kind {
            TerminalKind::Planning => (0.0, 0.0, 0.0),
            TerminalKind::Quadratic => {
                let d = rho - target;
                (g * d * d, 2.0 * g * d, 2.0 * g)
            }
            TerminalKind::Kl => {
                let t = target.max(RHO_FLOOR);
                let r = rho.max(RHO_FLOOR);
                let v = if rho > 0.0 { g * rho * (rho / t).ln() } else { 0.0 };
                (v, g * ((r / t).ln() + 1.0), g / r)
            }
        }
    }
}

/// Integer reaction coefficient matrix `Γ` (M x R), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactionMatrix {
    species: usize,
    reactions: usize,
    entries: Vec<i32>,
}

impl ReactionMatrix {
    pub fn new(species: usize, reactions: usize, entries: Vec<i32>) -> Result<Self> {
        if entries.len() != species * reactions {
            return Err(invalid(format!(
                "reaction matrix {species}x{reactions} needs {} entries, got {}",
                species * reactions,
                entries.len()
            )));
        }
        Ok(Self {
            species,
            reactions,
            entries,
        })
    }

    /// Builds from column vectors.
    pub fn from_columns(species: usize, columns: &[Vec<i32>]) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != species) {
            return Err(invalid(format!(
                "reaction column has {} entries, expected {species}",
                c.len()
            )));
        }
        let r = columns.len();
        let entries = (0..species)
            .flat_map(|i| columns.iter().map(move |c| c[i]))
            .collect();
        Self::new(species, r, entries)
    }

    /// The scalar case `Γ = [1]`.
    pub fn scalar() -> Self {
        Self {
            species: 1,
            reactions: 1,
            entries: vec![1],
        }
    }

    pub fn empty(species: usize) -> Self {
        Self {
            species,
            reactions: 0,
            entries: Vec::new(),
        }
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn reactions(&self) -> usize {
        self.reactions
    }

    pub fn get(&self, i: usize, p: usize) -> i32 {
        self.entries[i * self.reactions + p]
    }

    pub fn column(&self, p: usize) -> Vec<i32> {
        (0..self.species).map(|i| self.get(i, p)).collect()
    }

    pub fn column_sum(&self, p: usize) -> i32 {
        (0..self.species).map(|i| self.get(i, p)).sum()
    }
}

/// `Γ` with column `p` equal to `e_{p0} − e_{p1}`.
pub fn build_pairwise_reactions(species: usize, pairs: &[(usize, usize)]) -> Result<ReactionMatrix> {
    let mut columns = Vec::with_capacity(pairs.len());
    for &(p0, p1) in pairs {
        if p0 == p1 {
            return Err(invalid(format!("reaction pair ({p0}, {p1}) must join distinct species")));
        }
        if p0 >= species || p1 >= species {
            return Err(invalid(format!(
                "reaction pair ({p0}, {p1}) out of range for {species} species"
            )));
        }
        let mut col = vec![0; species];
        col[p0] = 1;
        col[p1] = -1;
        columns.push(col);
    }
    ReactionMatrix::from_columns(species, &columns)
}

/// Entropy-type energy used by the regularized diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Energy {
    #[default]
    None,
    /// `scale · ρ log ρ`.
    Boltzmann { scale: f64 },
    /// `coeff · ρ^exponent`.
    Power { coeff: f64, exponent: f64 },
}

impl Energy {
    /// Energy making `V₃ = 1 / (V₁ E''²)` hold for power mobilities
    /// `V₁ = α₁ρ^γ₁`, `V₃ = α₃ρ^γ₃`.
    pub fn compatible_with(v1: &Mobility, v3: &Mobility) -> Result<Self> {
        let params = |m: &Mobility| match m.kind {
            MobilityKind::Power => Ok((m.alpha, m.exponent)),
            MobilityKind::Constant => Ok((m.alpha, 0.0)),
            _ => Err(invalid("compatible energy needs power mobilities")),
        };
        let (a1, g1) = params(v1)?;
        let (a3, g3) = params(v3)?;
        if !(a1 > 0.0 && a3 > 0.0) {
            return Err(invalid("compatible energy needs positive mobility coefficients"));
        }
        let root = (a1 * a3).sqrt();
        if g1 == 1.0 && g3 == 1.0 {
            return Ok(Energy::Boltzmann { scale: 1.0 / root });
        }
        let s = g1 + g3;
        Ok(Energy::Power {
            coeff: 4.0 / ((2.0 - s) * (4.0 - s) * root),
            exponent: 2.0 - 0.5 * s,
        })
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Energy::None)
    }

    pub fn value(&self, rho: f64) -> f64 {
        match *self {
            Energy::None => 0.0,
            Energy::Boltzmann { scale } => {
                if rho > 0.0 {
                    scale * rho * rho.ln()
                } else {
                    0.0
                }
            }
            Energy::Power { coeff, exponent } => coeff * rho.powf(exponent),
        }
    }

    /// `E'(ρ)`.
    pub fn first(&self, rho: f64) -> f64 {
        match *self {
            Energy::None => 0.0,
            Energy::Boltzmann { scale } => scale * (rho.max(RHO_FLOOR).ln() + 1.0),
            Energy::Power { coeff, exponent } => coeff * exponent * rho.powf(exponent - 1.0),
        }
    }

    /// `E''(ρ)`.
    pub fn second(&self, rho: f64) -> f64 {
        match *self {
            Energy::None => 0.0,
            Energy::Boltzmann { scale } => scale / rho.max(RHO_FLOOR),
            Energy::Power { coeff, exponent } => {
                coeff * exponent * (exponent - 1.0) * rho.max(RHO_FLOOR).powf(exponent - 2.0)
            }
        }
    }

    /// Checks `V₃(ρ) V₁(ρ) E''(ρ)² = 1` at sample densities.
    pub fn satisfies_relation(&self, v1: &Mobility, v3: &Mobility, samples: &[f64]) -> bool {
        samples.iter().all(|&rho| {
            let a = v1.eval_unchecked(rho, 0.0).value;
            let c = v3.eval_unchecked(rho, 0.0).value;
            let e2 = self.second(rho);
            ((a * c * e2 * e2) - 1.0).abs() < 1e-8
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityKind {
    /// `exp(−a |x − x_c|²)`.
    Gaussian { center: Vec<f64>, sharpness: f64 },
    /// Grayscale PGM, rescaled to `[0, 1]`.
    Image { path: PathBuf },
    Uniform { level: f64 },
}

/// Density field description; values are floored at `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySpec {
    pub kind: DensityKind,
    pub floor: f64,
}

impl DensitySpec {
    pub fn gaussian(center: Vec<f64>, sharpness: f64) -> Self {
        Self {
            kind: DensityKind::Gaussian { center, sharpness },
            floor: 0.0,
        }
    }

    pub fn image(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: DensityKind::Image { path: path.into() },
            floor: 0.0,
        }
    }

    pub fn uniform(level: f64) -> Self {
        Self {
            kind: DensityKind::Uniform { level },
            floor: 0.0,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

/// Grayscale image with values rescaled to `[0, 1]`; row 0 is the top.
#[derive(Debug, Clone)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn load(path: &Path) -> Result<Self> {
        let io_err = |reason: String| Error::Io {
            path: path.to_path_buf(),
            reason,
        };
        let reader = image::ImageReader::open(path)
            .map_err(|e| io_err(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| io_err(e.to_string()))?;
        let img = reader.decode().map_err(|e| io_err(e.to_string()))?.into_luma16();
        let (w, h) = img.dimensions();
        let raw: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
        Self::from_raw(w as usize, h as usize, raw).map_err(|e| io_err(e.to_string()))
    }

    /// Rescales raw pixel values so that min → 0 and max → 1.
    pub fn from_raw(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || raw.len() != width * height {
            return Err(invalid("image has no pixels or inconsistent size"));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Bilinear sample at `(x, y) ∈ [0,1]²`, pixel centers at
    /// `((c + 0.5)/W, 1 − (r + 0.5)/H)`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let u = (x * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = ((1.0 - y) * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let p = |r: usize, c: usize| self.pixels[r * self.width + c];
        (1.0 - fv) * ((1.0 - fu) * p(r0, c0) + fu * p(r0, c1))
            + fv * ((1.0 - fu) * p(r1, c0) + fu * p(r1, c1))
    }
}

/// Values of a density field at the spatial quadrature points.
pub fn rasterize_density(spec: &DensitySpec, grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    let layout = grid.quad();
    let floor = spec.floor;
    if !(floor >= 0.0) {
        return Err(invalid(format!("density floor must be nonnegative, got {floor}")));
    }
    let points = (0..layout.n_space()).map(|i| layout.space_point(i));
    let raw: Vec<f64> = match &spec.kind {
        DensityKind::Gaussian { center, sharpness } => {
            if center.len() != layout.dim() {
                return Err(invalid(format!(
                    "gaussian center has {} coordinates, domain has dimension {}",
                    center.len(),
                    layout.dim()
                )));
            }
            if !(*sharpness >= 0.0) {
                return Err(invalid("gaussian sharpness must be nonnegative"));
            }
            points
                .map(|x| {
                    let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-sharpness * r2).exp()
                })
                .collect()
        }
        DensityKind::Uniform { level } => {
            if !(*level >= 0.0) {
                return Err(invalid(format!("uniform level must be nonnegative, got {level}")));
            }
            vec![*level; layout.n_space()]
        }
        DensityKind::Image { path } => {
            let img = GrayImage::load(path)?;
            points
                .map(|x| img.sample(x[0], x.get(1).copied().unwrap_or(0.5)))
                .collect()
        }
    };
    Ok(raw.into_iter().map(|v| v.max(floor)).collect())
}

/// Complete description of a mean-field control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub species: usize,
    pub reactions: ReactionMatrix,
    pub v1: Vec<Mobility>,
    pub v2: Vec<Mobility>,
    pub v3: Vec<Mobility>,
    pub beta: f64,
    pub potential: Potential,
    pub terminal: TerminalCondition,
    pub initial: Vec<DensitySpec>,
    pub energy: Energy,
    pub r: f64,
    pub final_time: f64,
}

impl ProblemSpec {
    /// Planning problem between per-species densities with identity
    /// transport mobility, no reactions, no potential and `β = 0`.
    pub fn planning(initial: Vec<DensitySpec>, terminal: Vec<DensitySpec>) -> Self {
        let m = initial.len();
        Self {
            species: m,
            reactions: ReactionMatrix::empty(m),
            v1: vec![Mobility::linear(); m],
            v2: Vec::new(),
            v3: (0..m).map(|_| Mobility::zero()).collect(),
            beta: 0.0,
            potential: Potential::none(),
            terminal: TerminalCondition::planning(terminal),
            initial,
            energy: Energy::None,
            r: 1.0,
            final_time: 1.0,
        }
    }

    /// Scalar problem with the single source reaction `Γ = [1]`.
    pub fn with_scalar_reaction(mut self, v2: Mobility) -> Self {
        self.reactions = ReactionMatrix::scalar();
        self.v2 = vec![v2.on_species(0)];
        self
    }

    /// Reactions whose mobility is not identically zero.
    pub fn active_reactions(&self) -> Vec<usize> {
        (0..self.reactions.reactions())
            .filter(|&p| self.v2.get(p).is_some_and(|m| !m.is_zero()))
            .collect()
    }
}

/// One failed validation check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_mobility(out: &mut Vec<Violation>, label: &str, m: &Mobility, species: usize) {
    let mut push = |msg: String| out.push(Violation(format!("{label}: {msg}")));
    if !(m.alpha >= 0.0 && m.alpha.is_finite()) {
        push(format!("alpha must be nonnegative, got {}", m.alpha));
    }
    if m.kind == MobilityKind::Power && !(0.0..=1.0).contains(&m.exponent) {
        push(format!("exponent must lie in [0, 1], got {}", m.exponent));
    }
    if m.kind.is_pair() {
        let [a, b] = m.species;
        if a == b {
            push(format!("pair ({a}, {b}) must join distinct species"));
        }
        if a >= species || b >= species {
            push(format!("pair ({a}, {b}) out of range for {species} species"));
        }
    } else if m.species[0] >= species {
        push(format!("species index {} out of range", m.species[0]));
    }
}

/// Checks every invariant of the problem; an empty list means valid.
pub fn validate(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Vec<Violation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Violation>, s: String| out.push(Violation(s));
    let m = spec.species;
    let gamma = &spec.reactions;
    let r = gamma.reactions();
    if m == 0 {
        push(&mut out, "at least one species is required".into());
        return out;
    }
    if !(spec.r > 0.0 && spec.r.is_finite()) {
        push(&mut out, format!("augmented Lagrangian parameter r must be positive, got {}", spec.r));
    }
    if !(spec.beta >= 0.0 && spec.beta.is_finite()) {
        push(&mut out, format!("beta must be nonnegative, got {}", spec.beta));
    }
    if (spec.final_time - grid.final_time()).abs() > 1e-12 * spec.final_time.abs().max(1.0) {
        push(&mut out, "final time differs from the grid".into());
    }
    if gamma.species() != m {
        push(&mut out, format!("reaction matrix has {} rows, expected {m}", gamma.species()));
    }
    for (name, len, want) in [
        ("V1", spec.v1.len(), m),
        ("V3", spec.v3.len(), m),
        ("V2", spec.v2.len(), r),
        ("initial densities", spec.initial.len(), m),
    ] {
        if len != want {
            push(&mut out, format!("{name} list has {len} entries, expected {want}"));
        }
    }
    if !out.is_empty() {
        return out;
    }
    if m >= 2 {
        for p in 0..r {
            let sum = gamma.column_sum(p);
            if sum != 0 {
                push(&mut out, format!("reaction column {p}: column sum nonzero ({sum})"));
            }
        }
    }
    for p in 0..r {
        let col = gamma.column(p);
        if spec.v2[p].kind.is_pair() && m >= 2 {
            let [a, b] = spec.v2[p].species;
            let ones = col.iter().filter(|&&v| v == 1).count();
            let minus = col.iter().filter(|&&v| v == -1).count();
            let zeros = col.iter().filter(|&&v| v == 0).count();
            if ones != 1 || minus != 1 || zeros != m - 2 {
                push(&mut out, format!("reaction column {p}: pairwise column must hold one +1 and one -1"));
            } else if a < m && b < m && (col[a] == 0 || col[b] == 0) {
                push(&mut out, format!("reaction column {p}: mobility pair ({a}, {b}) does not match the column"));
            }
        }
    }
    for (i, v) in spec.v1.iter().enumerate() {
        check_mobility(&mut out, &format!("V1[{i}]"), v, m);
    }
    for (i, v) in spec.v3.iter().enumerate() {
        check_mobility(&mut out, &format!("V3[{i}]"), v, m);
        if spec.beta > 0.0 && v.is_zero() {
            push(&mut out, format!("V3[{i}] must be nonzero when beta > 0"));
        }
    }
    for (p, v) in spec.v2.iter().enumerate() {
        check_mobility(&mut out, &format!("V2[{p}]"), v, m);
    }
    for v in spec.v1.iter().chain(&spec.v3) {
        if v.kind.is_pair() {
            push(&mut out, "V1 and V3 must be scalar mobilities".into());
            break;
        }
    }
    let pot = &spec.potential;
    if !pot.is_none() {
        if pot.tau.iter().any(|&t| !(t >= 0.0)) {
            push(&mut out, "potential weights tau must be nonnegative".into());
        }
        if pot.tau.len() > m || pot.drift.len() > m {
            push(&mut out, format!("potential coefficient lists longer than {m} species"));
        }
        if pot.kind == PotentialKind::PowerDrift && !(pot.power > 1.0) {
            push(&mut out, format!("power potential exponent must exceed 1, got {}", pot.power));
        }
        if pot.kind == PotentialKind::WeightedLinear && matches!(pot.shape, DriftShape::Cosine) {
            push(&mut out, "weighted_linear potential needs a weight field".into());
        }
    }
    let term = &spec.terminal;
    if term.targets.len() != m
        && (term.is_planning() || term.kind == TerminalKind::Kl || term.kind == TerminalKind::Quadratic)
    {
        push(&mut out, format!("terminal condition needs {m} target densities, got {}", term.targets.len()));
    }
    if !term.is_planning() && !(term.gamma > 0.0) {
        push(&mut out, format!("terminal weight gamma must be positive, got {}", term.gamma));
    }
    if !spec.energy.is_none() && spec.beta > 0.0 {
        let samples = [0.05, 0.3, 1.0, 2.7, 8.0];
        for i in 0..m {
            if !spec.energy.satisfies_relation(&spec.v1[i], &spec.v3[i], &samples) {
                push(&mut out, format!("energy does not satisfy V3 = 1/(V1 E''^2) for species {i}"));
            }
        }
    }

    let raster = |label: String, d: &DensitySpec, out: &mut Vec<Violation>| match rasterize_density(d, grid) {
        Ok(v) => Some(v),
        Err(e) => {
            out.push(Violation(format!("{label}: {e}")));
            None
        }
    };
    let rho0: Vec<_> = spec
        .initial
        .iter()
        .enumerate()
        .map(|(i, d)| raster(format!("initial density {i}"), d, &mut out))
        .collect();
    let rho1: Vec<_> = term
        .targets
        .iter()
        .enumerate()
        .map(|(i, d)| raster(format!("terminal density {i}"), d, &mut out))
        .collect();
    for (p, v) in spec.v2.iter().enumerate() {
        if let Some(w) = &v.weight {
            raster(format!("V2[{p}] weight"), w, &mut out);
        }
    }
    for (label, list) in [("V1", &spec.v1), ("V3", &spec.v3)] {
        for (i, v) in list.iter().enumerate() {
            if let Some(w) = &v.weight {
                raster(format!("{label}[{i}] weight"), w, &mut out);
            }
        }
    }
    if let DriftShape::Field(w) = &pot.shape {
        if !pot.is_none() {
            raster("potential weight".into(), w, &mut out);
        }
    }

    if term.is_planning() && rho1.len() == m {
        let layout = grid.quad();
        // Species joined by active reactions exchange mass; each connected
        // component conserves its total unless a reaction creates mass.
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut [usize], i: usize) -> usize {
            let mut i = i;
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut source = vec![false; m];
        let active = spec.active_reactions();
        let mut creating = Vec::new();
        for &p in &active {
            let rows: Vec<usize> = (0..m).filter(|&i| gamma.get(i, p) != 0).collect();
            for w in rows.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[a] = b;
            }
            if gamma.column_sum(p) != 0 {
                creating.extend(rows);
            }
        }
        for i in creating {
            let root = find(&mut parent, i);
            source[root] = true;
        }
        let mut totals: Vec<(Vec<usize>, f64, f64)> = Vec::new();
        let mut root_slot = vec![usize::MAX; m];
        for i in 0..m {
            let root = find(&mut parent, i);
            if source[root] {
                continue;
            }
            let (Some(a), Some(b)) = (&rho0[i], &rho1[i]) else {
                continue;
            };
            if root_slot[root] == usize::MAX {
                root_slot[root] = totals.len();
                totals.push((Vec::new(), 0.0, 0.0));
            }
            let slot = &mut totals[root_slot[root]];
            slot.0.push(i);
            slot.1 += layout.space_integral(a);
            slot.2 += layout.space_integral(b);
        }
        for (members, a, b) in totals {
            if (a - b).abs() > 1e-6 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
                push(
                    &mut out,
                    format!(
                        "infeasible planning: mass mismatch for species {members:?} (initial {a:.9e}, terminal {b:.9e})"
                    ),
                );
            }
        }
    }
    out
}
