//! The modified ALG2 iteration.
//!
//! One iteration is
//! 1. Step A: Gauss-Seidel elliptic solves for the multipliers `φ_i` and,
//!    when `β > 0`, the fluxes `σ_i`;
//! 2. Step B: pointwise density solves at every quadrature point followed by
//!    the closed-form updates of the other physical and dual variables;
//! 3. the terminal-layer solve when the terminal condition is a cost.
//!
//! Point fields are stored per quadrature point `q = j·n_space + i`:
//! `rho[q·M + s]`, `m[(q·M + s)·d + a]`, `n` like `m`, `s[q·R + p]`, and the
//! terminal layer `rho_t[i·M + s]`.

use crate::error::{Error, Result};
use crate::grid::{Factor, SpaceTimeGrid};
use crate::model::{rasterize_density, validate, DriftShape, Mobility, ProblemSpec};
use crate::pointwise::{mobility_at, single_at, terminal_solve, PointData, PointwiseSolver};
use crate::sparse::{
    norm, pcg_with_reference, CsrMatrix, IdentityPreconditioner, JacobiPreconditioner, Preconditioner,
    SolveStats,
};
use crate::tensor::{BlockPreconditioner, FastDiagonalization, KronSystem, KronTerm, PairMember};

/// Preconditioner used inside the conjugate-gradient solves of Step A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioning {
    None,
    Jacobi,
    /// Fast diagonalization of the Kronecker structure.
    #[default]
    Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub pcg_tol: f64,
    /// Defaults to ten times the system size.
    pub pcg_maxit: Option<usize>,
    pub inner_sweeps: usize,
    pub newton_tol: f64,
    pub preconditioner: Preconditioning,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            pcg_tol: 1e-10,
            pcg_maxit: None,
            inner_sweeps: 1,
            newton_tol: 1e-10,
            preconditioner: Preconditioning::Tensor,
        }
    }
}

/// Point values of the physical variables `u = (ρ, m, s, n, ρ_T)` or of any
/// quantity with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFields {
    pub rho: Vec<f64>,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    /// Empty when `β = 0`.
    pub n: Vec<f64>,
    /// Empty for planning problems.
    pub rho_t: Vec<f64>,
}

pub type PhysState = QuadFields;
pub type DualState = QuadFields;
pub type BarValues = QuadFields;

impl QuadFields {
    fn zeros(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Self {
        let nq = grid.quad().n_total();
        let species = spec.species;
        let d = grid.dim();
        Self {
            rho: vec![0.0; nq * species],
            m: vec![0.0; nq * species * d],
            s: vec![0.0; nq * spec.reactions.reactions()],
            n: if spec.beta > 0.0 { vec![0.0; nq * species * d] } else { Vec::new() },
            rho_t: if spec.terminal.is_planning() {
                Vec::new()
            } else {
                vec![0.0; grid.quad().n_space() * species]
            },
        }
    }

    /// `self + other / r`, field by field.
    fn plus_scaled(&self, other: &Self, r: f64) -> Self {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y / r).collect();
        Self {
            rho: f(&self.rho, &other.rho),
            m: f(&self.m, &other.m),
            s: f(&self.s, &other.s),
            n: f(&self.n, &other.n),
            rho_t: f(&self.rho_t, &other.rho_t),
        }
    }

    /// Values of species `i` as one quadrature field.
    pub fn species_density(&self, species: usize, i: usize) -> Vec<f64> {
        self.rho.iter().skip(i).step_by(species).copied().collect()
    }
}

/// H¹ coefficients of the multipliers: `phi[i]` and, when `β > 0`,
/// `sigma[i]` (component-major, x first).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierState {
    pub phi: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct States {
    pub phys: PhysState,
    pub dual: DualState,
    pub mult: MultiplierState,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub m: f64,
    pub s: f64,
    pub n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub kkt: KktResiduals,
    /// `masses[i][j]`: mass of species `i` at time quadrature point `j`.
    pub masses: Vec<Vec<f64>>,
    pub linear_solves: Vec<SolveStats>,
}

/// Output of Step A: the new multipliers' discrete derivatives `D(Φ)`.
#[derive(Debug, Clone)]
pub struct StepA {
    pub derivatives: QuadFields,
    pub linear_solves: Vec<SolveStats>,
}

struct LinearSystem {
    op: KronSystem,
    prec: Box<dyn Preconditioner + Send + Sync>,
    project_constant: bool,
}

fn time_matrix(grid: &SpaceTimeGrid, terminal: bool) -> Result<CsrMatrix> {
    let t = grid.time_axis();
    let kt = t.stiffness();
    if !terminal {
        return Ok(kt);
    }
    let n = t.n_dofs();
    let corner = CsrMatrix::from_triplets(n, n, vec![(n - 1, n - 1, 1.0)])?;
    CsrMatrix::linear_combination(&[(1.0, &kt), (1.0, &corner)])
}

/// Sum of squared reaction coefficients of species `i` over active reactions.
fn reaction_coupling(spec: &ProblemSpec, i: usize) -> f64 {
    spec.active_reactions()
        .iter()
        .map(|&p| f64::from(spec.reactions.get(i, p)).powi(2))
        .sum()
}

/// Kronecker terms `(coef, members)` of the φ-operator. Time pair is
/// `(A_t, M_t)`, spatial pairs are `(M, K)`.
fn phi_terms(d: usize, coupling: f64) -> Vec<KronTerm> {
    use PairMember::{A, B};
    let term = |coef: f64, members: Vec<PairMember>| KronTerm { coef, members };
    let mut terms = match d {
        1 => vec![term(1.0, vec![A, A]), term(1.0, vec![B, B])],
        _ => vec![
            term(1.0, vec![A, A, A]),
            term(1.0, vec![B, B, A]),
            term(1.0, vec![B, A, B]),
        ],
    };
    if coupling != 0.0 {
        let mut members = vec![A; d + 1];
        members[0] = B;
        terms.push(term(coupling, members));
    }
    terms
}

fn phi_operator(spec: &ProblemSpec, grid: &SpaceTimeGrid, coupling: f64) -> Result<KronSystem> {
    let d = grid.dim();
    let at = time_matrix(grid, !spec.terminal.is_planning())?;
    let mt = grid.time_axis().mass();
    let (mx, kx) = (grid.space_axis().mass(), grid.space_axis().stiffness());
    let mut op = KronSystem::new(1, grid.dofs().dims().to_vec());
    for t in phi_terms(d, coupling) {
        let mut factors = vec![if t.members[0] == PairMember::A { at.clone() } else { mt.clone() }];
        for m in &t.members[1..] {
            factors.push(if *m == PairMember::A { mx.clone() } else { kx.clone() });
        }
        op.add(0, 0, t.coef, factors)?;
    }
    Ok(op)
}

fn sigma_operator(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<KronSystem> {
    let d = grid.dim();
    let b2 = spec.beta * spec.beta;
    let mt = grid.time_axis().mass();
    let s = grid.space_axis();
    let (mx, kx, c) = (s.mass(), s.stiffness(), s.value_deriv());
    let dofs = grid.dofs();
    let mut op = KronSystem::new(d, dofs.dims().to_vec());
    let mut fixed = Vec::new();
    if d == 1 {
        op.add(0, 0, b2, vec![mt.clone(), kx])?;
        op.add(0, 0, 1.0, vec![mt, mx])?;
        fixed.extend(dofs.boundary_face(0, false));
        fixed.extend(dofs.boundary_face(0, true));
    } else {
        let n = dofs.count();
        // Storage order [t, y, x]; block 0 is σ_x, block 1 is σ_y.
        op.add(0, 0, b2, vec![mt.clone(), mx.clone(), kx.clone()])?;
        op.add(1, 1, b2, vec![mt.clone(), kx, mx.clone()])?;
        op.add(0, 1, b2, vec![mt.clone(), c.clone(), c.transpose()])?;
        op.add(1, 0, b2, vec![mt.clone(), c.transpose(), c])?;
        for blk in 0..2 {
            op.add(blk, blk, 1.0, vec![mt.clone(), mx.clone(), mx.clone()])?;
        }
        fixed.extend(dofs.boundary_face(0, false));
        fixed.extend(dofs.boundary_face(0, true));
        fixed.extend(dofs.boundary_face(1, false).into_iter().map(|i| i + n));
        fixed.extend(dofs.boundary_face(1, true).into_iter().map(|i| i + n));
    }
    fixed.sort_unstable();
    op.constrain(fixed);
    Ok(op)
}

fn phi_preconditioner(
    spec: &ProblemSpec,
    grid: &SpaceTimeGrid,
    op: &KronSystem,
    coupling: f64,
    kind: Preconditioning,
) -> Result<Box<dyn Preconditioner + Send + Sync>> {
    Ok(match kind {
        Preconditioning::None => Box::new(IdentityPreconditioner),
        Preconditioning::Jacobi => Box::new(JacobiPreconditioner::from_diagonal(op.diagonal())),
        Preconditioning::Tensor => {
            let at = time_matrix(grid, !spec.terminal.is_planning())?;
            let s = grid.space_axis();
            let mut pairs = vec![(at, grid.time_axis().mass())];
            pairs.extend((0..grid.dim()).map(|_| (s.mass(), s.stiffness())));
            let free = vec![None; pairs.len()];
            Box::new(FastDiagonalization::new(&pairs, &phi_terms(grid.dim(), coupling), &free)?)
        }
    })
}

fn sigma_preconditioner(
    spec: &ProblemSpec,
    grid: &SpaceTimeGrid,
    op: &KronSystem,
    kind: Preconditioning,
) -> Result<Box<dyn Preconditioner + Send + Sync>> {
    use PairMember::{A, B};
    Ok(match kind {
        Preconditioning::None => Box::new(IdentityPreconditioner),
        Preconditioning::Jacobi => Box::new(JacobiPreconditioner::from_diagonal(op.diagonal())),
        Preconditioning::Tensor => {
            let d = grid.dim();
            let b2 = spec.beta * spec.beta;
            let t = grid.time_axis();
            let s = grid.space_axis();
            let interior: Vec<usize> = (1..s.n_dofs() - 1).collect();
            let mut blocks: Vec<Box<dyn Preconditioner + Send + Sync>> = Vec::new();
            for comp in 0..d {
                let mut pairs = vec![(t.mass(), t.stiffness())];
                let mut free = vec![None];
                let mut members = vec![A];
                // Storage order is [t, (y,) x]; component `comp` is
                // differentiated and constrained along its own axis.
                for axis in (0..d).rev() {
                    pairs.push((s.mass(), s.stiffness()));
                    free.push((axis == comp).then(|| interior.clone()));
                    members.push(if axis == comp { B } else { A });
                }
                let terms = vec![
                    KronTerm { coef: b2, members },
                    KronTerm { coef: 1.0, members: vec![A; d + 1] },
                ];
                blocks.push(Box::new(FastDiagonalization::new(&pairs, &terms, &free)?));
            }
            Box::new(BlockPreconditioner::new(op.block_len(), blocks))
        }
    })
}

/// The φ_i system matrix of Step A (assembled; intended for small grids).
pub fn assemble_phi_system(spec: &ProblemSpec, grid: &SpaceTimeGrid, species: usize) -> Result<CsrMatrix> {
    if species >= spec.species {
        return Err(Error::InvalidArgument(format!(
            "species {species} out of range for {} species",
            spec.species
        )));
    }
    phi_operator(spec, grid, reaction_coupling(spec, species))?.assemble()
}

/// The σ system matrix of Step A with normal components eliminated.
pub fn assemble_sigma_system(spec: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<CsrMatrix> {
    if !(spec.beta > 0.0) {
        return Err(Error::InvalidState("the flux system exists only for beta > 0".into()));
    }
    sigma_operator(spec, grid)?.assemble()
}

/// One pointwise density solve with data `d`, warm-started from `warm`.
pub fn pointwise_density_solve(spec: &ProblemSpec, d: &PointData, warm: &[f64]) -> Result<Vec<f64>> {
    let mut rho = warm.to_vec();
    PointwiseSolver::new(spec)
        .solve(d, &mut rho)
        .map_err(|reason| Error::Numerical { t: f64::NAN, x: Vec::new(), reason })?;
    Ok(rho)
}

/// Terminal-layer density solve at one spatial point.
pub fn terminal_density_solve(spec: &ProblemSpec, rho_bar_t: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if spec.terminal.is_planning() {
        return Err(Error::InvalidState("planning problems have no terminal layer".into()));
    }
    terminal_solve(spec, rho_bar_t, targets, &vec![0.0; rho_bar_t.len()], 1e-10)
        .map_err(|reason| Error::Numerical { t: spec.final_time, x: Vec::new(), reason })
}

/// A validated problem on a grid, ready to iterate.
pub struct Alg2Solver {
    spec: ProblemSpec,
    grid: SpaceTimeGrid,
    options: SolverOptions,
    active: Vec<usize>,
    weights: Vec<f64>,
    rho0: Vec<Vec<f64>>,
    rho1: Vec<Vec<f64>>,
    w1: Vec<Option<Vec<f64>>>,
    w3: Vec<Option<Vec<f64>>>,
    w2: Vec<Option<Vec<f64>>>,
    shape: Vec<f64>,
    phi_index: Vec<usize>,
    phi_systems: Vec<LinearSystem>,
    sigma_system: Option<LinearSystem>,
}

fn spatial_weight(m: &Mobility, grid: &SpaceTimeGrid) -> Result<Option<Vec<f64>>> {
    m.weight.as_ref().map(|w| rasterize_density(w, grid)).transpose()
}

fn ratio(num: f64, v: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if v > 0.0 {
        num / (2.0 * v)
    } else {
        f64::INFINITY
    }
}

impl Alg2Solver {
    pub fn new(spec: ProblemSpec, grid: SpaceTimeGrid, options: SolverOptions) -> Result<Self> {
        let violations = validate(&spec, &grid);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidArgument(list.join("; ")));
        }
        if !(options.pcg_tol > 0.0) || !(options.newton_tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        let layout = grid.quad();
        let nq = layout.n_total();
        let weights = (0..nq).map(|q| layout.weight(q)).collect();
        let rho0 = spec
            .initial
            .iter()
            .map(|d| rasterize_density(d, &grid))
            .collect::<Result<Vec<_>>>()?;
        let rho1 = spec
            .terminal
            .targets
            .iter()
            .map(|d| rasterize_density(d, &grid))
            .collect::<Result<Vec<_>>>()?;
        let active = spec.active_reactions();
        let w1 = spec.v1.iter().map(|m| spatial_weight(m, &grid)).collect::<Result<Vec<_>>>()?;
        let w3 = spec.v3.iter().map(|m| spatial_weight(m, &grid)).collect::<Result<Vec<_>>>()?;
        let w2 = active
            .iter()
            .map(|&p| spatial_weight(&spec.v2[p], &grid))
            .collect::<Result<Vec<_>>>()?;
        let shape = if spec.potential.is_none() {
            Vec::new()
        } else {
            let field = match &spec.potential.shape {
                DriftShape::Field(d) => Some(rasterize_density(d, &grid)?),
                DriftShape::Cosine => None,
            };
            let ns = layout.n_space();
            (0..nq)
                .map(|q| {
                    let (j, i) = (q / ns, q % ns);
                    let f = field.as_ref().map(|f| f[i]);
                    spec.potential.shape_value(layout.time_points()[j], layout.space_point(i), f)
                })
                .collect()
        };

        let mut couplings: Vec<f64> = Vec::new();
        let mut phi_index = Vec::with_capacity(spec.species);
        let mut phi_systems = Vec::new();
        for i in 0..spec.species {
            let c = reaction_coupling(&spec, i);
            let idx = match couplings.iter().position(|&x| x == c) {
                Some(idx) => idx,
                None => {
                    let op = phi_operator(&spec, &grid, c)?;
                    let prec = phi_preconditioner(&spec, &grid, &op, c, options.preconditioner)?;
                    phi_systems.push(LinearSystem {
                        op,
                        prec,
                        project_constant: c == 0.0 && spec.terminal.is_planning(),
                    });
                    couplings.push(c);
                    couplings.len() - 1
                }
            };
            phi_index.push(idx);
        }
        let sigma_system = if spec.beta > 0.0 {
            let op = sigma_operator(&spec, &grid)?;
            let prec = sigma_preconditioner(&spec, &grid, &op, options.preconditioner)?;
            Some(LinearSystem { op, prec, project_constant: false })
        } else {
            None
        };
        Ok(Self {
            spec,
            grid,
            options,
            active,
            weights,
            rho0,
            rho1,
            w1,
            w3,
            w2,
            shape,
            phi_index,
            phi_systems,
            sigma_system,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// Initial densities at the spatial quadrature points, per species.
    pub fn initial_density(&self) -> &[Vec<f64>] {
        &self.rho0
    }

    /// Terminal target densities at the spatial quadrature points.
    pub fn terminal_density(&self) -> &[Vec<f64>] {
        &self.rho1
    }

    /// Linear-in-time interpolation between the end densities (planning) or
    /// the constant initial density; all other fields zero.
    pub fn init_states(&self) -> States {
        let (spec, grid) = (&self.spec, &self.grid);
        let layout = grid.quad();
        let (ns, species) = (layout.n_space(), spec.species);
        let mut phys = QuadFields::zeros(spec, grid);
        let planning = spec.terminal.is_planning();
        for (j, &t) in layout.time_points().iter().enumerate() {
            let theta = if planning { t / spec.final_time } else { 0.0 };
            for i in 0..ns {
                for s in 0..species {
                    let end = if planning { self.rho1[s][i] } else { 0.0 };
                    phys.rho[(j * ns + i) * species + s] = (1.0 - theta) * self.rho0[s][i] + theta * end;
                }
            }
        }
        for i in 0..ns {
            for s in 0..species {
                if let Some(v) = phys.rho_t.get_mut(i * species + s) {
                    *v = self.rho0[s][i];
                }
            }
        }
        let dual = QuadFields::zeros(spec, grid);
        let n = grid.dofs().count();
        let mult = MultiplierState {
            phi: vec![vec![0.0; n]; species],
            sigma: if spec.beta > 0.0 { vec![vec![0.0; n * grid.dim()]; species] } else { Vec::new() },
        };
        States { phys, dual, mult }
    }

    fn values(&self) -> Vec<Factor> {
        vec![Factor::Value; self.grid.dim()]
    }

    fn with_deriv(&self, a: usize) -> Vec<Factor> {
        let mut f = self.values();
        f[a] = Factor::Deriv;
        f
    }

    fn divergence(&self, sigma: &[f64]) -> Vec<f64> {
        let n = self.grid.dofs().count();
        let mut div = vec![0.0; self.grid.quad().n_total()];
        for a in 0..self.grid.dim() {
            let part = self.grid.apply_h1(&sigma[a * n..(a + 1) * n], Factor::Value, &self.with_deriv(a));
            add_into(&mut div, &part);
        }
        div
    }

    fn solve(&self, sys: &LinearSystem, mut b: Vec<f64>, scale: f64, x: &mut [f64]) -> Result<SolveStats> {
        if sys.project_constant {
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            b.iter_mut().for_each(|v| *v -= mean);
        }
        for &i in sys.op.fixed() {
            b[i] = 0.0;
        }
        let maxit = self.options.pcg_maxit.unwrap_or(10 * b.len());
        pcg_with_reference(&sys.op, &b, x, self.options.pcg_tol, maxit, sys.prec.as_ref(), scale)
    }

    /// Step A: updates `φ` (Gauss-Seidel over species) and `σ`, returning
    /// `D(Φ)` at the quadrature points.
    pub fn step_a(&self, states: &mut States) -> Result<StepA> {
        let (spec, grid) = (&self.spec, &self.grid);
        let layout = grid.quad();
        let (nq, ns) = (layout.n_total(), layout.n_space());
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let (r, beta) = (spec.r, spec.beta);
        let w = &self.weights;
        let omega = layout.space_weights();
        let vals = self.values();
        let (phys, dual) = (&states.phys, &states.dual);
        let mut phi_vals: Vec<Vec<f64>> =
            states.mult.phi.iter().map(|c| grid.apply_h1(c, Factor::Value, &vals)).collect();
        let mut stats = Vec::new();

        for i in 0..species {
            let div_prev = (beta > 0.0).then(|| self.divergence(&states.mult.sigma[i]));
            let ft: Vec<f64> = (0..nq)
                .map(|q| {
                    let k = q * species + i;
                    let div = div_prev.as_ref().map_or(0.0, |v| beta * v[q]);
                    w[q] * (dual.rho[k] - phys.rho[k] / r - div)
                })
                .collect();
            let mut b = grid.apply_h1_transpose(&ft, Factor::Deriv, &vals);
            let mut scale = norm(&b);
            for a in 0..d {
                let fx: Vec<f64> = (0..nq)
                    .map(|q| {
                        let k = (q * species + i) * d + a;
                        w[q] * (dual.m[k] - phys.m[k] / r)
                    })
                    .collect();
                scale = scale.max(add_into(&mut b, &grid.apply_h1_transpose(&fx, Factor::Value, &self.with_deriv(a))));
            }
            let coupled: Vec<usize> = self
                .active
                .iter()
                .copied()
                .filter(|&p| spec.reactions.get(i, p) != 0)
                .collect();
            if !coupled.is_empty() {
                let f0: Vec<f64> = (0..nq)
                    .map(|q| {
                        let sum: f64 = coupled
                            .iter()
                            .map(|&p| {
                                let k = q * reactions + p;
                                let others: f64 = (0..species)
                                    .filter(|&j| j != i)
                                    .map(|j| f64::from(spec.reactions.get(j, p)) * phi_vals[j][q])
                                    .sum();
                                f64::from(spec.reactions.get(i, p)) * (dual.s[k] - phys.s[k] / r - others)
                            })
                            .sum();
                        w[q] * sum
                    })
                    .collect();
                scale = scale.max(add_into(&mut b, &grid.apply_h1_transpose(&f0, Factor::Value, &vals)));
            }
            let start: Vec<f64> = (0..ns).map(|k| -omega[k] * self.rho0[i][k] / r).collect();
            scale = scale.max(add_into(&mut b, &grid.apply_h1_transpose(&start, Factor::TraceStart, &vals)));
            let end: Vec<f64> = if spec.terminal.is_planning() {
                (0..ns).map(|k| omega[k] * self.rho1[i][k] / r).collect()
            } else {
                (0..ns)
                    .map(|k| {
                        let idx = k * species + i;
                        -omega[k] * (dual.rho_t[idx] - phys.rho_t[idx] / r)
                    })
                    .collect()
            };
            scale = scale.max(add_into(&mut b, &grid.apply_h1_transpose(&end, Factor::TraceEnd, &vals)));

            let sys = &self.phi_systems[self.phi_index[i]];
            stats.push(self.solve(sys, b, scale, &mut states.mult.phi[i])?);
            phi_vals[i] = grid.apply_h1(&states.mult.phi[i], Factor::Value, &vals);
        }

        let mut out = QuadFields::zeros(spec, grid);
        for i in 0..species {
            let e = grid.eval_h1_at_quads(&states.mult.phi[i])?;
            if let Some(sys) = &self.sigma_system {
                let n = grid.dofs().count();
                let mut b = vec![0.0; n * d];
                let mut scale = 0.0f64;
                for a in 0..d {
                    let grho: Vec<f64> = (0..nq)
                        .map(|q| {
                            let k = q * species + i;
                            w[q] * beta * (dual.rho[k] - phys.rho[k] / r - e.time_derivatives[q])
                        })
                        .collect();
                    let gn: Vec<f64> = (0..nq)
                        .map(|q| {
                            let k = (q * species + i) * d + a;
                            w[q] * (dual.n[k] - phys.n[k] / r)
                        })
                        .collect();
                    let part = &mut b[a * n..(a + 1) * n];
                    scale = scale.max(add_into(part, &grid.apply_h1_transpose(&grho, Factor::Value, &self.with_deriv(a))));
                    scale = scale.max(add_into(part, &grid.apply_h1_transpose(&gn, Factor::Value, &vals)));
                }
                stats.push(self.solve(sys, b, scale, &mut states.mult.sigma[i])?);
                let sigma = &states.mult.sigma[i];
                let div = self.divergence(sigma);
                for a in 0..d {
                    let v = grid.apply_h1(&sigma[a * n..(a + 1) * n], Factor::Value, &vals);
                    for q in 0..nq {
                        out.n[(q * species + i) * d + a] = v[q];
                    }
                }
                for q in 0..nq {
                    out.rho[q * species + i] = e.time_derivatives[q] + beta * div[q];
                }
            } else {
                for q in 0..nq {
                    out.rho[q * species + i] = e.time_derivatives[q];
                }
            }
            for a in 0..d {
                for q in 0..nq {
                    out.m[(q * species + i) * d + a] = e.gradients[a][q];
                }
            }
            for k in 0..out.rho_t.len() / species.max(1) {
                out.rho_t[k * species + i] = -e.trace_end[k];
            }
            phi_vals[i] = e.values;
        }
        for &p in &self.active {
            for q in 0..nq {
                out.s[q * reactions + p] = (0..species)
                    .map(|j| f64::from(spec.reactions.get(j, p)) * phi_vals[j][q])
                    .sum();
            }
        }
        Ok(StepA { derivatives: out, linear_solves: stats })
    }

    /// `ū = D(Φ) + u / r`.
    pub fn bar_values(&self, derivatives: &QuadFields, phys: &PhysState) -> BarValues {
        derivatives.plus_scaled(phys, self.spec.r)
    }

    /// Step B including the closed-form recovery of `m, s, n` and all duals.
    pub fn step_b(&self, bar: &BarValues, states: &mut States) -> Result<()> {
        let (spec, grid) = (&self.spec, &self.grid);
        let layout = grid.quad();
        let (nq, ns) = (layout.n_total(), layout.n_space());
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let r = spec.r;
        let with_n = spec.beta > 0.0;
        let solver = PointwiseSolver::new(spec)
            .with_sweeps(self.options.inner_sweeps)
            .with_tol(self.options.newton_tol);
        let mut data = PointData::new(species, self.active.len());
        let mut rho = vec![0.0; species];
        let at = |w: &Option<Vec<f64>>, i: usize| w.as_ref().map_or(1.0, |w| w[i]);
        for q in 0..nq {
            let i_s = q % ns;
            for i in 0..species {
                let k = q * species + i;
                data.rho_bar[i] = bar.rho[k];
                data.m_bar_sq[i] = bar.m[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
                if with_n {
                    data.n_bar_sq[i] = bar.n[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
                }
                data.w1[i] = at(&self.w1[i], i_s);
                data.w3[i] = at(&self.w3[i], i_s);
            }
            for (slot, &p) in self.active.iter().enumerate() {
                data.s_bar_sq[slot] = bar.s[q * reactions + p].powi(2);
                data.w2[slot] = at(&self.w2[slot], i_s);
            }
            data.shape = self.shape.get(q).copied().unwrap_or(0.0);
            rho.copy_from_slice(&states.phys.rho[q * species..(q + 1) * species]);
            solver.solve(&data, &mut rho).map_err(|reason| Error::Numerical {
                t: layout.time_points()[q / ns],
                x: layout.space_point(i_s).to_vec(),
                reason,
            })?;

            let (phys, dual) = (&mut states.phys, &mut states.dual);
            for i in 0..species {
                let k = q * species + i;
                phys.rho[k] = rho[i];
                dual.rho[k] = bar.rho[k] - rho[i] / r;
                let v1 = single_at(&spec.v1[i], rho[i], data.w1[i]).0;
                for idx in k * d..(k + 1) * d {
                    phys.m[idx] = r * v1 / (r + v1) * bar.m[idx];
                    dual.m[idx] = r / (r + v1) * bar.m[idx];
                }
                if with_n {
                    let v3 = single_at(&spec.v3[i], rho[i], data.w3[i]).0;
                    for idx in k * d..(k + 1) * d {
                        phys.n[idx] = r * v3 / (r + v3) * bar.n[idx];
                        dual.n[idx] = r / (r + v3) * bar.n[idx];
                    }
                }
            }
            for (slot, &p) in self.active.iter().enumerate() {
                let v2 = mobility_at(&spec.v2[p], &rho, data.w2[slot]).0;
                let k = q * reactions + p;
                phys.s[k] = r * v2 / (r + v2) * bar.s[k];
                dual.s[k] = r / (r + v2) * bar.s[k];
            }
        }
        if !spec.terminal.is_planning() {
            self.terminal_step(bar, states)?;
        }
        Ok(())
    }

    fn terminal_step(&self, bar: &BarValues, states: &mut States) -> Result<()> {
        let spec = &self.spec;
        let species = spec.species;
        let r = spec.r;
        let layout = self.grid.quad();
        for i_s in 0..layout.n_space() {
            let range = i_s * species..(i_s + 1) * species;
            let targets: Vec<f64> = (0..species).map(|s| self.rho1[s][i_s]).collect();
            let out = terminal_solve(
                spec,
                &bar.rho_t[range.clone()],
                &targets,
                &states.phys.rho_t[range.clone()],
                self.options.newton_tol,
            )
            .map_err(|reason| Error::Numerical {
                t: spec.final_time,
                x: layout.space_point(i_s).to_vec(),
                reason,
            })?;
            for (k, v) in range.zip(out) {
                states.phys.rho_t[k] = v;
                states.dual.rho_t[k] = bar.rho_t[k] - v / r;
            }
        }
        Ok(())
    }

    /// One full iteration; the report's `iteration` field is left at 0.
    pub fn iterate(&self, states: &mut States) -> Result<IterationReport> {
        let a = self.step_a(states)?;
        let bar = self.bar_values(&a.derivatives, &states.phys);
        self.step_b(&bar, states)?;
        Ok(IterationReport {
            iteration: 0,
            objective: self.objective(states),
            primal_residual: self.primal_residual(&a.derivatives, &states.dual),
            kkt: self.kkt_from(&a.derivatives, states),
            masses: self.mass_per_time(states),
            linear_solves: a.linear_solves,
        })
    }

    /// Runs `n_iters` iterations, calling `hook` after each one.
    pub fn run(
        &self,
        states: &mut States,
        n_iters: usize,
        mut hook: impl FnMut(&IterationReport, &States),
    ) -> Result<Vec<IterationReport>> {
        if n_iters == 0 {
            return Err(Error::InvalidArgument("the iteration count must be at least 1".into()));
        }
        let mut reports = Vec::with_capacity(n_iters);
        for it in 1..=n_iters {
            let mut report = self.iterate(states)?;
            report.iteration = it;
            hook(&report, states);
            reports.push(report);
        }
        Ok(reports)
    }

    /// Quadrature-weighted `‖D(Φ) − u*‖`, including the terminal layer.
    pub fn primal_residual(&self, derivatives: &QuadFields, dual: &DualState) -> f64 {
        let (species, d) = (self.spec.species, self.grid.dim());
        let reactions = self.spec.reactions.reactions();
        let mut sum = 0.0;
        let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
        for (q, &w) in self.weights.iter().enumerate() {
            let r1 = q * species..(q + 1) * species;
            let rv = q * species * d..(q + 1) * species * d;
            let rs = q * reactions..(q + 1) * reactions;
            let mut local = sq(&derivatives.rho[r1.clone()], &dual.rho[r1]);
            local += sq(&derivatives.m[rv.clone()], &dual.m[rv.clone()]);
            local += sq(&derivatives.s[rs.clone()], &dual.s[rs]);
            if !dual.n.is_empty() {
                local += sq(&derivatives.n[rv.clone()], &dual.n[rv]);
            }
            sum += w * local;
        }
        let omega = self.grid.quad().space_weights();
        for (i, &o) in omega.iter().enumerate() {
            if dual.rho_t.is_empty() {
                break;
            }
            let r = i * species..(i + 1) * species;
            sum += o * sq(&derivatives.rho_t[r.clone()], &dual.rho_t[r]);
        }
        sum.sqrt()
    }

    /// Discrete objective: kinetic, reaction and diffusion costs minus the
    /// potential, plus the terminal cost.
    pub fn objective(&self, states: &States) -> f64 {
        let (spec, grid) = (&self.spec, &self.grid);
        let layout = grid.quad();
        let ns = layout.n_space();
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let u = &states.phys;
        let at = |w: &Option<Vec<f64>>, i: usize| w.as_ref().map_or(1.0, |w| w[i]);
        let mut total = 0.0;
        for (q, &w) in self.weights.iter().enumerate() {
            let i_s = q % ns;
            let rho = &u.rho[q * species..(q + 1) * species];
            let shape = self.shape.get(q).copied().unwrap_or(0.0);
            let mut local = 0.0;
            for i in 0..species {
                let k = q * species + i;
                let m2: f64 = u.m[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
                local += ratio(m2, single_at(&spec.v1[i], rho[i], at(&self.w1[i], i_s)).0);
                if !u.n.is_empty() {
                    let n2: f64 = u.n[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
                    local += ratio(n2, single_at(&spec.v3[i], rho[i], at(&self.w3[i], i_s)).0);
                }
                local -= spec.potential.species_term(i, rho[i], shape).0;
            }
            for (slot, &p) in self.active.iter().enumerate() {
                let s = u.s[q * reactions + p];
                local += ratio(s * s, mobility_at(&spec.v2[p], rho, at(&self.w2[slot], i_s)).0);
            }
            total += w * local;
        }
        if !u.rho_t.is_empty() {
            let omega = layout.space_weights();
            for (i_s, &o) in omega.iter().enumerate() {
                for s in 0..species {
                    total += o * spec.terminal.species_term(u.rho_t[i_s * species + s], self.rho1[s][i_s]).0;
                }
            }
        }
        total
    }

    fn kkt_from(&self, derivatives: &QuadFields, states: &States) -> KktResiduals {
        let (spec, grid) = (&self.spec, &self.grid);
        let ns = grid.quad().n_space();
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let u = &states.phys;
        let at = |w: &Option<Vec<f64>>, i: usize| w.as_ref().map_or(1.0, |w| w[i]);
        let mut out = KktResiduals::default();
        for (q, &w) in self.weights.iter().enumerate() {
            let i_s = q % ns;
            let rho = &u.rho[q * species..(q + 1) * species];
            for i in 0..species {
                let k = q * species + i;
                let v1 = single_at(&spec.v1[i], rho[i], at(&self.w1[i], i_s)).0;
                for idx in k * d..(k + 1) * d {
                    out.m += w * (u.m[idx] - v1 * derivatives.m[idx]).powi(2);
                }
                if !u.n.is_empty() {
                    let v3 = single_at(&spec.v3[i], rho[i], at(&self.w3[i], i_s)).0;
                    for idx in k * d..(k + 1) * d {
                        out.n += w * (u.n[idx] - v3 * derivatives.n[idx]).powi(2);
                    }
                }
            }
            for (slot, &p) in self.active.iter().enumerate() {
                let v2 = mobility_at(&spec.v2[p], rho, at(&self.w2[slot], i_s)).0;
                let k = q * reactions + p;
                out.s += w * (u.s[k] - v2 * derivatives.s[k]).powi(2);
            }
        }
        KktResiduals { m: out.m.sqrt(), s: out.s.sqrt(), n: out.n.sqrt() }
    }

    /// `D(Φ)` of the current multipliers without solving anything.
    pub fn derivatives(&self, mult: &MultiplierState) -> Result<QuadFields> {
        let (spec, grid) = (&self.spec, &self.grid);
        let nq = grid.quad().n_total();
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let mut out = QuadFields::zeros(spec, grid);
        let mut values = Vec::with_capacity(species);
        let n = grid.dofs().count();
        for i in 0..species {
            let e = grid.eval_h1_at_quads(&mult.phi[i])?;
            let div = (spec.beta > 0.0).then(|| self.divergence(&mult.sigma[i]));
            for q in 0..nq {
                let k = q * species + i;
                out.rho[k] = e.time_derivatives[q] + div.as_ref().map_or(0.0, |v| spec.beta * v[q]);
                for a in 0..d {
                    out.m[k * d + a] = e.gradients[a][q];
                }
            }
            if spec.beta > 0.0 {
                for a in 0..d {
                    let v = grid.apply_h1(&mult.sigma[i][a * n..(a + 1) * n], Factor::Value, &self.values());
                    for q in 0..nq {
                        out.n[(q * species + i) * d + a] = v[q];
                    }
                }
            }
            for k in 0..out.rho_t.len() / species {
                out.rho_t[k * species + i] = -e.trace_end[k];
            }
            values.push(e.values);
        }
        for &p in &self.active {
            for q in 0..nq {
                out.s[q * reactions + p] =
                    (0..species).map(|j| f64::from(spec.reactions.get(j, p)) * values[j][q]).sum();
            }
        }
        Ok(out)
    }

    /// Optimality residuals `‖m − V₁∇φ‖`, `‖s − V₂Γᵀφ‖`, `‖n − V₃σ‖`.
    pub fn kkt_residuals(&self, states: &States) -> Result<KktResiduals> {
        Ok(self.kkt_from(&self.derivatives(&states.mult)?, states))
    }

    /// `masses[i][j] = Σ_k ρ_i(η_j, ξ_k) ω_k`.
    pub fn mass_per_time(&self, states: &States) -> Vec<Vec<f64>> {
        let layout = self.grid.quad();
        let (ns, nt) = (layout.n_space(), layout.n_time());
        let species = self.spec.species;
        let omega = layout.space_weights();
        (0..species)
            .map(|s| {
                (0..nt)
                    .map(|j| {
                        (0..ns)
                            .map(|i| states.phys.rho[(j * ns + i) * species + s] * omega[i])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Generalized Fisher information of the current state.
    pub fn fisher_information(&self, states: &States) -> Result<f64> {
        let spec = &self.spec;
        if !(spec.beta > 0.0) {
            return Err(Error::InvalidState("Fisher information needs beta > 0".into()));
        }
        if spec.energy.is_none() {
            return Err(Error::InvalidState("Fisher information needs a declared energy".into()));
        }
        let ns = self.grid.quad().n_space();
        let (species, d) = (spec.species, self.grid.dim());
        let u = &states.phys;
        let at = |w: &Option<Vec<f64>>, i: usize| w.as_ref().map_or(1.0, |w| w[i]);
        let b2 = spec.beta * spec.beta;
        let mut total = 0.0;
        for (q, &w) in self.weights.iter().enumerate() {
            let i_s = q % ns;
            let rho = &u.rho[q * species..(q + 1) * species];
            let mut local = 0.0;
            for i in 0..species {
                let k = q * species + i;
                let n2: f64 = u.n[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
                local += ratio(n2, single_at(&spec.v3[i], rho[i], at(&self.w3[i], i_s)).0) * 2.0 / b2;
            }
            for (slot, &p) in self.active.iter().enumerate() {
                let g: f64 = (0..species)
                    .map(|j| f64::from(spec.reactions.get(j, p)) * spec.energy.first(rho[j]))
                    .sum();
                local += g * g * mobility_at(&spec.v2[p], rho, at(&self.w2[slot], i_s)).0;
            }
            total += w * local;
        }
        Ok(total)
    }

    /// Relative weak-form residual of the continuity equation tested against
    /// every H¹ basis function.
    pub fn constraint_residual(&self, states: &States) -> f64 {
        let (spec, grid) = (&self.spec, &self.grid);
        let layout = grid.quad();
        let (nq, ns) = (layout.n_total(), layout.n_space());
        let (species, reactions, d) = (spec.species, spec.reactions.reactions(), grid.dim());
        let u = &states.phys;
        let w = &self.weights;
        let omega = layout.space_weights();
        let vals = self.values();
        let (mut res2, mut load2) = (0.0, 0.0);
        for i in 0..species {
            let ft: Vec<f64> = (0..nq).map(|q| w[q] * u.rho[q * species + i]).collect();
            let mut r = grid.apply_h1_transpose(&ft, Factor::Deriv, &vals);
            for a in 0..d {
                let fx: Vec<f64> = (0..nq).map(|q| w[q] * u.m[(q * species + i) * d + a]).collect();
                add_into(&mut r, &grid.apply_h1_transpose(&fx, Factor::Value, &self.with_deriv(a)));
            }
            if !self.active.is_empty() {
                let f0: Vec<f64> = (0..nq)
                    .map(|q| {
                        w[q] * self
                            .active
                            .iter()
                            .map(|&p| f64::from(spec.reactions.get(i, p)) * u.s[q * reactions + p])
                            .sum::<f64>()
                    })
                    .collect();
                add_into(&mut r, &grid.apply_h1_transpose(&f0, Factor::Value, &vals));
            }
            let end: Vec<f64> = (0..ns)
                .map(|k| {
                    let v = if u.rho_t.is_empty() { self.rho1[i][k] } else { u.rho_t[k * species + i] };
                    omega[k] * v
                })
                .collect();
            let start: Vec<f64> = (0..ns).map(|k| omega[k] * self.rho0[i][k]).collect();
            let end = grid.apply_h1_transpose(&end, Factor::TraceEnd, &vals);
            let start = grid.apply_h1_transpose(&start, Factor::TraceStart, &vals);
            let load: Vec<f64> = start.iter().zip(&end).map(|(s, e)| s - e).collect();
            add_into(&mut r, &load);
            res2 += norm(&r).powi(2);
            load2 += norm(&load).powi(2);
        }
        if load2 > 0.0 {
            (res2 / load2).sqrt()
        } else {
            res2.sqrt()
        }
    }

    /// Space-time integral of `|∇ρ|²` summed over species: from the flux
    /// `n/β` when `β > 0`, from the in-cell polynomial gradient otherwise.
    pub fn gradient_energy(&self, states: &States) -> Result<f64> {
        let spec = &self.spec;
        let species = spec.species;
        if spec.beta > 0.0 {
            let d = self.grid.dim();
            let b2 = spec.beta * spec.beta;
            return Ok(self
                .weights
                .iter()
                .enumerate()
                .map(|(q, &w)| {
                    let range = q * species * d..(q + 1) * species * d;
                    w * states.phys.n[range].iter().map(|v| v * v).sum::<f64>() / b2
                })
                .sum());
        }
        let mut total = 0.0;
        for i in 0..species {
            let field = states.phys.species_density(species, i);
            for g in self.grid.l2_gradient(&field)? {
                total += g.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum::<f64>();
            }
        }
        Ok(total)
    }
}

/// Adds `part` into `acc` and returns `‖part‖`.
fn add_into(acc: &mut [f64], part: &[f64]) -> f64 {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
    norm(part)
}
