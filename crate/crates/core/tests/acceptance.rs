//! Acceptance suite. Every test prints exactly one `PASS` or `FAIL` line.
//!
//! Run with `cargo test -p rdmfc --test acceptance -- --nocapture`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdmfc::alg2::{
    assemble_phi_system, assemble_sigma_system, Alg2Solver, IterationReport, SolverOptions, States,
};
use rdmfc::grid::SpaceTimeGrid;
use rdmfc::model::{
    build_pairwise_reactions, DensitySpec, Energy, Mobility, MobilityKind, Potential, ProblemSpec,
    TerminalCondition,
};
use rdmfc::pointwise::{PointData, PointwiseSolver};
use rdmfc::quadrature::{gauss_legendre_rule, NodalBasis1D, NodeKind};
use rdmfc::sparse::{pcg, CsrMatrix, PreconditionerKind};

fn verdict(id: usize, name: &str, ok: bool, detail: String) {
    println!("acceptance {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {id} {name} failed: {detail}");
}

fn gaussians(a: f64, b: f64) -> (DensitySpec, DensitySpec) {
    (DensitySpec::gaussian(vec![a], 50.0), DensitySpec::gaussian(vec![b], 50.0))
}

/// Scalar problem with a drifting entropy potential.
fn drifting_scalar(v2: Mobility) -> ProblemSpec {
    let (a, b) = gaussians(0.25, 0.75);
    let mut spec = ProblemSpec::planning(vec![a], vec![b]).with_scalar_reaction(v2);
    spec.potential = Potential::entropy_drift(vec![0.01], vec![0.4]);
    spec
}

fn solve(spec: ProblemSpec, grid: SpaceTimeGrid, iters: usize) -> (Alg2Solver, States, Vec<IterationReport>) {
    let solver = Alg2Solver::new(spec, grid, SolverOptions::default()).expect("valid problem");
    let mut states = solver.init_states();
    let reports = solver.run(&mut states, iters, |_, _| {}).expect("iterations succeed");
    (solver, states, reports)
}

fn max_relative_spread(series: &[f64]) -> f64 {
    let first = series[0];
    series.iter().map(|m| (m - first).abs()).fold(0.0, f64::max) / first.abs()
}

#[test]
fn quadrature_and_basis() {
    let start = Instant::now();
    let mut worst_exact = 0.0f64;
    for n in 1..=10 {
        let rule = gauss_legendre_rule(n).unwrap();
        for p in 0..2 * n {
            let approx = rule.integrate(|x| x.powi(p as i32));
            worst_exact = worst_exact.max((approx - 1.0 / (p as f64 + 1.0)).abs());
        }
    }
    let mut worst_unity = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [NodeKind::GaussLegendre, NodeKind::GaussLobatto] {
        let degrees = match kind {
            NodeKind::GaussLegendre => 0..=10,
            NodeKind::GaussLobatto => 1..=10,
        };
        for degree in degrees {
            let basis = NodalBasis1D::new(kind, degree).unwrap();
            let mut v = vec![0.0; basis.len()];
            let mut dv = vec![0.0; basis.len()];
            for _ in 0..200 {
                basis.eval_all(rng.gen_range(0.0..=1.0), &mut v, &mut dv);
                worst_unity = worst_unity.max((v.iter().sum::<f64>() - 1.0).abs());
                worst_unity = worst_unity.max(dv.iter().sum::<f64>().abs() * 1e-2);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "quadrature_basis",
        worst_exact <= 1e-12 && worst_unity <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("exactness err {worst_exact:.2e}, unity err {worst_unity:.2e}, {elapsed:?}"),
    );
}

struct TransportRun {
    w2_numeric: f64,
    w2_oracle: f64,
    mass_spread: f64,
    elapsed: Duration,
}

/// Squared W₂ distance of two discrete measures on the real line by the
/// quantile coupling.
fn quantile_w2(x: &[f64], mu: &[f64], nu: &[f64]) -> f64 {
    let total_mu: f64 = mu.iter().sum();
    let total_nu: f64 = nu.iter().sum();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let a: Vec<(f64, f64)> = order.iter().map(|&i| (x[i], mu[i] / total_mu)).collect();
    let b: Vec<(f64, f64)> = order.iter().map(|&i| (x[i], nu[i] / total_nu)).collect();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        cost += mass * (a[i].0 - b[j].0).powi(2);
        ra -= mass;
        rb -= mass;
        if ra <= 1e-300 {
            i += 1;
            ra = a.get(i).map_or(0.0, |p| p.1);
        }
        if rb <= 1e-300 {
            j += 1;
            rb = b.get(j).map_or(0.0, |p| p.1);
        }
    }
    cost
}

fn transport_run() -> &'static TransportRun {
    static RUN: OnceLock<TransportRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (a, b) = gaussians(0.25, 0.75);
        let spec = ProblemSpec::planning(vec![a], vec![b]);
        let grid = SpaceTimeGrid::new(1, 64, 64, 4, 1.0).unwrap();
        let start = Instant::now();
        let (solver, states, reports) = solve(spec, grid, 400);
        let elapsed = start.elapsed();
        let layout = solver.grid().quad();
        let x: Vec<f64> = (0..layout.n_space()).map(|i| layout.space_point(i)[0]).collect();
        let omega = layout.space_weights();
        let weigh = |rho: &[f64]| -> Vec<f64> { rho.iter().zip(omega).map(|(r, w)| r * w).collect() };
        let mu = weigh(&solver.initial_density()[0]);
        let nu = weigh(&solver.terminal_density()[0]);
        let mass0: f64 = mu.iter().sum();
        TransportRun {
            w2_numeric: 2.0 * solver.objective(&states) / mass0,
            w2_oracle: quantile_w2(&x, &mu, &nu),
            mass_spread: max_relative_spread(&reports.last().unwrap().masses[0]),
            elapsed,
        }
    })
}

#[test]
fn wasserstein_oracle() {
    let run = transport_run();
    let rel = (run.w2_numeric - run.w2_oracle).abs() / run.w2_oracle;
    verdict(
        2,
        "wasserstein_oracle",
        rel < 0.05 && (run.w2_oracle - 0.25).abs() < 0.01 && run.elapsed < Duration::from_secs(300),
        format!(
            "2*objective/mass {:.6}, quantile oracle {:.6}, rel err {rel:.2e}, {:?}",
            run.w2_numeric, run.w2_oracle, run.elapsed
        ),
    );
}

#[test]
fn mass_conservation() {
    let scalar_spread = transport_run().mass_spread;
    let (a, b) = gaussians(0.25, 0.75);
    let mut spec = ProblemSpec::planning(vec![a.clone(), b.clone()], vec![b, a]);
    spec.reactions = build_pairwise_reactions(2, &[(0, 1)]).unwrap();
    spec.v2 = vec![Mobility::pair(MobilityKind::PairLogmean, 20.0, 0, 1)];
    spec.v3 = vec![Mobility::linear(); 2];
    spec.potential = Potential::entropy_drift(vec![0.01, 0.005], vec![0.4, 0.0]);
    let grid = SpaceTimeGrid::new(1, 32, 32, 2, 1.0).unwrap();
    // The endpoint masses settle roughly like 1/iterations here.
    let (_, _, reports) = solve(spec, grid, 1000);
    let masses = &reports.last().unwrap().masses;
    let summed: Vec<f64> = (0..masses[0].len()).map(|j| masses[0][j] + masses[1][j]).collect();
    let system_spread = max_relative_spread(&summed);
    verdict(
        3,
        "mass_conservation",
        scalar_spread < 1e-3 && system_spread < 1e-3,
        format!("scalar spread {scalar_spread:.2e}, two-species summed spread {system_spread:.2e}"),
    );
}

/// Dense transcription of the scalar algorithm for piecewise-linear
/// elements in space and time (one Gauss point per cell), written without
/// the library's grid, operators or solvers.
mod transcription {
    use super::*;

    pub struct Problem {
        pub cells: usize,
        pub r: f64,
        pub alpha2: f64,
        pub tau: f64,
        pub drift: f64,
        pub rho0: Vec<f64>,
        pub rho1: Vec<f64>,
    }

    #[derive(Clone)]
    pub struct State {
        pub rho: Vec<f64>,
        pub m: Vec<f64>,
        pub s: Vec<f64>,
        pub rho_d: Vec<f64>,
        pub m_d: Vec<f64>,
        pub s_d: Vec<f64>,
        pub phi: DVector<f64>,
    }

    fn axis(cells: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = 1.0 / cells as f64;
        let mut e = DMatrix::zeros(cells, cells + 1);
        let mut d = DMatrix::zeros(cells, cells + 1);
        for c in 0..cells {
            e[(c, c)] = 0.5;
            e[(c, c + 1)] = 0.5;
            d[(c, c)] = -1.0 / h;
            d[(c, c + 1)] = 1.0 / h;
        }
        (e, d)
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    pub fn midpoints(cells: usize) -> Vec<f64> {
        (0..cells).map(|c| (c as f64 + 0.5) / cells as f64).collect()
    }

    pub struct Operators {
        dt: DMatrix<f64>,
        dx: DMatrix<f64>,
        ev: DMatrix<f64>,
        start: DMatrix<f64>,
        end: DMatrix<f64>,
        pinv: DMatrix<f64>,
        w: f64,
        omega: f64,
        shape: Vec<f64>,
    }

    pub fn operators(p: &Problem) -> Operators {
        let n = p.cells;
        let (e, d) = axis(n);
        let mut first = DMatrix::zeros(1, n + 1);
        first[(0, 0)] = 1.0;
        let mut last = DMatrix::zeros(1, n + 1);
        last[(0, n)] = 1.0;
        let dt = kron(&d, &e);
        let dx = kron(&e, &d);
        let ev = kron(&e, &e);
        let w = 1.0 / (n * n) as f64;
        let a = (dt.transpose() * &dt + dx.transpose() * &dx + ev.transpose() * &ev) * w;
        let pinv = a.pseudo_inverse(1e-13).unwrap();
        let mid = midpoints(n);
        let cos = |v: f64| (4.0 * std::f64::consts::PI * v).cos();
        let shape = (0..n * n).map(|q| cos(mid[q / n]) * cos(mid[q % n])).collect();
        Operators {
            dt,
            dx,
            ev,
            start: kron(&first, &e),
            end: kron(&last, &e),
            pinv,
            w,
            omega: 1.0 / n as f64,
            shape,
        }
    }

    pub fn init(p: &Problem) -> State {
        let n = p.cells;
        let mid = midpoints(n);
        let rho = (0..n * n)
            .map(|q| {
                let t = mid[q / n];
                (1.0 - t) * p.rho0[q % n] + t * p.rho1[q % n]
            })
            .collect();
        State {
            rho,
            m: vec![0.0; n * n],
            s: vec![0.0; n * n],
            rho_d: vec![0.0; n * n],
            m_d: vec![0.0; n * n],
            s_d: vec![0.0; n * n],
            phi: DVector::zeros((n + 1) * (n + 1)),
        }
    }

    fn dv(v: Vec<f64>) -> DVector<f64> {
        DVector::from_vec(v)
    }

    /// Derivative of the pointwise objective in ρ.
    fn gradient(p: &Problem, rho: f64, bar: (f64, f64, f64), shape: f64) -> f64 {
        let r = p.r;
        let (rb, mb, sb) = bar;
        let a = p.alpha2;
        let logr = rho.max(1e-12).ln();
        -r * r * mb * mb / (r + rho).powi(2) - r * r * sb * sb * a / (r + a * rho).powi(2)
            + 2.0 * (rho - r * rb) / r
            + 2.0 * (p.tau * (logr + 1.0) + p.drift * shape)
    }

    fn point_solve(p: &Problem, bar: (f64, f64, f64), shape: f64) -> f64 {
        let g = |x: f64| gradient(p, x, bar, shape);
        if g(0.0) >= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while g(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn step(p: &Problem, ops: &Operators, st: &mut State) {
        let r = p.r;
        let n = p.cells;
        let w = ops.w;
        let diff = |d: &[f64], u: &[f64]| dv(d.iter().zip(u).map(|(a, b)| w * (a - b / r)).collect());
        let mut b = ops.dt.transpose() * diff(&st.rho_d, &st.rho)
            + ops.dx.transpose() * diff(&st.m_d, &st.m)
            + ops.ev.transpose() * diff(&st.s_d, &st.s);
        let load1 = dv(p.rho1.iter().map(|v| ops.omega * v / r).collect());
        let load0 = dv(p.rho0.iter().map(|v| ops.omega * v / r).collect());
        b += ops.end.transpose() * load1 - ops.start.transpose() * load0;
        st.phi = &ops.pinv * b;
        let d_rho = &ops.dt * &st.phi;
        let d_m = &ops.dx * &st.phi;
        let d_s = &ops.ev * &st.phi;
        for q in 0..n * n {
            let bar = (d_rho[q] + st.rho[q] / r, d_m[q] + st.m[q] / r, d_s[q] + st.s[q] / r);
            let rho = point_solve(p, bar, ops.shape[q]);
            let v1 = rho;
            let v2 = p.alpha2 * rho;
            st.rho[q] = rho;
            st.rho_d[q] = bar.0 - rho / r;
            st.m[q] = r * v1 / (r + v1) * bar.1;
            st.m_d[q] = r / (r + v1) * bar.1;
            st.s[q] = r * v2 / (r + v2) * bar.2;
            st.s_d[q] = r / (r + v2) * bar.2;
        }
    }
}

#[test]
fn algorithm_equivalence() {
    let cells = 4;
    let alpha2 = 20.0;
    let (a, b) = gaussians(0.3, 0.7);
    let mut spec = ProblemSpec::planning(vec![a.with_floor(0.05)], vec![b.with_floor(0.05)])
        .with_scalar_reaction(Mobility::power(alpha2, 1.0));
    spec.potential = Potential::entropy_drift(vec![0.01], vec![0.4]);
    let grid = SpaceTimeGrid::new(1, cells, cells, 1, 1.0).unwrap();
    let options = SolverOptions { pcg_tol: 1e-14, newton_tol: 1e-15, ..Default::default() };
    let solver = Alg2Solver::new(spec, grid, options).unwrap();
    let mut states = solver.init_states();

    let mid = transcription::midpoints(cells);
    let gauss = |c: f64| -> Vec<f64> { mid.iter().map(|x| (-50.0 * (x - c) * (x - c)).exp().max(0.05)).collect() };
    let problem = transcription::Problem {
        cells,
        r: 1.0,
        alpha2,
        tau: 0.01,
        drift: 0.4,
        rho0: gauss(0.3),
        rho1: gauss(0.7),
    };
    let ops = transcription::operators(&problem);
    let mut oracle = transcription::init(&problem);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        solver.iterate(&mut states).unwrap();
        transcription::step(&problem, &ops, &mut oracle);
        let pairs = [
            (&states.phys.rho, &oracle.rho),
            (&states.phys.m, &oracle.m),
            (&states.phys.s, &oracle.s),
            (&states.dual.rho, &oracle.rho_d),
            (&states.dual.m, &oracle.m_d),
            (&states.dual.s, &oracle.s_d),
        ];
        for (ours, theirs) in pairs {
            for (x, y) in ours.iter().zip(theirs) {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
    }
    verdict(
        4,
        "algorithm_equivalence",
        worst <= 1e-10,
        format!("max entry deviation over 10 iterations {worst:.2e}"),
    );
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..160 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Pointwise objective written out directly from the mobility formulas.
fn oracle_objective(kinds: &OracleKinds, d: &PointData, rho: &[f64]) -> f64 {
    let r = 1.0;
    let mut l = 0.0;
    for (i, &x) in rho.iter().enumerate() {
        let v1 = kinds.v1[i].value(x);
        let v3 = kinds.v3[i].value(x);
        l += r * r * d.m_bar_sq[i] / (r + v1) + r * r * d.n_bar_sq[i] / (r + v3);
        l += (x - r * d.rho_bar[i]).powi(2) / r;
    }
    let v2 = kinds.v2.value(rho);
    l + r * r * d.s_bar_sq[0] / (r + v2)
}

#[derive(Clone, Copy)]
enum Scalar {
    Constant(f64),
    Linear,
    Power(f64, f64),
    LogShift(f64),
}

impl Scalar {
    fn value(self, x: f64) -> f64 {
        match self {
            Scalar::Constant(a) => a,
            Scalar::Linear => x,
            Scalar::Power(a, g) => a * x.powf(g),
            Scalar::LogShift(a) => {
                if (x - 1.0).abs() < 1e-9 {
                    a
                } else if x == 0.0 {
                    0.0
                } else {
                    a * (x - 1.0) / x.ln()
                }
            }
        }
    }

    fn mobility(self) -> Mobility {
        match self {
            Scalar::Constant(a) => Mobility::constant(a),
            Scalar::Linear => Mobility::linear(),
            Scalar::Power(a, g) => Mobility::power(a, g),
            Scalar::LogShift(a) => Mobility::log_shift(a),
        }
    }
}

#[derive(Clone, Copy)]
enum Reaction {
    Scalar(Scalar),
    Pair(MobilityKind, f64),
}

impl Reaction {
    fn value(self, rho: &[f64]) -> f64 {
        match self {
            Reaction::Scalar(s) => s.value(rho[0]),
            Reaction::Pair(kind, a) => {
                let (x, y) = (rho[0], rho[1]);
                a * match kind {
                    MobilityKind::PairArithmetic => 0.5 * (x + y),
                    MobilityKind::PairGeometric => (x * y).sqrt(),
                    MobilityKind::PairHarmonic => {
                        if x + y == 0.0 {
                            0.0
                        } else {
                            x * y / (x + y)
                        }
                    }
                    _ => {
                        if x == 0.0 || y == 0.0 {
                            0.0
                        } else if (x - y).abs() < 1e-9 * x.max(y) {
                            0.5 * (x + y)
                        } else {
                            (x - y) / (x.ln() - y.ln())
                        }
                    }
                }
            }
        }
    }
}

struct OracleKinds {
    v1: Vec<Scalar>,
    v3: Vec<Scalar>,
    v2: Reaction,
}

fn random_scalar(rng: &mut ChaCha8Rng) -> Scalar {
    match rng.gen_range(0..4) {
        0 => Scalar::Constant(rng.gen_range(0.5..20.0)),
        1 => Scalar::Linear,
        2 => Scalar::Power(rng.gen_range(0.5..20.0), rng.gen_range(0.2..1.0)),
        _ => Scalar::LogShift(rng.gen_range(0.5..20.0)),
    }
}

#[test]
fn pointwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    let mut worst_arg = 0.0f64;
    let mut worst_obj = 0.0f64;
    let pair_kinds = [
        MobilityKind::PairArithmetic,
        MobilityKind::PairGeometric,
        MobilityKind::PairHarmonic,
        MobilityKind::PairLogmean,
    ];
    for trial in 0..1000 {
        let species = if trial % 2 == 0 { 1 } else { 2 };
        let v1: Vec<Scalar> = (0..species)
            .map(|_| if rng.gen_bool(0.5) { Scalar::Linear } else { Scalar::Power(1.0, rng.gen_range(0.3..1.0)) })
            .collect();
        let v3: Vec<Scalar> = (0..species).map(|_| random_scalar(&mut rng)).collect();
        let v2 = if species == 1 {
            Reaction::Scalar(random_scalar(&mut rng))
        } else {
            Reaction::Pair(pair_kinds[rng.gen_range(0..4)], rng.gen_range(0.5..20.0))
        };
        let initial = vec![DensitySpec::uniform(1.0); species];
        let mut spec = ProblemSpec::planning(initial.clone(), initial);
        spec.v1 = v1.iter().map(|s| s.mobility()).collect();
        spec.v3 = v3.iter().map(|s| s.mobility()).collect();
        spec.beta = 0.01;
        match v2 {
            Reaction::Scalar(s) => spec = spec.with_scalar_reaction(s.mobility()),
            Reaction::Pair(kind, a) => {
                spec.reactions = build_pairwise_reactions(2, &[(0, 1)]).unwrap();
                spec.v2 = vec![Mobility::pair(kind, a, 0, 1)];
            }
        }
        let mut d = PointData::new(species, 1);
        for i in 0..species {
            d.rho_bar[i] = rng.gen_range(-2.0..2.0);
            d.m_bar_sq[i] = rng.gen_range(-2.0f64..2.0).powi(2);
            d.n_bar_sq[i] = rng.gen_range(-2.0f64..2.0).powi(2);
        }
        d.s_bar_sq[0] = rng.gen_range(-2.0f64..2.0).powi(2);
        let kinds = OracleKinds { v1, v3, v2 };
        let solver = PointwiseSolver::new(&spec).with_sweeps(if species == 1 { 1 } else { 400 });
        let mut rho = vec![0.5; species];
        solver.solve(&d, &mut rho).unwrap();
        let oracle: Vec<f64> = if species == 1 {
            vec![golden_section(|x| oracle_objective(&kinds, &d, &[x]), 0.0, 20.0)]
        } else {
            let inner = |x: f64| golden_section(|y| oracle_objective(&kinds, &d, &[x, y]), 0.0, 20.0);
            let x = golden_section(|x| oracle_objective(&kinds, &d, &[x, inner(x)]), 0.0, 20.0);
            vec![x, inner(x)]
        };
        let arg = rho.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let obj = (oracle_objective(&kinds, &d, &rho) - oracle_objective(&kinds, &d, &oracle)).abs();
        worst_arg = worst_arg.max(arg);
        worst_obj = worst_obj.max(obj);
        if arg > 1e-6 && obj > 1e-10 {
            failures += 1;
        }
    }
    verdict(
        5,
        "pointwise_oracle",
        failures == 0,
        format!("{failures} of 1000 mismatched; worst argument gap {worst_arg:.2e}, worst objective gap {worst_obj:.2e}"),
    );
}

#[test]
fn kkt_decay() {
    let grid = SpaceTimeGrid::new(1, 32, 32, 2, 1.0).unwrap();
    let (_, silent, silent_reports) = solve(drifting_scalar(Mobility::zero()), grid.clone(), 400);
    let silent_s_zero = silent.phys.s.iter().chain(&silent.dual.s).all(|&v| v == 0.0)
        && silent_reports.iter().all(|r| r.kkt.s == 0.0);
    let (solver, states, reports) = solve(drifting_scalar(Mobility::constant(20.0)), grid, 400);
    let (first, last) = (&reports[0], reports.last().unwrap());
    let primal_drop = first.primal_residual / last.primal_residual;
    let kkt_drop = first.kkt.m / last.kkt.m;
    let layout = solver.grid().quad();
    let source: f64 = (0..layout.n_total()).map(|q| layout.weight(q) * states.phys.s[q].abs()).sum();
    verdict(
        6,
        "kkt_residual_decay",
        primal_drop >= 100.0 && kkt_drop >= 100.0 && silent_s_zero && source > 0.1,
        format!(
            "primal drop {primal_drop:.2e}, r_m drop {kkt_drop:.2e}, inactive s zero {silent_s_zero}, integrated |s| {source:.3}"
        ),
    );
}

#[test]
fn change_of_variables_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let energy = Energy::Boltzmann { scale: 1.0 };
    let v1 = Mobility::linear();
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let rho: f64 = rng.gen_range(1e-3..10.0);
        let beta: f64 = rng.gen_range(1e-4..1.0);
        let m = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let g = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let vv = v1.eval(rho, 0.0).unwrap().value;
        let grad = [energy.second(rho) * g[0], energy.second(rho) * g[1]];
        let shifted = [m[0] + beta * vv * grad[0], m[1] + beta * vv * grad[1]];
        let norm2 = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
        let lhs = norm2(shifted) / (2.0 * vv);
        let rhs = norm2(m) / (2.0 * vv) + 0.5 * beta * beta * vv * norm2(grad) + beta * (m[0] * grad[0] + m[1] * grad[1]);
        let scale = norm2(m) / (2.0 * vv) + 0.5 * beta * beta * vv * norm2(grad) + lhs.abs();
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-300));
    }
    verdict(
        7,
        "change_of_variables_identity",
        worst <= 1e-13,
        format!("max relative deviation {worst:.2e} over 1e5 samples"),
    );
}

#[test]
fn diffusion_monotonicity() {
    let grid = SpaceTimeGrid::new(1, 32, 32, 2, 1.0).unwrap();
    let energies: Vec<f64> = [0.0, 0.005, 0.01]
        .iter()
        .map(|&beta| {
            let mut spec = drifting_scalar(Mobility::constant(20.0));
            spec.potential = Potential::entropy_drift(vec![0.005], vec![0.4]);
            spec.v3 = vec![Mobility::linear()];
            spec.beta = beta;
            if beta > 0.0 {
                spec.energy = Energy::Boltzmann { scale: 1.0 };
            }
            let (solver, states, _) = solve(spec, grid.clone(), 400);
            solver.gradient_energy(&states).unwrap()
        })
        .collect();
    let monotone = energies.windows(2).all(|w| w[1] <= w[0]);
    let separation = (energies[0] - energies[2]) / energies[0];
    verdict(
        8,
        "diffusion_monotonicity",
        monotone && separation >= 0.05,
        format!("gradient energies {energies:.4?}, separation {separation:.3}"),
    );
}

fn spd_check(a: &CsrMatrix, rng: &mut ChaCha8Rng) -> (f64, bool) {
    let n = a.n_rows();
    let positive = (0..100).all(|_| {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        a.quadratic_form(&x) > 0.0
    });
    (a.max_asymmetry(), positive)
}

/// Solution of a consistent semidefinite system restricted to the range of `a`.
fn range_part(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let mut out = DVector::zeros(x.len());
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 1e-10 * max {
            let v = eig.eigenvectors.column(k);
            out += v * v.dot(x);
        }
    }
    out
}

#[test]
fn linear_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_asym = 0.0f64;
    let mut all_positive = true;
    let mut worst_solve = 0.0f64;
    let (a, b) = gaussians(0.3, 0.7);
    let mut systems = Vec::new();
    for d in 1..=2 {
        let center = vec![0.3; d];
        let density = DensitySpec::gaussian(center, 20.0);
        let mut spec = ProblemSpec::planning(vec![density.clone()], vec![density.clone()])
            .with_scalar_reaction(Mobility::constant(20.0));
        spec.v3 = vec![Mobility::linear()];
        spec.beta = 0.05;
        let grid = SpaceTimeGrid::new(d, 2, 2, 2, 1.0).unwrap();
        systems.push(assemble_phi_system(&spec, &grid, 0).unwrap());
        systems.push(assemble_sigma_system(&spec, &grid).unwrap());
        spec.terminal = TerminalCondition::kl(1.0, vec![density]);
        systems.push(assemble_phi_system(&spec, &grid, 0).unwrap());
    }
    let grid = SpaceTimeGrid::new(1, 3, 3, 2, 1.0).unwrap();
    let planning = ProblemSpec::planning(vec![a], vec![b]);
    systems.push(assemble_phi_system(&planning, &grid, 0).unwrap());
    for sys in &systems {
        let (asym, positive) = spd_check(sys, &mut rng);
        worst_asym = worst_asym.max(asym);
        all_positive &= positive;
        let n = sys.n_rows();
        if n > 200 {
            continue;
        }
        let dense = DMatrix::from_row_slice(n, n, &sys.to_dense());
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let rhs = &dense * &y;
        let (x, _) = pcg(sys, rhs.as_slice(), &vec![0.0; n], 1e-13, 10 * n, PreconditionerKind::Jacobi).unwrap();
        let direct = dense.clone().pseudo_inverse(1e-12).unwrap() * &rhs;
        let diff = range_part(&dense, &(DVector::from_vec(x) - direct));
        worst_solve = worst_solve.max(diff.amax() / y.amax());
    }
    // A nonsingular random SPD system against LU.
    let n = 150;
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let spd = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64);
    let triplets: Vec<(usize, usize, f64)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (i, j, spd[(i, j)])).collect();
    let csr = CsrMatrix::from_triplets(n, n, triplets).unwrap();
    let rhs = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let (x, _) = pcg(&csr, rhs.as_slice(), &vec![0.0; n], 1e-13, 10 * n, PreconditionerKind::Jacobi).unwrap();
    let lu = spd.lu().solve(&rhs).unwrap();
    worst_solve = worst_solve.max((DVector::from_vec(x) - lu).amax());
    verdict(
        9,
        "linear_algebra",
        worst_asym <= 1e-12 && all_positive && worst_solve <= 1e-8,
        format!(
            "{} systems, max asymmetry {worst_asym:.2e}, SPD sampling {all_positive}, max solve gap {worst_solve:.2e}",
            systems.len()
        ),
    );
}
