use proptest::prelude::*;

use rdmfc::alg2::{Alg2Solver, SolverOptions};
use rdmfc::grid::SpaceTimeGrid;
use rdmfc::model::{
    build_pairwise_reactions, DensitySpec, Mobility, MobilityKind, Potential, ProblemSpec,
};
use rdmfc::pointwise::{PointData, PointwiseSolver};
use rdmfc::quadrature::{gauss_legendre_rule, NodalBasis1D, NodeKind};

fn node_kind() -> impl Strategy<Value = NodeKind> {
    prop_oneof![Just(NodeKind::GaussLegendre), Just(NodeKind::GaussLobatto)]
}

fn scalar_mobility() -> impl Strategy<Value = Mobility> {
    prop_oneof![
        (0.1..20.0f64).prop_map(Mobility::constant),
        Just(Mobility::linear()),
        (0.1..20.0f64, 0.0..=1.0f64).prop_map(|(a, g)| Mobility::power(a, g)),
        (0.1..20.0f64).prop_map(Mobility::log_shift),
    ]
}

fn pair_kind() -> impl Strategy<Value = MobilityKind> {
    prop_oneof![
        Just(MobilityKind::PairArithmetic),
        Just(MobilityKind::PairGeometric),
        Just(MobilityKind::PairHarmonic),
        Just(MobilityKind::PairLogmean),
    ]
}

fn any_mobility() -> impl Strategy<Value = Mobility> {
    prop_oneof![
        scalar_mobility(),
        (pair_kind(), 0.1..20.0f64).prop_map(|(k, a)| Mobility::pair(k, a, 0, 1)),
    ]
}

fn value(m: &Mobility, a: f64, b: f64) -> f64 {
    m.eval(a, b).unwrap().value
}

proptest! {
    #[test]
    fn legendre_rule_shape(n in 1usize..=16) {
        let rule = gauss_legendre_rule(n).unwrap();
        prop_assert!((rule.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        prop_assert!(rule.weights.iter().all(|&w| w > 0.0));
        prop_assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        for (a, b) in rule.nodes.iter().zip(rule.nodes.iter().rev()) {
            prop_assert!((a + b - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn legendre_exactness(n in 1usize..=16, frac in 0.0..1.0f64) {
        let p = ((2 * n) as f64 * frac) as i32;
        let rule = gauss_legendre_rule(n).unwrap();
        let approx = rule.integrate(|x| x.powi(p));
        prop_assert!((approx - 1.0 / (p as f64 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nodal_basis(kind in node_kind(), degree in 1usize..=8, x in 0.0..=1.0f64) {
        let basis = NodalBasis1D::new(kind, degree).unwrap();
        let mut v = vec![0.0; basis.len()];
        let mut dv = vec![0.0; basis.len()];
        basis.eval_all(x, &mut v, &mut dv);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(dv.iter().sum::<f64>().abs() < 1e-10);
        for (j, &node) in basis.nodes().iter().enumerate() {
            basis.eval_all(node, &mut v, &mut dv);
            for (i, &vi) in v.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((vi - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_counts(d in 1usize..=2, nx in 1usize..6, nt in 1usize..6, k in 1usize..=4, t in 0.5..3.0f64) {
        let grid = SpaceTimeGrid::new(d, nx, nt, k, t).unwrap();
        let q = grid.quad();
        prop_assert_eq!(q.n_space(), (k * nx).pow(d as u32));
        prop_assert_eq!(q.n_time(), k * nt);
        prop_assert!((q.space_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((q.time_weights().iter().sum::<f64>() - t).abs() < 1e-12);
        prop_assert_eq!(grid.dofs().count(), (k * nt + 1) * (k * nx + 1).pow(d as u32));
    }

    #[test]
    fn mobility_nonnegative_and_concave(m in any_mobility(), a in 0.0..5.0f64, b in 0.0..5.0f64,
                                        c in 0.0..5.0f64, e in 0.0..5.0f64) {
        prop_assert!(value(&m, a, b) >= 0.0);
        let mid = value(&m, 0.5 * (a + c), 0.5 * (b + e));
        let chord = 0.5 * (value(&m, a, b) + value(&m, c, e));
        prop_assert!(mid >= chord - 1e-12 * (1.0 + chord.abs()));
    }

    #[test]
    fn mobility_partials(m in any_mobility(), a in 0.05..5.0f64, b in 0.05..5.0f64) {
        let ev = m.eval(a, b).unwrap();
        let h = 1e-6;
        let fd_a = (value(&m, a + h, b) - value(&m, a - h, b)) / (2.0 * h);
        prop_assert!((ev.grad[0] - fd_a).abs() <= 1e-5 * (1.0 + fd_a.abs()));
        if m.kind.is_pair() {
            let fd_b = (value(&m, a, b + h) - value(&m, a, b - h)) / (2.0 * h);
            prop_assert!((ev.grad[1] - fd_b).abs() <= 1e-5 * (1.0 + fd_b.abs()));
        }
        let h2 = 1e-4;
        let fd_aa = (value(&m, a + h2, b) - 2.0 * ev.value + value(&m, a - h2, b)) / (h2 * h2);
        prop_assert!((ev.hess[0] - fd_aa).abs() <= 1e-3 * (1.0 + fd_aa.abs()));
    }

    #[test]
    fn mean_ordering(a in 0.01..10.0f64, b in 0.01..10.0f64) {
        let mean = |k| value(&Mobility::pair(k, 1.0, 0, 1), a, b);
        let h = mean(MobilityKind::PairHarmonic);
        let g = mean(MobilityKind::PairGeometric);
        let l = mean(MobilityKind::PairLogmean);
        let ar = mean(MobilityKind::PairArithmetic);
        let tol = 1e-12 * ar;
        prop_assert!(h <= g + tol && g <= l + tol && l <= ar + tol);
        prop_assert!(l >= a.min(b) - tol && l <= a.max(b) + tol);
    }

    #[test]
    fn potential_concave(tau in 0.0..1.0f64, c in -1.0..1.0f64, w in -1.0..1.0f64, rho in 1e-6..10.0f64) {
        let pot = Potential::entropy_drift(vec![tau], vec![c]);
        prop_assert!(pot.species_term(0, rho, w).2 <= 0.0);
        let pow = Potential::power_drift(vec![tau], vec![c], 2.5);
        prop_assert!(pow.species_term(0, rho, w).2 <= 0.0);
    }

    #[test]
    fn pairwise_columns(species in 2usize..8, seed in any::<u64>()) {
        let pairs: Vec<(usize, usize)> = (0..species)
            .map(|i| (i, (i + 1 + (seed as usize + i) % (species - 1)) % species))
            .collect();
        let gamma = build_pairwise_reactions(species, &pairs).unwrap();
        for p in 0..gamma.reactions() {
            let col = gamma.column(p);
            prop_assert_eq!(gamma.column_sum(p), 0);
            prop_assert_eq!(col.iter().filter(|&&v| v == 1).count(), 1);
            prop_assert_eq!(col.iter().filter(|&&v| v == -1).count(), 1);
        }
    }

    #[test]
    fn pointwise_first_order(v1 in scalar_mobility(), v2 in scalar_mobility(),
                             rb in -2.0..2.0f64, mb in -2.0..2.0f64, sb in -2.0..2.0f64,
                             tau in 0.0..0.1f64, shape in -1.0..1.0f64) {
        let uniform = vec![DensitySpec::uniform(1.0)];
        let mut spec = ProblemSpec::planning(uniform.clone(), uniform).with_scalar_reaction(v2);
        spec.v1 = vec![v1];
        spec.potential = Potential::entropy_drift(vec![tau], vec![0.3]);
        let solver = PointwiseSolver::new(&spec).with_tol(1e-12);
        let mut d = PointData::new(1, 1);
        d.rho_bar[0] = rb;
        d.m_bar_sq[0] = mb * mb;
        d.s_bar_sq[0] = sb * sb;
        d.shape = shape;
        let mut rho = vec![0.5];
        solver.solve(&d, &mut rho).unwrap();
        prop_assert!(rho[0] >= 0.0);
        let g = solver.gradient(&d, &rho)[0];
        let scale = 1.0 + solver.objective(&d, &rho).abs();
        if rho[0] > 1e-9 {
            prop_assert!(g.abs() <= 1e-8 * scale, "gradient {} at {}", g, rho[0]);
        } else {
            prop_assert!(g >= -1e-8 * scale);
        }
    }
}

fn small_solver(v2: Mobility, beta: f64, species: usize) -> Alg2Solver {
    let a = DensitySpec::gaussian(vec![0.3], 30.0);
    let b = DensitySpec::gaussian(vec![0.7], 30.0);
    let mut spec = if species == 1 {
        ProblemSpec::planning(vec![a], vec![b]).with_scalar_reaction(v2)
    } else {
        let mut s = ProblemSpec::planning(vec![a.clone(), b.clone()], vec![b, a]);
        s.reactions = build_pairwise_reactions(2, &[(0, 1)]).unwrap();
        s.v2 = vec![v2];
        s
    };
    spec.potential = Potential::entropy_drift(vec![0.01; species], vec![0.4; species]);
    if beta > 0.0 {
        spec.v3 = vec![Mobility::linear(); species];
        spec.beta = beta;
    }
    let grid = SpaceTimeGrid::new(1, 6, 6, 2, 1.0).unwrap();
    Alg2Solver::new(spec, grid, SolverOptions::default()).unwrap()
}

fn state_case() -> impl Strategy<Value = (Mobility, f64, usize)> {
    prop_oneof![
        (scalar_mobility(), prop_oneof![Just(0.0), 0.001..0.05f64]).prop_map(|(m, b)| (m, b, 1)),
        (pair_kind(), 0.1..20.0f64, prop_oneof![Just(0.0), 0.001..0.05f64])
            .prop_map(|(k, a, b)| (Mobility::pair(k, a, 0, 1), b, 2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iteration_invariants((v2, beta, species) in state_case(), iters in 1usize..6) {
        let solver = small_solver(v2, beta, species);
        let r = solver.spec().r;
        let mut states = solver.init_states();
        for _ in 0..iters {
            let a = solver.step_a(&mut states).unwrap();
            let bar = solver.bar_values(&a.derivatives, &states.phys);
            solver.step_b(&bar, &mut states).unwrap();
            let (phys, dual) = (&states.phys, &states.dual);
            prop_assert!(phys.rho.iter().all(|&v| v >= 0.0));
            let triples = [
                (&phys.rho, &bar.rho, &dual.rho),
                (&phys.m, &bar.m, &dual.m),
                (&phys.s, &bar.s, &dual.s),
                (&phys.n, &bar.n, &dual.n),
            ];
            for (u, ub, us) in triples {
                for ((x, b), y) in u.iter().zip(ub).zip(us) {
                    prop_assert!(x.is_finite() && y.is_finite());
                    prop_assert!((x - r * (b - y)).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }
            if beta == 0.0 {
                prop_assert!(phys.n.iter().all(|&v| v == 0.0));
            } else {
                let dofs = solver.grid().dofs();
                for upper in [false, true] {
                    for i in dofs.boundary_face(0, upper) {
                        prop_assert!(states.mult.sigma.iter().all(|sig| sig[i] == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_reaction_stays_silent(iters in 1usize..8, beta in prop_oneof![Just(0.0), 0.001..0.05f64]) {
        let solver = small_solver(Mobility::zero(), beta, 1);
        let mut states = solver.init_states();
        solver.run(&mut states, iters, |_, _| {}).unwrap();
        prop_assert!(states.phys.s.iter().chain(&states.dual.s).all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic((v2, beta, species) in state_case()) {
        let solver = small_solver(v2, beta, species);
        let mut first = solver.init_states();
        let mut second = solver.init_states();
        let ra = solver.run(&mut first, 3, |_, _| {}).unwrap();
        let rb = solver.run(&mut second, 3, |_, _| {}).unwrap();
        prop_assert_eq!(first, second);
        prop_assert_eq!(ra, rb);
    }
}
