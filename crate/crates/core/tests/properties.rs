use hamgraph::catalog::{builtin, Scenario, BUILTIN_SCENARIOS};
use hamgraph::dynamics::{hopf_cole, madelung, madelung_inverse, HopfColeDirection, MadelungConvention};
use hamgraph::graph::{divergence, graph_gradient, hodge_decompose, inner_product, SkewField};
use hamgraph::hamiltonian::vector_field;
use hamgraph::markov::{build_rate_matrix, master_rhs, sample_paths, RateKind, SamplerConfig};
use hamgraph::rates::matrix_from_edges;
use hamgraph::sbp::{path_entropy_between, solve_bridge, BridgeConfig, BridgeProblem};
use hamgraph::theta::theta;
use hamgraph::{ConstantRates, ConvexDual, ExecMode, Graph, HamiltonianSpec, PhasePoint, ThetaKind, Variant};
use proptest::prelude::*;

const SMOOTH: [ThetaKind; 2] = [ThetaKind::Average, ThetaKind::Logarithmic];

/// A connected weighted graph: a random spanning path plus extra edges.
fn graph_strategy() -> impl Strategy<Value = Graph> {
    (2usize..6).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 2..n).map(move |j| (i, j))).collect();
        let m = pairs.len();
        (
            Just(n),
            proptest::collection::vec(0.2f64..2.0, n - 1),
            proptest::collection::vec(proptest::option::of(0.2f64..2.0), m),
        )
            .prop_map(move |(n, path_w, extra)| {
                let mut edges: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, path_w[i])).collect();
                for (k, w) in extra.into_iter().enumerate() {
                    if let Some(w) = w {
                        edges.push((pairs[k].0, pairs[k].1, w));
                    }
                }
                Graph::new(n, &edges).unwrap()
            })
    })
}

fn density(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

/// Graph with an interior density, a potential and a skew field.
fn state_strategy() -> impl Strategy<Value = (Graph, Vec<f64>, Vec<f64>, Vec<f64>)> {
    graph_strategy().prop_flat_map(|g| {
        let n = g.node_count();
        let m = g.edges().len();
        (
            Just(g),
            proptest::collection::vec(0.05f64..1.0, n),
            proptest::collection::vec(-2.0f64..2.0, n),
            proptest::collection::vec(-2.0f64..2.0, m),
        )
            .prop_map(|(g, r, s, v)| (g, density(&r), s, v))
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn divergence_is_minus_adjoint_of_gradient((g, rho, s, v) in state_strategy()) {
        let v = SkewField { values: v };
        for kind in [ThetaKind::Upwind, ThetaKind::Average, ThetaKind::Logarithmic] {
            let grad = graph_gradient(&g, &s).unwrap();
            let lhs = inner_product(&g, &grad, &v, &rho, kind).unwrap();
            let d = divergence(&g, &rho, &v, kind).unwrap();
            let rhs: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
            prop_assert!((lhs + rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{kind:?}: {lhs} vs {rhs}");
            prop_assert!(d.iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn hodge_parts_are_orthogonal((g, rho, _s, v) in state_strategy()) {
        let v = SkewField { values: v };
        for kind in SMOOTH {
            let (pot, rest) = hodge_decompose(&g, &rho, &v, kind).unwrap();
            let grad = graph_gradient(&g, &pot).unwrap();
            let sum = grad.axpy(1.0, &rest);
            prop_assert!(close(&sum.values, &v.values, 1e-10));
            let d = divergence(&g, &rho, &rest, kind).unwrap();
            prop_assert!(d.iter().all(|x| x.abs() <= 1e-10));
            let ip = inner_product(&g, &grad, &rest, &rho, kind).unwrap();
            prop_assert!(ip.abs() <= 1e-10);
        }
    }

    #[test]
    fn smooth_theta_is_a_mean(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        let avg = theta(ThetaKind::Average, a, b, 0.0).unwrap();
        let lm = theta(ThetaKind::Logarithmic, a, b, 0.0).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lm >= lo * (1.0 - 1e-12) && lm <= avg * (1.0 + 1e-12) && avg <= hi);
        prop_assert_eq!(lm, theta(ThetaKind::Logarithmic, b, a, 0.0).unwrap());
    }

    #[test]
    fn upwind_rates_are_valid_and_reproduce_the_flow((g, rho, s, _v) in state_strategy()) {
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Upwind }).unwrap();
        let x = PhasePoint::rho_s(rho, s);
        let r = build_rate_matrix(RateKind::UpwindOt, &spec, &x, 0.0).unwrap();
        prop_assert!(r.is_valid());
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        prop_assert!(close(&master_rhs(&r.q, &x.q), &dr, 1e-12));
    }

    #[test]
    fn smooth_theta_rates_reproduce_the_flow((g, rho, s, _v) in state_strategy()) {
        for theta in SMOOTH {
            let spec = HamiltonianSpec::new(g.clone(), Variant::OtKinetic { theta }).unwrap();
            let x = PhasePoint::rho_s(rho.clone(), s.clone());
            let r = build_rate_matrix(RateKind::ThetaGeneral(theta), &spec, &x, 0.0).unwrap();
            let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
            prop_assert!(close(&master_rhs(&r.q, &x.q), &dr, 1e-10));
        }
    }

    #[test]
    fn bridge_rates_are_valid_and_reproduce_the_flow(
        (g, rho, s, _v) in state_strategy(),
        scale in 0.1f64..3.0,
    ) {
        let q = matrix_from_edges(&g, |i, j| scale * (1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.2));
        let spec = HamiltonianSpec::new(g, Variant::SbpEntropic { m: ConstantRates::new(q).shared() }).unwrap();
        let x = PhasePoint::rho_s(rho, s);
        let r = build_rate_matrix(RateKind::Sbp, &spec, &x, 0.0).unwrap();
        prop_assert!(r.is_valid());
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        prop_assert!(close(&master_rhs(&r.q, &x.q), &dr, 1e-10));
    }

    #[test]
    fn density_flow_conserves_mass((g, rho, s, _v) in state_strategy()) {
        let q = matrix_from_edges(&g, |i, j| 0.5 + 0.1 * (i + j) as f64);
        let m = ConstantRates::new(q).shared();
        let variants = vec![
            Variant::OtKinetic { theta: ThetaKind::Upwind },
            Variant::OtKinetic { theta: ThetaKind::Logarithmic },
            Variant::LpKinetic { theta: ThetaKind::Average, q: 2.5 },
            Variant::SbpEntropic { m: m.clone() },
            Variant::SbpPsi { m, dual: ConvexDual::Quadratic },
        ];
        for v in variants {
            let spec = HamiltonianSpec::new(g.clone(), v).unwrap();
            let x = PhasePoint { chart: spec.chart(), q: rho.clone(), p: s.clone() };
            let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
            prop_assert!(dr.iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn chart_changes_round_trip(raw in proptest::collection::vec(0.05f64..1.0, 2..6), seed in any::<u64>()) {
        let rho = density(&raw);
        let s: Vec<f64> = (0..rho.len()).map(|i| ((seed >> (i * 8)) & 0xff) as f64 / 64.0 - 2.0).collect();
        let x = PhasePoint::rho_s(rho, s);
        let psi = hopf_cole(&x, HopfColeDirection::ToPsi, 0.3).unwrap();
        let back = hopf_cole(&psi.state, HopfColeDirection::ToS, 0.0).unwrap();
        prop_assert!((back.shift - 0.3 - x.p.iter().sum::<f64>() / x.p.len() as f64).abs() <= 1e-12);
        for conv in [MadelungConvention::Sbp, MadelungConvention::Fisher] {
            let fg = madelung(&x, conv).unwrap();
            let y = madelung_inverse(&fg, conv).unwrap();
            prop_assert!(close(&y.state.q, &x.q, 1e-12));
            let mut s = x.p.clone();
            hamgraph::graph::gauge_normalize(&mut s);
            prop_assert!(close(&y.state.p, &s, 1e-12));
        }
    }

    #[test]
    fn bridge_fits_marginals_with_monotone_dual(
        g in graph_strategy(),
        r0 in proptest::collection::vec(0.05f64..1.0, 5),
        r1 in proptest::collection::vec(0.05f64..1.0, 5),
    ) {
        let n = g.node_count();
        let q = matrix_from_edges(&g, |i, j| 0.5 + 0.3 * ((i + 2 * j) % 3) as f64);
        let p = BridgeProblem::new(g, ConstantRates::new(q).shared(), density(&r0[..n]), density(&r1[..n]));
        let cfg = BridgeConfig { dt: 1e-2, max_iter: 2000, ..BridgeConfig::default() };
        let sol = solve_bridge(&p, &cfg).unwrap();
        prop_assert!(sol.residuals.0 <= 1e-8 && sol.residuals.1 <= 1e-8);
        prop_assert!(sol.dual_history.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert!(sol.entropy >= -1e-12);
        let last = sol.rho.last().unwrap();
        prop_assert!(close(last, &p.rho1, 1e-7));
    }

    #[test]
    fn enumeration_is_mode_independent(g in graph_strategy(), steps in 1usize..5) {
        let n = g.node_count();
        let m = ConstantRates::new(matrix_from_edges(&g, |_, _| 0.3));
        let m2 = ConstantRates::new(matrix_from_edges(&g, |i, j| 0.2 + 0.05 * (i + j) as f64));
        let r0 = vec![1.0 / n as f64; n];
        let r1: Vec<f64> = density(&(0..n).map(|i| 1.0 + i as f64).collect::<Vec<_>>());
        let a = path_entropy_between(&g, &m, &m2, &r1, &r0, (0.0, 1.0), steps, ExecMode::Sequential);
        let b = path_entropy_between(&g, &m, &m2, &r1, &r0, (0.0, 1.0), steps, ExecMode::Parallel);
        match (a, b) {
            (Ok(a), Ok(b)) => { prop_assert_eq!(a, b); prop_assert!(a >= -1e-12); }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "modes disagree on failure"),
        }
    }

    #[test]
    fn sampling_is_seeded_and_mode_independent(seed in any::<u64>(), particles in 1usize..40) {
        let g = Graph::complete(3).unwrap();
        let m = ConstantRates::from_graph(&g);
        let mut cfg = SamplerConfig::new(particles, 0.0, 2.0, seed);
        cfg.mode = ExecMode::Sequential;
        let a = sample_paths(&m, &[0.2, 0.3, 0.5], &cfg).unwrap();
        cfg.mode = ExecMode::Parallel;
        let b = sample_paths(&m, &[0.2, 0.3, 0.5], &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for p in &a {
            prop_assert!(p.jumps.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].2 == w[1].1));
            prop_assert!(p.jumps.iter().all(|j| j.0 > 0.0 && j.0 <= 2.0 && j.1 != j.2));
        }
    }
}

#[test]
fn builtin_scenarios_survive_json() {
    for name in BUILTIN_SCENARIOS {
        let s = builtin(name).unwrap();
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }
}
