use nalgebra::{DMatrix, DVector};
use netmor_core::gas::BAR;
use netmor_core::integrator::{simulate, step, InputSignal, StepFactorization, StepperConfig};
use netmor_core::linalg::generalized_eigenvalues;
use netmor_core::power::*;
use netmor_core::water::*;
use num_complex::Complex64;
use proptest::prelude::*;

fn rhs(dae: &netmor_core::UnifiedDae, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(dae.n());
    dae.eval_g(x, u, &mut g).unwrap();
    dae.a() * x + dae.b() * u + g
}

#[test]
fn horizontal_pipe_steady_state_balances_friction() {
    let spec = WaterPipeSpec::standard();
    let net = assemble_water(&WaterTopology::single_pipe(spec, 3.0, 2.9)).unwrap();
    assert_eq!(net.dae.algebraic_rows(), 0);
    let cfg = StepperConfig {
        max_iter: 20_000,
        stop_when_settled: false,
        record_every: usize::MAX,
        ..Default::default()
    };
    let res = simulate(&net.dae, &net.x0, &InputSignal::from(net.u0.clone()), &cfg).unwrap();
    let q = res.final_state[0];
    let g = water_friction(&DVector::from_element(1, q), &[spec]).unwrap()[0];
    assert!(((3.0 - 2.9) * BAR - g).abs() <= 1e-6 * g, "dp = {}, g = {g}", 0.1 * BAR);
}

#[test]
fn y_network_conserves_flow_under_the_integrator() {
    let net = assemble_water(&WaterTopology::y_network(WaterPipeSpec::standard(), 3.0, 50.0)).unwrap();
    assert_eq!(net.dae.algebraic_rows(), net.incidence.demand_nodes.len());
    let cfg = StepperConfig {
        stop_when_settled: false,
        ..Default::default()
    };
    let res = simulate(&net.dae, &net.x0, &InputSignal::from(net.u0.clone()), &cfg).unwrap();
    for x in &res.states {
        assert!(net.node_balance(x, &net.u0).amax() <= 1e-9);
    }
    let x = &res.final_state;
    assert!((x[0] + x[1] - 50.0).abs() <= 1e-10, "inflow {}", x[0] + x[1]);
    // symmetric feeds share the demand
    assert!((x[0] - x[1]).abs() <= 1e-9);
}

#[test]
fn y_network_responds_to_uneven_feeds() {
    let mut topo = WaterTopology::y_network(WaterPipeSpec::standard(), 3.0, 50.0);
    topo.nodes[1].kind = WaterNodeKind::Pressure { pressure: 2.95 };
    let net = assemble_water(&topo).unwrap();
    let cfg = StepperConfig {
        max_iter: 20_000,
        ..Default::default()
    };
    let res = simulate(&net.dae, &net.x0, &InputSignal::from(net.u0.clone()), &cfg).unwrap();
    assert!(res.settled);
    let x = &res.final_state;
    assert!(x[0] > x[1]);
    assert!((x[0] + x[1] - 50.0).abs() <= 1e-9);
    // both feed pipes see the same junction pressure
    let k = WaterPipeSpec::standard().friction_coefficient();
    let head_loss = |q: f64| k * q * q.abs() / BAR;
    assert!(((3.0 - head_loss(x[0])) - (2.95 - head_loss(x[1]))).abs() <= 1e-6);
}

#[test]
fn pressure_gauge_does_not_move_the_flows() {
    let mut topo = WaterTopology::y_network(WaterPipeSpec::standard(), 3.0, 50.0);
    topo.nodes[1].kind = WaterNodeKind::Pressure { pressure: 2.9 };
    let net = assemble_water(&topo).unwrap();
    let (ne, np) = (net.edges(), net.incidence.pressure_nodes.len());
    let shift = 1.7;
    let mut x = net.x0.clone();
    let u = net.u0.clone();
    let fac = StepFactorization::new(&net.dae, 0.5).unwrap();
    let mut xs = x.clone();
    xs.rows_mut(ne, x.len() - ne).add_scalar_mut(shift);
    let mut us = u.clone();
    us.rows_mut(0, np).add_scalar_mut(shift);
    let r = rhs(&net.dae, &x, &u);
    let rs = rhs(&net.dae, &xs, &us);
    assert!((r.rows(0, ne) - rs.rows(0, ne)).amax() <= 1e-9 * r.amax());
    for k in 0..20 {
        x = step(&net.dae, &x, &u, &fac, k).unwrap();
        xs = step(&net.dae, &xs, &us, &fac, k).unwrap();
        assert!((x.rows(0, ne) - xs.rows(0, ne)).amax() <= 1e-8);
        assert!((x.rows(ne, x.len() - ne).add_scalar(shift) - xs.rows(ne, x.len() - ne)).amax() <= 1e-9);
    }
}

#[test]
fn water_spec_invariants() {
    assert!(WaterPipeSpec::new(1.0, 1.0, 1.0, -0.1, 0.0, 1.0).is_err());
    assert!(WaterPipeSpec::new(1.0, 1.0, 1.0, 0.0, 2.0, 1.0).is_err());
    assert!(WaterPipeSpec::new(0.0, 1.0, 1.0, 0.0, 0.0, 1.0).is_err());
    assert!(WaterPipeSpec::new(1.0, 1.0, 1.0, 0.0, -1.5, 1.0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn water_friction_is_odd(q in prop::collection::vec(-100.0..100.0f64, 1..6)) {
        let specs = vec![WaterPipeSpec::standard(); q.len()];
        let q = DVector::from_vec(q);
        let g = water_friction(&q, &specs).unwrap();
        let gn = water_friction(&(-&q), &specs).unwrap();
        prop_assert_eq!(g, -gn);
    }
}

/// `P_i = Re(V_i conj(Σ_j Y_ij V_j))` with complex phasors.
fn phasor_power(sys: &BusSystem, v: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = v.len();
    let phasor: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(v[i].abs(), theta[i])).collect();
    (0..n)
        .map(|i| {
            let current: Complex64 = (0..n).map(|j| Complex64::new(sys.g[(i, j)], sys.b[(i, j)]) * phasor[j]).sum();
            (phasor[i] * current.conj()).re
        })
        .collect()
}

#[test]
fn three_bus_flow_matches_phasor_oracle() {
    let (_, _, sys) = desk_fixture();
    let v = [1.02, 0.97, 0.95];
    let theta = [0.1, -0.05, -0.12];
    let p = power_flow_residual(&sys, &v, &theta).unwrap();
    for (a, b) in p.iter().zip(phasor_power(&sys, &v, &theta)) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lossless_two_bus_power_is_antisymmetric(b in 0.1..20.0f64, t1 in -1.0..1.0f64, t2 in -1.0..1.0f64) {
        let bus = |name: &str| Bus { name: name.into(), kind: BusKind::Load, power: 0.0, line: 0, segment: 0 };
        let sys = BusSystem {
            buses: vec![bus("a"), bus("b")],
            g: DMatrix::zeros(2, 2),
            b: DMatrix::from_row_slice(2, 2, &[0.0, b, b, 0.0]),
        };
        let p = power_flow_residual(&sys, &[1.0, 1.0], &[t1, t2]).unwrap();
        prop_assert_eq!(p[0] + p[1], 0.0);
    }

    #[test]
    fn lossless_lines_have_imaginary_spectrum(l in 0.1..5.0f64, c in 0.1..5.0f64, segments in 1usize..8) {
        let (lines, currents, _) = desk_fixture();
        let lines: Vec<LineSpec> = lines.iter().map(|line| LineSpec { r: 0.0, g: 0.0, l, c, segments, ..*line }).collect();
        let net = assemble_power(&lines, &currents, None).unwrap();
        let lin = net.dae.linear_part();
        let eig: Vec<_> = generalized_eigenvalues(&lin.a, &lin.e).unwrap().into_iter().filter_map(|z| z.finite()).collect();
        prop_assert_eq!(eig.len(), 4 * segments);
        for z in eig {
            prop_assert!(z.re.abs() <= 1e-8, "eigenvalue {}", z);
        }
    }

    #[test]
    fn lossy_lines_are_dissipative(r in 0.01..2.0f64, g in 0.01..2.0f64, segments in 1usize..8) {
        let line = LineSpec { r, g, l: 1.0, c: 1.0, length: 1.0, segments };
        let net = assemble_power(&[line], &[1.0], None).unwrap();
        let lin = net.dae.linear_part();
        for z in generalized_eigenvalues(&lin.a, &lin.e).unwrap().into_iter().filter_map(|z| z.finite()) {
            prop_assert!(z.re < 0.0);
        }
    }
}

#[test]
fn lossless_line_conserves_energy_in_exact_flow() {
    let line = LineSpec {
        r: 0.0,
        g: 0.0,
        l: 2.0,
        c: 0.5,
        length: 1.0,
        segments: 4,
    };
    let model = discretize_line_fdm(&line).unwrap();
    let m = model.mass();
    let k = model.state_matrix();
    // dE/dt = xᵀ K x for E = ½ xᵀ M x under M ẋ = K x
    let x = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0, 1.0, 0.1, -0.4, 0.7]);
    assert!((x.transpose() * &k * &x)[(0, 0)].abs() <= 1e-12);
    assert!(m.is_square());
}

#[test]
fn angle_rows_converge_under_the_integrator() {
    let (lines, currents, buses) = desk_fixture();
    let net = assemble_power(&lines, &currents, Some(&buses)).unwrap();
    assert_eq!(net.dae.algebraic_rows(), 3);
    let mut x0 = net.x0.clone();
    x0.rows_mut(net.theta_offset, 3).fill(0.0);
    let res = simulate(&net.dae, &x0, &InputSignal::from(net.u0.clone()), &StepperConfig::default()).unwrap();
    let r = net.constraint_residual(&res.final_state, &net.u0).unwrap();
    assert!(r.amax() <= 1e-8, "constraint residual {r}");
}

#[test]
fn line_without_buses_is_an_ode() {
    let line = LineSpec {
        r: 0.1,
        l: 1.0,
        c: 1.0,
        g: 0.05,
        length: 2.0,
        segments: 5,
    };
    let net = assemble_power(&[line], &[1.0], None).unwrap();
    assert_eq!(net.dae.n(), 10);
    assert_eq!(net.dae.algebraic_rows(), 0);
    assert!(assemble_power(&[], &[], None).is_err());
    let empty = BusSystem {
        buses: vec![],
        g: DMatrix::zeros(0, 0),
        b: DMatrix::zeros(0, 0),
    };
    assert!(assemble_power(&[line], &[1.0], Some(&empty)).is_err());
}
