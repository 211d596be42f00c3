use nalgebra::DVector;
use netmor_core::gas::*;
use netmor_core::integrator::{simulate, steady_state_residual, InputSignal, StepperConfig};
use netmor_core::Error;
use proptest::prelude::*;

fn run(net: &GasNetwork, cfg: &StepperConfig) -> netmor_core::integrator::SimulationResult {
    simulate(&net.dae, &net.x0, &InputSignal::from(net.u0.clone()), cfg).unwrap()
}

fn single(scheme: Scheme, demand: f64) -> GasNetwork {
    assemble_gas_network(&GasTopology::single_pipe(GasPipelineSpec::reference(), 50.0, demand), scheme).unwrap()
}

#[test]
fn reference_pipe_settles_to_demand() {
    let net = single(Scheme::Fvm, 30.0);
    assert_eq!(net.dae.n(), 18);
    assert_eq!(net.dae.algebraic_rows(), 0);
    let res = run(&net, &StepperConfig::default());
    assert!(res.settled);
    let y = res.outputs.last().unwrap();
    assert!((y[1] - 30.0).abs() <= 0.03, "inlet flow {}", y[1]);
    assert!(y[0] < 50.0, "outlet pressure {}", y[0]);
    assert!(steady_state_residual(&net.dae, &res.final_state, &net.u0).unwrap() <= 10.0 * 1e-8);
}

#[test]
fn zero_demand_settles_at_supply_pressure() {
    let net = single(Scheme::Fvm, 0.0);
    let res = run(&net, &StepperConfig::default());
    let x = &res.final_state;
    assert!((res.outputs.last().unwrap()[0] - 50.0).abs() <= 1e-6);
    for i in 0..9 {
        assert!((x[i] - 50.0).abs() <= 1e-6);
        assert!(x[9 + i].abs() <= 1e-6);
    }
}

#[test]
fn fvm_and_fdm_share_the_steady_state() {
    let cfg = StepperConfig {
        stop_when_settled: false,
        ..Default::default()
    };
    let fvm = run(&single(Scheme::Fvm, 30.0), &cfg).final_state;
    let fdm = run(&single(Scheme::Fdm, 30.0), &cfg).final_state;
    let rel = (&fvm - &fdm).amax() / fvm.amax();
    assert!(rel <= 1e-6, "relative difference {rel:e}");
}

#[test]
fn fdm_mass_matrix_is_identity() {
    let net = single(Scheme::Fdm, 30.0);
    assert_eq!(net.dae.e(), &nalgebra::DMatrix::<f64>::identity(18, 18));
    assert!(net.dae.diff_mask().iter().all(|&d| d));
}

#[test]
fn coarse_step_tracks_fine_reference() {
    let net = single(Scheme::Fvm, 30.0);
    let at = |tau: f64| {
        let cfg = StepperConfig {
            tau,
            max_iter: (50.0 / tau).round() as usize,
            stop_when_settled: false,
            record_every: usize::MAX,
            ..Default::default()
        };
        run(&net, &cfg).final_state
    };
    let coarse = at(0.5);
    let fine = at(0.001);
    let rel = (&coarse - &fine).amax() / fine.amax();
    assert!(rel <= 0.01, "relative difference at t = 50: {rel:e}");
}

#[test]
fn fork_dimensions_and_algebraic_rows() {
    let net = assemble_gas_network(&GasTopology::fork(GasPipelineSpec::reference(), 50.0, 30.0), Scheme::Fvm).unwrap();
    assert_eq!(net.dae.n(), 56);
    assert_eq!(net.dae.algebraic_rows(), 2);
    let zero_rows: Vec<usize> = (0..56).filter(|&i| !net.dae.diff_mask()[i]).collect();
    assert_eq!(zero_rows, vec![54, 55]);
    assert_eq!(net.dae.m(), 3);
    assert_eq!(net.dae.p(), 3);
}

#[test]
fn fork_junction_balance_holds_every_step() {
    let net = assemble_gas_network(&GasTopology::fork(GasPipelineSpec::reference(), 50.0, 30.0), Scheme::Fvm).unwrap();
    let res = run(&net, &StepperConfig::default());
    for x in &res.states {
        for b in net.junction_balance(x) {
            assert!(b.abs() <= 1e-10, "junction balance {b:e}");
        }
    }
    let y = res.outputs.last().unwrap();
    assert!((y[1] + y[2] - 30.0).abs() <= 0.03);
}

fn node(name: &str, kind: GasNodeKind) -> GasNode {
    GasNode { name: name.into(), kind }
}

fn edge(from: usize, to: usize) -> GasEdge {
    GasEdge {
        name: format!("{from}-{to}"),
        from,
        to,
        spec: GasPipelineSpec::reference(),
    }
}

#[test]
fn degree_two_node_must_be_contracted() {
    let topo = GasTopology {
        nodes: vec![
            node("s", GasNodeKind::Supply { pressure: 50.0 }),
            node("mid", GasNodeKind::Junction),
            node("d", GasNodeKind::Demand { flow: 30.0 }),
        ],
        edges: vec![edge(0, 1), edge(1, 2)],
    };
    let err = assemble_gas_network(&topo, Scheme::Fvm).unwrap_err();
    assert!(matches!(&err, Error::Topology(m) if m.contains("contract")), "{err}");
}

#[test]
fn disconnected_network_rejected() {
    let mut topo = GasTopology::single_pipe(GasPipelineSpec::reference(), 50.0, 30.0);
    let other = GasTopology::single_pipe(GasPipelineSpec::reference(), 50.0, 10.0);
    topo.nodes.extend(other.nodes);
    topo.edges.push(edge(2, 3));
    let err = assemble_gas_network(&topo, Scheme::Fvm).unwrap_err();
    assert!(matches!(&err, Error::Topology(m) if m.contains("disconnected")), "{err}");
}

#[test]
fn junction_without_outgoing_pipe_rejected() {
    let topo = GasTopology {
        nodes: vec![
            node("s1", GasNodeKind::Supply { pressure: 50.0 }),
            node("s2", GasNodeKind::Supply { pressure: 50.0 }),
            node("s3", GasNodeKind::Supply { pressure: 50.0 }),
            node("j", GasNodeKind::Junction),
        ],
        edges: vec![edge(0, 3), edge(1, 3), edge(2, 3)],
    };
    let err = assemble_gas_network(&topo, Scheme::Fvm).unwrap_err();
    assert!(matches!(&err, Error::Topology(m) if m.contains("no outgoing")), "{err}");
}

#[test]
fn coarse_mesh_rejected() {
    let spec = GasPipelineSpec {
        mesh: 500.0,
        ..GasPipelineSpec::reference()
    };
    assert!(matches!(discretize_pipeline_fvm(&spec), Err(Error::MeshTooCoarse { .. })));
    let spec = GasPipelineSpec {
        mesh: 300.0,
        ..GasPipelineSpec::reference()
    };
    assert!(matches!(discretize_pipeline_fvm(&spec), Err(Error::MeshNotIntegral { .. })));
}

fn random_spec() -> impl Strategy<Value = GasPipelineSpec> {
    (3usize..20, 10.0..200.0f64, 0.2..2.0f64, 0.001..0.05f64, 1e4..4e5f64).prop_map(|(cells, mesh, d, lambda, c)| GasPipelineSpec {
        length: mesh * cells as f64,
        diameter: d,
        area: std::f64::consts::PI * d * d / 4.0,
        friction: lambda,
        sound_speed_sq: c,
        mesh,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_pressure_is_frictionless_equilibrium(spec in random_spec(), p_s in 1e5..1e7f64, scheme in prop_oneof![Just(Scheme::Fvm), Just(Scheme::Fdm)]) {
        let model = discretize_pipeline(&spec, scheme).unwrap();
        let m = model.cells();
        let mut x = DVector::zeros(2 * m);
        x.rows_mut(0, m).fill(p_s);
        let mut rhs = model.coupling() * &x;
        for r in 0..m {
            rhs[m + r] += model.b_p[r] * p_s;
        }
        prop_assert!(rhs.amax() <= 1e-12 * p_s * model.b_p.amax().max(1.0));
    }

    #[test]
    fn friction_is_odd_and_quadratic(spec in random_spec(), alpha in 0.1..10.0f64, seed in prop::collection::vec(-50.0..50.0f64, 19)) {
        let model = discretize_pipeline_fvm(&spec).unwrap();
        let m = model.cells();
        let q = DVector::from_fn(m, |i, _| seed[i]);
        let p = DVector::from_fn(m, |i, _| 4e6 + 1e4 * seed[i].abs());
        let g = friction_vector(&model, 5e6, &p, &q).unwrap();
        let g_neg = friction_vector(&model, 5e6, &p, &(-&q)).unwrap();
        let g_scaled = friction_vector(&model, 5e6, &p, &(&q * alpha)).unwrap();
        prop_assert!((&g + &g_neg).amax() <= 1e-12 * g.amax().max(1e-300));
        prop_assert!((&g_scaled - &g * (alpha * alpha)).amax() <= 1e-12 * g_scaled.amax().max(1e-300));
    }

    #[test]
    fn zero_mass_rows_are_the_junction_rows(spec in random_spec()) {
        let net = assemble_gas_network(&GasTopology::fork(spec, 50.0, 10.0), Scheme::Fvm).unwrap();
        let junction_vars: usize = net.junctions.iter().map(|j| j.inflow_vars.len()).sum();
        prop_assert_eq!(net.dae.algebraic_rows(), junction_vars);
        for (i, &d) in net.dae.diff_mask().iter().enumerate() {
            prop_assert_eq!(d, net.dae.e().row(i).amax() > 0.0);
        }
    }
}

#[test]
fn nonpositive_pressure_rejected_by_friction() {
    let model = discretize_pipeline_fvm(&GasPipelineSpec::reference()).unwrap();
    let mut p = DVector::from_element(9, 5e6);
    p[4] = -1.0;
    let err = friction_vector(&model, 5e6, &p, &DVector::from_element(9, 30.0)).unwrap_err();
    assert!(matches!(err, Error::NonphysicalPressure { index: 4, .. }), "{err:?}");
}
