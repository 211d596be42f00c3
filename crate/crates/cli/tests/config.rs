use nalgebra::DMatrix;
use netmor::config::*;
use netmor::{parse_config, parse_config_str, serialize_config, CliError};
use netmor_core::gas::{GasPipelineSpec, Scheme};
use netmor_core::mor::Feedthrough;
use netmor_core::power::LineSpec;
use netmor_core::water::WaterPipeSpec;
use proptest::prelude::*;

fn preset(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name)
}

fn config_error(text: &str) -> String {
    match parse_config_str(text) {
        Err(CliError::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

const MINIMAL_GAS: &str = "\
network.domain = gas
node.a.kind = supply
node.a.pressure = 50
node.b.kind = demand
node.b.flow = 30
edge.e.from = a
edge.e.to = b
";

#[test]
#[allow(clippy::approx_constant)]
fn gas_preset_has_reference_values() {
    let cfg = parse_config(&preset("table1_gas.cfg")).unwrap();
    assert_eq!(cfg.domain, Domain::Gas);
    assert_eq!(cfg.scheme, Some(Scheme::Fvm));
    let PipeParams::Gas(spec) = cfg.edges[0].params else {
        panic!("gas pipe expected")
    };
    assert_eq!(spec.length, 1000.0);
    assert_eq!(spec.diameter, 1.0);
    assert_eq!(spec.area, 0.7854);
    assert_eq!(spec.mesh, 100.0);
    assert_eq!(cfg.nodes[0].kind, NodeKind::Supply { pressure: 50.0 });
    assert_eq!(cfg.nodes[1].kind, NodeKind::Demand { flow: 30.0 });
    assert_eq!(cfg.solver.tau, 0.5);
    assert_eq!(cfg.solver.max_iter, 1000);
    assert_eq!(cfg.mor.as_ref().unwrap().r, 6);
}

#[test]
fn fdm_preset_differs_only_in_scheme() {
    let fvm = parse_config(&preset("table1_gas.cfg")).unwrap();
    let fdm = parse_config(&preset("table1_gas_fdm.cfg")).unwrap();
    assert_eq!(fdm.scheme, Some(Scheme::Fdm));
    assert_eq!(NetworkConfig { scheme: fvm.scheme, ..fdm }, fvm);
}

#[test]
fn every_preset_parses_and_builds() {
    for name in ["table1_gas.cfg", "table1_gas_fdm.cfg", "fork_gas.cfg", "y_water.cfg", "line3bus_power.cfg"] {
        let cfg = parse_config(&preset(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        netmor::model::Model::build(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_config_str(&serialize_config(&cfg)).unwrap(), cfg, "{name}");
    }
}

#[test]
fn power_preset_matches_desk_fixture() {
    let cfg = parse_config(&preset("line3bus_power.cfg")).unwrap();
    let (lines, currents, sys) = netmor_core::power::desk_fixture();
    assert_eq!(cfg.lines.iter().map(|l| l.spec).collect::<Vec<_>>(), lines);
    assert_eq!(cfg.lines.iter().map(|l| l.current).collect::<Vec<_>>(), currents);
    let (g, b) = cfg.admittance.unwrap();
    assert_eq!(g, sys.g);
    assert_eq!(b, sys.b);
}

#[test]
fn defaults_fill_missing_keys() {
    let cfg = parse_config_str(MINIMAL_GAS).unwrap();
    assert_eq!(cfg.scheme, Some(Scheme::Fvm));
    assert_eq!(cfg.edges[0].params, PipeParams::Gas(GasPipelineSpec::reference()));
    assert_eq!(cfg.solver, SolverConfig::default());
    assert!(cfg.mor.is_none());
}

#[test]
fn per_edge_values_override_pipe_defaults() {
    let cfg = parse_config_str(&format!("{MINIMAL_GAS}pipe.length = 2000\nedge.e.mesh = 50\n")).unwrap();
    let PipeParams::Gas(spec) = cfg.edges[0].params else {
        panic!("gas pipe expected")
    };
    assert_eq!((spec.length, spec.mesh), (2000.0, 50.0));
}

#[test]
fn empty_file_reports_missing_network() {
    assert_eq!(config_error(""), "missing section: network");
    assert_eq!(config_error("# only a comment\n\n"), "missing section: network");
}

#[test]
fn duplicate_key_names_key_and_both_lines() {
    let msg = config_error(&format!("{MINIMAL_GAS}solver.tau = 0.5\nnode.a.pressure = 40\n"));
    assert!(msg.contains("node.a.pressure"), "{msg}");
    assert!(msg.contains("lines 3 and 9"), "{msg}");
}

#[test]
fn unknown_key_is_rejected_with_line() {
    let msg = config_error(&format!("{MINIMAL_GAS}solver.tua = 0.5\n"));
    assert!(msg.contains("line 8") && msg.contains("solver.tua"), "{msg}");
}

#[test]
fn keys_of_another_domain_are_rejected() {
    let msg = config_error(&format!("{MINIMAL_GAS}edge.e.density = 1000\n"));
    assert!(msg.contains("edge.e.density") && msg.contains("gas"), "{msg}");
    let water = MINIMAL_GAS.replace("domain = gas", "domain = water");
    let msg = config_error(&format!("{water}network.scheme = fdm\n"));
    assert!(msg.contains("network.scheme"), "{msg}");
}

#[test]
fn malformed_lines_report_line_number() {
    let msg = config_error("network.domain = gas\nthis is not a key value pair\n");
    assert!(msg.starts_with("line 2"), "{msg}");
    let msg = config_error("network.domain = gas\nnodekind = supply\n");
    assert!(msg.starts_with("line 2"), "{msg}");
}

#[test]
fn bad_values_name_the_key_path() {
    let msg = config_error(&MINIMAL_GAS.replace("pressure = 50", "pressure = fifty"));
    assert!(msg.contains("node.a.pressure") && msg.contains("fifty"), "{msg}");
    let msg = config_error(&format!("{MINIMAL_GAS}solver.max_iter = -3\n"));
    assert!(msg.contains("solver.max_iter"), "{msg}");
    let msg = config_error(&format!("{MINIMAL_GAS}solver.tau = 0\n"));
    assert!(msg.contains("solver"), "{msg}");
    let msg = config_error(&MINIMAL_GAS.replace("domain = gas", "domain = steam"));
    assert!(msg.contains("network.domain") && msg.contains("steam"), "{msg}");
}

#[test]
fn edges_must_reference_declared_nodes() {
    let msg = config_error(&MINIMAL_GAS.replace("edge.e.to = b", "edge.e.to = c"));
    assert!(msg.contains("edge.e.to") && msg.contains("unknown node `c`"), "{msg}");
}

#[test]
fn missing_required_keys_are_named() {
    let msg = config_error(&MINIMAL_GAS.replace("node.b.flow = 30\n", ""));
    assert_eq!(msg, "missing key: node.b.flow");
    let msg = config_error(&format!("{MINIMAL_GAS}mor.tol = 1e-6\n"));
    assert_eq!(msg, "missing key: mor.r");
}

#[test]
fn signals_must_target_known_boundaries() {
    let msg = config_error(&format!("{MINIMAL_GAS}signal.x.step_time = 1\nsignal.x.step_value = 2\n"));
    assert!(msg.contains("signal.x"), "{msg}");
    let cfg = parse_config_str(&format!("{MINIMAL_GAS}signal.b.step_time = 10\nsignal.b.step_value = 20\n")).unwrap();
    assert_eq!(cfg.signals[0].target, "b");
}

#[test]
fn admittance_must_be_square_in_bus_count() {
    let text = std::fs::read_to_string(preset("line3bus_power.cfg"))
        .unwrap()
        .replace("admittance.b = -10 5 5; 5 -9 4; 5 4 -9", "admittance.b = -10 5; 5 -9");
    let msg = config_error(&text);
    assert!(msg.contains("admittance.b") && msg.contains("3x3"), "{msg}");
}

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}"
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(0.0),
        Just(0.1),
    ]
}

fn solver() -> impl Strategy<Value = SolverConfig> {
    (1e-4..10.0f64, 1usize..100_000, 1e-14..1e-2f64, 1usize..100, any::<bool>()).prop_map(
        |(tau, max_iter, settle_tol, record_every, stop_when_settled)| SolverConfig {
            tau,
            max_iter,
            settle_tol,
            record_every,
            stop_when_settled,
        },
    )
}

fn mor() -> impl Strategy<Value = Option<MorConfig>> {
    prop::option::of((1usize..60, 1e-12..1e-2f64, 1usize..500, 1e-6..1.0f64, 1.0..1e6f64, any::<bool>()).prop_map(
        |(r, tol, max_iter, shift_lo, shift_hi, zero)| MorConfig {
            r,
            tol,
            max_iter,
            shift_lo,
            shift_hi,
            feedthrough: if zero { Feedthrough::Zero } else { Feedthrough::Retain },
        },
    ))
}

fn pipe_network() -> impl Strategy<Value = NetworkConfig> {
    (
        any::<bool>(),
        any::<bool>(),
        prop::collection::btree_set(name(), 2..6),
        prop::collection::vec((0usize..3, finite()), 6),
        prop::collection::vec(prop::array::uniform6(finite()), 1..5),
        solver(),
        mor(),
    )
        .prop_map(|(water, fdm, names, kinds, pipes, solver, mor)| {
            let names: Vec<String> = names.into_iter().collect();
            let nodes: Vec<NodeConfig> = names
                .iter()
                .zip(&kinds)
                .map(|(n, &(k, v))| NodeConfig {
                    name: n.clone(),
                    kind: match k {
                        0 => NodeKind::Supply { pressure: v },
                        1 => NodeKind::Demand { flow: v },
                        _ => NodeKind::Junction,
                    },
                })
                .collect();
            let edges = pipes
                .iter()
                .enumerate()
                .map(|(i, p)| EdgeConfig {
                    name: format!("e{i}"),
                    from: names[i % names.len()].clone(),
                    to: names[(i + 1) % names.len()].clone(),
                    params: if water {
                        PipeParams::Water(WaterPipeSpec {
                            length: p[0],
                            area: p[1],
                            diameter: p[2],
                            friction: p[3],
                            angle: p[4],
                            density: p[5],
                        })
                    } else {
                        PipeParams::Gas(GasPipelineSpec {
                            length: p[0],
                            diameter: p[1],
                            area: p[2],
                            friction: p[3],
                            sound_speed_sq: p[4],
                            mesh: p[5],
                        })
                    },
                })
                .collect();
            let signals = vec![SignalConfig {
                target: names[0].clone(),
                step_time: kinds[0].1,
                step_value: kinds[1].1,
            }];
            NetworkConfig {
                domain: if water { Domain::Water } else { Domain::Gas },
                scheme: if water {
                    None
                } else if fdm {
                    Some(Scheme::Fdm)
                } else {
                    Some(Scheme::Fvm)
                },
                nodes,
                edges,
                lines: Vec::new(),
                buses: Vec::new(),
                admittance: None,
                signals,
                solver,
                mor,
            }
        })
}

fn power_network() -> impl Strategy<Value = NetworkConfig> {
    (
        prop::collection::vec((prop::array::uniform6(finite()), 1usize..20), 1..4),
        prop::collection::vec((any::<bool>(), prop::array::uniform4(finite()), 0usize..4), 0..4),
        prop::collection::vec(finite(), 32),
        solver(),
        mor(),
    )
        .prop_map(|(lines, buses, entries, solver, mor)| {
            let lines: Vec<LineConfig> = lines
                .iter()
                .enumerate()
                .map(|(i, (v, segments))| LineConfig {
                    name: format!("l{i}"),
                    spec: LineSpec {
                        r: v[0],
                        l: v[1],
                        c: v[2],
                        g: v[3],
                        length: v[4],
                        segments: *segments,
                    },
                    current: v[5],
                })
                .collect();
            let buses: Vec<BusConfig> = buses
                .iter()
                .enumerate()
                .map(|(i, (gen, v, seg))| BusConfig {
                    name: format!("b{i}"),
                    kind: if *gen {
                        BusKindConfig::Generator {
                            e_prime: v[0],
                            x_prime: v[1],
                            alpha: v[2],
                        }
                    } else {
                        BusKindConfig::Load
                    },
                    power: v[3],
                    line: lines[i % lines.len()].name.clone(),
                    segment: *seg,
                })
                .collect();
            let n = buses.len();
            let admittance = (n > 0).then(|| {
                (
                    DMatrix::from_fn(n, n, |i, j| entries[i * n + j]),
                    DMatrix::from_fn(n, n, |i, j| entries[16 + i * n + j]),
                )
            });
            NetworkConfig {
                domain: Domain::Power,
                scheme: None,
                nodes: Vec::new(),
                edges: Vec::new(),
                lines,
                buses,
                admittance,
                signals: Vec::new(),
                solver,
                mor,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialize_then_parse_is_identity(cfg in prop_oneof![pipe_network(), power_network()]) {
        let text = serialize_config(&cfg);
        let back = parse_config_str(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn serialization_is_a_fixed_point(cfg in pipe_network()) {
        let once = serialize_config(&cfg);
        prop_assert_eq!(serialize_config(&parse_config_str(&once).unwrap()), once);
    }
}
