//! Domain models built from a validated config.

use std::sync::Arc;

use nalgebra::DVector;
use netmor_core::gas::{assemble_gas_network, GasEdge, GasNetwork, GasNode, GasNodeKind, GasTopology, Scheme};
use netmor_core::integrator::InputSignal;
use netmor_core::power::{assemble_power, Bus, BusKind, BusSystem, PowerNetwork};
use netmor_core::water::{assemble_water, WaterEdge, WaterNetwork, WaterNode, WaterNodeKind, WaterTopology};
use netmor_core::UnifiedDae;

use crate::config::{name_index, BusKindConfig, Domain, NetworkConfig, NodeKind, PipeParams};
use crate::error::CliError;

#[derive(Debug, Clone)]
pub enum Network {
    Gas(GasNetwork),
    Water(WaterNetwork),
    Power(PowerNetwork),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub signal: InputSignal,
    /// Node names in declaration order.
    pub node_names: Vec<String>,
}

impl Model {
    pub fn build(cfg: &NetworkConfig) -> Result<Self, CliError> {
        Self::build_with_scheme(cfg, cfg.scheme.unwrap_or(Scheme::Fvm))
    }

    /// Gas models with the scheme overridden; other domains ignore it.
    pub fn build_with_scheme(cfg: &NetworkConfig, scheme: Scheme) -> Result<Self, CliError> {
        let network = match cfg.domain {
            Domain::Gas => Network::Gas(assemble_gas_network(&gas_topology(cfg), scheme)?),
            Domain::Water => Network::Water(assemble_water(&water_topology(cfg))?),
            Domain::Power => {
                let lines: Vec<_> = cfg.lines.iter().map(|l| l.spec).collect();
                let currents: Vec<f64> = cfg.lines.iter().map(|l| l.current).collect();
                let buses = bus_system(cfg);
                Network::Power(assemble_power(&lines, &currents, buses.as_ref())?)
            }
        };
        let mut model = Model {
            network,
            signal: InputSignal::Constant(DVector::zeros(0)),
            node_names: cfg.nodes.iter().map(|n| n.name.clone()).collect(),
        };
        model.signal = model.input_signal(cfg)?;
        Ok(model)
    }

    pub fn dae(&self) -> &UnifiedDae {
        match &self.network {
            Network::Gas(n) => &n.dae,
            Network::Water(n) => &n.dae,
            Network::Power(n) => &n.dae,
        }
    }

    pub fn x0(&self) -> &DVector<f64> {
        match &self.network {
            Network::Gas(n) => &n.x0,
            Network::Water(n) => &n.x0,
            Network::Power(n) => &n.x0,
        }
    }

    pub fn u0(&self) -> &DVector<f64> {
        match &self.network {
            Network::Gas(n) => &n.u0,
            Network::Water(n) => &n.u0,
            Network::Power(n) => &n.u0,
        }
    }

    pub fn input_labels(&self) -> &[String] {
        match &self.network {
            Network::Gas(n) => &n.input_labels,
            Network::Water(n) => &n.input_labels,
            Network::Power(n) => &n.input_labels,
        }
    }

    pub fn output_labels(&self) -> &[String] {
        match &self.network {
            Network::Gas(n) => &n.output_labels,
            Network::Water(n) => &n.output_labels,
            Network::Power(n) => &n.output_labels,
        }
    }

    /// Column names of the constraint diagnostics.
    pub fn diagnostic_labels(&self) -> Vec<String> {
        match &self.network {
            Network::Gas(n) => n
                .junctions
                .iter()
                .map(|j| format!("balance[{}]", self.node_names[j.node]))
                .collect(),
            Network::Water(n) => n
                .incidence
                .demand_nodes
                .iter()
                .map(|&i| format!("balance[{}]", self.node_names[i]))
                .collect(),
            Network::Power(n) => n.buses.buses.iter().map(|b| format!("residual[{}]", b.name)).collect(),
        }
    }

    /// Constraint residuals at `(x, u)`: junction or node flow balance,
    /// bus power balance.
    pub fn diagnostics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Vec<f64>, CliError> {
        Ok(match &self.network {
            Network::Gas(n) => n.junction_balance(x),
            Network::Water(n) => n.node_balance(x, u).iter().copied().collect(),
            Network::Power(n) => {
                if n.buses.buses.is_empty() {
                    Vec::new()
                } else {
                    n.constraint_residual(x, u)?.iter().copied().collect()
                }
            }
        })
    }

    fn input_signal(&self, cfg: &NetworkConfig) -> Result<InputSignal, CliError> {
        let u0 = self.u0().clone();
        if cfg.signals.is_empty() {
            return Ok(InputSignal::Constant(u0));
        }
        let line_idx = name_index(cfg.lines.iter().map(|l| l.name.as_str()));
        let mut steps = Vec::new();
        for s in &cfg.signals {
            let tag = match line_idx.get(s.target.as_str()) {
                Some(k) => format!("[line{k}]"),
                None => format!("[{}]", s.target),
            };
            let idx = self
                .input_labels()
                .iter()
                .position(|l| l.ends_with(&tag))
                .ok_or_else(|| CliError::Config(format!("signal.{}: `{}` has no boundary input", s.target, s.target)))?;
            steps.push((idx, s.step_time, s.step_value));
        }
        Ok(InputSignal::Function(Arc::new(move |t| {
            let mut u = u0.clone();
            for &(i, t0, v) in &steps {
                if t >= t0 {
                    u[i] = v;
                }
            }
            u
        })))
    }
}

fn gas_topology(cfg: &NetworkConfig) -> GasTopology {
    let idx = name_index(cfg.nodes.iter().map(|n| n.name.as_str()));
    GasTopology {
        nodes: cfg
            .nodes
            .iter()
            .map(|n| GasNode {
                name: n.name.clone(),
                kind: match n.kind {
                    NodeKind::Supply { pressure } => GasNodeKind::Supply { pressure },
                    NodeKind::Demand { flow } => GasNodeKind::Demand { flow },
                    NodeKind::Junction => GasNodeKind::Junction,
                },
            })
            .collect(),
        edges: cfg
            .edges
            .iter()
            .map(|e| GasEdge {
                name: e.name.clone(),
                from: idx[e.from.as_str()],
                to: idx[e.to.as_str()],
                spec: match e.params {
                    PipeParams::Gas(s) => s,
                    PipeParams::Water(_) => unreachable!("gas config holds gas pipes"),
                },
            })
            .collect(),
    }
}

fn water_topology(cfg: &NetworkConfig) -> WaterTopology {
    let idx = name_index(cfg.nodes.iter().map(|n| n.name.as_str()));
    WaterTopology {
        nodes: cfg
            .nodes
            .iter()
            .map(|n| WaterNode {
                name: n.name.clone(),
                kind: match n.kind {
                    NodeKind::Supply { pressure } => WaterNodeKind::Pressure { pressure },
                    NodeKind::Demand { flow } => WaterNodeKind::Demand { flow },
                    NodeKind::Junction => WaterNodeKind::Demand { flow: 0.0 },
                },
            })
            .collect(),
        edges: cfg
            .edges
            .iter()
            .map(|e| WaterEdge {
                name: e.name.clone(),
                from: idx[e.from.as_str()],
                to: idx[e.to.as_str()],
                spec: match e.params {
                    PipeParams::Water(s) => s,
                    PipeParams::Gas(_) => unreachable!("water config holds water pipes"),
                },
            })
            .collect(),
    }
}

fn bus_system(cfg: &NetworkConfig) -> Option<BusSystem> {
    let (g, b) = cfg.admittance.clone()?;
    let line_idx = name_index(cfg.lines.iter().map(|l| l.name.as_str()));
    let buses = cfg
        .buses
        .iter()
        .map(|bus| Bus {
            name: bus.name.clone(),
            kind: match bus.kind {
                BusKindConfig::Generator { e_prime, x_prime, alpha } => BusKind::Generator { e_prime, x_prime, alpha },
                BusKindConfig::Load => BusKind::Load,
            },
            power: bus.power,
            line: line_idx[bus.line.as_str()],
            segment: bus.segment,
        })
        .collect();
    Some(BusSystem { buses, g, b })
}
