//! Rigid-water-column networks: incidence bookkeeping and DAE assembly.
//!
//! States are `x = [q; p_d]` with edge mass flows in kg/s and demand-node
//! pressures in bar. Inputs are `u = [p_s; q_s]` (pressure nodes in bar,
//! demand withdrawals in kg/s).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dae::{make_dae, Nonlinearity, UnifiedDae};
use crate::error::{Error, Result};
use crate::gas::{FrictionSplit, BAR};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterPipeSpec {
    pub length: f64,
    pub area: f64,
    pub diameter: f64,
    pub friction: f64,
    /// Elevation angle in radians.
    pub angle: f64,
    pub density: f64,
}

impl WaterPipeSpec {
    pub fn new(length: f64, area: f64, diameter: f64, friction: f64, angle: f64, density: f64) -> Result<Self> {
        let spec = Self {
            length,
            area,
            diameter,
            friction,
            angle,
            density,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Horizontal 1 km pipe of 0.5 m diameter carrying water.
    pub fn standard() -> Self {
        let diameter = 0.5;
        Self {
            length: 1000.0,
            area: std::f64::consts::PI * diameter * diameter / 4.0,
            diameter,
            friction: 0.02,
            angle: 0.0,
            density: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("area", self.area),
            ("diameter", self.diameter),
            ("density", self.density),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("water pipe {name} must be positive, got {v}")));
            }
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "water pipe friction must be non-negative, got {}",
                self.friction
            )));
        }
        if !(self.angle.abs() <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidSpec(format!(
                "elevation angle {} outside [-pi/2, pi/2]",
                self.angle
            )));
        }
        Ok(())
    }

    /// Coefficient `k` in `g(q) = k q|q|`.
    pub fn friction_coefficient(&self) -> f64 {
        (self.length / self.density) * self.friction / (2.0 * self.diameter * self.area * self.area)
    }

    /// Constant head term `H = -L ρ g sin α` in Pa.
    pub fn head(&self) -> f64 {
        -self.length * self.density * GRAVITY * self.angle.sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaterNodeKind {
    /// Boundary pressure in bar.
    Pressure { pressure: f64 },
    /// Withdrawal in kg/s (zero for pure junctions).
    Demand { flow: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterNode {
    pub name: String,
    pub kind: WaterNodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterEdge {
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub spec: WaterPipeSpec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WaterTopology {
    pub nodes: Vec<WaterNode>,
    pub edges: Vec<WaterEdge>,
}

impl WaterTopology {
    pub fn single_pipe(spec: WaterPipeSpec, pressure_in: f64, pressure_out: f64) -> Self {
        Self {
            nodes: vec![
                WaterNode {
                    name: "in".into(),
                    kind: WaterNodeKind::Pressure { pressure: pressure_in },
                },
                WaterNode {
                    name: "out".into(),
                    kind: WaterNodeKind::Pressure { pressure: pressure_out },
                },
            ],
            edges: vec![WaterEdge {
                name: "pipe".into(),
                from: 0,
                to: 1,
                spec,
            }],
        }
    }

    /// Two pressure feeds into a junction, one pipe on to a demand node.
    pub fn y_network(spec: WaterPipeSpec, feed_bar: f64, demand: f64) -> Self {
        let node = |name: &str, kind| WaterNode {
            name: name.into(),
            kind,
        };
        let edge = |name: &str, from, to| WaterEdge {
            name: name.into(),
            from,
            to,
            spec,
        };
        Self {
            nodes: vec![
                node("f1", WaterNodeKind::Pressure { pressure: feed_bar }),
                node("f2", WaterNodeKind::Pressure { pressure: feed_bar }),
                node("j", WaterNodeKind::Demand { flow: 0.0 }),
                node("d", WaterNodeKind::Demand { flow: demand }),
            ],
            edges: vec![edge("e1", 0, 2), edge("e2", 1, 2), edge("e3", 2, 3)],
        }
    }
}

/// Signed incidence matrix (edges × nodes) and its split by node tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    /// `+1` at the head node, `-1` at the tail node of every edge row.
    pub full: DMatrix<f64>,
    /// Columns of the pressure nodes.
    pub pressure: DMatrix<f64>,
    /// Columns of the demand nodes.
    pub demand: DMatrix<f64>,
    pub pressure_nodes: Vec<usize>,
    pub demand_nodes: Vec<usize>,
}

pub fn build_incidence(topo: &WaterTopology) -> Result<Incidence> {
    let n_nodes = topo.nodes.len();
    if n_nodes == 0 || topo.edges.is_empty() {
        return Err(Error::Topology("water network needs at least one node and one edge".into()));
    }
    let mut full = DMatrix::zeros(topo.edges.len(), n_nodes);
    let mut degree = vec![0usize; n_nodes];
    for (k, e) in topo.edges.iter().enumerate() {
        if e.from >= n_nodes || e.to >= n_nodes {
            return Err(Error::Topology(format!("edge {} references an unknown node", e.name)));
        }
        if e.from == e.to {
            return Err(Error::Topology(format!("edge {} is a self-loop", e.name)));
        }
        full[(k, e.to)] = 1.0;
        full[(k, e.from)] = -1.0;
        degree[e.from] += 1;
        degree[e.to] += 1;
    }
    if let Some(i) = degree.iter().position(|&d| d == 0) {
        return Err(Error::Topology(format!("node {} is isolated", topo.nodes[i].name)));
    }
    if !connected(n_nodes, topo.edges.iter().map(|e| (e.from, e.to))) {
        return Err(Error::Topology("network is disconnected".into()));
    }
    let pressure_nodes: Vec<usize> = (0..n_nodes)
        .filter(|&i| matches!(topo.nodes[i].kind, WaterNodeKind::Pressure { .. }))
        .collect();
    let demand_nodes: Vec<usize> = (0..n_nodes)
        .filter(|&i| matches!(topo.nodes[i].kind, WaterNodeKind::Demand { .. }))
        .collect();
    Ok(Incidence {
        pressure: full.select_columns(&pressure_nodes),
        demand: full.select_columns(&demand_nodes),
        full,
        pressure_nodes,
        demand_nodes,
    })
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Pipe friction `(L/ρ) λ/(2 D A²) q|q|` per edge, in Pa.
pub fn water_friction(q: &DVector<f64>, specs: &[WaterPipeSpec]) -> Result<DVector<f64>> {
    if q.len() != specs.len() {
        return Err(Error::dims("water friction", specs.len(), q.len()));
    }
    Ok(DVector::from_iterator(
        q.len(),
        q.iter().zip(specs).map(|(&q, s)| s.friction_coefficient() * q * q.abs()),
    ))
}

#[derive(Debug, Clone)]
pub struct WaterNetwork {
    pub dae: UnifiedDae,
    pub split: FrictionSplit,
    pub incidence: Incidence,
    pub specs: Vec<WaterPipeSpec>,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl WaterNetwork {
    pub fn edges(&self) -> usize {
        self.specs.len()
    }

    /// `(A_G^q)ᵀ q - q_s` at every demand node.
    pub fn node_balance(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let ne = self.edges();
        let q = x.rows(0, ne);
        let q_s = u.rows(self.incidence.pressure_nodes.len(), self.incidence.demand_nodes.len());
        self.incidence.demand.transpose() * q - q_s
    }
}

struct WaterFriction {
    /// Per edge: friction coefficient, head (Pa), linearization slope.
    edges: Vec<(f64, f64, f64)>,
}

impl Nonlinearity for WaterFriction {
    fn eval(&self, x: &DVector<f64>, _u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        for (i, &(k, h, slope)) in self.edges.iter().enumerate() {
            let q = x[i];
            out[i] = h - k * q * q.abs() + slope * q;
        }
        Ok(())
    }
}

pub fn assemble_water(topo: &WaterTopology) -> Result<WaterNetwork> {
    assemble_water_with(topo, FrictionSplit::default())
}

pub fn assemble_water_with(topo: &WaterTopology, split: FrictionSplit) -> Result<WaterNetwork> {
    for e in &topo.edges {
        e.spec.validate()?;
    }
    let inc = build_incidence(topo)?;
    let ne = topo.edges.len();
    let (np, nd) = (inc.pressure_nodes.len(), inc.demand_nodes.len());
    if np == 0 {
        return Err(Error::Topology("water network has no pressure node".into()));
    }
    let n = ne + nd;
    let specs: Vec<WaterPipeSpec> = topo.edges.iter().map(|e| e.spec).collect();

    let mut e = DMatrix::zeros(n, n);
    for (i, s) in specs.iter().enumerate() {
        e[(i, i)] = s.length / s.area;
    }
    // pressure columns are in bar
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, ne), (ne, nd)).copy_from(&(-&inc.demand * BAR));
    a.view_mut((ne, 0), (nd, ne)).copy_from(&inc.demand.transpose());
    let mut b = DMatrix::zeros(n, np + nd);
    b.view_mut((0, 0), (ne, np)).copy_from(&(-&inc.pressure * BAR));
    b.view_mut((ne, np), (nd, nd)).copy_from(&(-DMatrix::identity(nd, nd)));

    // outputs: demand-node pressures (bar), net outflow of each pressure node
    let mut c = DMatrix::zeros(nd + np, n);
    c.view_mut((0, ne), (nd, nd)).fill_with_identity();
    c.view_mut((nd, 0), (np, ne)).copy_from(&(-inc.pressure.transpose()));

    let mut u0 = DVector::zeros(np + nd);
    let mut input_labels = Vec::with_capacity(np + nd);
    let mut output_labels = Vec::with_capacity(nd + np);
    for (k, &i) in inc.pressure_nodes.iter().enumerate() {
        if let WaterNodeKind::Pressure { pressure } = topo.nodes[i].kind {
            u0[k] = pressure;
        }
        input_labels.push(format!("p_supply[{}]", topo.nodes[i].name));
    }
    for (k, &i) in inc.demand_nodes.iter().enumerate() {
        if let WaterNodeKind::Demand { flow } = topo.nodes[i].kind {
            u0[np + k] = flow;
        }
        input_labels.push(format!("q_demand[{}]", topo.nodes[i].name));
        output_labels.push(format!("p[{}]", topo.nodes[i].name));
    }
    for &i in &inc.pressure_nodes {
        output_labels.push(format!("q[{}]", topo.nodes[i].name));
    }

    // consistent initial flows: minimum-norm solution of (A_G^q)ᵀ q = q_s
    let q_s = u0.rows(np, nd).into_owned();
    let q0 = if nd == 0 {
        DVector::zeros(ne)
    } else {
        let gram = inc.demand.transpose() * &inc.demand;
        let y = gram
            .lu()
            .solve(&q_s)
            .ok_or_else(|| Error::Topology("demand nodes not connected to any pressure node".into()))?;
        &inc.demand * y
    };
    let mean_supply = u0.rows(0, np).sum() / np as f64;
    let mut x0 = DVector::zeros(n);
    x0.rows_mut(0, ne).copy_from(&q0);
    x0.rows_mut(ne, nd).fill(mean_supply);

    let mut edges = Vec::with_capacity(ne);
    for (i, s) in specs.iter().enumerate() {
        let k = s.friction_coefficient();
        let slope = match split {
            FrictionSplit::Linearized => 2.0 * k * q0[i].abs(),
            FrictionSplit::Raw => 0.0,
        };
        a[(i, i)] -= slope;
        edges.push((k, s.head(), slope));
    }

    let dae = make_dae(e, a, b, c, Arc::new(WaterFriction { edges }))?;
    Ok(WaterNetwork {
        dae,
        split,
        incidence: inc,
        specs,
        x0,
        u0,
        input_labels,
        output_labels,
    })
}
