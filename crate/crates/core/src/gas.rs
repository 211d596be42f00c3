//! Isothermal gas pipelines: FVM/FDM discretization of a single pipe and
//! assembly of pipe networks with junction constraints.
//!
//! Single-pipe models are in SI units (Pa, kg/s). Assembled networks hold
//! pressure states in bar, with the continuity rows rescaled to match, so
//! that pressures and flows have comparable magnitudes.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dae::{make_dae, Nonlinearity, UnifiedDae};
use crate::error::{Error, Result};
use crate::linalg::DenseLu;

/// Pa per bar.
pub const BAR: f64 = 1e5;
pub const DEFAULT_SOUND_SPEED_SQ: f64 = 140_000.0;
pub const DEFAULT_FRICTION: f64 = 0.011;
/// Decay rate (1/s) of outlet-pressure mismatches at junctions.
pub const PRESSURE_CONSTRAINT_RATE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Fvm,
    Fdm,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Fvm => "fvm",
            Scheme::Fdm => "fdm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasPipelineSpec {
    pub length: f64,
    pub diameter: f64,
    pub area: f64,
    pub friction: f64,
    /// `c = γ₀` in m²/s².
    pub sound_speed_sq: f64,
    pub mesh: f64,
}

impl GasPipelineSpec {
    pub fn new(length: f64, diameter: f64, area: f64, friction: f64, sound_speed_sq: f64, mesh: f64) -> Result<Self> {
        let spec = Self {
            length,
            diameter,
            area,
            friction,
            sound_speed_sq,
            mesh,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The single 1 km pipe used throughout the examples.
    #[allow(clippy::approx_constant)]
    pub fn reference() -> Self {
        Self {
            length: 1000.0,
            diameter: 1.0,
            area: 0.7854,
            friction: DEFAULT_FRICTION,
            sound_speed_sq: DEFAULT_SOUND_SPEED_SQ,
            mesh: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("length", self.length),
            ("diameter", self.diameter),
            ("area", self.area),
            ("friction", self.friction),
            ("sound_speed_sq", self.sound_speed_sq),
            ("mesh", self.mesh),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.mesh > self.length {
            return Err(Error::InvalidSpec(format!(
                "mesh {} exceeds pipe length {}",
                self.mesh, self.length
            )));
        }
        let round = std::f64::consts::PI * self.diameter * self.diameter / 4.0;
        if (self.area - round).abs() > 0.01 * round {
            return Err(Error::InvalidSpec(format!(
                "area {} inconsistent with diameter {} (pi d^2/4 = {round})",
                self.area, self.diameter
            )));
        }
        Ok(())
    }

    /// Number of grid points `n = L / Δ`.
    pub fn grid_points(&self) -> Result<usize> {
        let ratio = self.length / self.mesh;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::MeshNotIntegral {
                length: self.length,
                mesh: self.mesh,
            });
        }
        Ok(n as usize)
    }
}

/// Discretized single pipe `M ẋ = K x + B_q q_d + B_p p_s + [0; g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub scheme: Scheme,
    /// Grid points; each field has `n - 1` unknowns.
    pub n: usize,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub m_p: DMatrix<f64>,
    pub m_q: DMatrix<f64>,
    pub k_pq: DMatrix<f64>,
    pub k_qp: DMatrix<f64>,
    pub b_p: DVector<f64>,
    pub b_q: DVector<f64>,
    /// Friction weights: `g_i = -kappa_i q_i|q_i| / p_i`.
    pub kappa: Vec<f64>,
}

impl PipelineModel {
    /// Unknowns per field, `n - 1`.
    pub fn cells(&self) -> usize {
        self.n - 1
    }

    pub fn state_dim(&self) -> usize {
        2 * self.cells()
    }

    pub fn mass(&self) -> DMatrix<f64> {
        let m = self.cells();
        let mut e = DMatrix::zeros(2 * m, 2 * m);
        e.view_mut((0, 0), (m, m)).copy_from(&self.m_p);
        e.view_mut((m, m), (m, m)).copy_from(&self.m_q);
        e
    }

    pub fn coupling(&self) -> DMatrix<f64> {
        let m = self.cells();
        let mut k = DMatrix::zeros(2 * m, 2 * m);
        k.view_mut((0, m), (m, m)).copy_from(&self.k_pq);
        k.view_mut((m, 0), (m, m)).copy_from(&self.k_qp);
        k
    }

    /// Row vector `e_lastᵀ M_p⁻¹`, mapping the pressure right-hand side to the outlet pressure rate.
    pub fn outlet_rate_row(&self) -> DVector<f64> {
        let m = self.cells();
        let mut e_last = DVector::zeros(m);
        e_last[m - 1] = 1.0;
        DenseLu::new(&self.m_p).solve_transpose_vec(&e_last)
    }
}

pub fn discretize_pipeline_fvm(spec: &GasPipelineSpec) -> Result<PipelineModel> {
    spec.validate()?;
    let n = spec.grid_points()?;
    if n < 3 {
        return Err(Error::MeshTooCoarse {
            cells: n.saturating_sub(1),
        });
    }
    let m = n - 1;
    let c = spec.sound_speed_sq;
    let h = vec![spec.mesh; m];
    let a = vec![spec.area; m];
    let d = vec![spec.diameter; m];
    let lam = vec![spec.friction; m];

    let mut m_p = DMatrix::zeros(m, m);
    for r in 0..m - 1 {
        m_p[(r, r)] = (h[r] + h[r + 1]) / 2.0;
    }
    m_p[(m - 1, m - 2)] = h[m - 1] / 8.0;
    m_p[(m - 1, m - 1)] = 3.0 * h[m - 1] / 8.0;

    let mut m_q = DMatrix::zeros(m, m);
    m_q[(0, 0)] = 3.0 * h[0] / 8.0;
    m_q[(0, 1)] = h[0] / 8.0;
    for r in 1..m {
        m_q[(r, r)] = (h[r - 1] + h[r]) / 2.0;
    }

    let mut k_pq = DMatrix::zeros(m, m);
    for r in 0..m {
        k_pq[(r, r)] = -c / 2.0 * (-1.0 / a[r]);
        if r + 1 < m {
            k_pq[(r, r + 1)] = -c / 2.0 * (1.0 / a[r] - 1.0 / a[r + 1]);
        }
        if r + 2 < m {
            k_pq[(r, r + 2)] = -c / 2.0 * (1.0 / a[r + 1]);
        }
    }

    let mut k_qp = DMatrix::zeros(m, m);
    for r in 0..m {
        k_qp[(r, r)] = -0.5 * a[r];
        if r >= 1 {
            k_qp[(r, r - 1)] = -0.5 * (a[r - 1] - a[r]);
        }
        if r >= 2 {
            k_qp[(r, r - 2)] = -0.5 * (-a[r - 1]);
        }
    }

    let mut b_p = DVector::zeros(m);
    b_p[0] = a[0] / 2.0;
    b_p[1] = a[0] / 2.0;
    let mut b_q = DVector::zeros(m);
    b_q[m - 2] = -c / (2.0 * a[m - 1]);
    b_q[m - 1] = -c / (2.0 * a[m - 1]);

    let w: Vec<f64> = (0..m).map(|i| h[i] * lam[i] / (a[i] * d[i])).collect();
    let kappa = (0..m)
        .map(|r| {
            let s = if r == 0 { w[0] } else { w[r - 1] + w[r] };
            c / 4.0 * s
        })
        .collect();

    Ok(PipelineModel {
        scheme: Scheme::Fvm,
        n,
        h,
        a,
        m_p,
        m_q,
        k_pq,
        k_qp,
        b_p,
        b_q,
        kappa,
    })
}

/// FDM variant: the two coupled mass rows are lumped onto the diagonal and
/// every row is scaled so the mass matrix becomes the identity.
pub fn discretize_pipeline_fdm(spec: &GasPipelineSpec) -> Result<PipelineModel> {
    let mut model = discretize_pipeline_fvm(spec)?;
    let m = model.cells();
    let lump = |mm: &DMatrix<f64>| -> Vec<f64> { (0..m).map(|r| mm.row(r).sum()).collect() };
    let dp = lump(&model.m_p);
    let dq = lump(&model.m_q);
    for r in 0..m {
        model.k_pq.row_mut(r).unscale_mut(dp[r]);
        model.b_q[r] /= dp[r];
        model.k_qp.row_mut(r).unscale_mut(dq[r]);
        model.b_p[r] /= dq[r];
        model.kappa[r] /= dq[r];
    }
    model.m_p = DMatrix::identity(m, m);
    model.m_q = DMatrix::identity(m, m);
    model.scheme = Scheme::Fdm;
    Ok(model)
}

pub fn discretize_pipeline(spec: &GasPipelineSpec, scheme: Scheme) -> Result<PipelineModel> {
    match scheme {
        Scheme::Fvm => discretize_pipeline_fvm(spec),
        Scheme::Fdm => discretize_pipeline_fdm(spec),
    }
}

/// Friction vector of one pipe. `p_s` and `p` share one pressure unit.
pub fn friction_vector(model: &PipelineModel, p_s: f64, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let m = model.cells();
    if p.len() != m {
        return Err(Error::dims("pressure vector", m, p.len()));
    }
    if q.len() != m {
        return Err(Error::dims("flow vector", m, q.len()));
    }
    if !(p_s > 0.0) {
        return Err(Error::NonphysicalPressure { index: 0, value: p_s });
    }
    let mut out = DVector::zeros(m);
    for r in 0..m {
        let pr = if r == 0 { p_s } else { p[r - 1] };
        if !(pr > 0.0) {
            return Err(Error::NonphysicalPressure { index: r - 1, value: pr });
        }
        out[r] = -model.kappa[r] * q[r] * q[r].abs() / pr;
    }
    // Entries beyond the ones read above must be physical too.
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonphysicalPressure { index: i, value: *v });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GasNodeKind {
    /// Supply pressure in bar.
    Supply { pressure: f64 },
    /// Withdrawn mass flow in kg/s.
    Demand { flow: f64 },
    Junction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasNode {
    pub name: String,
    pub kind: GasNodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasEdge {
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub spec: GasPipelineSpec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GasTopology {
    pub nodes: Vec<GasNode>,
    pub edges: Vec<GasEdge>,
}

impl GasTopology {
    pub fn single_pipe(spec: GasPipelineSpec, supply_bar: f64, demand: f64) -> Self {
        Self {
            nodes: vec![
                GasNode {
                    name: "supply".into(),
                    kind: GasNodeKind::Supply { pressure: supply_bar },
                },
                GasNode {
                    name: "demand".into(),
                    kind: GasNodeKind::Demand { flow: demand },
                },
            ],
            edges: vec![GasEdge {
                name: "pipe".into(),
                from: 0,
                to: 1,
                spec,
            }],
        }
    }

    /// Two supplies feeding one junction, one pipe on to a demand node.
    pub fn fork(spec: GasPipelineSpec, supply_bar: f64, demand: f64) -> Self {
        let node = |name: &str, kind| GasNode {
            name: name.into(),
            kind,
        };
        let edge = |name: &str, from, to| GasEdge {
            name: name.into(),
            from,
            to,
            spec,
        };
        Self {
            nodes: vec![
                node("s1", GasNodeKind::Supply { pressure: supply_bar }),
                node("s2", GasNodeKind::Supply { pressure: supply_bar }),
                node("j", GasNodeKind::Junction),
                node("d", GasNodeKind::Demand { flow: demand }),
            ],
            edges: vec![edge("p1", 0, 2), edge("p2", 1, 2), edge("p3", 2, 3)],
        }
    }
}

/// How the friction term is split between `A` and `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrictionSplit {
    /// `A` carries the friction Jacobian at the nominal operating point and
    /// `G = g - J x`.
    #[default]
    Linearized,
    /// `A` holds only the coupling blocks and `G = g`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PressureSource {
    /// Supply input index (bar).
    Input(usize),
    /// Global state index (bar).
    State(usize),
}

#[derive(Debug, Clone)]
pub struct PipeBlock {
    pub edge: usize,
    pub offset: usize,
    pub model: PipelineModel,
    source: PressureSource,
}

impl PipeBlock {
    pub fn cells(&self) -> usize {
        self.model.cells()
    }
    /// Global index of the outlet pressure `p_n`.
    pub fn outlet_pressure_index(&self) -> usize {
        self.offset + self.cells() - 1
    }
    /// Global index of the inlet flow `q_1`.
    pub fn inlet_flow_index(&self) -> usize {
        self.offset + self.cells()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JunctionBlock {
    pub node: usize,
    /// Pipe indices (into `GasNetwork::pipes`) entering the junction.
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
    /// Global state index of each incoming pipe's outlet flow variable.
    pub inflow_vars: Vec<usize>,
    /// Row index of the flow-balance constraint.
    pub balance_row: usize,
}

#[derive(Debug, Clone)]
pub struct GasNetwork {
    pub dae: UnifiedDae,
    pub scheme: Scheme,
    pub split: FrictionSplit,
    pub pipes: Vec<PipeBlock>,
    pub junctions: Vec<JunctionBlock>,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl GasNetwork {
    /// `Σ q_in - Σ q_1(out)` for every junction.
    pub fn junction_balance(&self, x: &DVector<f64>) -> Vec<f64> {
        self.junctions
            .iter()
            .map(|j| {
                let inflow: f64 = j.inflow_vars.iter().map(|&i| x[i]).sum();
                let outflow: f64 = j.outgoing.iter().map(|&p| x[self.pipes[p].inlet_flow_index()]).sum();
                inflow - outflow
            })
            .collect()
    }

    /// Pressures of one pipe in bar, `[p_2 … p_n]`.
    pub fn pipe_pressures_bar(&self, x: &DVector<f64>, pipe: usize) -> DVector<f64> {
        let b = &self.pipes[pipe];
        x.rows(b.offset, b.cells()).into_owned()
    }

    pub fn pipe_flows(&self, x: &DVector<f64>, pipe: usize) -> DVector<f64> {
        let b = &self.pipes[pipe];
        x.rows(b.offset + b.cells(), b.cells()).into_owned()
    }
}

struct GasFriction {
    pipes: Vec<(usize, Vec<f64>, usize, PressureSource)>,
    /// Sparse `J` as (row, col, value) when the split is linearized.
    jacobian: Vec<(usize, usize, f64)>,
}

impl GasFriction {
    fn inlet_pressure(source: PressureSource, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match source {
            PressureSource::Input(k) => u[k] * BAR,
            PressureSource::State(i) => x[i] * BAR,
        }
    }
}

impl Nonlinearity for GasFriction {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        for (offset, kappa, m, source) in &self.pipes {
            let (offset, m) = (*offset, *m);
            let p_s = Self::inlet_pressure(*source, x, u);
            for r in 0..m {
                let (pr, idx) = if r == 0 {
                    let idx = match source {
                        PressureSource::State(i) => *i,
                        PressureSource::Input(_) => offset,
                    };
                    (p_s, idx)
                } else {
                    (x[offset + r - 1] * BAR, offset + r - 1)
                };
                if !(pr > 0.0) {
                    return Err(Error::NonphysicalPressure { index: idx, value: pr });
                }
                let q = x[offset + m + r];
                out[offset + m + r] = -kappa[r] * q * q.abs() / pr;
            }
        }
        for &(i, j, v) in &self.jacobian {
            out[i] -= v * x[j];
        }
        Ok(())
    }
}

fn topology_error(msg: impl Into<String>) -> Error {
    Error::Topology(msg.into())
}

/// Incoming and outgoing pipe indices per node.
type NodePipes = (Vec<Vec<usize>>, Vec<Vec<usize>>);

/// Validates the topology and returns pipe edges in topological order of their tail node.
fn check_topology(topo: &GasTopology) -> Result<NodePipes> {
    let nn = topo.nodes.len();
    if topo.edges.is_empty() {
        return Err(topology_error("network has no pipes"));
    }
    let mut inc = vec![Vec::new(); nn];
    let mut out = vec![Vec::new(); nn];
    for (k, e) in topo.edges.iter().enumerate() {
        if e.from >= nn || e.to >= nn {
            return Err(topology_error(format!("pipe '{}' references an undeclared node", e.name)));
        }
        if e.from == e.to {
            return Err(topology_error(format!("pipe '{}' is a self-loop", e.name)));
        }
        e.spec
            .validate()
            .map_err(|err| topology_error(format!("pipe '{}': {err}", e.name)))?;
        out[e.from].push(k);
        inc[e.to].push(k);
    }
    for (i, node) in topo.nodes.iter().enumerate() {
        let (ni, no) = (inc[i].len(), out[i].len());
        let name = &node.name;
        match node.kind {
            GasNodeKind::Supply { pressure } => {
                if !(pressure > 0.0) {
                    return Err(topology_error(format!("supply node '{name}' needs a positive pressure")));
                }
                if ni != 0 || no != 1 {
                    return Err(topology_error(format!(
                        "supply node '{name}' must have exactly one outgoing pipe and no incoming pipe"
                    )));
                }
            }
            GasNodeKind::Demand { flow } => {
                if !flow.is_finite() {
                    return Err(topology_error(format!("demand node '{name}' has a non-finite flow")));
                }
                if ni != 1 || no != 0 {
                    return Err(topology_error(format!(
                        "demand node '{name}' must have exactly one incoming pipe and no outgoing pipe"
                    )));
                }
            }
            GasNodeKind::Junction => {
                if ni + no == 2 {
                    return Err(topology_error(format!(
                        "interior node '{name}' joins exactly two pipes; contract it into a single pipe"
                    )));
                }
                if ni + no < 3 {
                    return Err(topology_error(format!("junction '{name}' must touch at least three pipes")));
                }
                if no == 0 {
                    return Err(topology_error(format!("junction '{name}' has no outgoing pipe")));
                }
                if ni == 0 {
                    return Err(topology_error(format!("junction '{name}' has no incoming pipe")));
                }
            }
        }
    }

    // connectivity, ignoring direction
    let mut seen = vec![false; nn];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &k in inc[v].iter().chain(out[v].iter()) {
            let e = &topo.edges[k];
            for w in [e.from, e.to] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(topology_error(format!(
            "network is disconnected (node '{}' unreachable)",
            topo.nodes[i].name
        )));
    }

    // acyclicity
    let mut indeg: Vec<usize> = inc.iter().map(Vec::len).collect();
    let mut ready: VecDeque<usize> = (0..nn).filter(|&i| indeg[i] == 0).collect();
    let mut visited = 0;
    while let Some(v) = ready.pop_front() {
        visited += 1;
        for &k in &out[v] {
            let w = topo.edges[k].to;
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push_back(w);
            }
        }
    }
    if visited != nn {
        return Err(topology_error("network contains a directed cycle"));
    }
    Ok((inc, out))
}

pub fn assemble_gas_network(topo: &GasTopology, scheme: Scheme) -> Result<GasNetwork> {
    assemble_gas_network_with(topo, scheme, FrictionSplit::Linearized)
}

pub fn assemble_gas_network_with(topo: &GasTopology, scheme: Scheme, split: FrictionSplit) -> Result<GasNetwork> {
    let (inc, out) = check_topology(topo)?;

    let supplies: Vec<usize> = (0..topo.nodes.len())
        .filter(|&i| matches!(topo.nodes[i].kind, GasNodeKind::Supply { .. }))
        .collect();
    let demands: Vec<usize> = (0..topo.nodes.len())
        .filter(|&i| matches!(topo.nodes[i].kind, GasNodeKind::Demand { .. }))
        .collect();
    let junction_nodes: Vec<usize> = (0..topo.nodes.len())
        .filter(|&i| matches!(topo.nodes[i].kind, GasNodeKind::Junction))
        .collect();
    if demands.is_empty() {
        return Err(topology_error("network has no demand node"));
    }

    // pipe blocks, one per edge in declaration order
    let mut pipes = Vec::with_capacity(topo.edges.len());
    let mut offset = 0;
    for (k, e) in topo.edges.iter().enumerate() {
        let model = discretize_pipeline(&e.spec, scheme)?;
        let dim = model.state_dim();
        pipes.push(PipeBlock {
            edge: k,
            offset,
            model,
            source: PressureSource::Input(0),
        });
        offset += dim;
    }
    let pipe_states = offset;

    // junction variables follow the pipe states
    let mut junctions = Vec::new();
    let mut next_var = pipe_states;
    for &j in &junction_nodes {
        let incoming = inc[j].clone();
        let inflow_vars: Vec<usize> = (0..incoming.len()).map(|i| next_var + i).collect();
        junctions.push(JunctionBlock {
            node: j,
            balance_row: next_var,
            incoming,
            outgoing: out[j].clone(),
            inflow_vars,
        });
        next_var += inc[j].len();
    }
    let n = next_var;
    let n_in = supplies.len() + demands.len();
    let n_out = demands.len() + supplies.len();

    // inlet pressure source of every pipe
    for (si, &s) in supplies.iter().enumerate() {
        pipes[out[s][0]].source = PressureSource::Input(si);
    }
    for jb in &junctions {
        let upstream = pipes[jb.incoming[0]].outlet_pressure_index();
        for &o in &jb.outgoing {
            pipes[o].source = PressureSource::State(upstream);
        }
    }

    let mut e = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n_in);
    let mut c = DMatrix::zeros(n_out, n);

    for pb in &pipes {
        let (o, m) = (pb.offset, pb.cells());
        e.view_mut((o, o), (2 * m, 2 * m)).copy_from(&pb.model.mass());
        a.view_mut((o, o), (2 * m, 2 * m)).copy_from(&pb.model.coupling());
        match pb.source {
            PressureSource::Input(k) => {
                for r in 0..m {
                    b[(o + m + r, k)] += pb.model.b_p[r] * BAR;
                }
            }
            PressureSource::State(idx) => {
                for r in 0..m {
                    a[(o + m + r, idx)] += pb.model.b_p[r];
                }
            }
        }
    }

    for (di, &d) in demands.iter().enumerate() {
        let pb = &pipes[inc[d][0]];
        for r in 0..pb.cells() {
            b[(pb.offset + r, supplies.len() + di)] += pb.model.b_q[r];
        }
        c[(di, pb.outlet_pressure_index())] = 1.0 / BAR;
    }
    for (si, &s) in supplies.iter().enumerate() {
        c[(demands.len() + si, pipes[out[s][0]].inlet_flow_index())] = 1.0;
    }

    for jb in &junctions {
        for (&p, &var) in jb.incoming.iter().zip(&jb.inflow_vars) {
            let pb = &pipes[p];
            for r in 0..pb.cells() {
                a[(pb.offset + r, var)] += pb.model.b_q[r];
            }
        }
        // flow balance
        let row = jb.balance_row;
        for &var in &jb.inflow_vars {
            a[(row, var)] = 1.0;
        }
        for &o in &jb.outgoing {
            a[(row, pipes[o].inlet_flow_index())] = -1.0;
        }
        // equal outlet pressures of all incoming pipes, imposed on the rates
        // with a restoring term so the difference decays instead of drifting
        for k in 1..jb.incoming.len() {
            let row = jb.balance_row + k;
            for (sign, p, var) in [
                (1.0, jb.incoming[0], jb.inflow_vars[0]),
                (-1.0, jb.incoming[k], jb.inflow_vars[k]),
            ] {
                let pb = &pipes[p];
                let ell = pb.model.outlet_rate_row();
                let m = pb.cells();
                let kq = ell.transpose() * &pb.model.k_pq;
                for col in 0..m {
                    a[(row, pb.offset + m + col)] += sign * kq[col];
                }
                a[(row, var)] += sign * ell.dot(&pb.model.b_q);
                a[(row, pb.outlet_pressure_index())] += sign * PRESSURE_CONSTRAINT_RATE;
            }
        }
    }

    // operating point: uniform pressure, flows routed from the demands upstream
    let mean_supply = supplies
        .iter()
        .map(|&s| match topo.nodes[s].kind {
            GasNodeKind::Supply { pressure } => pressure,
            _ => unreachable!(),
        })
        .sum::<f64>()
        / supplies.len() as f64;
    let mut pipe_flow = vec![f64::NAN; pipes.len()];
    // edges in reverse topological order of their head node
    let order = reverse_topological_edges(topo, &inc, &out);
    for k in order {
        let head = topo.edges[k].to;
        pipe_flow[k] = match topo.nodes[head].kind {
            GasNodeKind::Demand { flow } => flow,
            GasNodeKind::Junction => {
                let total: f64 = out[head].iter().map(|&o| pipe_flow[o]).sum();
                total / inc[head].len() as f64
            }
            GasNodeKind::Supply { .. } => unreachable!(),
        };
    }

    let mut x0 = DVector::zeros(n);
    for (k, pb) in pipes.iter().enumerate() {
        let m = pb.cells();
        x0.rows_mut(pb.offset, m).fill(mean_supply * BAR);
        x0.rows_mut(pb.offset + m, m).fill(pipe_flow[k]);
    }
    for jb in &junctions {
        for (&p, &var) in jb.incoming.iter().zip(&jb.inflow_vars) {
            x0[var] = pipe_flow[p];
        }
    }

    let mut u0 = DVector::zeros(n_in);
    let mut input_labels = Vec::with_capacity(n_in);
    let mut output_labels = Vec::with_capacity(n_out);
    for (si, &s) in supplies.iter().enumerate() {
        if let GasNodeKind::Supply { pressure } = topo.nodes[s].kind {
            u0[si] = pressure;
        }
        input_labels.push(format!("p_supply[{}]", topo.nodes[s].name));
    }
    for (di, &d) in demands.iter().enumerate() {
        if let GasNodeKind::Demand { flow } = topo.nodes[d].kind {
            u0[supplies.len() + di] = flow;
        }
        input_labels.push(format!("q_demand[{}]", topo.nodes[d].name));
        output_labels.push(format!("p[{}]", topo.nodes[d].name));
    }
    for &s in &supplies {
        output_labels.push(format!("q[{}]", topo.nodes[s].name));
    }

    let mut jacobian = Vec::new();
    if split == FrictionSplit::Linearized {
        for pb in &pipes {
            let (o, m) = (pb.offset, pb.cells());
            for r in 0..m {
                let q = x0[o + m + r];
                let kappa = pb.model.kappa[r];
                let (pr, p_col) = if r == 0 {
                    let col = match pb.source {
                        PressureSource::State(i) => Some(i),
                        PressureSource::Input(_) => None,
                    };
                    (mean_supply * BAR, col)
                } else {
                    (x0[o + r - 1], Some(o + r - 1))
                };
                let row = o + m + r;
                let dq = -2.0 * kappa * q.abs() / pr;
                if dq != 0.0 {
                    jacobian.push((row, row, dq));
                }
                if let Some(col) = p_col {
                    let dp = kappa * q * q.abs() / (pr * pr);
                    if dp != 0.0 {
                        jacobian.push((row, col, dp));
                    }
                }
            }
        }
        for &(i, j, v) in &jacobian {
            a[(i, j)] += v;
        }
    }

    // pressure states are held in bar: scale pressure columns by BAR and the
    // rows whose residual is a pressure rate by 1/BAR
    let mut col_scale = DVector::from_element(n, 1.0);
    let mut row_scale = DVector::from_element(n, 1.0);
    for pb in &pipes {
        col_scale.rows_mut(pb.offset, pb.cells()).fill(BAR);
        row_scale.rows_mut(pb.offset, pb.cells()).fill(1.0 / BAR);
    }
    for jb in &junctions {
        for k in 1..jb.incoming.len() {
            row_scale[jb.balance_row + k] = 1.0 / BAR;
        }
    }
    for i in 0..n {
        for j in 0..n {
            let s = row_scale[i] * col_scale[j];
            e[(i, j)] *= s;
            a[(i, j)] *= s;
        }
        for k in 0..n_in {
            b[(i, k)] *= row_scale[i];
        }
    }
    for k in 0..n_out {
        for j in 0..n {
            c[(k, j)] *= col_scale[j];
        }
    }
    for (i, j, v) in jacobian.iter_mut() {
        *v *= row_scale[*i] * col_scale[*j];
    }
    for i in 0..n {
        x0[i] /= col_scale[i];
    }

    let friction = GasFriction {
        pipes: pipes
            .iter()
            .map(|pb| (pb.offset, pb.model.kappa.clone(), pb.cells(), pb.source))
            .collect(),
        jacobian,
    };
    let dae = make_dae(e, a, b, c, Arc::new(friction))?;

    Ok(GasNetwork {
        dae,
        scheme,
        split,
        pipes,
        junctions,
        x0,
        u0,
        input_labels,
        output_labels,
    })
}

fn reverse_topological_edges(topo: &GasTopology, inc: &[Vec<usize>], out: &[Vec<usize>]) -> Vec<usize> {
    // Kahn on the reversed graph, emitting incoming edges of each finished node.
    let nn = topo.nodes.len();
    let mut outdeg: Vec<usize> = out.iter().map(Vec::len).collect();
    let mut ready: VecDeque<usize> = (0..nn).filter(|&i| outdeg[i] == 0).collect();
    let mut order = Vec::with_capacity(topo.edges.len());
    while let Some(v) = ready.pop_front() {
        for &k in &inc[v] {
            order.push(k);
            let w = topo.edges[k].from;
            outdeg[w] -= 1;
            if outdeg[w] == 0 {
                ready.push_back(w);
            }
        }
    }
    order
}
