//! Transmission lines discretized with finite differences on the
//! telegrapher's equations, coupled to algebraic power-flow constraints.
//!
//! Per line the state is `[I_1..I_N, V_1..V_N]`. The sending end is driven by
//! an injected current, the receiving end is grounded. Every bus adds one
//! angle `θ_i` and one algebraic power-balance row.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dae::{make_dae, Nonlinearity, UnifiedDae};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSpec {
    /// Series resistance per unit length.
    pub r: f64,
    /// Series inductance per unit length.
    pub l: f64,
    /// Shunt capacitance per unit length.
    pub c: f64,
    /// Shunt conductance per unit length.
    pub g: f64,
    pub length: f64,
    pub segments: usize,
}

impl LineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::InvalidSpec("line needs at least one segment".into()));
        }
        if !(self.l > 0.0 && self.c > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "line inductance and capacitance must be positive (L = {}, C = {})",
                self.l, self.c
            )));
        }
        if !(self.r >= 0.0 && self.g >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "line resistance and conductance must be non-negative (R = {}, G = {})",
                self.r, self.g
            )));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidSpec(format!("line length must be positive, got {}", self.length)));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.segments as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineModel {
    pub dx: f64,
    pub l: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// `(1/Δx)` times the square upper bidiagonal `(-1, +1)` stencil.
    pub d_x: DMatrix<f64>,
}

impl LineModel {
    pub fn segments(&self) -> usize {
        self.d_x.nrows()
    }

    /// `diag(L, C)`.
    pub fn mass(&self) -> DMatrix<f64> {
        let n = self.segments();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.l);
        m.view_mut((n, n), (n, n)).copy_from(&self.c);
        m
    }

    /// `[[-R, -D_x], [D_xᵀ, -G]]`.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.segments();
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, 0), (n, n)).copy_from(&(-&self.r));
        a.view_mut((0, n), (n, n)).copy_from(&(-&self.d_x));
        a.view_mut((n, 0), (n, n)).copy_from(&self.d_x.transpose());
        a.view_mut((n, n), (n, n)).copy_from(&(-&self.g));
        a
    }
}

pub fn discretize_line_fdm(spec: &LineSpec) -> Result<LineModel> {
    spec.validate()?;
    let n = spec.segments;
    let dx = spec.dx();
    let mut d_x = DMatrix::zeros(n, n);
    for i in 0..n {
        d_x[(i, i)] = -1.0 / dx;
        if i + 1 < n {
            d_x[(i, i + 1)] = 1.0 / dx;
        }
    }
    let diag = |v: f64| DMatrix::from_diagonal_element(n, n, v);
    Ok(LineModel {
        dx,
        l: diag(spec.l),
        c: diag(spec.c),
        r: diag(spec.r),
        g: diag(spec.g),
        d_x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusKind {
    Generator {
        /// Internal voltage `E'`.
        e_prime: f64,
        /// Transient reactance `X'`.
        x_prime: f64,
        /// Rotor angle `α`.
        alpha: f64,
    },
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub name: String,
    pub kind: BusKind,
    /// Nominal bus power `p` (input).
    pub power: f64,
    /// Line index and segment whose voltage state gives `|V_i|`.
    pub line: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSystem {
    pub buses: Vec<Bus>,
    /// Conductance part of the bus admittance matrix.
    pub g: DMatrix<f64>,
    /// Susceptance part of the bus admittance matrix.
    pub b: DMatrix<f64>,
}

impl BusSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        if n == 0 {
            return Err(Error::InvalidSpec("bus system is empty".into()));
        }
        for (name, m) in [("G", &self.g), ("B", &self.b)] {
            if m.shape() != (n, n) {
                return Err(Error::dims("bus admittance", format!("{n}x{n}"), format!("{:?}", m.shape())));
            }
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::InvalidSpec(format!("admittance matrix {name} is not symmetric")));
            }
        }
        for bus in &self.buses {
            if let BusKind::Generator { x_prime, .. } = bus.kind {
                if x_prime == 0.0 {
                    return Err(Error::InvalidSpec(format!("generator {} has X' = 0", bus.name)));
                }
            }
        }
        Ok(())
    }
}

/// `P_i = Σ_j |V_i||V_j| [G_ij cos(θ_i-θ_j) + B_ij sin(θ_i-θ_j)]`.
pub fn power_flow_residual(sys: &BusSystem, v: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
    let n = sys.buses.len();
    if v.len() != n || theta.len() != n {
        return Err(Error::dims("power flow", n, if v.len() != n { v.len() } else { theta.len() }));
    }
    Ok(DVector::from_fn(n, |i, _| {
        (0..n)
            .map(|j| {
                let d = theta[i] - theta[j];
                v[i].abs() * v[j].abs() * (sys.g[(i, j)] * d.cos() + sys.b[(i, j)] * d.sin())
            })
            .sum()
    }))
}

/// `p_gen = E' |V| / X' · sin(α - θ)`.
pub fn generator_power(e_prime: f64, v: f64, x_prime: f64, alpha: f64, theta: f64) -> Result<f64> {
    if x_prime == 0.0 {
        return Err(Error::InvalidSpec("generator reactance X' must be nonzero".into()));
    }
    Ok(e_prime * v.abs() / x_prime * (alpha - theta).sin())
}

#[derive(Debug, Clone)]
pub struct PowerNetwork {
    pub dae: UnifiedDae,
    pub lines: Vec<LineModel>,
    pub buses: BusSystem,
    /// State offset of each line block.
    pub line_offsets: Vec<usize>,
    /// State index of each bus angle.
    pub theta_offset: usize,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl PowerNetwork {
    /// Global state index of the voltage a bus reads.
    pub fn bus_voltage_index(&self, bus: usize) -> usize {
        let b = &self.buses.buses[bus];
        self.line_offsets[b.line] + self.lines[b.line].segments() + b.segment
    }

    /// `p_i - (P_i - p_gen,i)` at every bus.
    pub fn constraint_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let nb = self.buses.buses.len();
        let v: Vec<f64> = (0..nb).map(|i| x[self.bus_voltage_index(i)]).collect();
        let theta: Vec<f64> = (0..nb).map(|i| x[self.theta_offset + i]).collect();
        let p_flow = power_flow_residual(&self.buses, &v, &theta)?;
        let mut out = DVector::zeros(nb);
        for (i, bus) in self.buses.buses.iter().enumerate() {
            let gen = match bus.kind {
                BusKind::Generator {
                    e_prime,
                    x_prime,
                    alpha,
                } => generator_power(e_prime, v[i], x_prime, alpha, theta[i])?,
                BusKind::Load => 0.0,
            };
            out[i] = u[self.lines.len() + i] - (p_flow[i] - gen);
        }
        Ok(out)
    }
}

struct PowerFlow {
    buses: BusSystem,
    voltage_index: Vec<usize>,
    theta_offset: usize,
    /// Linearized θ-block that `A` already carries.
    jacobian: DMatrix<f64>,
}

impl Nonlinearity for PowerFlow {
    fn eval(&self, x: &DVector<f64>, _u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        let nb = self.buses.buses.len();
        let v: Vec<f64> = self.voltage_index.iter().map(|&i| x[i]).collect();
        let theta = x.rows(self.theta_offset, nb).into_owned();
        let p_flow = power_flow_residual(&self.buses, &v, theta.as_slice())?;
        let lin = &self.jacobian * &theta;
        for (i, bus) in self.buses.buses.iter().enumerate() {
            let gen = match bus.kind {
                BusKind::Generator {
                    e_prime,
                    x_prime,
                    alpha,
                } => generator_power(e_prime, v[i], x_prime, alpha, theta[i])?,
                BusKind::Load => 0.0,
            };
            out[self.theta_offset + i] = gen - p_flow[i] - lin[i];
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        false
    }
}

/// `∂/∂θ (p_gen - P)` at `θ = 0` for the given voltage magnitudes.
fn theta_jacobian(sys: &BusSystem, v: &[f64]) -> DMatrix<f64> {
    let n = sys.buses.len();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            if k != i {
                let vv = v[i].abs() * v[k].abs();
                j[(i, i)] -= vv * sys.b[(i, k)];
                j[(i, k)] += vv * sys.b[(i, k)];
            }
        }
        if let BusKind::Generator {
            e_prime,
            x_prime,
            alpha,
        } = sys.buses[i].kind
        {
            j[(i, i)] -= e_prime * v[i].abs() / x_prime * alpha.cos();
        }
    }
    j
}

/// Lines and buses into one DAE.
///
/// Inputs are `u = [I_0 per line; p per bus]`, outputs `y = [V per bus; θ per
/// bus]`. With no buses the model is the pure line ODE with outputs `V_1` of
/// every line.
pub fn assemble_power(lines: &[LineSpec], nominal_current: &[f64], buses: Option<&BusSystem>) -> Result<PowerNetwork> {
    if lines.is_empty() {
        return Err(Error::InvalidSpec("power network needs at least one line".into()));
    }
    if nominal_current.len() != lines.len() {
        return Err(Error::dims("line currents", lines.len(), nominal_current.len()));
    }
    let models = lines.iter().map(discretize_line_fdm).collect::<Result<Vec<_>>>()?;
    let empty = BusSystem {
        buses: Vec::new(),
        g: DMatrix::zeros(0, 0),
        b: DMatrix::zeros(0, 0),
    };
    let sys = match buses {
        Some(s) => {
            s.validate()?;
            s.clone()
        }
        None => empty,
    };
    let nb = sys.buses.len();
    let mut line_offsets = Vec::with_capacity(models.len());
    let mut offset = 0;
    for m in &models {
        line_offsets.push(offset);
        offset += 2 * m.segments();
    }
    let theta_offset = offset;
    let n = offset + nb;
    let n_in = lines.len() + nb;

    let mut voltage_index = Vec::with_capacity(nb);
    for bus in &sys.buses {
        let line = models
            .get(bus.line)
            .ok_or_else(|| Error::InvalidSpec(format!("bus {} attaches to unknown line {}", bus.name, bus.line)))?;
        if bus.segment >= line.segments() {
            return Err(Error::InvalidSpec(format!(
                "bus {} attaches to segment {} of a {}-segment line",
                bus.name,
                bus.segment,
                line.segments()
            )));
        }
        voltage_index.push(line_offsets[bus.line] + line.segments() + bus.segment);
    }

    let mut e = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n_in);
    for (k, m) in models.iter().enumerate() {
        let (o, s) = (line_offsets[k], m.segments());
        e.view_mut((o, o), (2 * s, 2 * s)).copy_from(&m.mass());
        a.view_mut((o, o), (2 * s, 2 * s)).copy_from(&m.state_matrix());
        b[(o + s, k)] = 1.0 / m.dx;
    }
    for i in 0..nb {
        b[(theta_offset + i, lines.len() + i)] = 1.0;
    }

    let mut u0 = DVector::zeros(n_in);
    u0.rows_mut(0, lines.len()).copy_from_slice(nominal_current);
    for (i, bus) in sys.buses.iter().enumerate() {
        u0[lines.len() + i] = bus.power;
    }

    // line steady state under the nominal currents
    let line_rows = theta_offset;
    let a_line = a.view((0, 0), (line_rows, line_rows)).into_owned();
    let rhs = -(b.view((0, 0), (line_rows, n_in)) * &u0);
    let x_line = a_line
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidSpec("line steady-state system is singular".into()))?;
    let v_nom: Vec<f64> = voltage_index.iter().map(|&i| x_line[i]).collect();
    let jac = theta_jacobian(&sys, &v_nom);
    if nb > 0 {
        a.view_mut((theta_offset, theta_offset), (nb, nb)).copy_from(&jac);
    }

    let mut c = DMatrix::zeros(if nb == 0 { lines.len() } else { 2 * nb }, n);
    let mut output_labels = Vec::new();
    if nb == 0 {
        for (k, m) in models.iter().enumerate() {
            c[(k, line_offsets[k] + m.segments())] = 1.0;
            output_labels.push(format!("V[line{k}]"));
        }
    } else {
        for (i, &vi) in voltage_index.iter().enumerate() {
            c[(i, vi)] = 1.0;
            c[(nb + i, theta_offset + i)] = 1.0;
        }
        output_labels.extend(sys.buses.iter().map(|bus| format!("V[{}]", bus.name)));
        output_labels.extend(sys.buses.iter().map(|bus| format!("theta[{}]", bus.name)));
    }
    let mut input_labels: Vec<String> = (0..lines.len()).map(|k| format!("I0[line{k}]")).collect();
    input_labels.extend(sys.buses.iter().map(|bus| format!("p[{}]", bus.name)));

    let mut x0 = DVector::zeros(n);
    x0.rows_mut(0, line_rows).copy_from(&x_line);
    let g: Arc<dyn Nonlinearity> = if nb == 0 {
        crate::dae::zero_nonlinearity()
    } else {
        Arc::new(PowerFlow {
            buses: sys.clone(),
            voltage_index,
            theta_offset,
            jacobian: jac,
        })
    };
    let dae = make_dae(e, a, b, c, g)?;
    let mut net = PowerNetwork {
        dae,
        lines: models,
        buses: sys,
        line_offsets,
        theta_offset,
        x0,
        u0,
        input_labels,
        output_labels,
    };
    if nb > 0 {
        net.x0 = consistent_angles(&net)?;
    }
    Ok(net)
}

/// Newton iterations on the angle rows with the line state held fixed.
fn consistent_angles(net: &PowerNetwork) -> Result<DVector<f64>> {
    let nb = net.buses.buses.len();
    let mut x = net.x0.clone();
    let jac = net
        .dae
        .a()
        .view((net.theta_offset, net.theta_offset), (nb, nb))
        .into_owned();
    let lu = jac.lu();
    for _ in 0..50 {
        let r = net.constraint_residual(&x, &net.u0)?;
        if r.amax() <= 1e-13 {
            break;
        }
        let step = lu
            .solve(&r)
            .ok_or_else(|| Error::InvalidSpec("power-flow angle Jacobian is singular".into()))?;
        let mut theta = x.rows_mut(net.theta_offset, nb);
        theta -= step;
    }
    Ok(x)
}

/// Two lines and three buses: a generator at the sending end of line 0 and
/// loads at the far ends of both lines.
pub fn desk_fixture() -> (Vec<LineSpec>, Vec<f64>, BusSystem) {
    let line = LineSpec {
        r: 0.1,
        l: 1.0,
        c: 1.0,
        g: 0.05,
        length: 1.0,
        segments: 3,
    };
    let lines = vec![line, LineSpec { segments: 4, ..line }];
    let b = DMatrix::from_row_slice(3, 3, &[-10.0, 5.0, 5.0, 5.0, -9.0, 4.0, 5.0, 4.0, -9.0]);
    let g = DMatrix::from_row_slice(3, 3, &[0.3, -0.1, -0.2, -0.1, 0.25, -0.15, -0.2, -0.15, 0.35]);
    let buses = vec![
        Bus {
            name: "gen".into(),
            kind: BusKind::Generator {
                e_prime: 1.1,
                x_prime: 0.3,
                alpha: 0.2,
            },
            power: 0.0,
            line: 0,
            segment: 0,
        },
        Bus {
            name: "load1".into(),
            kind: BusKind::Load,
            power: -0.05,
            line: 0,
            segment: 1,
        },
        Bus {
            name: "load2".into(),
            kind: BusKind::Load,
            power: -0.04,
            line: 1,
            segment: 1,
        },
    ];
    (lines, vec![10.0, 8.0], BusSystem { buses, g, b })
}
