//! Line-oriented experiment configuration.
//!
//! Every non-blank line is `section.key = value`; `#` starts a comment.
//! Tables use dotted sections, e.g. `node.supply.pressure = 50`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use netmor_core::gas::{GasPipelineSpec, Scheme};
use netmor_core::integrator::StepperConfig;
use netmor_core::mor::{Feedthrough, TirkaConfig};
use netmor_core::power::LineSpec;
use netmor_core::water::WaterPipeSpec;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Gas,
    Water,
    Power,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Gas => "gas",
            Domain::Water => "water",
            Domain::Power => "power",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Boundary pressure in bar.
    Supply { pressure: f64 },
    /// Withdrawn mass flow in kg/s.
    Demand { flow: f64 },
    Junction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PipeParams {
    Gas(GasPipelineSpec),
    Water(WaterPipeSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConfig {
    pub name: String,
    pub from: String,
    pub to: String,
    pub params: PipeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineConfig {
    pub name: String,
    pub spec: LineSpec,
    /// Sending-end injected current.
    pub current: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BusKindConfig {
    Generator { e_prime: f64, x_prime: f64, alpha: f64 },
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusConfig {
    pub name: String,
    pub kind: BusKindConfig,
    pub power: f64,
    pub line: String,
    pub segment: usize,
}

/// Step change of one boundary value.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalConfig {
    /// Node, line or bus whose boundary input changes.
    pub target: String,
    pub step_time: f64,
    pub step_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tau: f64,
    pub max_iter: usize,
    pub settle_tol: f64,
    pub record_every: usize,
    pub stop_when_settled: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = StepperConfig::default();
        Self {
            tau: d.tau,
            max_iter: d.max_iter,
            settle_tol: d.settle_tol,
            record_every: d.record_every,
            stop_when_settled: d.stop_when_settled,
        }
    }
}

impl SolverConfig {
    pub fn stepper(&self) -> StepperConfig {
        StepperConfig {
            tau: self.tau,
            max_iter: self.max_iter,
            settle_tol: self.settle_tol,
            record_every: self.record_every,
            stop_when_settled: self.stop_when_settled,
            cache_factorization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorConfig {
    pub r: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub shift_lo: f64,
    pub shift_hi: f64,
    pub feedthrough: Feedthrough,
}

impl MorConfig {
    pub fn with_order(r: usize) -> Self {
        Self {
            r,
            tol: TirkaConfig::DEFAULT_TOL,
            max_iter: TirkaConfig::DEFAULT_MAX_ITER,
            shift_lo: 1e-3,
            shift_hi: 1e3,
            feedthrough: Feedthrough::Retain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub domain: Domain,
    /// Gas only.
    pub scheme: Option<Scheme>,
    pub nodes: Vec<NodeConfig>,
    pub edges: Vec<EdgeConfig>,
    pub lines: Vec<LineConfig>,
    pub buses: Vec<BusConfig>,
    /// Bus conductance and susceptance matrices, in bus declaration order.
    pub admittance: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub signals: Vec<SignalConfig>,
    pub solver: SolverConfig,
    pub mor: Option<MorConfig>,
}

struct Entry {
    value: String,
    line: usize,
}

/// Raw key/value pairs with their line numbers, consumed during validation.
struct Entries {
    map: HashMap<String, Entry>,
    /// Keys in file order.
    order: Vec<String>,
    domain: &'static str,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Entries {
    fn lex(text: &str) -> Result<Self, CliError> {
        let mut map: HashMap<String, Entry> = HashMap::new();
        let mut order = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {line}: expected `section.key = value`")))?;
            let key = key.trim();
            let value = value.trim();
            let valid = key.contains('.')
                && key
                    .split('.')
                    .all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'));
            if !valid {
                return Err(config_err(format!("line {line}: malformed key `{key}`")));
            }
            if value.is_empty() {
                return Err(config_err(format!("line {line}: `{key}` has no value")));
            }
            if let Some(prev) = map.get(key) {
                return Err(config_err(format!(
                    "duplicate key `{key}` on lines {} and {line}",
                    prev.line
                )));
            }
            order.push(key.to_string());
            map.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(Self {
            map,
            order,
            domain: "",
        })
    }

    fn take(&mut self, key: &str) -> Option<Entry> {
        self.map.remove(key)
    }

    fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.map.keys().any(|k| k.starts_with(&prefix))
    }

    fn required(&mut self, key: &str) -> Result<Entry, CliError> {
        self.take(key).ok_or_else(|| config_err(format!("missing key: {key}")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                config_err(format!("line {}: {key}: expected {what}, got `{}`", e.line, e.value))
            }),
        }
    }

    fn number(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        let v: Option<f64> = self.parse(key, "a number")?;
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(config_err(format!("{key}: value must be finite")));
            }
        }
        Ok(v)
    }

    fn number_or(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.number(key)?.unwrap_or(default))
    }

    fn required_number(&mut self, key: &str) -> Result<f64, CliError> {
        self.number(key)?.ok_or_else(|| config_err(format!("missing key: {key}")))
    }

    fn count(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        self.parse(key, "a non-negative integer")
    }

    /// Table row names under `prefix.` in order of first appearance.
    fn rows(&self, prefix: &str) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for key in &self.order {
            if let Some(rest) = key.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                if let Some((name, _)) = rest.split_once('.') {
                    if !names.iter().any(|n| n == name) {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names
    }

    fn finish(self) -> Result<(), CliError> {
        let leftover = self
            .order
            .iter()
            .filter_map(|k| self.map.get(k).map(|e| (k, e.line)))
            .min_by_key(|(_, line)| *line);
        match leftover {
            Some((key, line)) => Err(config_err(format!(
                "line {line}: unknown key `{key}` for domain {}",
                self.domain
            ))),
            None => Ok(()),
        }
    }
}

fn parse_matrix(key: &str, text: &str, n: usize) -> Result<DMatrix<f64>, CliError> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| config_err(format!("{key}: bad number `{v}`"))))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(config_err(format!("{key}: expected a {n}x{n} matrix (rows separated by `;`)")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn gas_pipe(e: &mut Entries, prefix: &str, base: GasPipelineSpec) -> Result<GasPipelineSpec, CliError> {
    Ok(GasPipelineSpec {
        length: e.number_or(&format!("{prefix}.length"), base.length)?,
        diameter: e.number_or(&format!("{prefix}.diameter"), base.diameter)?,
        area: e.number_or(&format!("{prefix}.area"), base.area)?,
        friction: e.number_or(&format!("{prefix}.friction"), base.friction)?,
        sound_speed_sq: e.number_or(&format!("{prefix}.sound_speed_sq"), base.sound_speed_sq)?,
        mesh: e.number_or(&format!("{prefix}.mesh"), base.mesh)?,
    })
}

fn water_pipe(e: &mut Entries, prefix: &str, base: WaterPipeSpec) -> Result<WaterPipeSpec, CliError> {
    Ok(WaterPipeSpec {
        length: e.number_or(&format!("{prefix}.length"), base.length)?,
        area: e.number_or(&format!("{prefix}.area"), base.area)?,
        diameter: e.number_or(&format!("{prefix}.diameter"), base.diameter)?,
        friction: e.number_or(&format!("{prefix}.friction"), base.friction)?,
        angle: e.number_or(&format!("{prefix}.angle"), base.angle)?,
        density: e.number_or(&format!("{prefix}.density"), base.density)?,
    })
}

pub fn parse_config(path: &Path) -> Result<NetworkConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<NetworkConfig, CliError> {
    let mut e = Entries::lex(text)?;
    if !e.has_section("network") {
        return Err(config_err("missing section: network"));
    }
    let domain_entry = e.required("network.domain")?;
    let domain = match domain_entry.value.as_str() {
        "gas" => Domain::Gas,
        "water" => Domain::Water,
        "power" => Domain::Power,
        other => {
            return Err(config_err(format!(
                "line {}: network.domain: expected gas, water or power, got `{other}`",
                domain_entry.line
            )))
        }
    };
    e.domain = domain.as_str();

    let scheme = if domain == Domain::Gas {
        Some(match e.take("network.scheme") {
            None => Scheme::Fvm,
            Some(s) => match s.value.as_str() {
                "fvm" => Scheme::Fvm,
                "fdm" => Scheme::Fdm,
                other => {
                    return Err(config_err(format!(
                        "line {}: network.scheme: expected fvm or fdm, got `{other}`",
                        s.line
                    )))
                }
            },
        })
    } else {
        None
    };

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut lines = Vec::new();
    let mut buses = Vec::new();
    let mut admittance = None;

    match domain {
        Domain::Gas | Domain::Water => {
            let gas_base = if domain == Domain::Gas {
                Some(gas_pipe(&mut e, "pipe", GasPipelineSpec::reference())?)
            } else {
                None
            };
            let water_base = if domain == Domain::Water {
                Some(water_pipe(&mut e, "pipe", WaterPipeSpec::standard())?)
            } else {
                None
            };
            for name in e.rows("node") {
                let key = format!("node.{name}.kind");
                let kind_entry = e.required(&key)?;
                let kind = match kind_entry.value.as_str() {
                    "supply" => NodeKind::Supply {
                        pressure: e.required_number(&format!("node.{name}.pressure"))?,
                    },
                    "demand" => NodeKind::Demand {
                        flow: e.required_number(&format!("node.{name}.flow"))?,
                    },
                    "junction" => NodeKind::Junction,
                    other => {
                        return Err(config_err(format!(
                            "line {}: {key}: expected supply, demand or junction, got `{other}`",
                            kind_entry.line
                        )))
                    }
                };
                nodes.push(NodeConfig { name, kind });
            }
            if nodes.is_empty() {
                return Err(config_err("missing section: node"));
            }
            for name in e.rows("edge") {
                let mut endpoint = |end: &str| -> Result<String, CliError> {
                    let key = format!("edge.{name}.{end}");
                    let entry = e.required(&key)?;
                    if !nodes.iter().any(|n| n.name == entry.value) {
                        return Err(config_err(format!(
                            "line {}: {key}: unknown node `{}`",
                            entry.line, entry.value
                        )));
                    }
                    Ok(entry.value)
                };
                let from = endpoint("from")?;
                let to = endpoint("to")?;
                let prefix = format!("edge.{name}");
                let params = match (gas_base, water_base) {
                    (Some(base), _) => PipeParams::Gas(gas_pipe(&mut e, &prefix, base)?),
                    (_, Some(base)) => PipeParams::Water(water_pipe(&mut e, &prefix, base)?),
                    _ => unreachable!("gas or water base spec"),
                };
                edges.push(EdgeConfig { name, from, to, params });
            }
            if edges.is_empty() {
                return Err(config_err("missing section: edge"));
            }
        }
        Domain::Power => {
            for name in e.rows("line") {
                let p = |k: &str| format!("line.{name}.{k}");
                let spec = LineSpec {
                    r: e.required_number(&p("r"))?,
                    l: e.required_number(&p("l"))?,
                    c: e.required_number(&p("c"))?,
                    g: e.required_number(&p("g"))?,
                    length: e.required_number(&p("length"))?,
                    segments: e.count(&p("segments"))?.ok_or_else(|| config_err(format!("missing key: {}", p("segments"))))?,
                };
                let current = e.required_number(&p("current"))?;
                lines.push(LineConfig { name, spec, current });
            }
            if lines.is_empty() {
                return Err(config_err("missing section: line"));
            }
            for name in e.rows("bus") {
                let p = |k: &str| format!("bus.{name}.{k}");
                let kind_entry = e.required(&p("kind"))?;
                let kind = match kind_entry.value.as_str() {
                    "generator" => BusKindConfig::Generator {
                        e_prime: e.required_number(&p("e_prime"))?,
                        x_prime: e.required_number(&p("x_prime"))?,
                        alpha: e.number_or(&p("alpha"), 0.0)?,
                    },
                    "load" => BusKindConfig::Load,
                    other => {
                        return Err(config_err(format!(
                            "line {}: {}: expected generator or load, got `{other}`",
                            kind_entry.line,
                            p("kind")
                        )))
                    }
                };
                let power = e.number_or(&p("power"), 0.0)?;
                let line_entry = e.required(&p("line"))?;
                if !lines.iter().any(|l| l.name == line_entry.value) {
                    return Err(config_err(format!(
                        "line {}: {}: unknown line `{}`",
                        line_entry.line,
                        p("line"),
                        line_entry.value
                    )));
                }
                let segment = e.count(&p("segment"))?.unwrap_or(0);
                buses.push(BusConfig {
                    name,
                    kind,
                    power,
                    line: line_entry.value,
                    segment,
                });
            }
            if !buses.is_empty() {
                let n = buses.len();
                let g = e.required("admittance.g")?;
                let b = e.required("admittance.b")?;
                admittance = Some((parse_matrix("admittance.g", &g.value, n)?, parse_matrix("admittance.b", &b.value, n)?));
            }
        }
    }

    let mut signals = Vec::new();
    for target in e.rows("signal") {
        let known = nodes.iter().any(|n| n.name == target) || lines.iter().any(|l| l.name == target) || buses.iter().any(|b| b.name == target);
        if !known {
            return Err(config_err(format!("signal.{target}: unknown boundary `{target}`")));
        }
        signals.push(SignalConfig {
            step_time: e.required_number(&format!("signal.{target}.step_time"))?,
            step_value: e.required_number(&format!("signal.{target}.step_value"))?,
            target,
        });
    }

    let d = SolverConfig::default();
    let solver = SolverConfig {
        tau: e.number_or("solver.tau", d.tau)?,
        max_iter: e.count("solver.max_iter")?.unwrap_or(d.max_iter),
        settle_tol: e.number_or("solver.settle_tol", d.settle_tol)?,
        record_every: e.count("solver.record_every")?.unwrap_or(d.record_every),
        stop_when_settled: e.parse("solver.stop_when_settled", "true or false")?.unwrap_or(d.stop_when_settled),
    };
    solver
        .stepper()
        .validate()
        .map_err(|err| config_err(format!("solver: {err}")))?;

    let mor = if e.has_section("mor") {
        let r = e.count("mor.r")?.ok_or_else(|| config_err("missing key: mor.r"))?;
        let d = MorConfig::with_order(r);
        let feedthrough = match e.take("mor.feedthrough") {
            None => d.feedthrough,
            Some(f) => match f.value.as_str() {
                "retain" => Feedthrough::Retain,
                "zero" => Feedthrough::Zero,
                other => {
                    return Err(config_err(format!(
                        "line {}: mor.feedthrough: expected retain or zero, got `{other}`",
                        f.line
                    )))
                }
            },
        };
        let mor = MorConfig {
            r,
            tol: e.number_or("mor.tol", d.tol)?,
            max_iter: e.count("mor.max_iter")?.unwrap_or(d.max_iter),
            shift_lo: e.number_or("mor.shift_lo", d.shift_lo)?,
            shift_hi: e.number_or("mor.shift_hi", d.shift_hi)?,
            feedthrough,
        };
        if mor.r == 0 || !(mor.tol > 0.0) || mor.max_iter == 0 || !(mor.shift_lo > 0.0 && mor.shift_hi >= mor.shift_lo) {
            return Err(config_err("mor: need r >= 1, tol > 0, max_iter >= 1 and 0 < shift_lo <= shift_hi"));
        }
        Some(mor)
    } else {
        None
    };

    e.finish()?;
    Ok(NetworkConfig {
        domain,
        scheme,
        nodes,
        edges,
        lines,
        buses,
        admittance,
        signals,
        solver,
        mor,
    })
}

fn matrix_text(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Fully explicit text form; `parse_config_str(&serialize_config(c)) == c`.
pub fn serialize_config(cfg: &NetworkConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: String, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("network.domain".into(), cfg.domain.as_str().into());
    if let Some(s) = cfg.scheme {
        kv("network.scheme".into(), s.as_str().into());
    }
    for n in &cfg.nodes {
        let p = format!("node.{}", n.name);
        match n.kind {
            NodeKind::Supply { pressure } => {
                kv(format!("{p}.kind"), "supply".into());
                kv(format!("{p}.pressure"), format!("{pressure:?}"));
            }
            NodeKind::Demand { flow } => {
                kv(format!("{p}.kind"), "demand".into());
                kv(format!("{p}.flow"), format!("{flow:?}"));
            }
            NodeKind::Junction => kv(format!("{p}.kind"), "junction".into()),
        }
    }
    for ed in &cfg.edges {
        let p = format!("edge.{}", ed.name);
        kv(format!("{p}.from"), ed.from.clone());
        kv(format!("{p}.to"), ed.to.clone());
        let fields: Vec<(&str, f64)> = match ed.params {
            PipeParams::Gas(s) => vec![
                ("length", s.length),
                ("diameter", s.diameter),
                ("area", s.area),
                ("friction", s.friction),
                ("sound_speed_sq", s.sound_speed_sq),
                ("mesh", s.mesh),
            ],
            PipeParams::Water(s) => vec![
                ("length", s.length),
                ("area", s.area),
                ("diameter", s.diameter),
                ("friction", s.friction),
                ("angle", s.angle),
                ("density", s.density),
            ],
        };
        for (k, v) in fields {
            kv(format!("{p}.{k}"), format!("{v:?}"));
        }
    }
    for l in &cfg.lines {
        let p = format!("line.{}", l.name);
        let s = l.spec;
        for (k, v) in [("r", s.r), ("l", s.l), ("c", s.c), ("g", s.g), ("length", s.length), ("current", l.current)] {
            kv(format!("{p}.{k}"), format!("{v:?}"));
        }
        kv(format!("{p}.segments"), s.segments.to_string());
    }
    for b in &cfg.buses {
        let p = format!("bus.{}", b.name);
        match b.kind {
            BusKindConfig::Generator { e_prime, x_prime, alpha } => {
                kv(format!("{p}.kind"), "generator".into());
                kv(format!("{p}.e_prime"), format!("{e_prime:?}"));
                kv(format!("{p}.x_prime"), format!("{x_prime:?}"));
                kv(format!("{p}.alpha"), format!("{alpha:?}"));
            }
            BusKindConfig::Load => kv(format!("{p}.kind"), "load".into()),
        }
        kv(format!("{p}.power"), format!("{:?}", b.power));
        kv(format!("{p}.line"), b.line.clone());
        kv(format!("{p}.segment"), b.segment.to_string());
    }
    if let Some((g, b)) = &cfg.admittance {
        kv("admittance.g".into(), matrix_text(g));
        kv("admittance.b".into(), matrix_text(b));
    }
    for s in &cfg.signals {
        kv(format!("signal.{}.step_time", s.target), format!("{:?}", s.step_time));
        kv(format!("signal.{}.step_value", s.target), format!("{:?}", s.step_value));
    }
    let s = &cfg.solver;
    kv("solver.tau".into(), format!("{:?}", s.tau));
    kv("solver.max_iter".into(), s.max_iter.to_string());
    kv("solver.settle_tol".into(), format!("{:?}", s.settle_tol));
    kv("solver.record_every".into(), s.record_every.to_string());
    kv("solver.stop_when_settled".into(), s.stop_when_settled.to_string());
    if let Some(m) = &cfg.mor {
        kv("mor.r".into(), m.r.to_string());
        kv("mor.tol".into(), format!("{:?}", m.tol));
        kv("mor.max_iter".into(), m.max_iter.to_string());
        kv("mor.shift_lo".into(), format!("{:?}", m.shift_lo));
        kv("mor.shift_hi".into(), format!("{:?}", m.shift_hi));
        let f = match m.feedthrough {
            Feedthrough::Retain => "retain",
            Feedthrough::Zero => "zero",
        };
        kv("mor.feedthrough".into(), f.into());
    }
    out
}

/// Index of each name in declaration order.
pub(crate) fn name_index<'a>(names: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    names.enumerate().map(|(i, n)| (n, i)).collect()
}
