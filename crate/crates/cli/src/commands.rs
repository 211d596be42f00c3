//! The four experiment commands.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use netmor_core::dae::{log_space, sigma_max_sweep};
use netmor_core::gas::Scheme;
use netmor_core::integrator::{simulate, InputSignal, SimulationResult, StepperConfig};
use netmor_core::linalg::CVector;
use netmor_core::mor::{
    project_nonlinearity, reduce, verify_interpolation, ReduceOptions, ReducedModel, Reference, TirkaConfig,
};
use netmor_core::{Error, UnifiedDae};
use num_complex::Complex64;

use crate::config::{Domain, MorConfig, NetworkConfig};
use crate::error::CliError;
use crate::model::Model;
pub use crate::output::RunManifest;
use crate::output::{ensure_dir, header, io_err, num, numeric_rows, write_csv};

/// Points of the σ-max sweep in `bode.csv`.
pub const BODE_POINTS: usize = 200;
pub const BODE_RANGE: (f64, f64) = (1e-4, 1e4);
/// Frequencies at or below this bound enter the reported low-band gap.
pub const GAP_BAND: f64 = 1e2;
/// Low-band gap above which a reduction is reported as coarse.
pub const COARSE_GAP: f64 = 1e-3;
/// Timed repeats per measurement; the minimum is reported.
pub const TIMING_REPEATS: usize = 3;
/// Bench cells are short, so they take more repeats.
pub const BENCH_REPEATS: usize = 9;
pub const DEFAULT_BENCH_STEPS: [f64; 4] = [1.0, 0.5, 0.25, 0.1];

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn mor_block(cfg: &NetworkConfig) -> Result<&MorConfig, CliError> {
    cfg.mor.as_ref().ok_or_else(|| CliError::Config("missing section: mor".into()))
}

pub fn cmd_simulate(cfg: &NetworkConfig, out: &Path) -> Result<RunManifest, CliError> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("simulate", &crate::config::serialize_config(cfg));
    let t0 = Instant::now();
    let model = Model::build(cfg)?;
    manifest.phase("assemble", secs(t0.elapsed()));

    let res = simulate(model.dae(), model.x0(), &model.signal, &cfg.solver.stepper())?;
    manifest.phase("factorization", secs(res.timing.factorization));
    manifest.phase("stepping", secs(res.timing.stepping));

    let t1 = Instant::now();
    let path = out.join("trajectory.csv");
    write_trajectory(&path, &model, &res)?;
    manifest.artifacts.push(path);
    manifest.phase("write", secs(t1.elapsed()));
    manifest.value("states", model.dae().n());
    manifest.value("steps", res.steps_taken);
    manifest.value("settled", res.settled);
    manifest.write(out)?;
    Ok(manifest)
}

fn write_trajectory(path: &Path, model: &Model, res: &SimulationResult) -> Result<(), CliError> {
    let mut cols = vec!["t".to_string()];
    cols.extend(model.output_labels().iter().cloned());
    cols.extend(model.diagnostic_labels());
    let mut rows = Vec::with_capacity(res.times.len());
    for ((t, x), y) in res.times.iter().zip(&res.states).zip(&res.outputs) {
        let mut row = vec![*t];
        row.extend(y.iter());
        row.extend(model.diagnostics(x, &model.signal.at(*t))?);
        rows.push(row);
    }
    write_csv(path, &cols, &numeric_rows(rows))
}

/// IRKA configuration for a model and `mor` block.
pub fn tirka_config(dae: &UnifiedDae, mor: &MorConfig) -> Result<TirkaConfig, CliError> {
    let lin = dae.linear_part();
    if mor.r > lin.n() {
        return Err(CliError::Config(format!("mor.r = {} exceeds the model order {}", mor.r, lin.n())));
    }
    let mut t = TirkaConfig::preset_in(&lin, mor.r, mor.shift_lo, mor.shift_hi)?;
    t.tol = mor.tol;
    t.max_iter = mor.max_iter;
    Ok(t)
}

/// Reduces around the initial operating point `(x0, u0)`.
pub fn reduce_model(model: &Model, mor: &MorConfig) -> Result<ReducedModel, CliError> {
    let tcfg = tirka_config(model.dae(), mor)?;
    let opts = ReduceOptions {
        feedthrough: mor.feedthrough,
        reference: Some(Reference {
            x: model.x0().clone(),
            u: model.u0().clone(),
        }),
    };
    Ok(reduce(model.dae(), &tcfg, &opts)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodeRow {
    pub omega: f64,
    pub full: f64,
    pub reduced: f64,
}

impl BodeRow {
    pub fn gap(&self) -> f64 {
        (self.full - self.reduced).abs() / self.full.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn bode(dae: &UnifiedDae, red: &ReducedModel) -> Result<Vec<BodeRow>, CliError> {
    let freqs = log_space(BODE_RANGE.0, BODE_RANGE.1, BODE_POINTS);
    let full = sigma_max_sweep(&dae.linear_part(), &freqs)?;
    let reduced = sigma_max_sweep(&red.linear_part(), &freqs)?;
    Ok(full
        .iter()
        .zip(&reduced)
        .map(|(&(omega, f), &(_, r))| BodeRow { omega, full: f, reduced: r })
        .collect())
}

pub fn cmd_reduce(cfg: &NetworkConfig, out: &Path) -> Result<RunManifest, CliError> {
    let mor = mor_block(cfg)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("reduce", &crate::config::serialize_config(cfg));
    let t0 = Instant::now();
    let model = Model::build(cfg)?;
    manifest.phase("assemble", secs(t0.elapsed()));

    let t1 = Instant::now();
    let red = reduce_model(&model, mor)?;
    manifest.phase("reduce", secs(t1.elapsed()));

    let t2 = Instant::now();
    let residuals = verify_interpolation(&model.dae().linear_part(), &red)?;
    let rows = bode(model.dae(), &red)?;
    manifest.phase("verify", secs(t2.elapsed()));

    let t3 = Instant::now();
    let path = out.join("reduced_model.csv");
    write_reduced(&path, &red)?;
    manifest.artifacts.push(path);

    let path = out.join("history.csv");
    let hist: Vec<Vec<f64>> = red.history.iter().enumerate().map(|(k, h)| vec![(k + 1) as f64, *h]).collect();
    write_csv(&path, &header(&["iteration", "shift_change"]), &numeric_rows(hist))?;
    manifest.artifacts.push(path);

    let path = out.join("interpolation.csv");
    let interp: Vec<Vec<f64>> = residuals
        .iter()
        .map(|r| vec![r.shift.re, r.shift.im, r.right, r.left, r.bitangential])
        .collect();
    write_csv(
        &path,
        &header(&["shift_re", "shift_im", "right", "left", "bitangential"]),
        &numeric_rows(interp),
    )?;
    manifest.artifacts.push(path);

    let path = out.join("bode.csv");
    let bode_rows: Vec<Vec<f64>> = rows.iter().map(|b| vec![b.omega, b.full, b.reduced]).collect();
    write_csv(&path, &header(&["omega", "sigma_max_full", "sigma_max_reduced"]), &numeric_rows(bode_rows))?;
    manifest.artifacts.push(path);
    manifest.phase("write", secs(t3.elapsed()));

    let max_residual = residuals.iter().map(|r| r.max()).fold(0.0, f64::max);
    let gap = rows.iter().filter(|b| b.omega <= GAP_BAND).map(BodeRow::gap).fold(0.0, f64::max);
    manifest.value("r", red.r());
    manifest.value("converged", red.converged);
    manifest.value("iterations", red.history.len());
    manifest.value("max_interpolation_residual", num(max_residual));
    manifest.value("max_gap_below_1e2", num(gap));
    manifest.value("quality", if gap <= COARSE_GAP { "ok" } else { "coarse" });
    manifest.write(out)?;
    if !red.converged {
        return Err(unconverged(&red));
    }
    Ok(manifest)
}

fn unconverged(red: &ReducedModel) -> CliError {
    CliError::Unconverged(format!(
        "IRKA stopped after {} iterations with shift change {}",
        red.history.len(),
        red.history.last().map_or("n/a".into(), |h| format!("{h:e}"))
    ))
}

fn push_matrix(rows: &mut Vec<Vec<String>>, name: &str, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            rows.push(vec![name.into(), i.to_string(), j.to_string(), num(m[(i, j)])]);
        }
    }
}

fn complex_rows(vs: &[CVector], part: fn(&Complex64) -> f64) -> DMatrix<f64> {
    let cols = vs.first().map_or(0, |v| v.len());
    DMatrix::from_fn(vs.len(), cols, |i, j| part(&vs[i][j]))
}

/// `matrix,row,col,value` bundle of everything needed to rebuild the model.
pub fn write_reduced(path: &Path, red: &ReducedModel) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for (name, m) in [
        ("E_r", &red.e_r),
        ("A_r", &red.a_r),
        ("A_hat", &red.a_hat),
        ("B_hat", &red.b_hat),
        ("C_hat", &red.c_hat),
        ("D_r", &red.d_r),
        ("V", &red.v),
        ("W", &red.w),
    ] {
        push_matrix(&mut rows, name, m);
    }
    let shifts = DMatrix::from_fn(red.shifts.len(), 2, |i, j| if j == 0 { red.shifts[i].re } else { red.shifts[i].im });
    push_matrix(&mut rows, "shifts", &shifts);
    push_matrix(&mut rows, "right_re", &complex_rows(&red.right_tangents, |z| z.re));
    push_matrix(&mut rows, "right_im", &complex_rows(&red.right_tangents, |z| z.im));
    push_matrix(&mut rows, "left_re", &complex_rows(&red.left_tangents, |z| z.re));
    push_matrix(&mut rows, "left_im", &complex_rows(&red.left_tangents, |z| z.im));
    push_matrix(&mut rows, "history", &DMatrix::from_column_slice(red.history.len(), 1, &red.history));
    push_matrix(&mut rows, "converged", &DMatrix::from_element(1, 1, if red.converged { 1.0 } else { 0.0 }));
    if let Some(rf) = &red.reference {
        push_matrix(&mut rows, "x_ref", &DMatrix::from_column_slice(rf.x.len(), 1, rf.x.as_slice()));
        push_matrix(&mut rows, "u_ref", &DMatrix::from_column_slice(rf.u.len(), 1, rf.u.as_slice()));
    }
    write_csv(path, &header(&["matrix", "row", "col", "value"]), &rows)
}

/// Rebuilds a reduced model saved by [`write_reduced`] for the given full model.
pub fn load_reduced(path: &Path, model: &Model) -> Result<ReducedModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, what: &str| CliError::Config(format!("{}:{line}: {what}", path.display()));
    let mut entries: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "matrix,row,col,value")) => {}
        _ => return Err(bad(1, "expected header `matrix,row,col,value`")),
    }
    for (idx, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(idx + 1, "expected 4 fields"));
        }
        let parsed = (f[1].parse::<usize>(), f[2].parse::<usize>(), f[3].parse::<f64>());
        let (Ok(i), Ok(j), Ok(v)) = parsed else {
            return Err(bad(idx + 1, "malformed entry"));
        };
        entries.entry(f[0].to_string()).or_default().push((i, j, v));
    }
    let matrix = |name: &str| -> Result<DMatrix<f64>, CliError> {
        let e = entries
            .get(name)
            .ok_or_else(|| CliError::Config(format!("{}: missing matrix {name}", path.display())))?;
        let rows = e.iter().map(|t| t.0 + 1).max().unwrap_or(0);
        let cols = e.iter().map(|t| t.1 + 1).max().unwrap_or(0);
        let mut m = DMatrix::zeros(rows, cols);
        for &(i, j, v) in e {
            m[(i, j)] = v;
        }
        Ok(m)
    };
    let optional = |name: &str| if entries.contains_key(name) { matrix(name).map(Some) } else { Ok(None) };
    let complex = |re: &str, im: &str| -> Result<Vec<CVector>, CliError> {
        let (re, im) = (matrix(re)?, matrix(im)?);
        Ok((0..re.nrows())
            .map(|i| CVector::from_fn(re.ncols(), |j, _| Complex64::new(re[(i, j)], im[(i, j)])))
            .collect())
    };

    let b_hat = matrix("B_hat")?;
    let v = matrix("V")?;
    let w = matrix("W")?;
    // Zero-width blocks are not representable in the bundle.
    let d_r = optional("D_r")?.unwrap_or_else(|| DMatrix::zeros(model.dae().p(), model.dae().m()));
    let reference = match (optional("x_ref")?, optional("u_ref")?) {
        (Some(x), Some(u)) => Some(Reference {
            x: x.column(0).into_owned(),
            u: u.column(0).into_owned(),
        }),
        _ => None,
    };
    let lin = model.dae().linear_part();
    if v.nrows() != lin.n() || b_hat.ncols() != lin.m() {
        return Err(CliError::Config(format!("{}: reduced model does not match the configured network", path.display())));
    }
    let (g_r, y_ref) = project_nonlinearity(&lin, &v, &w, &b_hat, model.dae().nonlinearity().clone(), reference.as_ref())?;
    let shifts = matrix("shifts")?;
    Ok(ReducedModel {
        e_r: matrix("E_r")?,
        a_r: matrix("A_r")?,
        a_hat: matrix("A_hat")?,
        b_hat,
        c_hat: matrix("C_hat")?,
        d_r,
        v,
        w,
        shifts: (0..shifts.nrows()).map(|i| Complex64::new(shifts[(i, 0)], shifts[(i, 1)])).collect(),
        right_tangents: complex("right_re", "right_im")?,
        left_tangents: complex("left_re", "left_im")?,
        history: matrix("history")?.column(0).iter().copied().collect(),
        converged: matrix("converged")?[(0, 0)] != 0.0,
        reference,
        y_ref,
        g_r,
    })
}

/// Runs a reduced model from the lifted initial state on the model's input.
pub fn simulate_reduced(model: &Model, red: &ReducedModel, stepper: &StepperConfig) -> Result<SimulationResult, Error> {
    let dae = red.to_dae()?;
    simulate(&dae, &red.reduce_state(model.x0()), &model.signal, stepper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareMetrics {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub full_step_time: f64,
    pub reduced_step_time: f64,
}

impl CompareMetrics {
    pub fn speedup(&self) -> f64 {
        self.full_step_time / self.reduced_step_time
    }
}

/// Per-channel relative errors `|y_r - y| / max_t |y|`: (max, mean).
pub fn output_errors(full: &[DVector<f64>], reduced: &[DVector<f64>]) -> (f64, f64) {
    let p = full.first().map_or(0, |y| y.len());
    let scale: Vec<f64> = (0..p)
        .map(|i| full.iter().map(|y| y[i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE))
        .collect();
    let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for (y, yr) in full.iter().zip(reduced) {
        for i in 0..p {
            let e = (y[i] - yr[i]).abs() / scale[i];
            max = max.max(e);
            sum += e;
            count += 1;
        }
    }
    (max, if count > 0 { sum / count as f64 } else { 0.0 })
}

fn timed_min(
    repeats: usize,
    mut run: impl FnMut() -> Result<SimulationResult, Error>,
) -> Result<(SimulationResult, f64), CliError> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let res = run()?;
        best = best.min(secs(res.timing.stepping));
        last = Some(res);
    }
    Ok((last.expect("at least one repeat"), best))
}

/// Full and reduced runs on the model's input, with step-loop timings.
pub fn paired_runs(
    model: &Model,
    red: &ReducedModel,
    stepper: &StepperConfig,
) -> Result<(SimulationResult, SimulationResult, CompareMetrics), CliError> {
    let (full, full_time) = timed_min(TIMING_REPEATS, || simulate(model.dae(), model.x0(), &model.signal, stepper))?;
    let (reduced, red_time) = timed_min(TIMING_REPEATS, || simulate_reduced(model, red, stepper))?;
    let (max_rel_error, mean_rel_error) = output_errors(&full.outputs, &reduced.outputs);
    let metrics = CompareMetrics {
        max_rel_error,
        mean_rel_error,
        full_step_time: full_time,
        reduced_step_time: red_time,
    };
    Ok((full, reduced, metrics))
}

pub fn cmd_compare(cfg: &NetworkConfig, out: &Path) -> Result<RunManifest, CliError> {
    let mor = mor_block(cfg)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("compare", &crate::config::serialize_config(cfg));
    let t0 = Instant::now();
    let model = Model::build(cfg)?;
    manifest.phase("assemble", secs(t0.elapsed()));
    let t1 = Instant::now();
    let red = reduce_model(&model, mor)?;
    manifest.phase("reduce", secs(t1.elapsed()));

    let stepper = StepperConfig {
        stop_when_settled: false,
        ..cfg.solver.stepper()
    };
    let (full, reduced, metrics) = paired_runs(&model, &red, &stepper)?;
    manifest.phase("full_stepping", metrics.full_step_time);
    manifest.phase("reduced_stepping", metrics.reduced_step_time);

    let path = out.join("reduced_model.csv");
    write_reduced(&path, &red)?;
    manifest.artifacts.push(path);

    let path = out.join("compare_trajectories.csv");
    let mut cols = vec!["t".to_string()];
    cols.extend(model.output_labels().iter().map(|l| format!("full:{l}")));
    cols.extend(model.output_labels().iter().map(|l| format!("reduced:{l}")));
    let rows = full.times.iter().zip(full.outputs.iter().zip(&reduced.outputs)).map(|(t, (y, yr))| {
        let mut row = vec![*t];
        row.extend(y.iter());
        row.extend(yr.iter());
        row
    });
    write_csv(&path, &cols, &numeric_rows(rows))?;
    manifest.artifacts.push(path);

    // Timings are kept out of the CSV artifacts except in this summary.
    let path = out.join("compare.csv");
    write_csv(
        &path,
        &header(&["max_rel_error", "mean_rel_error", "full_step_time", "reduced_step_time", "speedup"]),
        &numeric_rows([vec![
            metrics.max_rel_error,
            metrics.mean_rel_error,
            metrics.full_step_time,
            metrics.reduced_step_time,
            metrics.speedup(),
        ]]),
    )?;
    manifest.artifacts.push(path);

    manifest.value("r", red.r());
    manifest.value("converged", red.converged);
    manifest.value("iterations", red.history.len());
    manifest.value("max_rel_error", num(metrics.max_rel_error));
    manifest.value("mean_rel_error", num(metrics.mean_rel_error));
    manifest.value("speedup", num(metrics.speedup()));
    manifest.write(out)?;
    if !red.converged {
        return Err(unconverged(&red));
    }
    Ok(manifest)
}

pub fn parse_steps(text: &str) -> Result<Vec<f64>, CliError> {
    let steps = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("--steps: bad step size `{}`", s.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    validate_steps(&steps)?;
    Ok(steps)
}

pub fn validate_steps(steps: &[f64]) -> Result<(), CliError> {
    if steps.is_empty() {
        return Err(CliError::Config("--steps: need at least one step size".into()));
    }
    if let Some(s) = steps.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(CliError::Config(format!("--steps: step size {s} is not positive")));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::Config("--steps: step sizes must be strictly descending".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub tau: f64,
    pub steps: usize,
    pub wall_time_fvm: f64,
    pub wall_time_fdm: f64,
}

/// Step-loop time of both gas schemes over a fixed horizon, per step size.
pub fn bench_rows(cfg: &NetworkConfig, steps: &[f64]) -> Result<Vec<BenchRow>, CliError> {
    if cfg.domain != Domain::Gas {
        return Err(CliError::Config(format!("bench needs a gas network, got {}", cfg.domain.as_str())));
    }
    validate_steps(steps)?;
    let fvm = Model::build_with_scheme(cfg, Scheme::Fvm)?;
    let fdm = Model::build_with_scheme(cfg, Scheme::Fdm)?;
    let horizon = cfg.solver.tau * cfg.solver.max_iter as f64;
    let mut rows = Vec::with_capacity(steps.len());
    for &tau in steps {
        let n = ((horizon / tau).round() as usize).max(1);
        let stepper = StepperConfig {
            tau,
            max_iter: n,
            stop_when_settled: false,
            record_every: usize::MAX,
            ..cfg.solver.stepper()
        };
        let time = |m: &Model| {
            let constant = InputSignal::Constant(m.u0().clone());
            let signal = if cfg.signals.is_empty() { &constant } else { &m.signal };
            timed_min(BENCH_REPEATS, || simulate(m.dae(), m.x0(), signal, &stepper)).map(|(_, t)| t)
        };
        rows.push(BenchRow {
            tau,
            steps: n,
            wall_time_fvm: time(&fvm)?,
            wall_time_fdm: time(&fdm)?,
        });
    }
    Ok(rows)
}

pub fn cmd_bench(cfg: &NetworkConfig, steps: &[f64], out: &Path) -> Result<RunManifest, CliError> {
    validate_steps(steps)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("bench", &crate::config::serialize_config(cfg));
    let t0 = Instant::now();
    let rows = bench_rows(cfg, steps)?;
    manifest.phase("bench", secs(t0.elapsed()));
    let path = out.join("bench.csv");
    let body = rows
        .iter()
        .map(|r| vec![num(r.tau), r.steps.to_string(), num(r.wall_time_fvm), num(r.wall_time_fdm)])
        .collect::<Vec<_>>();
    write_csv(&path, &header(&["tau", "steps", "wall_time_fvm", "wall_time_fdm"]), &body)?;
    manifest.artifacts.push(path);
    manifest.value("horizon", num(cfg.solver.tau * cfg.solver.max_iter as f64));
    manifest.write(out)?;
    Ok(manifest)
}
