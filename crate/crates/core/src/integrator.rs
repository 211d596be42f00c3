//! Semi-implicit Euler time stepping for unified DAEs.
//!
//! Each step solves `(E - τA) x_k = E x_{k-1} + τ B u(t_k) + τ G(x_{k-1}, u(t_k))`,
//! reusing one LU factorization of `E - τA` for the whole run.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::dae::UnifiedDae;
use crate::error::{Error, Result};
use crate::linalg::DenseLu;

/// Consecutive sub-tolerance steps required to declare a run settled.
pub const SETTLE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub tau: f64,
    pub max_iter: usize,
    pub settle_tol: f64,
    pub record_every: usize,
    pub stop_when_settled: bool,
    pub cache_factorization: bool,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            max_iter: 1000,
            settle_tol: 1e-8,
            record_every: 1,
            stop_when_settled: true,
            cache_factorization: true,
        }
    }
}

impl StepperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidSpec(format!("step size must be positive, got {}", self.tau)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidSpec("max_iter must be at least 1".into()));
        }
        if !(self.settle_tol > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "settle_tol must be positive, got {}",
                self.settle_tol
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidSpec("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Boundary signal `u(t)`.
#[derive(Clone)]
pub enum InputSignal {
    Constant(DVector<f64>),
    Function(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
}

impl InputSignal {
    pub fn at(&self, t: f64) -> DVector<f64> {
        match self {
            InputSignal::Constant(u) => u.clone(),
            InputSignal::Function(f) => f(t),
        }
    }
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSignal::Constant(u) => f.debug_tuple("Constant").field(&u.as_slice()).finish(),
            InputSignal::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl From<DVector<f64>> for InputSignal {
    fn from(u: DVector<f64>) -> Self {
        InputSignal::Constant(u)
    }
}

/// LU factorization of `E - τA` for one step size.
#[derive(Debug, Clone)]
pub struct StepFactorization {
    tau: f64,
    lu: DenseLu<f64>,
}

impl StepFactorization {
    pub fn new(dae: &UnifiedDae, tau: f64) -> Result<Self> {
        let lu = DenseLu::new(&(dae.e() - dae.a() * tau));
        if lu.is_numerically_singular() {
            return Err(Error::SingularStepMatrix { tau });
        }
        Ok(Self { tau, lu })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// One semi-implicit Euler step.
pub fn step(
    dae: &UnifiedDae,
    x_prev: &DVector<f64>,
    u: &DVector<f64>,
    fac: &StepFactorization,
    step_index: usize,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(dae.n());
    dae.eval_g(x_prev, u, &mut g)?;
    let tau = fac.tau;
    let mut rhs = dae.e() * x_prev;
    rhs.gemv(tau, dae.b(), u, 1.0);
    rhs.axpy(tau, &g, 1.0);
    let x = fac.lu.solve_vec(&rhs);
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: step_index,
            index,
        });
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub factorization: Duration,
    pub stepping: Duration,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// Recorded times, starting at `t = 0`.
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub timing: PhaseTimes,
    pub settled: bool,
    pub settle_step: Option<usize>,
    pub steps_taken: usize,
    pub final_state: DVector<f64>,
    pub final_input: DVector<f64>,
}

impl SimulationResult {
    pub fn final_time(&self, tau: f64) -> f64 {
        self.steps_taken as f64 * tau
    }

    /// Recorded outputs as a `p × samples` matrix.
    pub fn output_matrix(&self) -> DMatrix<f64> {
        let p = self.outputs.first().map_or(0, |y| y.len());
        DMatrix::from_fn(p, self.outputs.len(), |i, j| self.outputs[j][i])
    }
}

pub fn simulate(dae: &UnifiedDae, x0: &DVector<f64>, u: &InputSignal, cfg: &StepperConfig) -> Result<SimulationResult> {
    cfg.validate()?;
    if x0.len() != dae.n() {
        return Err(Error::dims("initial state", dae.n(), x0.len()));
    }
    let u0 = u.at(0.0);
    if u0.len() != dae.m() {
        return Err(Error::dims("input", dae.m(), u0.len()));
    }

    let t_fac = Instant::now();
    let mut fac = StepFactorization::new(dae, cfg.tau)?;
    let mut timing = PhaseTimes {
        factorization: t_fac.elapsed(),
        stepping: Duration::ZERO,
    };

    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut outputs = vec![dae.output(x0, &u0)];

    let mut x = x0.clone();
    let mut uk = u0;
    let mut quiet = 0;
    let mut settle_step = None;
    let mut steps_taken = 0;
    let mut refactor = Duration::ZERO;

    let t_loop = Instant::now();
    for k in 1..=cfg.max_iter {
        let t = k as f64 * cfg.tau;
        uk = u.at(t);
        if !cfg.cache_factorization {
            let t0 = Instant::now();
            fac = StepFactorization::new(dae, cfg.tau)?;
            refactor += t0.elapsed();
        }
        let next = step(dae, &x, &uk, &fac, k)?;
        let change = (&next - &x).amax() / next.amax().max(f64::MIN_POSITIVE);
        x = next;
        steps_taken = k;

        if k % cfg.record_every == 0 {
            times.push(t);
            outputs.push(dae.output(&x, &uk));
            states.push(x.clone());
        }

        if change < cfg.settle_tol {
            quiet += 1;
            if quiet >= SETTLE_WINDOW && settle_step.is_none() {
                settle_step = Some(k);
                if cfg.stop_when_settled {
                    break;
                }
            }
        } else {
            quiet = 0;
        }
    }
    timing.stepping = t_loop.elapsed().saturating_sub(refactor);
    timing.factorization += refactor;

    Ok(SimulationResult {
        times,
        states,
        outputs,
        timing,
        settled: settle_step.is_some(),
        settle_step,
        steps_taken,
        final_state: x,
        final_input: uk,
    })
}

/// `‖A x + B u + G(x, u)‖∞ / (‖B u‖∞ + 1)`.
pub fn steady_state_residual(dae: &UnifiedDae, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    if x.len() != dae.n() {
        return Err(Error::dims("state", dae.n(), x.len()));
    }
    if u.len() != dae.m() {
        return Err(Error::dims("input", dae.m(), u.len()));
    }
    let mut g = DVector::zeros(dae.n());
    dae.eval_g(x, u, &mut g)?;
    let bu = dae.b() * u;
    let r = dae.a() * x + &bu + g;
    Ok(r.amax() / (bu.amax() + 1.0))
}
