//! Tangential IRKA with a retained feed-through term.
//!
//! The linear part of a [`UnifiedDae`] is reduced by Petrov-Galerkin
//! projection onto rational Krylov bases whose shifts are iterated to the
//! mirror images of the reduced poles. The polynomial part `D` of the full
//! transfer function is kept as `D_r`, and the reduced matrices are corrected
//! so the tangential interpolation conditions still hold.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::dae::{make_dae, LinearPart, Nonlinearity, SharedNonlinearity, UnifiedDae};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, DenseLu, GenEigenvalue};

/// Environment variable capping concurrent shifted solves.
pub const THREADS_ENV: &str = "NETMOR_THREADS";

/// Relative imaginary part below which a shift is treated as real.
const REAL_TOL: f64 = 1e-10;
/// Probe frequency of the polynomial-part cross-check.
const POLY_PROBE: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct TirkaConfig {
    pub r: usize,
    pub shifts: Vec<Complex64>,
    pub right_tangents: Vec<CVector>,
    pub left_tangents: Vec<CVector>,
    pub tol: f64,
    pub max_iter: usize,
}

impl TirkaConfig {
    pub const DEFAULT_TOL: f64 = 1e-6;
    pub const DEFAULT_MAX_ITER: usize = 100;

    /// `r` real shifts log-spaced over `[1e-3, 1e3]`, tangents from the
    /// leading singular vectors of `H(σᵢ)`.
    pub fn preset(lin: &LinearPart, r: usize) -> Result<Self> {
        Self::preset_in(lin, r, 1e-3, 1e3)
    }

    pub fn preset_in(lin: &LinearPart, r: usize, lo: f64, hi: f64) -> Result<Self> {
        if r == 0 || r > lin.n() {
            return Err(Error::InvalidReduction(format!(
                "reduced order {r} outside 1..={}",
                lin.n()
            )));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidReduction(format!("invalid shift range [{lo}, {hi}]")));
        }
        let sigmas: Vec<Complex64> = crate::dae::log_space(lo, hi, r)
            .into_iter()
            .map(|s| Complex64::new(s, 0.0))
            .collect();
        let transfers = sigmas
            .iter()
            .map(|&s| crate::dae::eval_transfer(lin, s))
            .collect::<Result<Vec<_>>>()?;
        let directions = lin.b.ncols().min(lin.c.nrows()).max(1);
        let mut cfg = Self {
            r,
            shifts: sigmas,
            right_tangents: Vec::with_capacity(r),
            left_tangents: Vec::with_capacity(r),
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        };
        // Leading singular directions first. When clustered shifts with the
        // same dominant direction give a collinear basis, cycle shift i
        // through the (i mod k)-th singular pair instead.
        for rotate in [false, true] {
            cfg.right_tangents.clear();
            cfg.left_tangents.clear();
            for (i, h) in transfers.iter().enumerate() {
                let (b, c) = singular_pair(h, if rotate { i % directions } else { 0 });
                cfg.right_tangents.push(b);
                cfg.left_tangents.push(c);
            }
            if rotate || directions == 1 {
                break;
            }
            match build_krylov_bases(lin, &cfg.shifts, &cfg.right_tangents, &cfg.left_tangents) {
                Err(Error::RankDeficient { .. }) => continue,
                _ => break,
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidReduction("reduced order must be at least 1".into()));
        }
        if self.shifts.len() != self.r || self.right_tangents.len() != self.r || self.left_tangents.len() != self.r {
            return Err(Error::InvalidReduction(format!(
                "expected {} shifts and tangents, got {}/{}/{}",
                self.r,
                self.shifts.len(),
                self.right_tangents.len(),
                self.left_tangents.len()
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidReduction(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidReduction("max_iter must be at least 1".into()));
        }
        for (i, (b, c)) in self.right_tangents.iter().zip(&self.left_tangents).enumerate() {
            if b.len() != m || c.len() != p {
                return Err(Error::InvalidReduction(format!(
                    "tangent {i} has dimensions {}/{}, expected {m}/{p}",
                    b.len(),
                    c.len()
                )));
            }
        }
        check_conjugate_closure(&self.shifts, &self.right_tangents, &self.left_tangents)?;
        Ok(())
    }
}

/// Right/left singular vectors of the `rank`-th largest singular value.
fn singular_pair(h: &CMatrix, rank: usize) -> (CVector, CVector) {
    let svd = h.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let k = order[rank.min(order.len() - 1)];
    let mut b: CVector = v_t.row(k).adjoint();
    let mut c: CVector = u.column(k).map(|z| z.conj());
    // For real σ the pair is real up to a common phase; make it real.
    linalg::align_phase(&mut b);
    linalg::align_phase(&mut c);
    let real = |v: &CVector| v.map(|z| Complex64::new(z.re, 0.0));
    if h.iter().all(|z| z.im == 0.0) {
        (real(&b), real(&c))
    } else {
        (b, c)
    }
}

fn is_real(s: Complex64) -> bool {
    s.im.abs() <= REAL_TOL * s.norm().max(1.0)
}

fn lex(a: &Complex64, b: &Complex64) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

/// Index of the conjugate partner of every complex shift.
fn conjugate_partners(shifts: &[Complex64]) -> Result<Vec<Option<usize>>> {
    let mut partner = vec![None; shifts.len()];
    for i in 0..shifts.len() {
        if is_real(shifts[i]) || partner[i].is_some() {
            continue;
        }
        let target = shifts[i].conj();
        let j = (0..shifts.len())
            .filter(|&j| j != i && partner[j].is_none() && !is_real(shifts[j]))
            .min_by(|&a, &b| (shifts[a] - target).norm().total_cmp(&(shifts[b] - target).norm()));
        match j {
            Some(j) if (shifts[j] - target).norm() <= 1e-8 * target.norm().max(1.0) => {
                partner[i] = Some(j);
                partner[j] = Some(i);
            }
            _ => {
                return Err(Error::InvalidReduction(format!(
                    "shift {} has no conjugate partner",
                    shifts[i]
                )))
            }
        }
    }
    Ok(partner)
}

fn check_conjugate_closure(shifts: &[Complex64], right: &[CVector], left: &[CVector]) -> Result<()> {
    let partner = conjugate_partners(shifts)?;
    let close = |a: &CVector, b: &CVector| (a - b.map(|z| z.conj())).norm() <= 1e-8 * a.norm().max(1e-300);
    for (i, pj) in partner.iter().enumerate() {
        match pj {
            Some(j) => {
                if !close(&right[i], &right[*j]) || !close(&left[i], &left[*j]) {
                    return Err(Error::InvalidReduction(format!(
                        "tangents of conjugate shifts {i} and {j} are not conjugate"
                    )));
                }
            }
            None => {
                let imag = right[i].iter().chain(left[i].iter()).map(|z| z.im.abs()).fold(0.0, f64::max);
                let scale = right[i].norm().max(left[i].norm()).max(1e-300);
                if imag > 1e-8 * scale {
                    return Err(Error::InvalidReduction(format!("real shift {i} has complex tangents")));
                }
            }
        }
    }
    Ok(())
}

/// Worker count for shifted solves: `NETMOR_THREADS` if set, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Real orthonormal projection bases plus the primitive complex Krylov columns.
#[derive(Debug, Clone)]
pub struct KrylovBases {
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Columns `(σᵢE - A)⁻¹ B bᵢ`.
    pub v_primitive: CMatrix,
    /// Columns `(σᵢE - A)⁻ᵀ Cᵀ cᵢ`.
    pub w_primitive: CMatrix,
}

type SolvePair = (CVector, CVector);

fn shifted_solve(lin: &LinearPart, s: Complex64, b: &CVector, c: &CVector) -> Result<SolvePair> {
    let lu = DenseLu::new(&linalg::shifted(&lin.e, &lin.a, s));
    let rcond = lu.rcond();
    if rcond < linalg::RCOND_FLOOR {
        return Err(Error::SingularShift { s, rcond });
    }
    let rhs_v = linalg::to_complex(&lin.b) * b;
    let rhs_w = linalg::to_complex(&lin.c).transpose() * c;
    Ok((lu.solve_vec(&rhs_v), lu.solve_transpose_vec(&rhs_w)))
}

pub fn build_krylov_bases(
    lin: &LinearPart,
    shifts: &[Complex64],
    right: &[CVector],
    left: &[CVector],
) -> Result<KrylovBases> {
    let r = shifts.len();
    if right.len() != r || left.len() != r {
        return Err(Error::InvalidReduction("shift and tangent counts differ".into()));
    }
    if r > lin.n() {
        return Err(Error::InvalidReduction(format!("{r} shifts exceed state dimension {}", lin.n())));
    }
    let partner = conjugate_partners(shifts)?;
    // One solve per real shift and per conjugate pair.
    let jobs: Vec<usize> = (0..r).filter(|&i| partner[i].is_none() || shifts[i].im > 0.0).collect();

    let workers = thread_cap().min(jobs.len()).max(1);
    let mut solved: Vec<Option<Result<SolvePair>>> = vec![None; r];
    if workers == 1 {
        for &i in &jobs {
            solved[i] = Some(shifted_solve(lin, shifts[i], &right[i], &left[i]));
        }
    } else {
        let chunk = jobs.len().div_ceil(workers);
        let results: Vec<Vec<(usize, Result<SolvePair>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&i| (i, shifted_solve(lin, shifts[i], &right[i], &left[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
        });
        for (i, res) in results.into_iter().flatten() {
            solved[i] = Some(res);
        }
    }

    let n = lin.n();
    let mut v_prim = CMatrix::zeros(n, r);
    let mut w_prim = CMatrix::zeros(n, r);
    for &i in &jobs {
        let (v, w) = solved[i].take().expect("job result")?;
        v_prim.set_column(i, &v);
        w_prim.set_column(i, &w);
        if let Some(j) = partner[i] {
            v_prim.set_column(j, &v.map(|z| z.conj()));
            w_prim.set_column(j, &w.map(|z| z.conj()));
        }
    }

    let realify = |prim: &CMatrix| {
        DMatrix::from_fn(n, r, |row, col| {
            let z = prim[(row, col)];
            if shifts[col].im >= 0.0 || partner[col].is_none() {
                z.re
            } else {
                z.im
            }
        })
    };
    let v = linalg::orthonormalize(&realify(&v_prim))?;
    let w = linalg::orthonormalize(&realify(&w_prim))?;
    Ok(KrylovBases {
        v,
        w,
        v_primitive: v_prim,
        w_primitive: w_prim,
    })
}

#[derive(Debug, Clone)]
pub struct TirkaResult {
    pub bases: KrylovBases,
    /// Shifts and tangents used to build the returned bases.
    pub shifts: Vec<Complex64>,
    pub right_tangents: Vec<CVector>,
    pub left_tangents: Vec<CVector>,
    /// Relative sorted-shift change per iteration.
    pub history: Vec<f64>,
    /// Shifts used at every iteration, starting with the initial ones.
    pub shift_history: Vec<Vec<Complex64>>,
    pub converged: bool,
}

impl TirkaResult {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

/// `‖sort(new) - sort(old)‖₂ / ‖sort(old)‖₂` with lexicographic (re, im) sorting.
pub fn shift_change(new: &[Complex64], old: &[Complex64]) -> f64 {
    let mut a = new.to_vec();
    let mut b = old.to_vec();
    a.sort_by(lex);
    b.sort_by(lex);
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone)]
struct Candidate {
    shift: Complex64,
    b: CVector,
    c: CVector,
}

fn real_vec(v: &CVector) -> CVector {
    v.map(|z| Complex64::new(z.re, 0.0))
}

/// Right/left eigenvectors of the reduced pencil for one eigenvalue,
/// scaled so that `yᵀ E_r x = 1`.
fn eigvec_pair(a_r: &DMatrix<f64>, e_r: &DMatrix<f64>, lambda: Complex64, real: bool) -> (CVector, CVector) {
    let m = CMatrix::from_fn(a_r.nrows(), a_r.ncols(), |i, j| a_r[(i, j)] - lambda * e_r[(i, j)]);
    let mut x = linalg::null_vector(&m);
    let mut y = linalg::null_vector(&m.transpose());
    if real {
        linalg::align_phase(&mut x);
        linalg::align_phase(&mut y);
        x = real_vec(&x);
        y = real_vec(&y);
    }
    let scale = (y.transpose() * linalg::to_complex(e_r) * &x)[(0, 0)];
    if scale.norm() > 1e-300 {
        y /= scale;
    }
    (x, y)
}

/// Next shifts and tangents from the reduced pencil, with reflection of
/// unstable candidates and replacement of infinite ones.
fn update_shifts(
    a_r: &DMatrix<f64>,
    e_r: &DMatrix<f64>,
    b_r: &DMatrix<f64>,
    c_r: &DMatrix<f64>,
    previous: &[Candidate],
) -> Result<Vec<Candidate>> {
    let r = previous.len();
    let eigs = linalg::generalized_eigenvalues(a_r, e_r)?;
    let b_rc = linalg::to_complex(b_r);
    let c_rc = linalg::to_complex(c_r);
    let mut next = Vec::with_capacity(r);
    for ev in eigs {
        let lambda = match ev {
            GenEigenvalue::Finite(z) if z.re.is_finite() && z.im.is_finite() => z,
            _ => continue,
        };
        let real = is_real(lambda);
        if !real && lambda.im < 0.0 {
            continue;
        }
        let lambda = if real { Complex64::new(lambda.re, 0.0) } else { lambda };
        let (x, y) = eigvec_pair(a_r, e_r, lambda, real);
        let b = b_rc.transpose() * &y;
        let c = &c_rc * &x;
        let mut shift = -lambda;
        if shift.re < 0.0 {
            shift = -shift.conj();
        }
        if real {
            next.push(Candidate {
                shift,
                b: real_vec(&b),
                c: real_vec(&c),
            });
        } else {
            next.push(Candidate {
                shift: shift.conj(),
                b: b.map(|z| z.conj()),
                c: c.map(|z| z.conj()),
            });
            next.push(Candidate { shift, b, c });
        }
    }
    next.sort_by(|a, b| lex(&a.shift, &b.shift));
    if next.len() > r {
        next.truncate(r);
    }
    if next.len() < r {
        let mut prev = previous.to_vec();
        prev.sort_by(|a, b| lex(&a.shift, &b.shift));
        let fill = &prev[next.len()..];
        for (k, cand) in fill.iter().enumerate() {
            let conj = cand.shift.conj();
            let has_partner = is_real(cand.shift)
                || fill
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != k && (o.shift - conj).norm() <= 1e-8 * conj.norm().max(1.0));
            if has_partner {
                next.push(cand.clone());
            } else {
                next.push(Candidate {
                    shift: Complex64::new(cand.shift.re, 0.0),
                    b: real_vec(&cand.b),
                    c: real_vec(&cand.c),
                });
            }
        }
    }
    // An odd truncation may have split a pair; make any orphan real.
    let shifts: Vec<Complex64> = next.iter().map(|c| c.shift).collect();
    if conjugate_partners(&shifts).is_err() {
        for i in 0..next.len() {
            let conj = next[i].shift.conj();
            let paired = is_real(next[i].shift)
                || next
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != i && (o.shift - conj).norm() <= 1e-8 * conj.norm().max(1.0));
            if !paired {
                next[i] = Candidate {
                    shift: Complex64::new(next[i].shift.re, 0.0),
                    b: real_vec(&next[i].b),
                    c: real_vec(&next[i].c),
                };
            }
        }
    }
    Ok(next)
}

/// Projected matrices `(E_r, A_r, B_r, C_r)` without correction.
pub fn project(lin: &LinearPart, v: &DMatrix<f64>, w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let wt = w.transpose();
    (&wt * &lin.e * v, &wt * &lin.a * v, &wt * &lin.b, &lin.c * v)
}

pub fn tirka_iterate(lin: &LinearPart, cfg: &TirkaConfig) -> Result<TirkaResult> {
    cfg.validate(lin.m(), lin.p())?;
    if cfg.r > lin.n() {
        return Err(Error::InvalidReduction(format!(
            "reduced order {} exceeds state dimension {}",
            cfg.r,
            lin.n()
        )));
    }
    let mut current: Vec<Candidate> = (0..cfg.r)
        .map(|i| Candidate {
            shift: cfg.shifts[i],
            b: cfg.right_tangents[i].clone(),
            c: cfg.left_tangents[i].clone(),
        })
        .collect();
    let mut history = Vec::new();
    let mut shift_history = Vec::new();

    loop {
        let shifts: Vec<Complex64> = current.iter().map(|c| c.shift).collect();
        let right: Vec<CVector> = current.iter().map(|c| c.b.clone()).collect();
        let left: Vec<CVector> = current.iter().map(|c| c.c.clone()).collect();
        shift_history.push(shifts.clone());
        let bases = build_krylov_bases(lin, &shifts, &right, &left)?;
        let (e_r, a_r, b_r, c_r) = project(lin, &bases.v, &bases.w);
        let next = update_shifts(&a_r, &e_r, &b_r, &c_r, &current)?;
        let new_shifts: Vec<Complex64> = next.iter().map(|c| c.shift).collect();
        let err = shift_change(&new_shifts, &shifts);
        history.push(err);
        let converged = err < cfg.tol;
        if converged || history.len() >= cfg.max_iter {
            return Ok(TirkaResult {
                bases,
                shifts,
                right_tangents: right,
                left_tangents: left,
                history,
                shift_history,
                converged,
            });
        }
        current = next;
    }
}

/// Row/column index sets of the algebraic part, and the polynomial part `D`.
pub fn estimate_polynomial_part(lin: &LinearPart, diff_mask: &[bool]) -> Result<DMatrix<f64>> {
    let n = lin.n();
    if diff_mask.len() != n {
        return Err(Error::dims("diff_mask", n, diff_mask.len()));
    }
    let base = lin.d.clone().unwrap_or_else(|| DMatrix::zeros(lin.p(), lin.m()));
    let rows: Vec<usize> = (0..n).filter(|&i| !diff_mask[i]).collect();
    if rows.is_empty() {
        return Ok(base);
    }
    let cols: Vec<usize> = (0..n).filter(|&j| lin.e.column(j).iter().all(|&v| v == 0.0)).collect();
    if cols.len() != rows.len() {
        return Err(Error::HigherIndex);
    }
    let a22 = DMatrix::from_fn(rows.len(), cols.len(), |i, j| lin.a[(rows[i], cols[j])]);
    let lu = DenseLu::new(&a22);
    if lu.is_numerically_singular() {
        return Err(Error::HigherIndex);
    }
    let b2 = DMatrix::from_fn(rows.len(), lin.m(), |i, j| lin.b[(rows[i], j)]);
    let c2 = DMatrix::from_fn(lin.p(), cols.len(), |i, j| lin.c[(i, cols[j])]);
    let d = base - c2 * lu.solve(&b2);

    let h = crate::dae::eval_transfer(lin, Complex64::new(0.0, POLY_PROBE))?;
    let deviation = (h - linalg::to_complex(&d)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let dnorm = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if deviation > 1e-4 * dnorm.max(1.0) {
        return Err(Error::PolynomialCrossCheck { deviation });
    }
    Ok(d)
}

/// `F`, `F̄` with `FᵀV = R` and `WᵀF̄ = L`, where `R` and `L` are the tangent
/// stacks expressed in the coordinates of the real bases.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionPair {
    pub f: DMatrix<f64>,
    pub f_bar: DMatrix<f64>,
    /// `FᵀV` (m×r).
    pub right_coords: DMatrix<f64>,
    /// `WᵀF̄` (r×p).
    pub left_coords: DMatrix<f64>,
}

impl CorrectionPair {
    /// `‖Fᵀ𝒱 - [b₁ … b_r]‖` and `‖F̄ᵀ𝒲 - [c₁ … c_r]‖` on the primitive bases.
    pub fn residuals(&self, bases: &KrylovBases, right: &[CVector], left: &[CVector]) -> (f64, f64) {
        let rstack = CMatrix::from_columns(right);
        let lstack = CMatrix::from_columns(left);
        let rr = linalg::to_complex(&self.f).transpose() * &bases.v_primitive - rstack;
        let ll = linalg::to_complex(&self.f_bar).transpose() * &bases.w_primitive - lstack;
        (rr.norm(), ll.norm())
    }
}

fn tangent_coords(basis: &DMatrix<f64>, primitive: &CMatrix, tangents: &[CVector]) -> Result<DMatrix<f64>> {
    let z = linalg::to_complex(&basis.transpose()) * primitive;
    let lu = DenseLu::new(&z);
    if lu.is_numerically_singular() {
        return Err(Error::RankDeficient {
            indices: (0..tangents.len()).collect(),
        });
    }
    // stack · Z⁻¹ = (Z⁻ᵀ stackᵀ)ᵀ
    let stack = CMatrix::from_columns(tangents);
    let mut out = CMatrix::zeros(stack.nrows(), stack.ncols());
    for i in 0..stack.nrows() {
        let row: CVector = stack.row(i).transpose();
        out.set_row(i, &lu.solve_transpose_vec(&row).transpose());
    }
    let imag = out.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let scale = out.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    if imag > 1e-6 * scale {
        return Err(Error::InvalidReduction(
            "tangent coordinates are not real; shifts or tangents are not conjugate-closed".into(),
        ));
    }
    Ok(out.map(|z| z.re))
}

pub fn solve_correction_pair(bases: &KrylovBases, right: &[CVector], left: &[CVector]) -> Result<CorrectionPair> {
    let right_coords = tangent_coords(&bases.v, &bases.v_primitive, right)?;
    let left_t = tangent_coords(&bases.w, &bases.w_primitive, left)?;
    let f = linalg::min_norm_transpose_solution(&bases.v, &right_coords)?;
    let f_bar = linalg::min_norm_transpose_solution(&bases.w, &left_t)?;
    Ok(CorrectionPair {
        f,
        f_bar,
        right_coords,
        left_coords: left_t.transpose(),
    })
}

/// Operating point around which the reduced state is a deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Clone)]
pub struct ReducedModel {
    pub e_r: DMatrix<f64>,
    /// Uncorrected `WᵀAV`.
    pub a_r: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub d_r: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub shifts: Vec<Complex64>,
    pub right_tangents: Vec<CVector>,
    pub left_tangents: Vec<CVector>,
    pub history: Vec<f64>,
    pub converged: bool,
    pub reference: Option<Reference>,
    /// Full-model output at the reference, `C x_ref (+ D u_ref)`.
    pub y_ref: DVector<f64>,
    pub g_r: SharedNonlinearity,
}

impl std::fmt::Debug for ReducedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedModel")
            .field("r", &self.r())
            .field("shifts", &self.shifts)
            .field("converged", &self.converged)
            .field("iterations", &self.history.len())
            .finish()
    }
}

impl ReducedModel {
    pub fn r(&self) -> usize {
        self.e_r.nrows()
    }

    /// `(E_r, Â, B̂, Ĉ, D_r)`.
    pub fn linear_part(&self) -> LinearPart {
        LinearPart {
            e: self.e_r.clone(),
            a: self.a_hat.clone(),
            b: self.b_hat.clone(),
            c: self.c_hat.clone(),
            d: Some(self.d_r.clone()),
        }
    }

    /// Reduced DAE `E_r ẋ_r = Â x_r + B̂ u + G_r(x_r, u)`,
    /// `y = Ĉ x_r + D_r u + y₀`.
    pub fn to_dae(&self) -> Result<UnifiedDae> {
        let dae = make_dae(
            self.e_r.clone(),
            self.a_hat.clone(),
            self.b_hat.clone(),
            self.c_hat.clone(),
            self.g_r.clone(),
        )?
        .with_feedthrough(self.d_r.clone())?;
        match &self.reference {
            Some(_) => dae.with_output_offset(self.output_offset()),
            None => Ok(dae),
        }
    }

    /// Constant output term `C x_ref - D_r u_ref` (zero without a reference).
    pub fn output_offset(&self) -> DVector<f64> {
        match &self.reference {
            Some(rf) => {
                &self.y_ref - &self.d_r * &rf.u
            }
            None => DVector::zeros(self.c_hat.nrows()),
        }
    }

    pub fn reduce_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let dx = match &self.reference {
            Some(rf) => x - &rf.x,
            None => x.clone(),
        };
        self.v.transpose() * dx
    }

    pub fn lift_state(&self, x_r: &DVector<f64>) -> DVector<f64> {
        let x = &self.v * x_r;
        match &self.reference {
            Some(rf) => x + &rf.x,
            None => x,
        }
    }
}

struct ProjectedNonlinearity {
    full: SharedNonlinearity,
    v: DMatrix<f64>,
    wt: DMatrix<f64>,
    x_ref: Option<DVector<f64>>,
    /// `Wᵀ(A x_ref + B u_ref) - B̂ u_ref` when a reference is used.
    constant: Option<DVector<f64>>,
    zero: bool,
}

impl Nonlinearity for ProjectedNonlinearity {
    fn eval(&self, x_r: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        let mut x = &self.v * x_r;
        if let Some(x_ref) = &self.x_ref {
            x += x_ref;
        }
        let mut g = DVector::zeros(self.v.nrows());
        self.full.eval(&x, u, &mut g)?;
        out.copy_from(&(&self.wt * g));
        if let Some(k) = &self.constant {
            *out += k;
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.zero
    }
}

/// Projected nonlinearity `G_r` and the full output at the reference.
///
/// Without a reference this is `Wᵀ G(V x_r, u)`; with one, the state is a
/// deviation from `x_ref` and the constant `Wᵀ(A x_ref + B u_ref) - B̂ u_ref`
/// is folded in.
pub fn project_nonlinearity(
    lin: &LinearPart,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    g: SharedNonlinearity,
    reference: Option<&Reference>,
) -> Result<(SharedNonlinearity, DVector<f64>)> {
    let wt = w.transpose();
    let (x_ref, constant, full_y) = match reference {
        Some(rf) => {
            if rf.x.len() != lin.n() || rf.u.len() != lin.m() {
                return Err(Error::dims(
                    "reference",
                    format!("{}/{}", lin.n(), lin.m()),
                    format!("{}/{}", rf.x.len(), rf.u.len()),
                ));
            }
            let k = &wt * (&lin.a * &rf.x + &lin.b * &rf.u) - b_hat * &rf.u;
            let mut y = &lin.c * &rf.x;
            if let Some(d0) = &lin.d {
                y += d0 * &rf.u;
            }
            (Some(rf.x.clone()), Some(k), y)
        }
        None => (None, None, DVector::zeros(lin.p())),
    };
    let zero = g.is_zero() && reference.is_none();
    let g_r: SharedNonlinearity = Arc::new(ProjectedNonlinearity {
        full: g,
        v: v.clone(),
        wt,
        x_ref,
        constant,
        zero,
    });
    Ok((g_r, full_y))
}

/// Assembles `Â = A_r + (WᵀF̄) D (FᵀV)`, `B̂ = WᵀB - (WᵀF̄) D`, `Ĉ = CV - D (FᵀV)`.
///
/// `d_r` is the full polynomial part; the correction uses `d_r` minus any
/// feed-through already present in `lin`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_reduced(
    lin: &LinearPart,
    tirka: &TirkaResult,
    d_r: &DMatrix<f64>,
    pair: &CorrectionPair,
    g: SharedNonlinearity,
    reference: Option<Reference>,
) -> Result<ReducedModel> {
    let (v, w) = (&tirka.bases.v, &tirka.bases.w);
    if d_r.shape() != (lin.p(), lin.m()) {
        return Err(Error::dims(
            "D_r",
            format!("{}x{}", lin.p(), lin.m()),
            format!("{}x{}", d_r.nrows(), d_r.ncols()),
        ));
    }
    if v.nrows() != lin.n() || w.nrows() != lin.n() || v.ncols() != w.ncols() {
        return Err(Error::dims(
            "projection bases",
            format!("{} rows, equal widths", lin.n()),
            format!("V {:?}, W {:?}", v.shape(), w.shape()),
        ));
    }
    let (e_r, a_r, b_r, c_r) = project(lin, v, w);
    let dc = match &lin.d {
        Some(d0) => d_r - d0,
        None => d_r.clone(),
    };
    let l = &pair.left_coords;
    let rc = &pair.right_coords;
    let a_hat = &a_r + l * &dc * rc;
    let b_hat = &b_r - l * &dc;
    let c_hat = &c_r - &dc * rc;

    let (g_r, full_y) = project_nonlinearity(lin, v, w, &b_hat, g, reference.as_ref())?;

    Ok(ReducedModel {
        e_r,
        a_r,
        a_hat,
        b_hat,
        c_hat,
        d_r: d_r.clone(),
        v: v.clone(),
        w: w.clone(),
        shifts: tirka.shifts.clone(),
        right_tangents: tirka.right_tangents.clone(),
        left_tangents: tirka.left_tangents.clone(),
        history: tirka.history.clone(),
        converged: tirka.converged,
        reference,
        y_ref: full_y,
        g_r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationResidual {
    pub shift: Complex64,
    pub right: f64,
    pub left: f64,
    pub bitangential: f64,
}

impl InterpolationResidual {
    pub fn max(&self) -> f64 {
        self.right.max(self.left).max(self.bitangential)
    }
}

/// `(H(s), H'(s))` with `H'(s) = -C (sE-A)⁻¹ E (sE-A)⁻¹ B`.
fn transfer_and_derivative(lin: &LinearPart, s: Complex64) -> Result<(CMatrix, CMatrix)> {
    let lu = DenseLu::new(&linalg::shifted(&lin.e, &lin.a, s));
    let rcond = lu.rcond();
    if rcond < linalg::RCOND_FLOOR {
        return Err(Error::SingularShift { s, rcond });
    }
    let c = linalg::to_complex(&lin.c);
    let x = lu.solve(&linalg::to_complex(&lin.b));
    let mut h = &c * &x;
    if let Some(d) = &lin.d {
        h += linalg::to_complex(d);
    }
    let dx = lu.solve(&(linalg::to_complex(&lin.e) * &x));
    Ok((h, -(c * dx)))
}

fn rel(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn verify_interpolation(lin: &LinearPart, reduced: &ReducedModel) -> Result<Vec<InterpolationResidual>> {
    verify_interpolation_at(lin, reduced, &reduced.shifts)
}

/// Residuals at arbitrary points, using the stored tangents.
pub fn verify_interpolation_at(lin: &LinearPart, reduced: &ReducedModel, shifts: &[Complex64]) -> Result<Vec<InterpolationResidual>> {
    let red = reduced.linear_part();
    shifts
        .iter()
        .zip(reduced.right_tangents.iter().zip(&reduced.left_tangents))
        .map(|(&s, (b, c))| {
            let (h, dh) = transfer_and_derivative(lin, s)?;
            let (hr, dhr) = transfer_and_derivative(&red, s)?;
            let hb = &h * b;
            let ch = c.transpose() * &h;
            let cdb = (c.transpose() * &dh * b)[(0, 0)];
            Ok(InterpolationResidual {
                shift: s,
                right: rel((&hb - &hr * b).norm(), hb.norm()),
                left: rel((&ch - c.transpose() * &hr).norm(), ch.norm()),
                bitangential: rel((cdb - (c.transpose() * &dhr * b)[(0, 0)]).norm(), cdb.norm()),
            })
        })
        .collect()
}

/// How the reduced feed-through is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Feedthrough {
    /// Estimate the polynomial part of the full model and retain it.
    #[default]
    Retain,
    /// Force `D_r = 0` (plain tangential IRKA).
    Zero,
}

#[derive(Debug, Clone, Default)]
pub struct ReduceOptions {
    pub feedthrough: Feedthrough,
    pub reference: Option<Reference>,
}

/// Full pipeline: IRKA, polynomial part, correction pair, reduced model.
pub fn reduce(dae: &UnifiedDae, cfg: &TirkaConfig, opts: &ReduceOptions) -> Result<ReducedModel> {
    let lin = dae.linear_part();
    let tirka = tirka_iterate(&lin, cfg)?;
    let d_r = match opts.feedthrough {
        Feedthrough::Retain => estimate_polynomial_part(&lin, dae.diff_mask())?,
        Feedthrough::Zero => DMatrix::zeros(lin.p(), lin.m()),
    };
    let pair = solve_correction_pair(&tirka.bases, &tirka.right_tangents, &tirka.left_tangents)?;
    assemble_reduced(&lin, &tirka, &d_r, &pair, dae.nonlinearity().clone(), opts.reference.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dae::eval_transfer;
    use approx::assert_relative_eq;

    fn siso2() -> LinearPart {
        LinearPart::new(
            DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        )
        .unwrap()
    }

    fn one() -> CVector {
        CVector::from_element(1, Complex64::new(1.0, 0.0))
    }

    #[test]
    fn single_shift_basis_is_scaled_input() {
        let lin = LinearPart::new(
            DMatrix::identity(3, 3),
            -DMatrix::<f64>::identity(3, 3),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
        )
        .unwrap();
        let bases = build_krylov_bases(&lin, &[Complex64::new(1.0, 0.0)], &[one()], &[one()]).unwrap();
        let expected = DVector::from_vec(vec![0.5, 1.0, 1.0]);
        let prim: DVector<f64> = bases.v_primitive.column(0).map(|z| z.re);
        assert_relative_eq!(prim, expected.clone(), epsilon = 1e-15);
        let unit = expected.normalize();
        assert_relative_eq!(bases.v.column(0).dot(&unit).abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn conjugate_pair_spans_complex_pair() {
        let lin = LinearPart::new(
            DMatrix::identity(4, 4),
            DMatrix::from_row_slice(4, 4, &[-1.0, 2.0, 0.0, 0.0, -2.0, -1.0, 0.0, 0.0, 0.0, 0.0, -3.0, 1.0, 0.0, 0.0, 0.0, -4.0]),
            DMatrix::from_column_slice(4, 1, &[1.0, 0.5, -1.0, 2.0]),
            DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 1.0]),
        )
        .unwrap();
        let s = Complex64::new(0.5, 1.5);
        let bases = build_krylov_bases(&lin, &[s, s.conj()], &[one(), one()], &[one(), one()]).unwrap();
        let prim = &bases.v_primitive;
        let vc = linalg::to_complex(&bases.v);
        let proj = &vc * vc.adjoint() * prim;
        assert!((proj - prim).norm() < 1e-12 * prim.norm());
        assert!(bases.v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn collinear_shifts_rejected() {
        let lin = siso2();
        let s = Complex64::new(1.0, 0.0);
        match build_krylov_bases(&lin, &[s, s], &[one(), one()], &[one(), one()]) {
            Err(Error::RankDeficient { indices }) => assert_eq!(indices, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn singular_shift_names_sigma() {
        let lin = siso2();
        let s = Complex64::new(-1.0, 0.0);
        match build_krylov_bases(&lin, &[s], &[one()], &[one()]) {
            Err(Error::SingularShift { s: got, .. }) => assert_eq!(got, s),
            other => panic!("{other:?}"),
        }
    }

    /// Fixed point of `σ ↦ -λ(A_r(σ))` for r = 1 found by bisection on a grid.
    fn grid_fixed_point(lin: &LinearPart) -> f64 {
        let residual = |sigma: f64| {
            let s = Complex64::new(sigma, 0.0);
            let bases = build_krylov_bases(lin, &[s], &[one()], &[one()]).unwrap();
            let (e_r, a_r, _, _) = project(lin, &bases.v, &bases.w);
            sigma + a_r[(0, 0)] / e_r[(0, 0)]
        };
        let grid: Vec<f64> = (0..=250).map(|k| 0.5 + 2.5 * k as f64 / 250.0).collect();
        let (mut lo, mut hi) = grid
            .windows(2)
            .map(|w| (w[0], w[1]))
            .find(|(a, b)| residual(*a) * residual(*b) <= 0.0)
            .expect("sign change in [0.5, 3]");
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if residual(lo) * residual(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn siso_fixed_point_matches_grid_search() {
        let lin = siso2();
        let cfg = TirkaConfig::preset(&lin, 1).unwrap();
        let res = tirka_iterate(&lin, &cfg).unwrap();
        assert!(res.converged);
        let oracle = grid_fixed_point(&lin);
        assert_relative_eq!(res.shifts[0].re, oracle, max_relative = 1e-5);
        assert_eq!(res.shifts[0].im, 0.0);
    }

    #[test]
    fn full_order_projection_reproduces_transfer() {
        let lin = siso2();
        let mut cfg = TirkaConfig::preset(&lin, 2).unwrap();
        cfg.max_iter = 5;
        let res = tirka_iterate(&lin, &cfg).unwrap();
        let d = DMatrix::zeros(1, 1);
        let pair = solve_correction_pair(&res.bases, &res.right_tangents, &res.left_tangents).unwrap();
        let red = assemble_reduced(&lin, &res, &d, &pair, crate::dae::zero_nonlinearity(), None).unwrap();
        let rl = red.linear_part();
        for k in 0..20 {
            let s = Complex64::new(0.1 * k as f64, 0.37 * k as f64 - 2.0);
            let h = eval_transfer(&lin, s).unwrap()[(0, 0)];
            let hr = eval_transfer(&rl, s).unwrap()[(0, 0)];
            assert!((h - hr).norm() <= 1e-10 * h.norm());
        }
    }

    #[test]
    fn polynomial_part_examples() {
        let lin = LinearPart::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            -DMatrix::<f64>::identity(2, 2),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        )
        .unwrap();
        let d = estimate_polynomial_part(&lin, &[true, false]).unwrap();
        assert_relative_eq!(d[(0, 0)], 1.0, epsilon = 1e-15);

        let ode = siso2();
        assert_eq!(estimate_polynomial_part(&ode, &[true, true]).unwrap(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn higher_index_detected() {
        // x1' = x2 + u, 0 = x1: A22 = 0
        let lin = LinearPart::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        let err = estimate_polynomial_part(&lin, &[true, false]).unwrap_err();
        assert_eq!(err, Error::HigherIndex);
        assert!(err.to_string().contains("higher-index DAE"));
    }

    #[test]
    fn correction_pair_for_orthonormal_basis() {
        let lin = siso2();
        let s = Complex64::new(1.0, 0.0);
        let bases = build_krylov_bases(&lin, &[s], &[one()], &[one()]).unwrap();
        let pair = solve_correction_pair(&bases, &[one()], &[one()]).unwrap();
        let (rr, ll) = pair.residuals(&bases, &[one()], &[one()]);
        assert!(rr <= 1e-12 && ll <= 1e-12, "{rr} {ll}");
        // m = p = r = 1: Fᵀv = 1 for the primitive column v
        let v = bases.v_primitive.column(0).map(|z| z.re);
        assert_relative_eq!(pair.f.column(0).dot(&v), 1.0, epsilon = 1e-14);
        assert_relative_eq!(pair.f.clone(), &bases.v * pair.right_coords.transpose(), epsilon = 1e-15);
    }

    #[test]
    fn zero_feedthrough_leaves_projection_unchanged() {
        let lin = siso2();
        let cfg = TirkaConfig::preset(&lin, 1).unwrap();
        let res = tirka_iterate(&lin, &cfg).unwrap();
        let pair = solve_correction_pair(&res.bases, &res.right_tangents, &res.left_tangents).unwrap();
        let red = assemble_reduced(&lin, &res, &DMatrix::zeros(1, 1), &pair, crate::dae::zero_nonlinearity(), None).unwrap();
        let (e_r, a_r, b_r, c_r) = project(&lin, &res.bases.v, &res.bases.w);
        assert_eq!(red.e_r, e_r);
        assert_eq!(red.a_hat, a_r);
        assert_eq!(red.b_hat, b_r);
        assert_eq!(red.c_hat, c_r);
        assert!(red.g_r.is_zero());
    }

    #[test]
    fn shift_change_metric() {
        let a = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)];
        let b = [Complex64::new(2.0, 0.0), Complex64::new(1.0, 0.0)];
        assert_eq!(shift_change(&a, &b), 0.0);
        let c = [Complex64::new(1.0, 0.0), Complex64::new(3.0, 0.0)];
        assert_relative_eq!(shift_change(&c, &b), 1.0 / 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn unpaired_complex_shift_rejected() {
        let lin = siso2();
        let mut cfg = TirkaConfig::preset(&lin, 1).unwrap();
        cfg.shifts[0] = Complex64::new(1.0, 1.0);
        assert!(matches!(cfg.validate(1, 1), Err(Error::InvalidReduction(_))));
    }
}
