//! The unified descriptor form `E ẋ = A x + B u + G(x, u)`, `y = C x`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, DenseLu};

/// The nonlinear term `G(x, u)` of a unified DAE.
///
/// Implementations write into `out`, which always has the state dimension.
pub trait Nonlinearity: Send + Sync {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()>;

    /// Whether `G` is identically zero.
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNonlinearity;

impl Nonlinearity for ZeroNonlinearity {
    fn eval(&self, _x: &DVector<f64>, _u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// Adapter turning a closure into a [`Nonlinearity`].
pub struct FnNonlinearity<F>(pub F);

impl<F> Nonlinearity for FnNonlinearity<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>, &mut DVector<f64>) -> Result<()> + Send + Sync,
{
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        (self.0)(x, u, out)
    }
}

pub type SharedNonlinearity = Arc<dyn Nonlinearity>;

pub fn zero_nonlinearity() -> SharedNonlinearity {
    Arc::new(ZeroNonlinearity)
}

/// Shifts probed for pencil regularity at construction.
pub const REGULARITY_PROBES: [f64; 2] = [1.0, std::f64::consts::E];

/// A validated unified DAE. Immutable after construction.
#[derive(Clone)]
pub struct UnifiedDae {
    e: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: Option<DMatrix<f64>>,
    output_offset: Option<DVector<f64>>,
    g: SharedNonlinearity,
    diff_mask: Vec<bool>,
}

impl fmt::Debug for UnifiedDae {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnifiedDae")
            .field("n", &self.n())
            .field("m", &self.m())
            .field("p", &self.p())
            .field("algebraic_rows", &self.algebraic_rows())
            .finish()
    }
}

/// Builds and validates a unified DAE.
pub fn make_dae(
    e: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    g: SharedNonlinearity,
) -> Result<UnifiedDae> {
    let n = e.nrows();
    if !e.is_square() {
        return Err(Error::dims("E", format!("{n}x{n}"), format!("{}x{}", e.nrows(), e.ncols())));
    }
    if a.shape() != (n, n) {
        return Err(Error::dims("A", format!("{n}x{n}"), format!("{}x{}", a.nrows(), a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::dims("B rows", n, b.nrows()));
    }
    if c.ncols() != n {
        return Err(Error::dims("C columns", n, c.ncols()));
    }

    let diff_mask: Vec<bool> = (0..n).map(|i| e.row(i).iter().any(|&v| v != 0.0)).collect();

    let mut first_row = None;
    let mut regular = false;
    for &sigma in &REGULARITY_PROBES {
        let lu = DenseLu::new(&(&e * sigma - &a));
        if !lu.is_numerically_singular() {
            regular = true;
            break;
        }
        first_row.get_or_insert(lu.zero_pivot().unwrap_or(n.saturating_sub(1)));
    }
    if !regular && n > 0 {
        return Err(Error::SingularPencil {
            probes: REGULARITY_PROBES.to_vec(),
            row: first_row.unwrap_or(0),
        });
    }

    Ok(UnifiedDae {
        e,
        a,
        b,
        c,
        d: None,
        output_offset: None,
        g,
        diff_mask,
    })
}

impl UnifiedDae {
    /// Adds a direct feed-through `y = C x + D u`.
    pub fn with_feedthrough(mut self, d: DMatrix<f64>) -> Result<Self> {
        if d.shape() != (self.p(), self.m()) {
            return Err(Error::dims(
                "D",
                format!("{}x{}", self.p(), self.m()),
                format!("{}x{}", d.nrows(), d.ncols()),
            ));
        }
        self.d = Some(d);
        Ok(self)
    }

    /// Adds a constant output offset `y = C x + D u + y₀`.
    pub fn with_output_offset(mut self, y0: DVector<f64>) -> Result<Self> {
        if y0.len() != self.p() {
            return Err(Error::dims("output offset", self.p(), y0.len()));
        }
        self.output_offset = Some(y0);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> Option<&DMatrix<f64>> {
        self.d.as_ref()
    }
    pub fn output_offset(&self) -> Option<&DVector<f64>> {
        self.output_offset.as_ref()
    }
    pub fn nonlinearity(&self) -> &SharedNonlinearity {
        &self.g
    }
    pub fn diff_mask(&self) -> &[bool] {
        &self.diff_mask
    }

    pub fn algebraic_rows(&self) -> usize {
        self.diff_mask.iter().filter(|d| !**d).count()
    }

    pub fn eval_g(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        self.g.eval(x, u, out)
    }

    /// `y = C x + D u + y₀`.
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut y = &self.c * x;
        if let Some(d) = &self.d {
            y += d * u;
        }
        if let Some(y0) = &self.output_offset {
            y += y0;
        }
        y
    }

    pub fn linear_part(&self) -> LinearPart {
        LinearPart {
            e: self.e.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
        }
    }
}

/// `(E, A, B, C[, D])` with the nonlinearity dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPart {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: Option<DMatrix<f64>>,
}

impl LinearPart {
    pub fn new(e: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = e.nrows();
        if !e.is_square() || a.shape() != (n, n) || b.nrows() != n || c.ncols() != n {
            return Err(Error::dims(
                "linear part",
                format!("E,A {n}x{n}; B {n} rows; C {n} cols"),
                format!(
                    "E {:?}, A {:?}, B {:?}, C {:?}",
                    e.shape(),
                    a.shape(),
                    b.shape(),
                    c.shape()
                ),
            ));
        }
        Ok(Self { e, a, b, c, d: None })
    }

    pub fn with_feedthrough(mut self, d: DMatrix<f64>) -> Result<Self> {
        if d.shape() != (self.p(), self.m()) {
            return Err(Error::dims(
                "D",
                format!("{}x{}", self.p(), self.m()),
                format!("{}x{}", d.nrows(), d.ncols()),
            ));
        }
        self.d = Some(d);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSample {
    pub s: Complex64,
    pub h: CMatrix,
}

/// `H(s) = C (sE - A)⁻¹ B + D`, from one factorization and `m` solves.
pub fn eval_transfer(lin: &LinearPart, s: Complex64) -> Result<CMatrix> {
    let lu = DenseLu::new(&linalg::shifted(&lin.e, &lin.a, s));
    let rcond = lu.rcond();
    if rcond < linalg::RCOND_FLOOR {
        return Err(Error::SingularShift { s, rcond });
    }
    let x = lu.solve(&linalg::to_complex(&lin.b));
    let mut h = linalg::to_complex(&lin.c) * x;
    if let Some(d) = &lin.d {
        h += linalg::to_complex(d);
    }
    Ok(h)
}

pub fn transfer_sample(lin: &LinearPart, s: Complex64) -> Result<TransferSample> {
    Ok(TransferSample {
        s,
        h: eval_transfer(lin, s)?,
    })
}

/// `(ω, σ_max(H(iω)))` for each frequency of a positive increasing grid.
pub fn sigma_max_sweep(lin: &LinearPart, freqs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if freqs.is_empty() {
        return Err(Error::EmptyFrequencyGrid);
    }
    for (i, w) in freqs.iter().enumerate() {
        if !(*w > 0.0) || (i > 0 && *w <= freqs[i - 1]) {
            return Err(Error::InvalidFrequencyGrid { index: i });
        }
    }
    freqs
        .iter()
        .map(|&w| {
            let h = eval_transfer(lin, Complex64::new(0.0, w)).map_err(|e| Error::AtFrequency {
                omega: w,
                source: Box::new(e),
            })?;
            Ok((w, linalg::largest_singular_value(&h)))
        })
        .collect()
}

/// `count` points logarithmically spaced over `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}
