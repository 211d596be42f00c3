//! Dense linear-algebra contracts used by every other module.
//!
//! All systems handled here are at most a few hundred states, so everything
//! is dense: LU with partial pivoting (with transpose and adjoint solves),
//! a Hager/Higham 1-norm condition estimate, generalized eigenvalues of a
//! real pencil, null vectors, and a rank-checked orthonormalization.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Reciprocal-condition threshold below which a matrix is treated as singular.
pub const RCOND_FLOOR: f64 = f64::EPSILON * 1e3;

/// LU factorization `P A = L U` with partial (row) pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu<T: ComplexField<RealField = f64>> {
    lu: DMatrix<T>,
    perm: Vec<usize>,
    norm1: f64,
    zero_pivot: Option<usize>,
}

impl<T: ComplexField<RealField = f64> + Copy> DenseLu<T> {
    pub fn new(a: &DMatrix<T>) -> Self {
        assert!(a.is_square(), "LU of a non-square matrix");
        let n = a.nrows();
        let norm1 = one_norm(a);
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut zero_pivot = None;

        for k in 0..n {
            let mut piv = k;
            let mut best = lu[(k, k)].modulus();
            for i in (k + 1)..n {
                let v = lu[(i, k)].modulus();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 {
                zero_pivot.get_or_insert(k);
                continue;
            }
            if piv != k {
                lu.swap_rows(piv, k);
                perm.swap(piv, k);
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor.is_zero() {
                    continue;
                }
                for j in (k + 1)..n {
                    let ukj = lu[(k, j)];
                    lu[(i, j)] -= factor * ukj;
                }
            }
        }

        Self {
            lu,
            perm,
            norm1,
            zero_pivot,
        }
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    /// Row index of the first exactly-zero pivot, if any.
    pub fn zero_pivot(&self) -> Option<usize> {
        self.zero_pivot
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut DVector<T>, work: &mut DVector<T>) {
        let n = self.dim();
        for i in 0..n {
            work[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let mut s = work[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * work[j];
            }
            work[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = work[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * work[j];
            }
            work[i] = s / self.lu[(i, i)];
        }
        b.copy_from(work);
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        let mut x = b.clone();
        let mut work = b.clone();
        self.solve_in_place(&mut x, &mut work);
        x
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut out = b.clone();
        let mut col = DVector::from_element(self.dim(), T::zero());
        let mut work = col.clone();
        for j in 0..b.ncols() {
            col.copy_from(&b.column(j));
            self.solve_in_place(&mut col, &mut work);
            out.set_column(j, &col);
        }
        out
    }

    /// Solves `Aᵀ x = b` (or `Aᴴ x = b` when `conjugate`).
    fn solve_transposed(&self, b: &DVector<T>, conjugate: bool) -> DVector<T> {
        let n = self.dim();
        let at = |i: usize, j: usize| {
            let v = self.lu[(i, j)];
            if conjugate {
                v.conjugate()
            } else {
                v
            }
        };
        // Uᵀ w = b
        let mut w = b.clone();
        for i in 0..n {
            let mut s = w[i];
            for j in 0..i {
                s -= at(j, i) * w[j];
            }
            w[i] = s / at(i, i);
        }
        // Lᵀ v = w (unit diagonal)
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in (i + 1)..n {
                s -= at(j, i) * w[j];
            }
            w[i] = s;
        }
        let mut x = b.clone();
        for i in 0..n {
            x[self.perm[i]] = w[i];
        }
        x
    }

    pub fn solve_transpose_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.solve_transposed(b, false)
    }

    pub fn solve_adjoint_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.solve_transposed(b, true)
    }

    /// Estimate of `‖A⁻¹‖₁` (Hager's method with Higham's safeguard).
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        if self.zero_pivot.is_some() {
            return f64::INFINITY;
        }
        let scale = T::from_real(1.0 / n as f64);
        let mut x = DVector::from_element(n, scale);
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            est = y.iter().map(|v| v.modulus()).sum::<f64>();
            let xi = y.map(|v| {
                let m = v.modulus();
                if m == 0.0 {
                    T::one()
                } else {
                    v.unscale(m)
                }
            });
            let z = self.solve_adjoint_vec(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.modulus()))
                .fold((0, -1.0), |acc, it| if it.1 > acc.1 { it } else { acc });
            let ztx = z.dotc(&x).real();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x.fill(T::zero());
            x[j] = T::one();
        }
        // Higham's alternating test vector guards against Hager underestimates.
        let alt = DVector::from_fn(n, |i, _| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let mag = if n > 1 {
                1.0 + i as f64 / (n - 1) as f64
            } else {
                1.0
            };
            T::from_real(sign * mag)
        });
        let ya = self.solve_vec(&alt);
        let alt_est = 2.0 * ya.iter().map(|v| v.modulus()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }

    /// Estimated reciprocal 1-norm condition number.
    pub fn rcond(&self) -> f64 {
        if self.zero_pivot.is_some() || self.norm1 == 0.0 {
            return 0.0;
        }
        let inv = self.inverse_norm1_estimate();
        if !inv.is_finite() || inv == 0.0 {
            return 0.0;
        }
        1.0 / (self.norm1 * inv)
    }

    pub fn is_numerically_singular(&self) -> bool {
        self.rcond() < RCOND_FLOOR
    }
}

pub fn one_norm<T: ComplexField<RealField = f64> + Copy>(a: &DMatrix<T>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn to_complex(a: &DMatrix<f64>) -> CMatrix {
    a.map(|v| Complex64::new(v, 0.0))
}

/// `s E - A` as a complex matrix.
pub fn shifted(e: &DMatrix<f64>, a: &DMatrix<f64>, s: Complex64) -> CMatrix {
    CMatrix::from_fn(e.nrows(), e.ncols(), |i, j| s * e[(i, j)] - a[(i, j)])
}

pub fn largest_singular_value(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Right null vector of a (nearly) singular square matrix, unit norm.
pub fn null_vector(m: &CMatrix) -> CVector {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^H");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    v_t.row(k).adjoint()
}

/// Rotates a complex vector so its largest entry is real and positive.
pub fn align_phase(v: &mut CVector) {
    let big = v
        .iter()
        .cloned()
        .fold(Complex64::new(0.0, 0.0), |acc, z| if z.norm() > acc.norm() { z } else { acc });
    if big.norm() > 0.0 {
        let phase = big.conj() / big.norm();
        *v *= phase;
    }
}

/// A finite or infinite generalized eigenvalue of the pencil `(A, E)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenEigenvalue {
    Finite(Complex64),
    Infinite,
}

impl GenEigenvalue {
    pub fn finite(self) -> Option<Complex64> {
        match self {
            GenEigenvalue::Finite(z) => Some(z),
            GenEigenvalue::Infinite => None,
        }
    }
}

/// Generalized eigenvalues `λ` with `det(A - λE) = 0`.
///
/// Computed from the shift-inverted matrix `(A - σ₀E)⁻¹E`, whose zero
/// eigenvalues correspond to infinite eigenvalues of the pencil.
pub fn generalized_eigenvalues(a: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<Vec<GenEigenvalue>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    const PROBES: [f64; 6] = [0.0, 0.618_033_988_7, -1.324_717_957, std::f64::consts::E, -7.389_056, 0.1];
    for sigma0 in PROBES {
        let lu = DenseLu::new(&(a - e * sigma0));
        if lu.rcond() < 1e-12 {
            continue;
        }
        let m = lu.solve(e);
        let scale = one_norm(&m).max(f64::MIN_POSITIVE);
        let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigen("Schur iteration did not converge".into()))?;
        let mus = schur.complex_eigenvalues();
        return Ok(mus
            .iter()
            .map(|&mu| {
                let mu = Complex64::new(mu.re, mu.im);
                if mu.norm() <= 1e-11 * scale {
                    GenEigenvalue::Infinite
                } else {
                    GenEigenvalue::Finite(sigma0 + mu.inv())
                }
            })
            .collect());
    }
    Err(Error::Eigen("no regular shift found for the pencil".into()))
}

/// Normalizes columns, checks the smallest singular value, and returns a thin
/// orthonormal basis of the same span.
pub fn orthonormalize(cols: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = cols.shape();
    if k == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    if k > n {
        return Err(Error::RankDeficient {
            indices: (n..k).collect(),
        });
    }
    let mut scaled = cols.clone();
    for j in 0..k {
        let nrm = scaled.column(j).norm();
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::RankDeficient { indices: vec![j] });
        }
        scaled.column_mut(j).unscale_mut(nrm);
    }
    let sv = scaled.clone().singular_values();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 1e-10 {
        // report columns whose Gram-Schmidt residual collapses
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut bad = Vec::new();
        for j in 0..k {
            let mut v = scaled.column(j).into_owned();
            for q in &basis {
                let h = q.dot(&v);
                v.axpy(-h, q, 1.0);
            }
            let r = v.norm();
            if r <= 1e-8 {
                bad.push(j);
            } else {
                basis.push(v / r);
            }
        }
        if bad.is_empty() {
            bad.push(k - 1);
        }
        return Err(Error::RankDeficient { indices: bad });
    }
    let q = scaled.qr().q();
    Ok(q.columns(0, k).into_owned())
}

/// Minimum-norm `X` (n×k) with `Vᵀ X = Rᵀ`, i.e. `Xᵀ V = R`.
pub fn min_norm_transpose_solution(v: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.ncols() != v.ncols() {
        return Err(Error::dims(
            "tangent stack",
            format!("{} columns", v.ncols()),
            format!("{} columns", r.ncols()),
        ));
    }
    let gram = v.transpose() * v;
    let lu = DenseLu::new(&gram);
    if lu.is_numerically_singular() {
        return Err(Error::RankDeficient {
            indices: (0..v.ncols()).collect(),
        });
    }
    Ok(v * lu.solve(&r.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_matrix() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, -1.0, 3.0, 1.0, 0.0, 4.0, -2.0])
    }

    #[test]
    fn lu_solves_and_transposed_solves() {
        let a = test_matrix();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let lu = DenseLu::new(&a);
        let x = lu.solve_vec(&b);
        assert_relative_eq!(&a * &x, b.clone(), epsilon = 1e-12);
        let xt = lu.solve_transpose_vec(&b);
        assert_relative_eq!(a.transpose() * &xt, b, epsilon = 1e-12);
    }

    #[test]
    fn complex_adjoint_solve() {
        let a = CMatrix::from_fn(3, 3, |i, j| Complex64::new((i + 2 * j) as f64 - 1.5, (i * j) as f64 + 0.3));
        let b = CVector::from_fn(3, |i, _| Complex64::new(i as f64, 1.0));
        let lu = DenseLu::new(&a);
        let x = lu.solve_adjoint_vec(&b);
        let r = a.adjoint() * x - b;
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn rcond_tracks_exact_condition() {
        let a = test_matrix();
        let lu = DenseLu::new(&a);
        let inv = a.clone().try_inverse().unwrap();
        let exact = 1.0 / (one_norm(&a) * one_norm(&inv));
        let est = lu.rcond();
        // the estimator never overestimates ‖A⁻¹‖ by construction; it may underestimate by a small factor
        assert!(est >= exact * 0.999 && est <= exact * 10.0, "{est} vs {exact}");
    }

    #[test]
    fn singular_matrix_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let lu = DenseLu::new(&a);
        assert!(lu.is_numerically_singular());
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(DenseLu::new(&z).zero_pivot(), Some(0));
    }

    #[test]
    fn generalized_eigenvalues_with_infinite() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        let e = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let mut ev = generalized_eigenvalues(&a, &e).unwrap();
        let infinite = ev.iter().filter(|z| matches!(z, GenEigenvalue::Infinite)).count();
        assert_eq!(infinite, 1);
        ev.retain(|z| z.finite().is_some());
        let mut re: Vec<f64> = ev.iter().map(|z| z.finite().unwrap().re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(re[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(re[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthonormalize_rejects_collinear() {
        let cols = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
        match orthonormalize(&cols) {
            Err(Error::RankDeficient { indices }) => assert_eq!(indices, vec![2]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn min_norm_solution_for_orthonormal_basis() {
        let v = orthonormalize(&DMatrix::from_column_slice(4, 2, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let t = DMatrix::from_row_slice(1, 2, &[0.3, -2.0]);
        let f = min_norm_transpose_solution(&v, &t).unwrap();
        assert_relative_eq!(f.clone(), &v * t.transpose(), epsilon = 1e-14);
        assert_relative_eq!(f.transpose() * &v, t, epsilon = 1e-14);
    }
}
