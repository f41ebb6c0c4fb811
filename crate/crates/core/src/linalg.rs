//! Small dense symmetric-matrix kernels.
//!
//! Everything here works on `nalgebra` dynamic matrices; the systems of
//! interest are tiny (dimension <= 8), so clarity wins over blocking or
//! allocation tricks. The Riccati machinery is written once in the generic
//! form
//!
//! ```text
//! dX/dt = F X + X F^T + G - X H X
//! ```
//!
//! which covers forward filters (`F = A - Γ^T C`, `G = D - Γ^T Γ`,
//! `H = C^T C`), backward retrofilters in reversed time, and the
//! information-form recursion for the inverse retrofiltered variance.

use std::ops::{Add, Deref, Sub};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Absolute eigenvalue tolerance for Hurwitz and PSD tests.
pub const EIG_TOL: f64 = 1e-12;

/// Condition number beyond which an unregularized inverse is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// A real symmetric matrix. Symmetry is enforced on construction by
/// averaging with the transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Checked constructor: rejects non-square input and anything whose
    /// asymmetry exceeds `1e-12 * (1 + max|S|)`.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let asymmetry = asymmetry(&m);
        if asymmetry > 1e-12 * (1.0 + m.amax()) {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(Self::symmetrize(m))
    }

    /// `(S + S^T) / 2`. Panics on non-square input.
    pub fn symmetrize(m: Matrix) -> Self {
        assert!(m.is_square(), "symmetrize needs a square matrix");
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMatrix(Matrix::identity(n, n) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&Vector::from_row_slice(d)))
    }

    /// Row-major constructor, checked for symmetry.
    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(Matrix::from_row_slice(n, n, data))
    }

    /// `K K^T` for any matrix `K`.
    pub fn outer(k: &Matrix) -> Self {
        Self::symmetrize(k * k.transpose())
    }

    /// `B S B^T`.
    pub fn congruence(&self, b: &Matrix) -> Self {
        Self::symmetrize(b * &self.0 * b.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        SymMatrix(&self.0 * s)
    }

    pub fn eigenvalues(&self) -> Vector {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Upper-triangular entries in row-major order (`S_11, S_12, ..., S_MM`).
    pub fn upper_entries(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.0)
    }
}

/// Serializes as row-major nested arrays.
impl serde::Serialize for SymMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl Deref for SymMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;

    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;

    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &rhs.0)
    }
}

/// Largest `|S_ij - S_ji|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Build a matrix from nested rows; every row must have the same length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ShapeMismatch("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(nrows, ncols, &flat))
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn max_real_eigenvalue(a: &Matrix) -> f64 {
    assert!(a.is_square(), "eigenvalues need a square matrix");
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// True iff every eigenvalue has real part below `-EIG_TOL`.
pub fn is_hurwitz(a: &Matrix) -> bool {
    is_hurwitz_tol(a, EIG_TOL)
}

pub fn is_hurwitz_tol(a: &Matrix, tol: f64) -> bool {
    a.is_square() && max_real_eigenvalue(a) < -tol
}

/// True iff the smallest eigenvalue is at least `-tol`.
pub fn is_psd(s: &SymMatrix, tol: f64) -> bool {
    s.dim() == 0 || s.min_eigenvalue() >= -tol
}

/// `(S + jitter I)^{-1}`.
///
/// With `jitter == 0` the inverse is exact but refused when the condition
/// number reaches `MAX_CONDITION`.
pub fn regularized_inverse(s: &SymMatrix, jitter: f64) -> Result<SymMatrix> {
    let n = s.dim();
    let shifted = s.as_matrix() + Matrix::identity(n, n) * jitter;
    let eig = shifted.clone().symmetric_eigenvalues();
    let largest = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let smallest = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if smallest == 0.0 || !(largest / smallest < MAX_CONDITION) {
        return Err(Error::Singular(format!(
            "condition number {:e} with jitter {jitter:e}",
            largest / smallest
        )));
    }
    shifted
        .try_inverse()
        .map(SymMatrix::symmetrize)
        .ok_or_else(|| Error::Singular("LU inverse failed".into()))
}

/// Spectral condition number of a symmetric matrix (infinite if singular).
pub fn condition_number(s: &SymMatrix) -> f64 {
    let eig = s.eigenvalues();
    let largest = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let smallest = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if smallest == 0.0 {
        f64::INFINITY
    } else {
        largest / smallest
    }
}

/// Solves `-A Q - Q A^T = rhs` for Hurwitz `A`.
///
/// Two-dimensional problems use the closed form; larger ones go through the
/// vectorized Kronecker system.
pub fn solve_lyapunov(a: &Matrix, rhs: &SymMatrix) -> Result<SymMatrix> {
    check_square_pair(a, rhs)?;
    let max_re = max_real_eigenvalue(a);
    if max_re >= -EIG_TOL {
        return Err(Error::NotHurwitz { max_real_part: max_re });
    }
    if a.nrows() == 2 {
        lyapunov_closed_form_2d(a, rhs)
    } else {
        lyapunov_vectorized(a, rhs)
    }
}

/// Closed-form solution of `-A Q - Q A^T = R` in two dimensions:
/// `Q = -[|A| R + B R B^T] / (2 Tr(A) |A|)` with `B = A - Tr(A) I`.
pub fn lyapunov_closed_form_2d(a: &Matrix, rhs: &SymMatrix) -> Result<SymMatrix> {
    if a.shape() != (2, 2) || rhs.dim() != 2 {
        return Err(Error::ShapeMismatch(
            "closed-form Lyapunov solution is two-dimensional only".into(),
        ));
    }
    let tr = a.trace();
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let denom = 2.0 * tr * det;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Singular(format!(
            "Tr(A)|A| = {:e} in closed-form Lyapunov solve",
            tr * det
        )));
    }
    let b = a - Matrix::identity(2, 2) * tr;
    let num = rhs.as_matrix() * det + &b * rhs.as_matrix() * b.transpose();
    Ok(SymMatrix::symmetrize(num / -denom))
}

/// Solves `-A Q - Q A^T = R` through `(I (x) A + A (x) I) vec(Q) = -vec(R)`.
pub fn lyapunov_vectorized(a: &Matrix, rhs: &SymMatrix) -> Result<SymMatrix> {
    check_square_pair(a, rhs)?;
    let n = a.nrows();
    let eye = Matrix::identity(n, n);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    let b = -Vector::from_column_slice(rhs.as_slice());
    let sol = system
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("Kronecker Lyapunov system".into()))?;
    Ok(SymMatrix::symmetrize(Matrix::from_column_slice(n, n, sol.as_slice())))
}

/// `‖A Q + Q A^T + R‖_F`.
pub fn lyapunov_residual(a: &Matrix, q: &SymMatrix, rhs: &SymMatrix) -> f64 {
    let aq = a * q.as_matrix();
    (&aq + aq.transpose() + rhs.as_matrix()).norm()
}

fn check_square_pair(a: &Matrix, rhs: &SymMatrix) -> Result<()> {
    if !a.is_square() || a.nrows() != rhs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "A is {}x{}, right-hand side is {}x{}",
            a.nrows(),
            a.ncols(),
            rhs.dim(),
            rhs.dim()
        )));
    }
    Ok(())
}

/// Sign of the kick matrix `K^±[V] = V C^T ± Γ^T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KickSign {
    Plus,
    Minus,
}

/// `dX/dt = F X + X F^T + G - X H X`.
#[derive(Clone, Debug)]
pub struct RiccatiForm {
    pub drift: Matrix,
    pub source: SymMatrix,
    pub gain: SymMatrix,
}

impl RiccatiForm {
    pub fn new(drift: Matrix, source: SymMatrix, gain: SymMatrix) -> Result<Self> {
        let n = drift.nrows();
        if !drift.is_square() || source.dim() != n || gain.dim() != n {
            return Err(Error::ShapeMismatch("inconsistent Riccati terms".into()));
        }
        Ok(RiccatiForm { drift, source, gain })
    }

    /// Forward filter: `dV/dt = AV + VA^T + D - K^+[V] K^+[V]^T`.
    pub fn filter(a: &Matrix, d: &SymMatrix, c: &Matrix, gamma: &Matrix) -> Self {
        let gt = gamma.transpose();
        RiccatiForm {
            drift: a - &gt * c,
            source: SymMatrix::symmetrize(d.as_matrix() - &gt * gamma),
            gain: SymMatrix::symmetrize(c.transpose() * c),
        }
    }

    /// Retrofilter in reversed time `s = T - t`:
    /// `dV/ds = -AV - VA^T + D - K^-[V] K^-[V]^T`.
    pub fn retrofilter(a: &Matrix, d: &SymMatrix, c: &Matrix, gamma: &Matrix) -> Self {
        let gt = gamma.transpose();
        RiccatiForm {
            drift: -(a - &gt * c),
            source: SymMatrix::symmetrize(d.as_matrix() - &gt * gamma),
            gain: SymMatrix::symmetrize(c.transpose() * c),
        }
    }

    pub fn with_sign(a: &Matrix, d: &SymMatrix, c: &Matrix, gamma: &Matrix, sign: KickSign) -> Self {
        match sign {
            KickSign::Plus => Self::filter(a, d, c, gamma),
            KickSign::Minus => Self::retrofilter(a, d, c, gamma),
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn rhs(&self, x: &SymMatrix) -> SymMatrix {
        let fx = &self.drift * x.as_matrix();
        let xhx = x.as_matrix() * self.gain.as_matrix() * x.as_matrix();
        SymMatrix::symmetrize(&fx + fx.transpose() + self.source.as_matrix() - xhx)
    }

    /// `F - X H`, the linearization that must be Hurwitz at a stabilizing
    /// fixed point.
    pub fn closed_loop(&self, x: &SymMatrix) -> Matrix {
        &self.drift - x.as_matrix() * self.gain.as_matrix()
    }

    pub fn rk4_step(&self, x: &SymMatrix, dt: f64) -> SymMatrix {
        rk4_step_varying(self, self, self, x, dt)
    }
}

/// One RK4 step for a time-varying form sampled at the start, midpoint and
/// end of the step.
pub fn rk4_step_varying(
    start: &RiccatiForm,
    mid: &RiccatiForm,
    end: &RiccatiForm,
    x: &SymMatrix,
    dt: f64,
) -> SymMatrix {
    let k1 = start.rhs(x);
    rk4_with_first_stage(start, mid, end, x, &k1, dt)
}

fn rk4_with_first_stage(
    _start: &RiccatiForm,
    mid: &RiccatiForm,
    end: &RiccatiForm,
    x: &SymMatrix,
    k1: &SymMatrix,
    dt: f64,
) -> SymMatrix {
    let k2 = mid.rhs(&SymMatrix(x.as_matrix() + k1.as_matrix() * (0.5 * dt)));
    let k3 = mid.rhs(&SymMatrix(x.as_matrix() + k2.as_matrix() * (0.5 * dt)));
    let k4 = end.rhs(&SymMatrix(x.as_matrix() + k3.as_matrix() * dt));
    let incr = (k1.as_matrix() + k2.as_matrix() * 2.0 + k3.as_matrix() * 2.0 + k4.as_matrix()) * (dt / 6.0);
    SymMatrix::symmetrize(x.as_matrix() + incr)
}

/// Convergence settings for steady-state time marching.
#[derive(Clone, Debug)]
pub struct SteadyConfig {
    /// Initial RK4 step; reduced automatically if the linearization says
    /// the step is outside the stability region.
    pub dt: f64,
    /// `‖dX/dt‖_F` threshold.
    pub derivative_tol: f64,
    /// Number of consecutive steps the threshold must hold.
    pub consecutive_steps: usize,
    pub max_time: f64,
    pub residual_tol: f64,
    pub eig_tol: f64,
}

impl Default for SteadyConfig {
    fn default() -> Self {
        SteadyConfig {
            dt: 0.02,
            derivative_tol: 1e-10,
            consecutive_steps: 100,
            max_time: 1e4,
            residual_tol: 1e-9,
            eig_tol: EIG_TOL,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SteadySolution {
    pub value: SymMatrix,
    pub residual: f64,
    /// Integration time needed to converge.
    pub time: f64,
}

/// Stationary point of a Riccati form by long-time RK4 integration from
/// `initial`, followed by a residual check and a stabilizing-solution check.
pub fn steady_riccati_form(form: &RiccatiForm, initial: &SymMatrix, cfg: &SteadyConfig) -> Result<SteadySolution> {
    let n = form.dim();
    if initial.dim() != n {
        return Err(Error::ShapeMismatch("initial guess dimension".into()));
    }
    let mut x = initial.clone();
    let mut t = 0.0;
    let mut dt = cfg.dt;
    let mut calm = 0usize;
    loop {
        let k1 = form.rhs(&x);
        let r = k1.norm();
        if !r.is_finite() || !x.is_finite() {
            return Err(Error::NonFiniteValue("steady-state Riccati integration".into()));
        }
        if r <= cfg.derivative_tol {
            calm += 1;
            if calm >= cfg.consecutive_steps {
                break;
            }
        } else {
            calm = 0;
        }
        if t >= cfg.max_time || x.amax() > 1e15 {
            let threshold = cfg.derivative_tol.sqrt();
            let divergent = k1
                .transpose()
                .iter()
                .zip(x.transpose().iter())
                .map(|(f, v)| f.abs() > threshold || v.abs() > 1e12)
                .collect();
            return Err(Error::NoConvergence {
                horizon: t,
                residual: r,
                divergent,
                last_value: x.transpose().iter().copied().collect(),
            });
        }
        let rho = 2.0 * form.closed_loop(&x).norm();
        if dt * rho > 2.0 {
            dt = 1.0 / rho;
        }
        x = rk4_with_first_stage(form, form, form, &x, &k1, dt);
        t += dt;
    }
    let residual = form.rhs(&x).norm();
    if residual > cfg.residual_tol {
        return Err(Error::NoConvergence {
            horizon: t,
            residual,
            divergent: vec![false; n * n],
            last_value: x.transpose().iter().copied().collect(),
        });
    }
    let max_re = max_real_eigenvalue(&form.closed_loop(&x));
    if max_re >= -cfg.eig_tol {
        return Err(Error::NotStabilizing { max_real_part: max_re });
    }
    Ok(SteadySolution {
        value: x,
        residual,
        time: t,
    })
}

/// Stationary filter (`Plus`) or retrofilter (`Minus`) variance for the
/// system `(A, D, C, Γ)`, started from a positive-definite guess.
pub fn steady_riccati(
    a: &Matrix,
    d: &SymMatrix,
    c: &Matrix,
    gamma: &Matrix,
    sign: KickSign,
    cfg: &SteadyConfig,
) -> Result<SteadySolution> {
    if !a.is_square() || d.dim() != a.nrows() || c.ncols() != a.nrows() || gamma.shape() != c.shape() {
        return Err(Error::ShapeMismatch("steady_riccati inputs".into()));
    }
    let form = RiccatiForm::with_sign(a, d, c, gamma, sign);
    let scale = d.amax().max(1.0);
    steady_riccati_form(&form, &SymMatrix::scaled_identity(a.nrows(), scale), cfg)
}
