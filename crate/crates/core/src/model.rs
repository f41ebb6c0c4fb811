//! Linear Gaussian quantum (LGQ) systems, Gaussian states and the
//! on-threshold optical parametric oscillator.
//!
//! Quadratures are ordered `(q_1, p_1, ..., q_N, p_N)` and the symplectic
//! form is block diagonal with blocks `[[0, 1], [-1, 0]]`. Physical states
//! satisfy `V + i(ħ/2)Σ ⪰ 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_psd, KickSign, Matrix, RiccatiForm, SymMatrix, Vector};

/// Classical linear Gaussian model `dx = A x dt + E dv_p`,
/// `y dt = C x dt + dv_m`, with `Γ^T dt = E dv_p dv_m^T` and `D = E E^T`.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    pub a: Matrix,
    pub d: SymMatrix,
    pub c: Matrix,
    pub gamma: Matrix,
}

impl LinearGaussianModel {
    pub fn new(a: Matrix, d: SymMatrix, c: Matrix, gamma: Matrix) -> Result<Self> {
        let m = a.nrows();
        if !a.is_square() || d.dim() != m || c.ncols() != m || gamma.shape() != c.shape() {
            return Err(Error::ShapeMismatch(format!(
                "A {:?}, D {}x{}, C {:?}, Gamma {:?}",
                a.shape(),
                d.dim(),
                d.dim(),
                c.shape(),
                gamma.shape()
            )));
        }
        Ok(LinearGaussianModel { a, d, c, gamma })
    }

    /// Builds the model from the process-noise gain `E`.
    pub fn from_noise_gain(a: Matrix, e: &Matrix, c: Matrix, gamma: Matrix) -> Result<Self> {
        if e.nrows() != a.nrows() {
            return Err(Error::ShapeMismatch("E must have as many rows as A".into()));
        }
        Self::new(a, SymMatrix::outer(e), c, gamma)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn filter_form(&self) -> RiccatiForm {
        RiccatiForm::filter(&self.a, &self.d, &self.c, &self.gamma)
    }

    pub fn retrofilter_form(&self) -> RiccatiForm {
        RiccatiForm::retrofilter(&self.a, &self.d, &self.c, &self.gamma)
    }

    pub fn kick(&self, v: &SymMatrix, sign: KickSign) -> Matrix {
        kick_unchecked(v, &self.c, &self.gamma, sign)
    }
}

/// `K^±[V] = V C^T ± Γ^T`.
pub fn kick(v: &SymMatrix, c: &Matrix, gamma: &Matrix, sign: KickSign) -> Result<Matrix> {
    if c.ncols() != v.dim() || gamma.shape() != c.shape() {
        return Err(Error::ShapeMismatch(format!(
            "kick: V is {0}x{0}, C {1:?}, Gamma {2:?}",
            v.dim(),
            c.shape(),
            gamma.shape()
        )));
    }
    Ok(kick_unchecked(v, c, gamma, sign))
}

fn kick_unchecked(v: &SymMatrix, c: &Matrix, gamma: &Matrix, sign: KickSign) -> Matrix {
    let vc = v.as_matrix() * c.transpose();
    match sign {
        KickSign::Plus => vc + gamma.transpose(),
        KickSign::Minus => vc - gamma.transpose(),
    }
}

/// Block-diagonal symplectic form for `n_modes` modes.
pub fn symplectic_form(n_modes: usize) -> Matrix {
    let mut s = Matrix::zeros(2 * n_modes, 2 * n_modes);
    for k in 0..n_modes {
        s[(2 * k, 2 * k + 1)] = 1.0;
        s[(2 * k + 1, 2 * k)] = -1.0;
    }
    s
}

fn vstack(top: &Matrix, bottom: &Matrix) -> Matrix {
    let cols = top.ncols().max(bottom.ncols());
    let mut out = Matrix::zeros(top.nrows() + bottom.nrows(), cols);
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

/// An LGQ estimation problem: drift `A`, diffusion `D`, observed channel
/// `(C_o, Γ_o)` and unobserved channel `(C_u, Γ_u)`.
#[derive(Clone, Debug)]
pub struct LgqSystem {
    a: Matrix,
    d: SymMatrix,
    c_o: Matrix,
    c_u: Matrix,
    gamma_o: Matrix,
    gamma_u: Matrix,
    hbar: f64,
    sigma: Matrix,
}

impl LgqSystem {
    pub fn new(
        a: Matrix,
        d: SymMatrix,
        c_o: Matrix,
        c_u: Matrix,
        gamma_o: Matrix,
        gamma_u: Matrix,
        hbar: f64,
    ) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || !m.is_multiple_of(2) || !a.is_square() {
            return Err(Error::InvalidSystem(format!(
                "drift must be square with even positive dimension, got {:?}",
                a.shape()
            )));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidSystem(format!("hbar must be positive, got {hbar}")));
        }
        if d.dim() != m {
            return Err(Error::ShapeMismatch(format!("D must be {m}x{m}")));
        }
        if !is_psd(&d, 1e-12 * (1.0 + d.amax())) {
            return Err(Error::InvalidSystem("diffusion matrix is not PSD".into()));
        }
        for (name, c, g) in [("observed", &c_o, &gamma_o), ("unobserved", &c_u, &gamma_u)] {
            if c.ncols() != m || g.shape() != c.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} channel: C {:?}, Gamma {:?}, system dimension {m}",
                    c.shape(),
                    g.shape()
                )));
            }
        }
        let all_finite = [&a, d.as_matrix(), &c_o, &c_u, &gamma_o, &gamma_u]
            .iter()
            .all(|x| x.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::InvalidSystem("non-finite matrix entry".into()));
        }
        Ok(LgqSystem {
            sigma: symplectic_form(m / 2),
            a,
            d,
            c_o,
            c_u,
            gamma_o,
            gamma_u,
            hbar,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.dim() / 2
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn d(&self) -> &SymMatrix {
        &self.d
    }

    pub fn c_o(&self) -> &Matrix {
        &self.c_o
    }

    pub fn c_u(&self) -> &Matrix {
        &self.c_u
    }

    pub fn gamma_o(&self) -> &Matrix {
        &self.gamma_o
    }

    pub fn gamma_u(&self) -> &Matrix {
        &self.gamma_u
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn n_observed(&self) -> usize {
        self.c_o.nrows()
    }

    pub fn n_unobserved(&self) -> usize {
        self.c_u.nrows()
    }

    /// Vacuum covariance `(ħ/2) I`.
    pub fn vacuum(&self) -> SymMatrix {
        SymMatrix::scaled_identity(self.dim(), self.hbar / 2.0)
    }

    /// What Alice sees: the classical model `(A, D, C_o, Γ_o)`.
    pub fn observed_model(&self) -> LinearGaussianModel {
        LinearGaussianModel {
            a: self.a.clone(),
            d: self.d.clone(),
            c: self.c_o.clone(),
            gamma: self.gamma_o.clone(),
        }
    }

    /// Both channels stacked, as seen by the true-state observer.
    pub fn joint_model(&self) -> LinearGaussianModel {
        LinearGaussianModel {
            a: self.a.clone(),
            d: self.d.clone(),
            c: vstack(&self.c_o, &self.c_u),
            gamma: vstack(&self.gamma_o, &self.gamma_u),
        }
    }

    /// Riccati form of the true-state variance (both kicks subtracted).
    pub fn true_form(&self) -> RiccatiForm {
        self.joint_model().filter_form()
    }

    /// Riccati form of the filtered variance (observed kick only).
    pub fn filter_form(&self) -> RiccatiForm {
        self.observed_model().filter_form()
    }

    /// `dV/dt = A V + V A^T + D`.
    pub fn unconditioned_form(&self) -> RiccatiForm {
        RiccatiForm {
            drift: self.a.clone(),
            source: self.d.clone(),
            gain: SymMatrix::zeros(self.dim()),
        }
    }

    pub fn true_cov_rate(&self, vt: &SymMatrix) -> SymMatrix {
        self.true_form().rhs(vt)
    }

    pub fn kick_o(&self, v: &SymMatrix) -> Matrix {
        kick_unchecked(v, &self.c_o, &self.gamma_o, KickSign::Plus)
    }

    pub fn kick_u(&self, v: &SymMatrix) -> Matrix {
        kick_unchecked(v, &self.c_u, &self.gamma_u, KickSign::Plus)
    }

    /// Diffusion of the true-state mean, `D̊ = Σ_r K^+_r[V_T] K^+_r[V_T]^T`.
    pub fn haloed_diffusion(&self, vt: &SymMatrix) -> SymMatrix {
        let ko = self.kick_o(vt);
        let ku = self.kick_u(vt);
        SymMatrix::symmetrize(&ko * ko.transpose() + &ku * ku.transpose())
    }

    /// Cross-correlation between the true-mean noise and Alice's record,
    /// `Γ̊ = Γ_o + C_o V_T`.
    pub fn haloed_gamma(&self, vt: &SymMatrix) -> Matrix {
        &self.gamma_o + &self.c_o * vt.as_matrix()
    }

    /// `Ā = A - Γ_o^T C_o - V_T C_o^T C_o`.
    pub fn haloed_drift(&self, vt: &SymMatrix) -> Matrix {
        &self.a - self.haloed_gamma(vt).transpose() * &self.c_o
    }

    /// `D̄ = D̊ - Γ̊^T Γ̊`, which equals `K^+_u[V_T] K^+_u[V_T]^T`.
    pub fn haloed_residual_diffusion(&self, vt: &SymMatrix) -> SymMatrix {
        let g = self.haloed_gamma(vt);
        SymMatrix::symmetrize(self.haloed_diffusion(vt).as_matrix() - g.transpose() * &g)
    }

    /// Backward-time information recursion for `Λ̊_R = V̊_R^{-1}`:
    /// `dΛ/ds = Ā^T Λ + Λ Ā - Λ D̄ Λ + C_o^T C_o`.
    pub fn retro_information_form(&self, vt: &SymMatrix) -> RiccatiForm {
        RiccatiForm {
            drift: self.haloed_drift(vt).transpose(),
            source: SymMatrix::symmetrize(self.c_o.transpose() * &self.c_o),
            gain: self.haloed_residual_diffusion(vt),
        }
    }
}

/// Which conditioned object a Gaussian state represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateLabel {
    True,
    Filtered,
    RetrofilteredEffect,
    Smoothed,
    #[serde(rename = "swv")]
    SmoothedWeakValue,
    Unconditioned,
}

impl StateLabel {
    /// Retrofiltered effects and SWV "states" may violate the uncertainty
    /// relation.
    pub fn physicality_exempt(self) -> bool {
        matches!(self, StateLabel::RetrofilteredEffect | StateLabel::SmoothedWeakValue)
    }
}

#[derive(Clone, Debug)]
pub struct GaussianState {
    pub mean: Vector,
    pub cov: SymMatrix,
    pub hbar: f64,
    pub label: StateLabel,
}

impl GaussianState {
    pub fn new(mean: Vector, cov: SymMatrix, hbar: f64, label: StateLabel) -> Result<Self> {
        if mean.len() != cov.dim() || !cov.dim().is_multiple_of(2) || cov.dim() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if !(hbar > 0.0) {
            return Err(Error::InvalidArgument(format!("hbar must be positive, got {hbar}")));
        }
        Ok(GaussianState { mean, cov, hbar, label })
    }

    /// Like [`GaussianState::new`], but also rejects unphysical covariances
    /// for labels that must be physical.
    pub fn new_checked(mean: Vector, cov: SymMatrix, hbar: f64, label: StateLabel, tol: f64) -> Result<Self> {
        let s = Self::new(mean, cov, hbar, label)?;
        if !label.physicality_exempt() && !check_physical(&s, tol) {
            return Err(Error::InvalidArgument(format!(
                "{label:?} state violates the uncertainty relation"
            )));
        }
        Ok(s)
    }

    pub fn n_modes(&self) -> usize {
        self.cov.dim() / 2
    }
}

/// Smallest eigenvalue of the Hermitian matrix `V + i(ħ/2)Σ`.
///
/// Computed through the real embedding `[[X, -Y], [Y, X]]`, whose spectrum
/// is that of `X + iY` with every eigenvalue doubled.
pub fn uncertainty_margin(cov: &SymMatrix, hbar: f64) -> f64 {
    let m = cov.dim();
    let y = symplectic_form(m / 2) * (hbar / 2.0);
    let mut embed = Matrix::zeros(2 * m, 2 * m);
    embed.view_mut((0, 0), (m, m)).copy_from(cov.as_matrix());
    embed.view_mut((m, m), (m, m)).copy_from(cov.as_matrix());
    embed.view_mut((0, m), (m, m)).copy_from(&(-&y));
    embed.view_mut((m, 0), (m, m)).copy_from(&y);
    embed.symmetric_eigenvalues().min()
}

/// `V + i(ħ/2)Σ ⪰ 0` up to `tol`.
pub fn check_physical(s: &GaussianState, tol: f64) -> bool {
    uncertainty_margin(&s.cov, s.hbar) >= -tol
}

/// Single-mode criterion `V ≻ 0` and `|V| ≥ ħ²/4`, up to `tol`.
pub fn physical_by_determinant(cov: &SymMatrix, hbar: f64, tol: f64) -> Option<bool> {
    if cov.dim() != 2 {
        return None;
    }
    let det = cov.determinant();
    Some(cov[(0, 0)] >= -tol && cov[(1, 1)] >= -tol && det >= hbar * hbar / 4.0 - tol)
}

/// `(ħ/2)^N |V|^{-1/2}`.
pub fn purity_of(cov: &SymMatrix, hbar: f64) -> Result<f64> {
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularCovariance);
    }
    let n_modes = (cov.dim() / 2) as i32;
    Ok((hbar / 2.0).powi(n_modes) / det.sqrt())
}

pub fn purity(s: &GaussianState) -> Result<f64> {
    purity_of(&s.cov, s.hbar)
}

/// `n_points` points on the one-standard-deviation ellipse
/// `(x - μ)^T V^{-1} (x - μ) = 1`, evenly spaced in parameter angle
/// starting on the first Cholesky axis.
pub fn wigner_contour(s: &GaussianState, n_points: usize) -> Result<Vec<Vector>> {
    if s.cov.dim() != 2 {
        return Err(Error::InvalidArgument("contours are single-mode only".into()));
    }
    let chol = s.cov.as_matrix().clone().cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    Ok((0..n_points)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n_points as f64;
            let u = Vector::from_row_slice(&[phi.cos(), phi.sin()]);
            &s.mean + &l * u
        })
        .collect())
}

/// Homodyne phases, efficiencies and ħ for the on-threshold OPO.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpoParams {
    pub theta_o: f64,
    pub theta_u: f64,
    pub eta_o: f64,
    pub eta_u: f64,
    #[serde(default = "default_hbar")]
    pub hbar: f64,
}

fn default_hbar() -> f64 {
    1.0
}

impl OpoParams {
    /// Bob sees everything Alice misses: `η_u = 1 - η_o`.
    pub fn complementary(theta_o: f64, theta_u: f64, eta_o: f64, hbar: f64) -> Self {
        OpoParams {
            theta_o,
            theta_u,
            eta_o,
            eta_u: 1.0 - eta_o,
            hbar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_o.is_finite()
            && self.eta_u.is_finite()
            && self.eta_o >= 0.0
            && self.eta_u >= 0.0
            && self.eta_o + self.eta_u <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::InvalidEfficiency {
                eta_o: self.eta_o,
                eta_u: self.eta_u,
            });
        }
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return Err(Error::InvalidSystem(format!(
                "hbar must be positive, got {}",
                self.hbar
            )));
        }
        if !(self.theta_o.is_finite() && self.theta_u.is_finite()) {
            return Err(Error::InvalidSystem("homodyne phases must be finite".into()));
        }
        Ok(())
    }
}

impl Default for OpoParams {
    fn default() -> Self {
        OpoParams::complementary(std::f64::consts::FRAC_PI_3, 0.2, 0.5, 1.0)
    }
}

fn homodyne_row(eta: f64, theta: f64, hbar: f64) -> Matrix {
    let s = 2.0 * (eta / hbar).sqrt();
    Matrix::from_row_slice(1, 2, &[s * theta.cos(), s * theta.sin()])
}

/// On-threshold OPO: `A = diag(0, -2)`, `D = ħ I`,
/// `C_r = 2√(η_r/ħ)(cos θ_r, sin θ_r)`, `Γ_r = -ħ C_r / 2`.
pub fn build_opo(p: &OpoParams) -> Result<LgqSystem> {
    p.validate()?;
    let c_o = homodyne_row(p.eta_o, p.theta_o, p.hbar);
    let c_u = homodyne_row(p.eta_u, p.theta_u, p.hbar);
    let gamma_o = &c_o * (-p.hbar / 2.0);
    let gamma_u = &c_u * (-p.hbar / 2.0);
    LgqSystem::new(
        Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -2.0]),
        SymMatrix::scaled_identity(2, p.hbar),
        c_o,
        c_u,
        gamma_o,
        gamma_u,
        p.hbar,
    )
}
