//! Filtering, retrofiltering and smoothing.
//!
//! Each estimator is split into a record-independent covariance pass and a
//! set of per-step linear "gains" for the mean, so an ensemble of records
//! on one grid pays for the Riccati integrations only once.
//!
//! The retrofilter is carried in information form: `Λ` (inverse of the
//! haloed retrofiltered variance, zero at the final time) and
//! `z = Λ x_R`. The smoother and the SWV state are written so that they
//! never invert `Λ` or `V_F - V_T`:
//!
//! ```text
//! V_S   = (I + QΛ)^{-1} Q + V_T,          x_S   = (I + QΛ)^{-1} (x_F + Q z)
//! V_SWV = (I + V_F L)^{-1} V_F,           x_SWV = (I + V_F L)^{-1} (x_F + V_F (I - ΛV_T)^{-1} z)
//! ```
//!
//! with `Q = V_F - V_T` and `L = (I - ΛV_T)^{-1} Λ = V_R^{-1}`.

use crate::error::{Error, Result};
use crate::linalg::{condition_number, rk4_step_varying, Matrix, RiccatiForm, SymMatrix, Vector};
use crate::model::{purity_of, uncertainty_margin, LgqSystem, LinearGaussianModel};
use crate::trajectory::{integrate_form, integrate_true_cov, MeasurementRecord, TimeGrid};

/// Agreement required between the direct and haloed filter forms.
pub const FILTER_IDENTITY_TOL: f64 = 1e-8;
/// Relative agreement required between `Λ^{-1} - V_T` and the direct
/// retrofiltered variance.
pub const RETRO_IDENTITY_TOL: f64 = 1e-6;
/// `Λ` is inverted only below this condition number.
pub const LAMBDA_MAX_CONDITION: f64 = 1e8;
/// Fraction of the grid flagged as smoother burn-in.
pub const BURN_IN_FRACTION: f64 = 0.01;

// The direct retrofilter check starts at the last step where `Λ` has at most
// this condition number, and substeps RK4 so that `h ‖F - V_R H‖` stays
// below the bound (V_R is large and fast near the final time).
const RETRO_CHECK_MAX_CONDITION: f64 = 1e4;
const RETRO_CHECK_SUBSTEP_BOUND: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub grid: TimeGrid,
    /// Column `k` is the filtered mean at `t_k`.
    pub means: Matrix,
    pub cov: Vec<SymMatrix>,
    /// Column `k` is `y_k dt - C x_F(t_k) dt`.
    pub innovations: Matrix,
}

/// Filtered mean recursion `x_{k+1} = Φ_k x_k + K_k (y dt)_k` with
/// `Φ_k = I + (A - K_k C) dt`, `K_k = V_k C^T + Γ^T`.
#[derive(Clone, Debug)]
pub struct FilterGains {
    propagators: Vec<Matrix>,
    gains: Vec<Matrix>,
    c: Matrix,
    dt: f64,
}

impl FilterGains {
    /// `kicks[k]` is the kick matrix used over step `k`.
    pub fn from_kicks(a: &Matrix, c: &Matrix, kicks: Vec<Matrix>, dt: f64) -> Self {
        let m = a.nrows();
        let propagators = kicks
            .iter()
            .map(|k| Matrix::identity(m, m) + (a - k * c) * dt)
            .collect();
        FilterGains {
            propagators,
            gains: kicks,
            c: c.clone(),
            dt,
        }
    }

    pub fn new(a: &Matrix, c: &Matrix, gamma: &Matrix, cov: &[SymMatrix], dt: f64) -> Self {
        let n = cov.len() - 1;
        let kicks = cov[..n]
            .iter()
            .map(|v| v.as_matrix() * c.transpose() + gamma.transpose())
            .collect();
        Self::from_kicks(a, c, kicks, dt)
    }

    fn check(&self, x0: &Vector, y: &Matrix) -> Result<()> {
        if x0.len() != self.c.ncols() || y.nrows() != self.c.nrows() || y.ncols() != self.gains.len() {
            return Err(Error::ShapeMismatch("filter: initial mean or record shape".into()));
        }
        Ok(())
    }

    /// Means only (no innovations), for ensembles.
    pub fn means(&self, x0: &Vector, y: &Matrix) -> Result<Matrix> {
        self.check(x0, y)?;
        let n = self.gains.len();
        let mut out = Matrix::zeros(x0.len(), n + 1);
        out.set_column(0, x0);
        let mut x = x0.clone();
        let mut next = x0.clone();
        for k in 0..n {
            next.gemv(1.0, &self.propagators[k], &x, 0.0);
            next.gemv(1.0, &self.gains[k], &y.column(k), 1.0);
            std::mem::swap(&mut x, &mut next);
            out.set_column(k + 1, &x);
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFiniteValue("filtered mean".into()))
        }
    }

    pub fn run(&self, x0: &Vector, y: &Matrix) -> Result<(Matrix, Matrix)> {
        let means = self.means(x0, y)?;
        let n = self.gains.len();
        let mut innovations = y.clone();
        for k in 0..n {
            let mut col = innovations.column_mut(k);
            col.gemv(-self.dt, &self.c, &means.column(k), 1.0);
        }
        Ok((means, innovations))
    }
}

fn check_record(record: &MeasurementRecord, outputs: usize) -> Result<()> {
    if record.y_o_dt.nrows() != outputs {
        return Err(Error::ShapeMismatch(format!(
            "record has {} channels, model has {outputs}",
            record.y_o_dt.nrows()
        )));
    }
    Ok(())
}

/// Classical linear Gaussian filter.
pub fn classical_filter(
    model: &LinearGaussianModel,
    record: &MeasurementRecord,
    x0: &Vector,
    v0: &SymMatrix,
) -> Result<FilterOutput> {
    check_record(record, model.n_outputs())?;
    let grid = record.grid;
    let cov = integrate_form(&model.filter_form(), v0, &grid, "filtered covariance")?;
    let gains = FilterGains::new(&model.a, &model.c, &model.gamma, &cov, grid.dt());
    let (means, innovations) = gains.run(x0, &record.y_o_dt)?;
    Ok(FilterOutput {
        grid,
        means,
        cov,
        innovations,
    })
}

/// Record-independent part of the quantum filter.
#[derive(Clone, Debug)]
pub struct FilterCovariances {
    pub true_cov: Vec<SymMatrix>,
    pub filter_cov: Vec<SymMatrix>,
    /// `V̊_F`, integrated jointly with `V_T` in haloed form.
    pub haloed_cov: Vec<SymMatrix>,
    /// Largest `‖V_F - (V̊_F + V_T)‖_F` over the grid.
    pub cov_deviation: f64,
}

/// `dV̊_F/dt` for the haloed filter driven by the true-state variance.
fn haloed_filter_form(sys: &LgqSystem, vt: &SymMatrix) -> RiccatiForm {
    RiccatiForm::filter(sys.a(), &sys.haloed_diffusion(vt), sys.c_o(), &sys.haloed_gamma(vt))
}

fn joint_rk4(
    sys: &LgqSystem,
    true_form: &RiccatiForm,
    vt: &SymMatrix,
    vh: &SymMatrix,
    dt: f64,
) -> (SymMatrix, SymMatrix) {
    let rates = |t: &SymMatrix, h: &SymMatrix| (true_form.rhs(t), haloed_filter_form(sys, t).rhs(h));
    let shift = |x: &SymMatrix, k: &SymMatrix, s: f64| SymMatrix::symmetrize(x.as_matrix() + k.as_matrix() * s);
    let (t1, h1) = rates(vt, vh);
    let (t2, h2) = rates(&shift(vt, &t1, 0.5 * dt), &shift(vh, &h1, 0.5 * dt));
    let (t3, h3) = rates(&shift(vt, &t2, 0.5 * dt), &shift(vh, &h2, 0.5 * dt));
    let (t4, h4) = rates(&shift(vt, &t3, dt), &shift(vh, &h3, dt));
    let combine = |x: &SymMatrix, a: SymMatrix, b: SymMatrix, c: SymMatrix, d: SymMatrix| {
        SymMatrix::symmetrize(
            x.as_matrix() + (a.as_matrix() + b.as_matrix() * 2.0 + c.as_matrix() * 2.0 + d.as_matrix()) * (dt / 6.0),
        )
    };
    (combine(vt, t1, t2, t3, t4), combine(vh, h1, h2, h3, h4))
}

/// Direct filtered covariance plus the haloed verification pass. Alice is
/// assumed to know the initial state, so `V_T(0) = V_F(0) = v0`.
pub fn filter_covariances(sys: &LgqSystem, grid: &TimeGrid, v0: &SymMatrix) -> Result<FilterCovariances> {
    let true_cov = integrate_true_cov(sys, v0, grid)?;
    let filter_cov = integrate_form(&sys.filter_form(), v0, grid, "filtered covariance")?;
    let true_form = sys.true_form();
    let mut haloed_cov = Vec::with_capacity(grid.n_nodes());
    let mut vt = v0.clone();
    let mut vh = SymMatrix::zeros(sys.dim());
    haloed_cov.push(vh.clone());
    for _ in 0..grid.n_steps() {
        (vt, vh) = joint_rk4(sys, &true_form, &vt, &vh, grid.dt());
        if !vh.is_finite() {
            return Err(Error::NonFiniteValue("haloed filtered covariance".into()));
        }
        haloed_cov.push(vh.clone());
    }
    let cov_deviation = filter_cov
        .iter()
        .zip(&true_cov)
        .zip(&haloed_cov)
        .map(|((f, t), h)| (f.as_matrix() - h.as_matrix() - t.as_matrix()).norm())
        .fold(0.0, f64::max);
    Ok(FilterCovariances {
        true_cov,
        filter_cov,
        haloed_cov,
        cov_deviation,
    })
}

#[derive(Clone, Debug)]
pub struct QuantumFilterOutput {
    pub filter: FilterOutput,
    pub true_cov: Vec<SymMatrix>,
    pub haloed_cov: Vec<SymMatrix>,
    pub cov_deviation: f64,
    pub mean_deviation: f64,
}

/// Quantum filter on Alice's record. The direct form is authoritative; the
/// haloed form is run alongside and must agree to `FILTER_IDENTITY_TOL`.
pub fn quantum_filter(
    sys: &LgqSystem,
    record: &MeasurementRecord,
    x0: &Vector,
    v0: &SymMatrix,
) -> Result<QuantumFilterOutput> {
    check_record(record, sys.n_observed())?;
    let grid = record.grid;
    let covs = filter_covariances(sys, &grid, v0)?;
    let direct = FilterGains::new(sys.a(), sys.c_o(), sys.gamma_o(), &covs.filter_cov, grid.dt());
    let (means, innovations) = direct.run(x0, &record.y_o_dt)?;

    let haloed_kicks = covs.haloed_cov[..grid.n_steps()]
        .iter()
        .zip(&covs.true_cov)
        .map(|(vh, vt)| vh.as_matrix() * sys.c_o().transpose() + sys.haloed_gamma(vt).transpose())
        .collect();
    let haloed = FilterGains::from_kicks(sys.a(), sys.c_o(), haloed_kicks, grid.dt());
    let haloed_means = haloed.means(x0, &record.y_o_dt)?;
    let mean_deviation = (&means - &haloed_means)
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);

    if covs.cov_deviation > FILTER_IDENTITY_TOL || mean_deviation > FILTER_IDENTITY_TOL {
        return Err(Error::IdentityViolation {
            cov_deviation: covs.cov_deviation,
            mean_deviation,
        });
    }
    Ok(QuantumFilterOutput {
        filter: FilterOutput {
            grid,
            means,
            cov: covs.filter_cov,
            innovations,
        },
        true_cov: covs.true_cov,
        haloed_cov: covs.haloed_cov,
        cov_deviation: covs.cov_deviation,
        mean_deviation,
    })
}

/// Information form of a backward pass: `dΛ/ds = F Λ + Λ F^T + C^T C - Λ H Λ`
/// in reversed time, and `-dz = (F - ΛH) z dt + (C^T - ΛΓ^T) y dt`.
#[derive(Clone, Debug)]
struct InformationTerms {
    form: RiccatiForm,
    gamma: Matrix,
}

fn classical_information_terms(model: &LinearGaussianModel) -> InformationTerms {
    let gt = model.gamma.transpose();
    InformationTerms {
        form: RiccatiForm {
            drift: (&model.a - &gt * &model.c).transpose(),
            source: SymMatrix::symmetrize(model.c.transpose() * &model.c),
            gain: SymMatrix::symmetrize(model.d.as_matrix() - &gt * &model.gamma),
        },
        gamma: model.gamma.clone(),
    }
}

fn haloed_information_terms(sys: &LgqSystem, vt: &SymMatrix) -> InformationTerms {
    InformationTerms {
        form: sys.retro_information_form(vt),
        gamma: sys.haloed_gamma(vt),
    }
}

/// Backward `z` recursion `z_k = B_k z_{k+1} + G_k (y dt)_k` with
/// coefficients evaluated at `t_{k+1}`.
#[derive(Clone, Debug)]
pub struct RetroGains {
    back: Vec<Matrix>,
    input: Vec<Matrix>,
}

impl RetroGains {
    fn new(c: &Matrix, terms_at: impl Fn(usize) -> InformationTerms, lambda: &[SymMatrix], dt: f64) -> Self {
        let m = c.ncols();
        let n = lambda.len() - 1;
        let (mut back, mut input) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..n {
            let terms = terms_at(k + 1);
            let l = lambda[k + 1].as_matrix();
            back.push(Matrix::identity(m, m) + (&terms.form.drift - l * terms.form.gain.as_matrix()) * dt);
            input.push(c.transpose() - l * terms.gamma.transpose());
        }
        RetroGains { back, input }
    }

    pub fn z(&self, y: &Matrix) -> Result<Matrix> {
        let n = self.back.len();
        if y.ncols() != n || self.input.first().is_some_and(|g| g.ncols() != y.nrows()) {
            return Err(Error::ShapeMismatch("retrofilter: record shape".into()));
        }
        let m = self.back.first().map_or(0, |b| b.nrows());
        let mut out = Matrix::zeros(m, n + 1);
        let mut z = Vector::zeros(m);
        let mut next = Vector::zeros(m);
        for k in (0..n).rev() {
            next.gemv(1.0, &self.back[k], &z, 0.0);
            next.gemv(1.0, &self.input[k], &y.column(k), 1.0);
            std::mem::swap(&mut z, &mut next);
            out.set_column(k, &z);
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFiniteValue("retrofiltered information vector".into()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct RetrofilterOutput {
    pub grid: TimeGrid,
    /// Inverse haloed retrofiltered variance; zero at the final time.
    pub lambda: Vec<SymMatrix>,
    /// Column `k` is `Λ_k x_R(t_k)`.
    pub z: Matrix,
    /// `x_R = Λ^{-1} z` where `Λ` is positive definite with condition
    /// below `LAMBDA_MAX_CONDITION`.
    pub means: Vec<Option<Vector>>,
    /// `V_R = Λ^{-1} - V_T` on the same steps.
    pub cov_r: Vec<Option<SymMatrix>>,
    /// True-state variance for the haloed retrofilter; `None` when classical.
    pub halo: Option<Vec<SymMatrix>>,
    pub min_lambda_eigenvalue: f64,
    /// Largest relative deviation between `V_R` above and a direct backward
    /// integration of the retrofiltered variance (`None` if no step was
    /// well enough conditioned to start it).
    pub identity_deviation: Option<f64>,
}

impl RetrofilterOutput {
    fn halo_at(&self, k: usize) -> Option<&SymMatrix> {
        self.halo.as_ref().map(|h| &h[k])
    }

    /// `(I - Λ V_T)^{-1}`, the identity when classical.
    fn unhalo(&self, k: usize) -> Result<Option<Matrix>> {
        match self.halo_at(k) {
            None => Ok(None),
            Some(vt) => {
                let m = vt.dim();
                (Matrix::identity(m, m) - self.lambda[k].as_matrix() * vt.as_matrix())
                    .try_inverse()
                    .map(Some)
                    .ok_or(Error::SingularCombination(k))
            }
        }
    }

    /// `V_R^{-1}` at step `k`.
    pub fn information(&self, k: usize) -> Result<SymMatrix> {
        Ok(match self.unhalo(k)? {
            None => self.lambda[k].clone(),
            Some(u) => SymMatrix::symmetrize(u * self.lambda[k].as_matrix()),
        })
    }

    /// `V_R^{-1} x_R` at step `k`.
    pub fn information_mean(&self, k: usize) -> Result<Vector> {
        let z = self.z.column(k).into_owned();
        Ok(match self.unhalo(k)? {
            None => z,
            Some(u) => u * z,
        })
    }
}

/// Backward RK4 pass for `Λ` from `Λ(T) = 0`.
fn information_pass(
    n_steps: usize,
    dt: f64,
    node: impl Fn(usize) -> RiccatiForm,
    mid: impl Fn(usize) -> RiccatiForm,
) -> Result<Vec<SymMatrix>> {
    let m = node(n_steps).dim();
    let mut lambda = vec![SymMatrix::zeros(m); n_steps + 1];
    let mut upper = node(n_steps);
    for k in (0..n_steps).rev() {
        let lower = node(k);
        let next = rk4_step_varying(&upper, &mid(k), &lower, &lambda[k + 1], dt);
        if !next.is_finite() {
            return Err(Error::NonFiniteValue("inverse retrofiltered variance".into()));
        }
        lambda[k] = next;
        upper = lower;
    }
    Ok(lambda)
}

/// Hermite-interpolated true-state variance at the step midpoints.
fn true_cov_midpoints(sys: &LgqSystem, vt: &[SymMatrix], dt: f64) -> Vec<SymMatrix> {
    let form = sys.true_form();
    let rates: Vec<SymMatrix> = vt.iter().map(|v| form.rhs(v)).collect();
    (0..vt.len() - 1)
        .map(|k| {
            SymMatrix::symmetrize(
                (vt[k].as_matrix() + vt[k + 1].as_matrix()) * 0.5
                    + (rates[k].as_matrix() - rates[k + 1].as_matrix()) * (dt / 8.0),
            )
        })
        .collect()
}

/// `Λ` for the haloed retrofilter, driven by the true-state variance.
pub fn haloed_information(sys: &LgqSystem, grid: &TimeGrid, vt: &[SymMatrix]) -> Result<Vec<SymMatrix>> {
    if vt.len() != grid.n_nodes() {
        return Err(Error::ShapeMismatch("true-state variance must cover the grid".into()));
    }
    let mids = true_cov_midpoints(sys, vt, grid.dt());
    information_pass(
        grid.n_steps(),
        grid.dt(),
        |k| sys.retro_information_form(&vt[k]),
        |k| sys.retro_information_form(&mids[k]),
    )
}

pub fn haloed_retro_gains(sys: &LgqSystem, vt: &[SymMatrix], lambda: &[SymMatrix], dt: f64) -> RetroGains {
    RetroGains::new(sys.c_o(), |k| haloed_information_terms(sys, &vt[k]), lambda, dt)
}

fn positive_definite_condition(s: &SymMatrix) -> Option<f64> {
    let eig = s.eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    (lo > 0.0).then(|| hi / lo)
}

/// Recovers means and variances where `Λ` is safely invertible, and
/// cross-checks them against a direct backward integration of the
/// retrofiltered variance.
fn assemble_retro(
    grid: TimeGrid,
    direct_form: &RiccatiForm,
    lambda: Vec<SymMatrix>,
    z: Matrix,
    halo: Option<Vec<SymMatrix>>,
) -> Result<RetrofilterOutput> {
    let n = grid.n_steps();
    let mut means = vec![None; n + 1];
    let mut cov_r = vec![None; n + 1];
    let mut min_eig = f64::INFINITY;
    for k in 0..=n {
        let l = &lambda[k];
        min_eig = min_eig.min(l.min_eigenvalue());
        if positive_definite_condition(l).is_some_and(|c| c < LAMBDA_MAX_CONDITION) {
            let inv = l.as_matrix().clone().try_inverse();
            if let Some(inv) = inv {
                means[k] = Some(&inv * z.column(k));
                let vr = match &halo {
                    Some(vt) => inv - vt[k].as_matrix(),
                    None => inv,
                };
                cov_r[k] = Some(SymMatrix::symmetrize(vr));
            }
        }
    }
    if min_eig < -1e-9 {
        log::warn!("inverse retrofiltered variance has eigenvalue {min_eig:e}");
    }

    let start = (0..=n)
        .rev()
        .find(|&k| positive_definite_condition(&lambda[k]).is_some_and(|c| c < RETRO_CHECK_MAX_CONDITION));
    let identity_deviation = start.map(|k0| {
        let mut v = cov_r[k0].clone().expect("start step has a variance");
        let mut worst = 0.0f64;
        for k in (0..k0).rev() {
            let mut remaining = grid.dt();
            while remaining > 0.0 {
                let bound = RETRO_CHECK_SUBSTEP_BOUND / direct_form.closed_loop(&v).norm();
                let h = if bound >= remaining {
                    remaining
                } else {
                    bound.min(0.5 * remaining)
                };
                v = direct_form.rk4_step(&v, h);
                remaining -= h;
            }
            if let Some(vr) = &cov_r[k] {
                let rel = (v.as_matrix() - vr.as_matrix()).norm() / vr.as_matrix().norm();
                worst = worst.max(rel);
            }
        }
        worst
    });
    if let Some(dev) = identity_deviation {
        if !(dev <= RETRO_IDENTITY_TOL) {
            return Err(Error::IdentityViolation {
                cov_deviation: dev,
                mean_deviation: 0.0,
            });
        }
    }

    Ok(RetrofilterOutput {
        grid,
        lambda,
        z,
        means,
        cov_r,
        halo,
        min_lambda_eigenvalue: min_eig,
        identity_deviation,
    })
}

/// Classical retrofilter (information form) on the record `y_o_dt`.
pub fn classical_retrofilter(model: &LinearGaussianModel, record: &MeasurementRecord) -> Result<RetrofilterOutput> {
    check_record(record, model.n_outputs())?;
    let grid = record.grid;
    let terms = classical_information_terms(model);
    let lambda = information_pass(
        grid.n_steps(),
        grid.dt(),
        |_| terms.form.clone(),
        |_| terms.form.clone(),
    )?;
    let gains = RetroGains::new(&model.c, |_| terms.clone(), &lambda, grid.dt());
    let z = gains.z(&record.y_o_dt)?;
    assemble_retro(grid, &model.retrofilter_form(), lambda, z, None)
}

/// Haloed retrofilter on Alice's record, given the true-state variance
/// on the grid.
pub fn haloed_retrofilter(sys: &LgqSystem, record: &MeasurementRecord, vt: &[SymMatrix]) -> Result<RetrofilterOutput> {
    check_record(record, sys.n_observed())?;
    let grid = record.grid;
    let lambda = haloed_information(sys, &grid, vt)?;
    let z = haloed_retro_gains(sys, vt, &lambda, grid.dt()).z(&record.y_o_dt)?;
    let direct = sys.observed_model().retrofilter_form();
    assemble_retro(grid, &direct, lambda, z, Some(vt.to_vec()))
}

#[derive(Clone, Debug)]
pub struct SmootherOutput {
    pub grid: TimeGrid,
    pub means: Matrix,
    pub cov: Vec<SymMatrix>,
    pub swv_means: Matrix,
    pub swv_cov: Vec<SymMatrix>,
    /// Steps `0..burn_in` are dominated by the initial condition.
    pub burn_in: usize,
}

/// Per-step weights `x_S = W_F x_F + W_z z` for the smoother and the SWV
/// state.
#[derive(Clone, Debug)]
pub struct SmootherGains {
    smooth_filter: Vec<Matrix>,
    smooth_retro: Vec<Matrix>,
    swv_filter: Vec<Matrix>,
    swv_retro: Vec<Matrix>,
    pub cov: Vec<SymMatrix>,
    pub swv_cov: Vec<SymMatrix>,
}

impl SmootherGains {
    pub fn new(filter_cov: &[SymMatrix], true_cov: &[SymMatrix], lambda: &[SymMatrix]) -> Result<Self> {
        if filter_cov.len() != lambda.len() || true_cov.len() != lambda.len() {
            return Err(Error::ShapeMismatch("smoother inputs must be aligned".into()));
        }
        let n = lambda.len();
        let m = lambda.first().map_or(0, |l| l.dim());
        let eye = Matrix::identity(m, m);
        let mut g = SmootherGains {
            smooth_filter: Vec::with_capacity(n),
            smooth_retro: Vec::with_capacity(n),
            swv_filter: Vec::with_capacity(n),
            swv_retro: Vec::with_capacity(n),
            cov: Vec::with_capacity(n),
            swv_cov: Vec::with_capacity(n),
        };
        for k in 0..n {
            let (vf, vt, l) = (
                filter_cov[k].as_matrix(),
                true_cov[k].as_matrix(),
                lambda[k].as_matrix(),
            );
            let q = vf - vt;
            let s = (&eye + &q * l).try_inverse().ok_or(Error::SingularHaloedVariance(k))?;
            let sq = &s * &q;
            g.cov.push(SymMatrix::symmetrize(&sq + vt));
            g.smooth_filter.push(s);
            g.smooth_retro.push(sq);

            let unhalo = (&eye - l * vt).try_inverse().ok_or(Error::SingularCombination(k))?;
            let info = &unhalo * l;
            let w = (&eye + vf * &info).try_inverse().ok_or(Error::SingularCombination(k))?;
            let wv = &w * vf;
            g.swv_retro.push(&wv * &unhalo);
            g.swv_cov.push(SymMatrix::symmetrize(wv));
            g.swv_filter.push(w);
        }
        Ok(g)
    }

    fn combine(weights_f: &[Matrix], weights_z: &[Matrix], xf: &Matrix, z: &Matrix) -> Result<Matrix> {
        if xf.shape() != z.shape() || xf.ncols() != weights_f.len() {
            return Err(Error::ShapeMismatch(
                "smoother: filter and retrofilter grids differ".into(),
            ));
        }
        let mut out = Matrix::zeros(xf.nrows(), xf.ncols());
        for k in 0..xf.ncols() {
            let mut col = out.column_mut(k);
            col.gemv(1.0, &weights_f[k], &xf.column(k), 0.0);
            col.gemv(1.0, &weights_z[k], &z.column(k), 1.0);
        }
        Ok(out)
    }

    pub fn smoothed_means(&self, xf: &Matrix, z: &Matrix) -> Result<Matrix> {
        Self::combine(&self.smooth_filter, &self.smooth_retro, xf, z)
    }

    pub fn swv_means(&self, xf: &Matrix, z: &Matrix) -> Result<Matrix> {
        Self::combine(&self.swv_filter, &self.swv_retro, xf, z)
    }
}

fn burn_in_steps(grid: &TimeGrid) -> usize {
    (BURN_IN_FRACTION * grid.n_nodes() as f64).ceil() as usize
}

/// Quantum state smoother. With `true_cov` identically zero this is the
/// classical smoother.
pub fn lgq_smoother(
    filter: &FilterOutput,
    retro: &RetrofilterOutput,
    true_cov: &[SymMatrix],
) -> Result<SmootherOutput> {
    if filter.grid != retro.grid {
        return Err(Error::ShapeMismatch("filter and retrofilter grids differ".into()));
    }
    let gains = SmootherGains::new(&filter.cov, true_cov, &retro.lambda)?;
    Ok(SmootherOutput {
        grid: filter.grid,
        means: gains.smoothed_means(&filter.means, &retro.z)?,
        swv_means: gains.swv_means(&filter.means, &retro.z)?,
        burn_in: burn_in_steps(&filter.grid),
        cov: gains.cov,
        swv_cov: gains.swv_cov,
    })
}

/// The classical smoothing combination of the quantum filtered and
/// retrofiltered moments.
pub fn swv_state(filter: &FilterOutput, retro: &RetrofilterOutput) -> Result<(Matrix, Vec<SymMatrix>)> {
    let zeros;
    let vt = match &retro.halo {
        Some(vt) => vt.as_slice(),
        None => {
            zeros = vec![SymMatrix::zeros(filter.means.nrows()); retro.lambda.len()];
            zeros.as_slice()
        }
    };
    let out = lgq_smoother(filter, retro, vt)?;
    Ok((out.swv_means, out.swv_cov))
}

/// `V_S = (V_F^{-1} + V_R^{-1})^{-1}`, `x_S = V_S (V_F^{-1} x_F + V_R^{-1} x_R)`,
/// with the retrofilter supplied in information form.
pub fn classical_smoother(filter: &FilterOutput, retro: &RetrofilterOutput) -> Result<(Matrix, Vec<SymMatrix>)> {
    if filter.grid != retro.grid {
        return Err(Error::ShapeMismatch("filter and retrofilter grids differ".into()));
    }
    let n = filter.cov.len();
    let mut means = Matrix::zeros(filter.means.nrows(), n);
    let mut cov = Vec::with_capacity(n);
    for k in 0..n {
        let vf_inv = filter.cov[k]
            .as_matrix()
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCombination(k))?;
        let info = retro.information(k)?;
        let vs = (&vf_inv + info.as_matrix())
            .try_inverse()
            .ok_or(Error::SingularCombination(k))?;
        let x = &vs * (&vf_inv * filter.means.column(k) + retro.information_mean(k)?);
        means.set_column(k, &x);
        cov.push(SymMatrix::symmetrize(vs));
    }
    Ok((means, cov))
}

/// All record-independent quantities for one system, grid and initial
/// covariance, plus the mean gains. Building it performs the filter
/// identity check.
#[derive(Clone, Debug)]
pub struct EstimationPlan {
    pub grid: TimeGrid,
    pub covariances: FilterCovariances,
    pub lambda: Vec<SymMatrix>,
    pub filter_gains: FilterGains,
    pub retro_gains: RetroGains,
    pub smoother_gains: SmootherGains,
}

impl EstimationPlan {
    pub fn new(sys: &LgqSystem, grid: &TimeGrid, v0: &SymMatrix) -> Result<Self> {
        let covariances = filter_covariances(sys, grid, v0)?;
        if covariances.cov_deviation > FILTER_IDENTITY_TOL {
            return Err(Error::IdentityViolation {
                cov_deviation: covariances.cov_deviation,
                mean_deviation: 0.0,
            });
        }
        let lambda = haloed_information(sys, grid, &covariances.true_cov)?;
        let filter_gains = FilterGains::new(sys.a(), sys.c_o(), sys.gamma_o(), &covariances.filter_cov, grid.dt());
        let retro_gains = haloed_retro_gains(sys, &covariances.true_cov, &lambda, grid.dt());
        let smoother_gains = SmootherGains::new(&covariances.filter_cov, &covariances.true_cov, &lambda)?;
        Ok(EstimationPlan {
            grid: *grid,
            covariances,
            lambda,
            filter_gains,
            retro_gains,
            smoother_gains,
        })
    }

    /// Filtered and smoothed means for one observed record.
    pub fn means(&self, x0: &Vector, y_o_dt: &Matrix) -> Result<(Matrix, Matrix)> {
        let xf = self.filter_gains.means(x0, y_o_dt)?;
        let z = self.retro_gains.z(y_o_dt)?;
        let xs = self.smoother_gains.smoothed_means(&xf, &z)?;
        Ok((xf, xs))
    }
}

/// Tolerance on the uncertainty-relation eigenvalue for per-step flags.
pub const PHYSICAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct EstimationRun {
    pub grid: TimeGrid,
    pub true_cov: Vec<SymMatrix>,
    pub filter: QuantumFilterOutput,
    pub retro: RetrofilterOutput,
    pub smoother: SmootherOutput,
    pub purity_true: Vec<f64>,
    pub purity_filtered: Vec<f64>,
    pub purity_smoothed: Vec<f64>,
    /// `NaN` where the SWV covariance is not positive definite.
    pub purity_swv: Vec<f64>,
    pub physical_smoothed: Vec<bool>,
    pub physical_swv: Vec<bool>,
}

fn purities(cov: &[SymMatrix], hbar: f64) -> Vec<f64> {
    cov.iter().map(|v| purity_of(v, hbar).unwrap_or(f64::NAN)).collect()
}

/// Filter, retrofilter, smoother and SWV state for Alice's record.
pub fn run_estimation(
    sys: &LgqSystem,
    record: &MeasurementRecord,
    x0: &Vector,
    v0: &SymMatrix,
) -> Result<EstimationRun> {
    let filter = quantum_filter(sys, record, x0, v0)?;
    let retro = haloed_retrofilter(sys, record, &filter.true_cov)?;
    let smoother = lgq_smoother(&filter.filter, &retro, &filter.true_cov)?;
    let hbar = sys.hbar();
    let physical = |cov: &[SymMatrix]| -> Vec<bool> {
        cov.iter()
            .map(|v| uncertainty_margin(v, hbar) >= -PHYSICAL_TOL)
            .collect()
    };
    Ok(EstimationRun {
        grid: record.grid,
        purity_true: purities(&filter.true_cov, hbar),
        purity_filtered: purities(&filter.filter.cov, hbar),
        purity_smoothed: purities(&smoother.cov, hbar),
        purity_swv: purities(&smoother.swv_cov, hbar),
        physical_smoothed: physical(&smoother.cov),
        physical_swv: physical(&smoother.swv_cov),
        true_cov: filter.true_cov.clone(),
        filter,
        retro,
        smoother,
    })
}

/// Largest condition number of `V_F - V_T` past the burn-in, a diagnostic
/// for how close the smoother is to the singular combination.
pub fn haloed_condition(run: &EstimationRun) -> f64 {
    run.filter.haloed_cov[run.smoother.burn_in..]
        .iter()
        .map(condition_number)
        .fold(0.0, f64::max)
}
