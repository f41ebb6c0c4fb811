//! True-state simulation and measurement records.
//!
//! Covariances are integrated with RK4, means with Euler–Maruyama. Records
//! are stored as increments `y dt`, one column per step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{steady_riccati_form, Matrix, RiccatiForm, SteadyConfig, SymMatrix, Vector};
use crate::model::{uncertainty_margin, LgqSystem};

/// Uniform grid `t_k = t0 + k dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_final: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// The horizon must be an integer number of steps (to 1e-9 relative).
    pub fn new(t0: f64, t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && t0.is_finite() && t_final.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt = {dt}, t0 = {t0}, T = {t_final}")));
        }
        if !(t_final > t0) {
            return Err(Error::InvalidGrid(format!("T = {t_final} must exceed t0 = {t0}")));
        }
        let ratio = (t_final - t0) / dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon {} is not a whole number of steps of {dt}",
                t_final - t0
            )));
        }
        Ok(TimeGrid {
            t0,
            t_final,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn from_steps(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        Self::new(t0, t0 + dt * n_steps as f64, dt).map(|g| TimeGrid { n_steps, ..g })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Nearest grid node to `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let half = 0.5 * self.dt;
        if !(t >= self.t0 - half && t <= self.t_final + half) {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside [{}, {}]",
                self.t0, self.t_final
            )));
        }
        Ok((((t - self.t0) / self.dt).round() as usize).min(self.n_steps))
    }

    /// Node index at fraction `f` of the horizon.
    pub fn fraction_index(&self, f: f64) -> usize {
        ((f * self.n_steps as f64).round() as usize).min(self.n_steps)
    }
}

/// Observed (and optionally unobserved) record increments; column `k` is
/// the increment over `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub grid: TimeGrid,
    pub y_o_dt: Matrix,
    pub y_u_dt: Option<Matrix>,
}

impl MeasurementRecord {
    pub fn new(grid: TimeGrid, y_o_dt: Matrix, y_u_dt: Option<Matrix>) -> Result<Self> {
        let n = grid.n_steps();
        if y_o_dt.ncols() != n || y_u_dt.as_ref().is_some_and(|u| u.ncols() != n) {
            return Err(Error::ShapeMismatch(format!("record must have {n} increments")));
        }
        Ok(MeasurementRecord { grid, y_o_dt, y_u_dt })
    }

    /// Drops the unobserved channel.
    pub fn observed_only(&self) -> Self {
        MeasurementRecord {
            grid: self.grid,
            y_o_dt: self.y_o_dt.clone(),
            y_u_dt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrueTrajectory {
    pub grid: TimeGrid,
    /// Column `k` is the true mean at `t_k`.
    pub means: Matrix,
    pub cov: Vec<SymMatrix>,
    pub seed: u64,
}

impl TrueTrajectory {
    pub fn mean(&self, k: usize) -> Vector {
        self.means.column(k).into_owned()
    }
}

/// Independent seeded Wiener-increment generators for the observed and
/// unobserved channels of trajectory `index`.
///
/// Both channels share the seed but use distinct ChaCha streams, so
/// changing how the unobserved stream is consumed never alters the observed
/// noise.
pub struct NoiseStreams {
    observed: ChaCha8Rng,
    unobserved: ChaCha8Rng,
    sqrt_dt: f64,
}

impl NoiseStreams {
    pub fn new(seed: u64, index: u64, dt: f64) -> Self {
        let mut observed = ChaCha8Rng::seed_from_u64(seed);
        observed.set_stream(2 * index);
        let mut unobserved = ChaCha8Rng::seed_from_u64(seed);
        unobserved.set_stream(2 * index + 1);
        NoiseStreams {
            observed,
            unobserved,
            sqrt_dt: dt.sqrt(),
        }
    }

    pub fn fill_observed(&mut self, out: &mut Vector) {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.observed);
            *v = z * self.sqrt_dt;
        }
    }

    pub fn fill_unobserved(&mut self, out: &mut Vector) {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.unobserved);
            *v = z * self.sqrt_dt;
        }
    }
}

/// `y dt = C x dt + dw`.
pub fn record_increment(c: &Matrix, x: &Vector, dt: f64, dw: &Vector) -> Vector {
    let mut y = dw.clone();
    y.gemv(dt, c, x, 1.0);
    y
}

fn check_finite(x: &SymMatrix, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what.into()))
    }
}

/// RK4 integration of an autonomous Riccati form on the grid nodes.
pub(crate) fn integrate_form(
    form: &RiccatiForm,
    v0: &SymMatrix,
    grid: &TimeGrid,
    what: &str,
) -> Result<Vec<SymMatrix>> {
    if v0.dim() != form.dim() {
        return Err(Error::ShapeMismatch(format!("{what}: initial covariance dimension")));
    }
    let mut out = Vec::with_capacity(grid.n_nodes());
    out.push(v0.clone());
    for k in 0..grid.n_steps() {
        let next = form.rk4_step(&out[k], grid.dt());
        check_finite(&next, what)?;
        out.push(next);
    }
    Ok(out)
}

fn check_initial_state(sys: &LgqSystem, v0: &SymMatrix) -> Result<()> {
    if v0.dim() != sys.dim() {
        return Err(Error::ShapeMismatch("initial covariance dimension".into()));
    }
    if uncertainty_margin(v0, sys.hbar()) < -1e-9 {
        return Err(Error::InvalidArgument("initial covariance is not physical".into()));
    }
    Ok(())
}

/// True-state covariance `V_T(t_k)`, independent of any record.
pub fn integrate_true_cov(sys: &LgqSystem, v0: &SymMatrix, grid: &TimeGrid) -> Result<Vec<SymMatrix>> {
    check_initial_state(sys, v0)?;
    integrate_form(&sys.true_form(), v0, grid, "true-state covariance")
}

/// Precomputed per-step kicks for repeated true-state simulation on one
/// grid.
#[derive(Clone, Debug)]
pub struct TrueSimulator {
    grid: TimeGrid,
    cov: Vec<SymMatrix>,
    propagator: Matrix,
    kick_o: Vec<Matrix>,
    kick_u: Vec<Matrix>,
    c_o: Matrix,
    c_u: Matrix,
}

impl TrueSimulator {
    pub fn new(sys: &LgqSystem, v0: &SymMatrix, grid: &TimeGrid) -> Result<Self> {
        let cov = integrate_true_cov(sys, v0, grid)?;
        Ok(Self::from_cov(sys, cov, grid))
    }

    pub fn from_cov(sys: &LgqSystem, cov: Vec<SymMatrix>, grid: &TimeGrid) -> Self {
        let m = sys.dim();
        let steps = &cov[..grid.n_steps()];
        TrueSimulator {
            grid: *grid,
            propagator: Matrix::identity(m, m) + sys.a() * grid.dt(),
            kick_o: steps.iter().map(|v| sys.kick_o(v)).collect(),
            kick_u: steps.iter().map(|v| sys.kick_u(v)).collect(),
            c_o: sys.c_o().clone(),
            c_u: sys.c_u().clone(),
            cov,
        }
    }

    pub fn cov(&self) -> &[SymMatrix] {
        &self.cov
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Simulates trajectory `index` of the ensemble seeded by `seed`.
    pub fn run(&self, x0: &Vector, seed: u64, index: u64) -> Result<(Matrix, MeasurementRecord)> {
        let m = self.propagator.nrows();
        if x0.len() != m {
            return Err(Error::ShapeMismatch("initial mean dimension".into()));
        }
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let (lo, lu) = (self.c_o.nrows(), self.c_u.nrows());
        let mut noise = NoiseStreams::new(seed, index, dt);
        let mut means = Matrix::zeros(m, n + 1);
        let mut y_o = Matrix::zeros(lo, n);
        let mut y_u = Matrix::zeros(lu, n);
        let mut dwo = Vector::zeros(lo);
        let mut dwu = Vector::zeros(lu);
        let mut x = x0.clone();
        let mut next = Vector::zeros(m);
        means.set_column(0, &x);
        for k in 0..n {
            noise.fill_observed(&mut dwo);
            noise.fill_unobserved(&mut dwu);
            y_o.set_column(k, &record_increment(&self.c_o, &x, dt, &dwo));
            y_u.set_column(k, &record_increment(&self.c_u, &x, dt, &dwu));
            next.gemv(1.0, &self.propagator, &x, 0.0);
            next.gemv(1.0, &self.kick_o[k], &dwo, 1.0);
            next.gemv(1.0, &self.kick_u[k], &dwu, 1.0);
            std::mem::swap(&mut x, &mut next);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteValue("true-state mean".into()));
            }
            means.set_column(k + 1, &x);
        }
        let y_u = (lu > 0).then_some(y_u);
        Ok((means, MeasurementRecord::new(self.grid, y_o, y_u)?))
    }
}

/// Simulates the true conditioned state and both records.
pub fn simulate_true(
    sys: &LgqSystem,
    v0: &SymMatrix,
    x0: &Vector,
    grid: &TimeGrid,
    seed: u64,
) -> Result<(TrueTrajectory, MeasurementRecord)> {
    let sim = TrueSimulator::new(sys, v0, grid)?;
    let (means, record) = sim.run(x0, seed, 0)?;
    Ok((
        TrueTrajectory {
            grid: *grid,
            means,
            cov: sim.cov,
            seed,
        },
        record,
    ))
}

/// Unconditioned covariance and, per entry (row-major), whether it grows
/// without bound.
#[derive(Clone, Debug)]
pub struct UnconditionedVariance {
    pub cov: Vec<SymMatrix>,
    pub divergent: Vec<bool>,
}

/// Integrates `dV/dt = AV + VA^T + D` and classifies each entry as
/// convergent or divergent by marching to a long horizon.
pub fn unconditioned_variance(sys: &LgqSystem, v0: &SymMatrix, grid: &TimeGrid) -> Result<UnconditionedVariance> {
    let form = sys.unconditioned_form();
    let cov = integrate_form(&form, v0, grid, "unconditioned covariance")?;
    let cfg = SteadyConfig {
        max_time: 1e3,
        ..SteadyConfig::default()
    };
    let m = sys.dim();
    let divergent = match steady_riccati_form(&form, v0, &cfg) {
        Err(Error::NoConvergence { divergent, .. }) => divergent,
        _ => vec![false; m * m],
    };
    Ok(UnconditionedVariance { cov, divergent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_opo, OpoParams};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn grid_validation() {
        let g = TimeGrid::new(0.0, 10.0, 1e-3).unwrap();
        assert_eq!(g.n_steps(), 10_000);
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 0.1).is_err());
        assert!(TimeGrid::new(0.0, 1.0, -0.1).is_err());
        assert_eq!(g.index_of(5.0).unwrap(), 5000);
        assert!(g.index_of(11.0).is_err());
        assert_eq!(TimeGrid::from_steps(0.0, 0.01, 7).unwrap().n_steps(), 7);
    }

    #[test]
    fn true_cov_long_time_limit_is_pure() {
        let sys = build_opo(&OpoParams {
            theta_o: 0.0,
            theta_u: FRAC_PI_2,
            eta_o: 0.25,
            eta_u: 0.75,
            hbar: 1.0,
        })
        .unwrap();
        let grid = TimeGrid::new(0.0, 40.0, 1e-2).unwrap();
        let v = integrate_true_cov(&sys, &sys.vacuum(), &grid).unwrap();
        let last = v.last().unwrap();
        assert!((last[(0, 0)] - 1.5).abs() < 1e-8);
        assert!((last[(1, 1)] - 1.0 / 6.0).abs() < 1e-8);
        assert!(last[(0, 1)].abs() < 1e-8);
        assert!((last.determinant() - 0.25).abs() < 1e-8);
        for vk in &v {
            assert!(vk.determinant() >= 0.25 - 1e-9);
        }
    }

    #[test]
    fn true_cov_without_measurement_relaxes_p_to_quarter() {
        let sys = build_opo(&OpoParams {
            theta_o: 0.0,
            theta_u: 0.0,
            eta_o: 0.0,
            eta_u: 0.0,
            hbar: 1.0,
        })
        .unwrap();
        let grid = TimeGrid::new(0.0, 10.0, 1e-2).unwrap();
        let v = integrate_true_cov(&sys, &sys.vacuum(), &grid).unwrap();
        assert!((v.last().unwrap()[(1, 1)] - 0.25).abs() < 1e-8);
        assert!((v.last().unwrap()[(0, 0)] - 10.5).abs() < 1e-9);
    }

    #[test]
    fn stationary_initial_condition_is_preserved() {
        let sys = build_opo(&OpoParams::complementary(0.4, -0.2, 0.6, 1.0)).unwrap();
        let form = sys.true_form();
        let steady = steady_riccati_form(&form, &sys.vacuum(), &SteadyConfig::default()).unwrap();
        let grid = TimeGrid::new(0.0, 5.0, 1e-3).unwrap();
        let v = integrate_true_cov(&sys, &steady.value, &grid).unwrap();
        for vk in &v {
            assert!((vk.as_matrix() - steady.value.as_matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn noiseless_mean_follows_drift() {
        let sys = build_opo(&OpoParams {
            theta_o: 0.0,
            theta_u: 0.0,
            eta_o: 0.0,
            eta_u: 0.0,
            hbar: 1.0,
        })
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1e-4).unwrap();
        let x0 = Vector::from_row_slice(&[0.7, 1.0]);
        let (traj, _) = simulate_true(&sys, &sys.vacuum(), &x0, &grid, 3).unwrap();
        for k in (0..=grid.n_steps()).step_by(1000) {
            let t = grid.time(k);
            assert_eq!(traj.means[(0, k)], 0.7);
            assert!((traj.means[(1, k)] - (-2.0 * t).exp()).abs() < 2e-4);
        }
    }

    #[test]
    fn unobserved_stream_does_not_touch_observed_noise() {
        let mut a = NoiseStreams::new(9, 4, 0.01);
        let mut b = NoiseStreams::new(9, 4, 0.01);
        let mut x = Vector::zeros(1);
        let mut y = Vector::zeros(1);
        for _ in 0..5 {
            b.fill_unobserved(&mut y);
        }
        for _ in 0..10 {
            a.fill_observed(&mut x);
            b.fill_observed(&mut y);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn unconditioned_divergence_flags() {
        let sys = build_opo(&OpoParams::complementary(0.0, 0.0, 0.5, 1.0)).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 1e-2).unwrap();
        let v0 = SymMatrix::from_diagonal(&[5.0, 0.25]);
        let u = unconditioned_variance(&sys, &v0, &grid).unwrap();
        assert_eq!(u.divergent, vec![true, false, false, false]);
        for (k, v) in u.cov.iter().enumerate() {
            assert!((v[(1, 1)] - 0.25).abs() < 1e-15);
            assert!((v[(0, 0)] - (5.0 + grid.time(k))).abs() < 1e-9);
        }

        let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let z = Matrix::zeros(1, 2);
        let sys = LgqSystem::new(
            a,
            SymMatrix::scaled_identity(2, 2.0),
            z.clone(),
            z.clone(),
            z.clone(),
            z,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 30.0, 1e-2).unwrap();
        let u = unconditioned_variance(&sys, &sys.vacuum(), &grid).unwrap();
        assert_eq!(u.divergent, vec![false; 4]);
        assert!((u.cov.last().unwrap().as_matrix() - Matrix::identity(2, 2)).amax() < 1e-9);
    }
}
