//! Parameter sweeps, efficiency scans, state snapshots and the Monte-Carlo
//! consistency harness.
//!
//! Independent work items run on the rayon pool; results are always
//! collected in grid order so output does not depend on scheduling.

use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{EstimationPlan, EstimationRun, PHYSICAL_TOL};
use crate::linalg::{Matrix, SymMatrix, Vector};
use crate::model::{build_opo, uncertainty_margin, wigner_contour, GaussianState, LgqSystem, OpoParams, StateLabel};
use crate::steady::{low_efficiency_formulas, rpr_high_efficiency_check, steady_report};
use crate::trajectory::{unconditioned_variance, TimeGrid, TrueSimulator, TrueTrajectory};

/// `η_u` values used for the high-efficiency slope fit.
pub const HIGH_EFFICIENCY_ETA_U: [f64; 4] = [0.0025, 0.005, 0.01, 0.02];

/// `n` cell centres spanning `[-π/2, π/2]`, so the endpoints are avoided
/// by half a cell.
pub fn half_cell_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -FRAC_PI_2 + (i as f64 + 0.5) * PI / n as f64).collect()
}

/// `n` log-spaced efficiencies in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Stationary purities and physicality at one parameter point.
#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub theta_o: f64,
    pub theta_u: f64,
    pub eta_o: f64,
    pub eta_u: f64,
    pub purity_t: f64,
    pub purity_f: f64,
    pub purity_s: f64,
    pub purity_swv: f64,
    pub rpr: Option<f64>,
    /// Smallest eigenvalue of `V + i(ħ/2)Σ` over the true, filtered and
    /// smoothed states (NaN if not stationary).
    pub min_margin: f64,
    pub physical_swv: bool,
    pub stationary: bool,
}

impl SweepPoint {
    pub fn physical(&self) -> bool {
        self.min_margin >= -PHYSICAL_TOL
    }
}

pub fn sweep_point(p: &OpoParams) -> SweepPoint {
    let mut point = SweepPoint {
        theta_o: p.theta_o,
        theta_u: p.theta_u,
        eta_o: p.eta_o,
        eta_u: p.eta_u,
        purity_t: f64::NAN,
        purity_f: f64::NAN,
        purity_s: f64::NAN,
        purity_swv: f64::NAN,
        rpr: None,
        min_margin: f64::NAN,
        physical_swv: false,
        stationary: false,
    };
    let report = match build_opo(p).and_then(|sys| steady_report(&sys)) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("no steady state at {p:?}: {e}");
            return point;
        }
    };
    point.purity_t = report.purity_t;
    point.purity_f = report.purity_f;
    point.purity_s = report.purity_s;
    point.purity_swv = report.purity_swv;
    point.rpr = report.rpr;
    point.stationary = report.stationary;
    if report.stationary {
        point.min_margin = [&report.v_t, &report.v_f, &report.v_s]
            .iter()
            .map(|m| uncertainty_margin(&m.value, p.hbar))
            .fold(f64::INFINITY, f64::min);
        point.physical_swv = uncertainty_margin(&report.v_swv.value, p.hbar) >= -PHYSICAL_TOL;
    }
    point
}

/// Best unobserved phase for one observed phase.
#[derive(Clone, Debug, Serialize)]
pub struct OptimalPhase {
    pub theta_o: f64,
    /// Argmax on the sweep grid.
    pub theta_u_grid: f64,
    /// After golden-section refinement.
    pub theta_u: f64,
    pub rpr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub eta_o: f64,
    pub eta_u: f64,
    pub theta_o: Vec<f64>,
    pub theta_u: Vec<f64>,
    /// Row-major: `θ_o` outer, `θ_u` inner.
    pub points: Vec<SweepPoint>,
    pub optimal: Vec<OptimalPhase>,
}

/// Golden-section maximization of `f` on `[a, b]` to tolerance `tol`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Refinement tolerance for the optimal unobserved phase (radians).
pub const PHASE_TOL: f64 = 1e-3;

fn optimal_phase(theta_o: f64, row: &[SweepPoint], grid: &[f64], eta_o: f64, hbar: f64) -> Option<OptimalPhase> {
    let (j, best) = row
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.rpr.map(|r| (j, r)))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    let lo = if j > 0 { grid[j - 1] } else { -FRAC_PI_2 };
    let hi = if j + 1 < grid.len() { grid[j + 1] } else { FRAC_PI_2 };
    let rpr_at = |tu: f64| {
        sweep_point(&OpoParams::complementary(theta_o, tu, eta_o, hbar))
            .rpr
            .unwrap_or(f64::NEG_INFINITY)
    };
    let theta_u = golden_max(rpr_at, lo, hi, PHASE_TOL);
    let refined = rpr_at(theta_u);
    let (theta_u, rpr) = if refined >= best {
        (theta_u, refined)
    } else {
        (grid[j], best)
    };
    Some(OptimalPhase {
        theta_o,
        theta_u_grid: grid[j],
        theta_u,
        rpr,
    })
}

/// RPR over a `grid_n × grid_n` half-cell grid of `(θ_o, θ_u)` with
/// `η_u = 1 - η_o`, and the optimal `θ_u` for each `θ_o`.
pub fn sweep_rpr(eta_o: f64, grid_n: usize, hbar: f64) -> Result<SweepResult> {
    if grid_n < 8 {
        return Err(Error::InvalidArgument(format!("grid must be at least 8, got {grid_n}")));
    }
    OpoParams::complementary(0.0, 0.0, eta_o, hbar).validate()?;
    let grid = half_cell_grid(grid_n);
    let points: Vec<SweepPoint> = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / grid_n, idx % grid_n);
            sweep_point(&OpoParams::complementary(grid[i], grid[j], eta_o, hbar))
        })
        .collect();
    let optimal: Vec<OptimalPhase> = (0..grid_n)
        .into_par_iter()
        .filter_map(|i| optimal_phase(grid[i], &points[i * grid_n..(i + 1) * grid_n], &grid, eta_o, hbar))
        .collect();
    Ok(SweepResult {
        eta_o,
        eta_u: 1.0 - eta_o,
        theta_o: grid.clone(),
        theta_u: grid,
        points,
        optimal,
    })
}

/// Optimal `θ_u` (refined) at arbitrary observed phases.
pub fn optimal_theta_u(theta_o: &[f64], eta_o: f64, grid_n: usize, hbar: f64) -> Result<Vec<OptimalPhase>> {
    OpoParams::complementary(0.0, 0.0, eta_o, hbar).validate()?;
    let grid = half_cell_grid(grid_n);
    let rows: Vec<Option<OptimalPhase>> = theta_o
        .par_iter()
        .map(|&to| {
            let row: Vec<SweepPoint> = grid
                .iter()
                .map(|&tu| sweep_point(&OpoParams::complementary(to, tu, eta_o, hbar)))
                .collect();
            optimal_phase(to, &row, &grid, eta_o, hbar)
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct EfficiencyPoint {
    pub point: SweepPoint,
    /// Leading-order low-efficiency filtered purity (`None` if the phase is
    /// degenerate).
    pub purity_f_asym: Option<f64>,
    /// `c (1 - η_o)` from the high-efficiency fit.
    pub rpr_fit: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EfficiencyScan {
    pub theta_o: f64,
    pub theta_u: f64,
    pub slope: f64,
    pub points: Vec<EfficiencyPoint>,
}

/// Stationary purities against `η_o` (with `η_u = 1 - η_o`) at fixed
/// phases.
pub fn efficiency_scan(theta_o: f64, theta_u: f64, eta_grid: &[f64], hbar: f64) -> Result<EfficiencyScan> {
    if eta_grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::InvalidEfficiency {
            eta_o: eta_grid
                .iter()
                .copied()
                .find(|&e| !(e > 0.0 && e < 1.0))
                .unwrap_or(f64::NAN),
            eta_u: f64::NAN,
        });
    }
    let fit = rpr_high_efficiency_check(theta_o, theta_u, hbar, &HIGH_EFFICIENCY_ETA_U)?;
    let points = eta_grid
        .par_iter()
        .map(|&eta| EfficiencyPoint {
            point: sweep_point(&OpoParams::complementary(theta_o, theta_u, eta, hbar)),
            purity_f_asym: low_efficiency_formulas(theta_o, eta, hbar).ok().map(|p| p.purity_f),
            rpr_fit: fit.slope * (1.0 - eta),
        })
        .collect();
    Ok(EfficiencyScan {
        theta_o,
        theta_u,
        slope: fit.slope,
        points,
    })
}

/// First `η_o` (linearly interpolated) where `P_SWV` rises through 1.
pub fn swv_crossing(scan: &EfficiencyScan) -> Option<f64> {
    scan.points.windows(2).find_map(|w| {
        let (a, b) = (&w[0].point, &w[1].point);
        (a.purity_swv <= 1.0 && b.purity_swv > 1.0)
            .then(|| a.eta_o + (1.0 - a.purity_swv) * (b.eta_o - a.eta_o) / (b.purity_swv - a.purity_swv))
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SnapshotState {
    pub label: StateLabel,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Row-major divergence flags of the covariance.
    pub divergent: Vec<bool>,
    /// 1-SD contour; for a divergent q-variance only the two p-extremes.
    pub contour: Vec<[f64; 2]>,
    /// `π √|V|`, or `None` when divergent.
    pub area: Option<f64>,
}

pub const SNAPSHOT_CONTOUR_POINTS: usize = 64;

fn snapshot_state(
    label: StateLabel,
    mean: Vector,
    cov: SymMatrix,
    hbar: f64,
    divergent: Vec<bool>,
) -> Result<SnapshotState> {
    let state = GaussianState::new(mean, cov, hbar, label)?;
    let (contour, area) = if divergent.iter().any(|&d| d) {
        let half = state.cov[(1, 1)].sqrt();
        let (q, p) = (state.mean[0], state.mean[1]);
        (vec![[q, p - half], [q, p + half]], None)
    } else {
        let pts = wigner_contour(&state, SNAPSHOT_CONTOUR_POINTS)?;
        (
            pts.iter().map(|v| [v[0], v[1]]).collect(),
            Some(PI * state.cov.determinant().sqrt()),
        )
    };
    Ok(SnapshotState {
        label,
        mean: state.mean.iter().copied().collect(),
        cov: state.cov.to_rows(),
        divergent,
        contour,
        area,
    })
}

/// Unconditioned, filtered, smoothed, true and SWV states at time `t` of a
/// completed single-mode estimation run.
pub fn snapshot_states(
    sys: &LgqSystem,
    truth: &TrueTrajectory,
    run: &EstimationRun,
    x0: &Vector,
    t: f64,
) -> Result<Vec<SnapshotState>> {
    if sys.n_modes() != 1 {
        return Err(Error::InvalidArgument("snapshots are single-mode only".into()));
    }
    let grid = run.grid;
    let k = grid.index_of(t)?;
    let hbar = sys.hbar();
    let unc = unconditioned_variance(sys, &truth.cov[0], &grid)?;
    let prop = Matrix::identity(2, 2) + sys.a() * grid.dt();
    let mut mean_u = x0.clone();
    for _ in 0..k {
        mean_u = &prop * mean_u;
    }
    let finite = vec![false; 4];
    Ok(vec![
        snapshot_state(
            StateLabel::Unconditioned,
            mean_u,
            unc.cov[k].clone(),
            hbar,
            unc.divergent,
        )?,
        snapshot_state(
            StateLabel::Filtered,
            run.filter.filter.means.column(k).into_owned(),
            run.filter.filter.cov[k].clone(),
            hbar,
            finite.clone(),
        )?,
        snapshot_state(
            StateLabel::Smoothed,
            run.smoother.means.column(k).into_owned(),
            run.smoother.cov[k].clone(),
            hbar,
            finite.clone(),
        )?,
        snapshot_state(
            StateLabel::True,
            truth.mean(k),
            truth.cov[k].clone(),
            hbar,
            finite.clone(),
        )?,
        snapshot_state(
            StateLabel::SmoothedWeakValue,
            run.smoother.swv_means.column(k).into_owned(),
            run.smoother.swv_cov[k].clone(),
            hbar,
            finite,
        )?,
    ])
}

/// Empirical against predicted error covariance at one probe time.
#[derive(Clone, Debug, Serialize)]
pub struct McProbe {
    pub t: f64,
    pub index: usize,
    pub filtered_predicted: Vec<Vec<f64>>,
    pub filtered_empirical: Vec<Vec<f64>>,
    pub smoothed_predicted: Vec<Vec<f64>>,
    pub smoothed_empirical: Vec<Vec<f64>>,
    /// `max_ij |emp - pred|`.
    pub filtered_abs_error: f64,
    pub smoothed_abs_error: f64,
    /// Absolute error divided by the largest predicted entry.
    pub filtered_rel_error: f64,
    pub smoothed_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct McReport {
    pub n_traj: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub probes: Vec<McProbe>,
    pub pass: bool,
}

pub const MC_TOLERANCE: f64 = 0.05;
pub const MC_PROBE_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

/// Sample covariance of the columns of `samples` (one sample per column).
fn sample_cov(samples: &Matrix) -> Matrix {
    let n = samples.ncols() as f64;
    let mean = samples.column_mean();
    let mut centred = samples.clone();
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    &centred * centred.transpose() / (n - 1.0)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    crate::linalg::matrix_rows(m)
}

/// Simulates `n_traj` true trajectories, filters and smooths each observed
/// record, and compares the error covariances with `V_F - V_T` and
/// `V_S - V_T` at 25%, 50% and 75% of the horizon.
pub fn mc_consistency(sys: &LgqSystem, grid: &TimeGrid, n_traj: usize, seed: u64) -> Result<McReport> {
    if n_traj < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 trajectories, got {n_traj}"
        )));
    }
    mc_consistency_unchecked(sys, grid, n_traj, seed)
}

/// [`mc_consistency`] without the ensemble-size floor.
pub fn mc_consistency_unchecked(sys: &LgqSystem, grid: &TimeGrid, n_traj: usize, seed: u64) -> Result<McReport> {
    if n_traj < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    let v0 = sys.vacuum();
    let x0 = Vector::zeros(sys.dim());
    let plan = EstimationPlan::new(sys, grid, &v0)?;
    let sim = TrueSimulator::from_cov(sys, plan.covariances.true_cov.clone(), grid);
    let probes: Vec<usize> = MC_PROBE_FRACTIONS.iter().map(|&f| grid.fraction_index(f)).collect();
    let m = sys.dim();

    let errors: Vec<Result<Vec<(Vector, Vector)>>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let (xt, record) = sim.run(&x0, seed, i as u64)?;
            let (xf, xs) = plan.means(&x0, &record.y_o_dt)?;
            Ok(probes
                .iter()
                .map(|&k| {
                    let t = xt.column(k);
                    ((t - xf.column(k)), (t - xs.column(k)))
                })
                .collect())
        })
        .collect();
    let mut filtered = vec![Matrix::zeros(m, n_traj); probes.len()];
    let mut smoothed = vec![Matrix::zeros(m, n_traj); probes.len()];
    for (i, e) in errors.into_iter().enumerate() {
        for (p, (ef, es)) in e?.into_iter().enumerate() {
            filtered[p].set_column(i, &ef);
            smoothed[p].set_column(i, &es);
        }
    }

    let mut out = Vec::with_capacity(probes.len());
    for (p, &k) in probes.iter().enumerate() {
        let vt = plan.covariances.true_cov[k].as_matrix();
        let pred_f = plan.covariances.filter_cov[k].as_matrix() - vt;
        let pred_s = plan.smoother_gains.cov[k].as_matrix() - vt;
        let emp_f = sample_cov(&filtered[p]);
        let emp_s = sample_cov(&smoothed[p]);
        let abs_f = (&emp_f - &pred_f).amax();
        let abs_s = (&emp_s - &pred_s).amax();
        let rel_f = abs_f / pred_f.amax();
        let rel_s = abs_s / pred_s.amax();
        out.push(McProbe {
            t: grid.time(k),
            index: k,
            filtered_predicted: rows(&pred_f),
            filtered_empirical: rows(&emp_f),
            smoothed_predicted: rows(&pred_s),
            smoothed_empirical: rows(&emp_s),
            filtered_abs_error: abs_f,
            smoothed_abs_error: abs_s,
            filtered_rel_error: rel_f,
            smoothed_rel_error: rel_s,
            pass: rel_f <= MC_TOLERANCE && rel_s <= MC_TOLERANCE,
        });
    }
    Ok(McReport {
        n_traj,
        seed,
        tolerance: MC_TOLERANCE,
        pass: out.iter().all(|p| p.pass),
        probes: out,
    })
}
