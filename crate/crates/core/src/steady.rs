//! Stationary conditioned variances and the efficiency asymptotics.

use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{is_hurwitz, solve_lyapunov, steady_riccati_form, Matrix, SteadyConfig, SteadySolution, SymMatrix};
use crate::model::{build_opo, purity_of, LgqSystem, OpoParams};

/// A symmetric matrix whose entries may be flagged as divergent (growing
/// without bound). Divergent entries serialize as the string `"inf"`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedMatrix {
    pub value: SymMatrix,
    /// Row-major.
    pub divergent: Vec<bool>,
}

impl FlaggedMatrix {
    pub fn finite(value: SymMatrix) -> Self {
        let n = value.dim();
        FlaggedMatrix {
            value,
            divergent: vec![false; n * n],
        }
    }

    pub fn is_divergent(&self, i: usize, j: usize) -> bool {
        self.divergent[i * self.value.dim() + j]
    }

    pub fn any_divergent(&self) -> bool {
        self.divergent.iter().any(|&d| d)
    }

    /// `Some(v)` for a finite entry.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (!self.is_divergent(i, j)).then(|| self.value[(i, j)])
    }

    /// Purity, reported as 0 when any entry diverges.
    pub fn purity(&self, hbar: f64) -> Result<f64> {
        if self.any_divergent() {
            Ok(0.0)
        } else {
            purity_of(&self.value, hbar)
        }
    }
}

impl Serialize for FlaggedMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Entry {
            Finite(f64),
            Divergent(&'static str),
        }
        let n = self.value.dim();
        let mut rows = serializer.serialize_seq(Some(n))?;
        for i in 0..n {
            let row: Vec<Entry> = (0..n)
                .map(|j| match self.get(i, j) {
                    Some(v) => Entry::Finite(v),
                    None => Entry::Divergent("inf"),
                })
                .collect();
            rows.serialize_element(&row)?;
        }
        rows.end()
    }
}

/// Stationary conditioned variances and purities.
#[derive(Clone, Debug, Serialize)]
pub struct SteadyStateReport {
    pub hbar: f64,
    pub v_t: FlaggedMatrix,
    pub v_f: FlaggedMatrix,
    pub lambda_r: FlaggedMatrix,
    pub v_s: FlaggedMatrix,
    pub v_swv: FlaggedMatrix,
    pub purity_t: f64,
    pub purity_f: f64,
    pub purity_s: f64,
    pub purity_swv: f64,
    /// `None` when `1 - P_F` vanishes or the state is not stationary.
    pub rpr: Option<f64>,
    /// `A - Γ_o^T C_o - V_T C_o^T C_o` is Hurwitz.
    pub abar_hurwitz: bool,
    /// `A - Γ_o^T C_o - V_F C_o^T C_o` is Hurwitz.
    pub m_hurwitz: bool,
    /// All conditioned variances converged.
    pub stationary: bool,
}

/// Denominators `1 - P_F` below this make the RPR undefined.
pub const RPR_DENOMINATOR_TOL: f64 = 1e-9;

pub fn rpr(p_f: f64, p_s: f64) -> Option<f64> {
    let denom = 1.0 - p_f;
    (denom.abs() > RPR_DENOMINATOR_TOL).then(|| (p_s - p_f) / denom)
}

fn flagged_steady(result: Result<SteadySolution>, dim: usize) -> Result<FlaggedMatrix> {
    match result {
        Ok(sol) => Ok(FlaggedMatrix::finite(sol.value)),
        Err(Error::NoConvergence {
            divergent, last_value, ..
        }) if divergent.iter().any(|&d| d) => Ok(FlaggedMatrix {
            value: SymMatrix::symmetrize(Matrix::from_row_slice(dim, dim, &last_value)),
            divergent,
        }),
        Err(e) => Err(e),
    }
}

fn union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

/// Stationary `V_T`, `V_F`, `Λ`, `V_S` and `V_SWV`. Variances without a
/// stationary limit are reported with divergent flags (`stationary` is
/// then false) rather than as an error.
pub fn steady_report(sys: &LgqSystem) -> Result<SteadyStateReport> {
    steady_report_with(sys, &SteadyConfig::default())
}

pub fn steady_report_with(sys: &LgqSystem, cfg: &SteadyConfig) -> Result<SteadyStateReport> {
    let m = sys.dim();
    let hbar = sys.hbar();
    let start = SymMatrix::scaled_identity(m, hbar.max(sys.d().amax()));
    let v_t = flagged_steady(steady_riccati_form(&sys.true_form(), &start, cfg), m)?;
    let v_f = flagged_steady(steady_riccati_form(&sys.filter_form(), &start, cfg), m)?;
    let lambda_r = if v_t.any_divergent() {
        FlaggedMatrix {
            value: SymMatrix::zeros(m),
            divergent: vec![true; m * m],
        }
    } else {
        flagged_steady(
            steady_riccati_form(&sys.retro_information_form(&v_t.value), &SymMatrix::zeros(m), cfg),
            m,
        )?
    };

    let (vt, vf, l) = (v_t.value.as_matrix(), v_f.value.as_matrix(), lambda_r.value.as_matrix());
    let eye = Matrix::identity(m, m);
    let q = vf - vt;
    let v_s = (&eye + &q * l)
        .try_inverse()
        .map(|s| SymMatrix::symmetrize(s * &q + vt))
        .ok_or(Error::SingularHaloedVariance(0))?;
    let info = (&eye - l * vt).try_inverse().ok_or(Error::SingularCombination(0))? * l;
    let v_swv = (&eye + vf * info)
        .try_inverse()
        .map(|w| SymMatrix::symmetrize(w * vf))
        .ok_or(Error::SingularCombination(0))?;

    let combined_flags = union(&v_f.divergent, &union(&v_t.divergent, &lambda_r.divergent));
    let v_s = FlaggedMatrix {
        value: v_s,
        divergent: combined_flags.clone(),
    };
    let v_swv = FlaggedMatrix {
        value: v_swv,
        divergent: combined_flags,
    };
    let stationary = !(v_t.any_divergent() || v_f.any_divergent() || lambda_r.any_divergent());

    let co = sys.c_o();
    let base = sys.a() - sys.gamma_o().transpose() * co;
    let gain = co.transpose() * co;
    let abar_hurwitz = !v_t.any_divergent() && is_hurwitz(&(&base - vt * &gain));
    let m_hurwitz = !v_f.any_divergent() && is_hurwitz(&(&base - vf * &gain));

    let purity_t = v_t.purity(hbar)?;
    let purity_f = v_f.purity(hbar)?;
    let purity_s = v_s.purity(hbar)?;
    let purity_swv = v_swv.purity(hbar)?;
    Ok(SteadyStateReport {
        hbar,
        rpr: if stationary { rpr(purity_f, purity_s) } else { None },
        v_t,
        v_f,
        lambda_r,
        v_s,
        v_swv,
        purity_t,
        purity_f,
        purity_s,
        purity_swv,
        abar_hurwitz,
        m_hurwitz,
        stationary,
    })
}

/// Efficiency regime of an asymptotic comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    LowEfficiency,
    HighEfficiency,
}

/// Leading-order stationary moments of the OPO for `η_o → 0`.
#[derive(Clone, Debug, Serialize)]
pub struct LowEfficiencyPrediction {
    pub regime: Regime,
    pub theta_o: f64,
    pub eta_o: f64,
    pub hbar: f64,
    pub v_f: FlaggedMatrix,
    pub v_r: FlaggedMatrix,
    /// As printed; only the diagonal is asserted against numerics.
    pub v_swv: FlaggedMatrix,
    pub purity_f: f64,
    pub purity_swv: f64,
}

/// Leading-order OPO moments at low observed efficiency:
///
/// ```text
/// V_F   = (ħ/2) [[|sec θ| η^{-1/2},   ½ s sin θ η^{1/2}], [·, ½]]
/// V_R   = (ħ/2) [[|sec θ| η^{-1/2},  -2 s csc θ η^{-1/2}], [·, 2 csc²θ η^{-1}]]
/// V_SWV = (ħ/2) [[½|sec θ| η^{-1/2},  ½|sin θ| η^{1/2}],  [·, ½]]
/// P_F = √(2|cos θ|) η^{1/4},  P_SWV = 2√|cos θ| η^{1/4}
/// ```
///
/// with `s = sgn(cos θ)`. Entries with a vanishing `sin θ` in the
/// denominator are flagged divergent.
pub fn low_efficiency_formulas(theta_o: f64, eta_o: f64, hbar: f64) -> Result<LowEfficiencyPrediction> {
    let cos = theta_o.cos();
    if cos.abs() < 1e-6 {
        return Err(Error::DegeneratePhase(cos.abs()));
    }
    if !(eta_o > 0.0 && eta_o <= 1.0) || !(hbar > 0.0) {
        return Err(Error::InvalidArgument(format!("eta_o = {eta_o}, hbar = {hbar}")));
    }
    let sin = theta_o.sin();
    let h = hbar / 2.0;
    let sec = 1.0 / cos.abs();
    let root = eta_o.sqrt();
    let s = cos.signum();
    let sym = |a: f64, b: f64, c: f64| SymMatrix::symmetrize(Matrix::from_row_slice(2, 2, &[a, b, b, c]) * h);

    let v_f = FlaggedMatrix::finite(sym(sec / root, 0.5 * s * sin * root, 0.5));
    let v_swv = FlaggedMatrix::finite(sym(0.5 * sec / root, 0.5 * sin.abs() * root, 0.5));
    let v_r = if sin.abs() < 1e-12 {
        FlaggedMatrix {
            value: sym(sec / root, 0.0, 0.0),
            divergent: vec![false, true, true, true],
        }
    } else {
        let csc = 1.0 / sin;
        FlaggedMatrix::finite(sym(sec / root, -2.0 * s * csc / root, 2.0 * csc * csc / eta_o))
    };
    let quarter = eta_o.powf(0.25);
    Ok(LowEfficiencyPrediction {
        regime: Regime::LowEfficiency,
        theta_o,
        eta_o,
        hbar,
        v_f,
        v_r,
        v_swv,
        purity_f: (2.0 * cos.abs()).sqrt() * quarter,
        purity_swv: 2.0 * cos.abs().sqrt() * quarter,
    })
}

/// Relative tolerance for the asymptotic comparisons.
pub const ASYMPTOTIC_TOL: f64 = 0.05;

/// Numerical stationary moments set against the low-efficiency formulas.
#[derive(Clone, Debug, Serialize)]
pub struct LowEfficiencyCheck {
    pub prediction: LowEfficiencyPrediction,
    pub theta_u: f64,
    pub purity_f: f64,
    pub purity_s: f64,
    pub purity_swv: f64,
    /// Numerical over predicted `P_F`.
    pub purity_f_ratio: f64,
    pub purity_swv_ratio: f64,
    pub swv_over_f: f64,
    pub smoothed_over_f: f64,
    pub v_f: SymMatrix,
    pub v_r: Option<SymMatrix>,
    /// Row-major `|num - pred| / |pred|`; `None` where the prediction
    /// diverges or vanishes.
    pub v_f_rel_errors: Vec<Option<f64>>,
    pub v_r_rel_errors: Vec<Option<f64>>,
    pub tolerance: f64,
    /// `P_F` and `P_SWV` within `tolerance` of the formulas.
    pub pass: bool,
}

fn rel_errors(num: &SymMatrix, pred: &FlaggedMatrix) -> Vec<Option<f64>> {
    let n = num.dim();
    (0..n * n)
        .map(|k| {
            pred.get(k / n, k % n)
                .filter(|p| *p != 0.0)
                .map(|p| ((num[(k / n, k % n)] - p) / p).abs())
        })
        .collect()
}

/// Stationary OPO moments at `η_o` (with `η_u = 1 - η_o`) against the
/// leading-order low-efficiency predictions.
pub fn low_efficiency_check(theta_o: f64, theta_u: f64, eta_o: f64, hbar: f64) -> Result<LowEfficiencyCheck> {
    let prediction = low_efficiency_formulas(theta_o, eta_o, hbar)?;
    let sys = build_opo(&OpoParams::complementary(theta_o, theta_u, eta_o, hbar))?;
    let report = steady_report(&sys)?;
    if !report.stationary {
        return Err(Error::NoConvergence {
            horizon: SteadyConfig::default().max_time,
            residual: f64::NAN,
            divergent: report.v_f.divergent.clone(),
            last_value: report.v_f.value.as_matrix().as_slice().to_vec(),
        });
    }
    let v_r = report
        .lambda_r
        .value
        .as_matrix()
        .clone()
        .try_inverse()
        .map(|inv| SymMatrix::symmetrize(inv - report.v_t.value.as_matrix()));
    let v_r_rel_errors = match &v_r {
        Some(v) => rel_errors(v, &prediction.v_r),
        None => vec![None; 4],
    };
    let purity_f_ratio = report.purity_f / prediction.purity_f;
    let purity_swv_ratio = report.purity_swv / prediction.purity_swv;
    let within = |r: f64| (r - 1.0).abs() <= ASYMPTOTIC_TOL;
    Ok(LowEfficiencyCheck {
        theta_u,
        purity_f: report.purity_f,
        purity_s: report.purity_s,
        purity_swv: report.purity_swv,
        purity_f_ratio,
        purity_swv_ratio,
        swv_over_f: report.purity_swv / report.purity_f,
        smoothed_over_f: report.purity_s / report.purity_f,
        v_f_rel_errors: rel_errors(&report.v_f.value, &prediction.v_f),
        v_f: report.v_f.value,
        v_r,
        v_r_rel_errors,
        tolerance: ASYMPTOTIC_TOL,
        pass: within(purity_f_ratio) && within(purity_swv_ratio),
        prediction,
    })
}

/// Leading-order high-efficiency correction `Q ≈ V_F - V_T`, solving
/// `-Ā Q - Q Ā^T = K_u[V_T] K_u[V_T]^T` with `Ā = A - Γ_o^T C_o - V_T C_o^T C_o`.
pub fn high_efficiency_q(sys: &LgqSystem) -> Result<SymMatrix> {
    let m = sys.dim();
    let start = SymMatrix::scaled_identity(m, sys.hbar().max(sys.d().amax()));
    let vt = steady_riccati_form(&sys.true_form(), &start, &SteadyConfig::default())?.value;
    high_efficiency_q_given(sys, &vt)
}

pub fn high_efficiency_q_given(sys: &LgqSystem, vt: &SymMatrix) -> Result<SymMatrix> {
    let abar = sys.haloed_drift(vt);
    let ku = sys.kick_u(vt);
    solve_lyapunov(&abar, &SymMatrix::outer(&ku))
}

/// One point of the high-efficiency scan.
#[derive(Clone, Debug, Serialize)]
pub struct HighEfficiencyPoint {
    pub eta_u: f64,
    pub rpr: Option<f64>,
    /// `max_ij |Q - (V_F - V_T)|_ij / (η_u² ‖V_T‖_2)`.
    pub q_error_ratio: Option<f64>,
}

/// Linear fit `R ≈ c η_u` over the points with a defined RPR.
#[derive(Clone, Debug, Serialize)]
pub struct HighEfficiencyFit {
    pub regime: Regime,
    pub theta_o: f64,
    pub theta_u: f64,
    pub slope: f64,
    pub points: Vec<HighEfficiencyPoint>,
    /// `|R - c η_u| / R` per fitted point.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `|(R/η)_{i+1} / (R/η)_i - 1|` between successive fitted points
    /// ordered by `η_u`.
    pub cauchy_ratios: Vec<f64>,
}

/// Stationary RPR at `η_o = 1 - η_u` for each `η_u` and the linear fit.
pub fn rpr_high_efficiency_check(theta_o: f64, theta_u: f64, hbar: f64, eta_u: &[f64]) -> Result<HighEfficiencyFit> {
    if eta_u.iter().any(|&e| !(0.0..=0.1).contains(&e)) {
        return Err(Error::InvalidArgument(
            "high-efficiency scan needs 0 <= eta_u <= 0.1".into(),
        ));
    }
    let mut points = Vec::with_capacity(eta_u.len());
    for &eu in eta_u {
        let sys = build_opo(&OpoParams::complementary(theta_o, theta_u, 1.0 - eu, hbar))?;
        let report = steady_report(&sys)?;
        let q_error_ratio = if eu > 0.0 && report.stationary {
            let q = high_efficiency_q_given(&sys, &report.v_t.value)?;
            let diff = report.v_f.value.as_matrix() - report.v_t.value.as_matrix();
            let err = (q.as_matrix() - diff).amax();
            Some(err / (eu * eu * report.v_t.value.max_eigenvalue()))
        } else {
            None
        };
        points.push(HighEfficiencyPoint {
            eta_u: eu,
            rpr: if eu > 0.0 { report.rpr } else { None },
            q_error_ratio,
        });
    }
    let mut fitted: Vec<(f64, f64)> = points.iter().filter_map(|p| p.rpr.map(|r| (p.eta_u, r))).collect();
    fitted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let sxy: f64 = fitted.iter().map(|(e, r)| e * r).sum();
    let sxx: f64 = fitted.iter().map(|(e, _)| e * e).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    let residuals: Vec<f64> = fitted.iter().map(|(e, r)| ((r - slope * e) / r).abs()).collect();
    let cauchy_ratios = fitted
        .windows(2)
        .map(|w| ((w[1].1 / w[1].0) / (w[0].1 / w[0].0) - 1.0).abs())
        .collect();
    Ok(HighEfficiencyFit {
        regime: Regime::HighEfficiency,
        theta_o,
        theta_u,
        slope,
        max_residual: residuals.iter().copied().fold(0.0, f64::max),
        residuals,
        points,
        cauchy_ratios,
    })
}
