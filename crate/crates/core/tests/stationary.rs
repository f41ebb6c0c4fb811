use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use lgq_core::analysis::{efficiency_scan, log_grid, sweep_rpr};
use lgq_core::linalg::{lyapunov_closed_form_2d, lyapunov_vectorized, steady_riccati, KickSign, SteadyConfig};
use lgq_core::model::physical_by_determinant;
use lgq_core::steady::{low_efficiency_check, rpr_high_efficiency_check, steady_report};
use lgq_core::{build_opo, Matrix, OpoParams, SymMatrix};

#[test]
fn scalar_steady_riccati() {
    let one = Matrix::from_element(1, 1, 1.0);
    let sol = steady_riccati(
        &(-&one),
        &SymMatrix::from_diagonal(&[1.0]),
        &one,
        &Matrix::zeros(1, 1),
        KickSign::Plus,
        &SteadyConfig::default(),
    )
    .unwrap();
    assert!((sol.value[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-9);
    assert!(sol.residual < 1e-9);
}

#[test]
fn opo_high_efficiency_lyapunov_cross_check() {
    let sys = build_opo(&OpoParams::complementary(0.0, FRAC_PI_2, 0.9, 1.0)).unwrap();
    let r = steady_report(&sys).unwrap();
    let abar = sys.haloed_drift(&r.v_t.value);
    let rhs = SymMatrix::outer(&sys.kick_u(&r.v_t.value));
    let closed = lyapunov_closed_form_2d(&abar, &rhs).unwrap();
    let general = lyapunov_vectorized(&abar, &rhs).unwrap();
    assert!((closed.as_matrix() - general.as_matrix()).amax() < 1e-10);
    assert!(r.abar_hurwitz && r.m_hurwitz);
}

#[test]
fn rpr_per_efficiency_converges() {
    let fit = rpr_high_efficiency_check(FRAC_PI_4, 0.0, 1.0, &[0.0, 0.0025, 0.005, 0.01, 0.02]).unwrap();
    assert!(fit.points[0].rpr.is_none());
    assert_eq!(fit.residuals.len(), 4);
    assert!(fit.max_residual <= 0.1);
    for r in &fit.cauchy_ratios {
        assert!(*r <= 0.05, "{:?}", fit.cauchy_ratios);
    }
}

#[test]
fn high_efficiency_check_rejects_large_losses() {
    assert!(rpr_high_efficiency_check(0.0, 0.0, 1.0, &[0.2]).is_err());
}

#[test]
fn low_efficiency_formulas_at_one_percent() {
    let c = low_efficiency_check(FRAC_PI_4, 0.0, 1e-2, 1.0).unwrap();
    let worst = c
        .v_f_rel_errors
        .iter()
        .chain(&c.v_r_rel_errors)
        .flatten()
        .copied()
        .fold(0.0, f64::max);
    assert!(worst <= 0.15, "{worst}");
}

#[test]
fn efficiency_scan_limits() {
    let scan = efficiency_scan(0.3, 0.0, &log_grid(1e-5, 0.99, 40), 1.0).unwrap();
    for e in &scan.points {
        if e.point.eta_o <= 1e-3 {
            let ratio = e.point.purity_f / e.purity_f_asym.unwrap();
            assert!((ratio - 1.0).abs() <= 0.05, "η_o = {}: {ratio}", e.point.eta_o);
        }
    }
    let first = &scan.points[0].point;
    assert!((first.purity_swv / first.purity_s - 1.0).abs() <= 0.02);
    for w in scan.points.windows(2) {
        assert!(w[1].point.purity_f >= w[0].point.purity_f - 1e-12);
    }
    assert!(scan.points.iter().all(|e| e.point.stationary));
}

#[test]
fn efficiency_scan_rejects_out_of_range() {
    assert!(efficiency_scan(0.3, 0.0, &[0.5, 1.0], 1.0).is_err());
    assert!(efficiency_scan(0.3, 0.0, &[0.0], 1.0).is_err());
}

#[test]
fn coarse_sweep_is_bounded_and_symmetric() {
    let sweep = sweep_rpr(0.5, 8, 1.0).unwrap();
    let n = sweep.theta_o.len();
    for i in 0..n {
        for j in 0..n {
            let r = sweep.points[i * n + j].rpr.unwrap();
            assert!(r > 0.0 && r <= 1.0 + 1e-9);
            let mirrored = sweep.points[(n - 1 - i) * n + (n - 1 - j)].rpr.unwrap();
            assert!((r - mirrored).abs() < 1e-8);
        }
    }
    assert_eq!(sweep.optimal.len(), n);
}

#[test]
fn sweep_rejects_tiny_grid_and_bad_efficiency() {
    assert!(sweep_rpr(0.5, 2, 1.0).is_err());
    assert!(sweep_rpr(1.5, 16, 1.0).is_err());
}

#[test]
fn determinant_physicality_agrees_with_eigenvalue_test() {
    let r = steady_report(&build_opo(&OpoParams::complementary(0.3, 0.0, 0.5, 1.0)).unwrap()).unwrap();
    assert_eq!(
        physical_by_determinant(&r.v_swv.value, 1.0, 1e-9),
        Some(r.purity_swv <= 1.0 + 1e-9)
    );
    assert_eq!(physical_by_determinant(&r.v_s.value, 1.0, 1e-9), Some(true));
}
