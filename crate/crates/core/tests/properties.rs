use proptest::prelude::*;

use lgq_core::analysis::sweep_point;
use lgq_core::estimation::run_estimation;
use lgq_core::linalg::{
    is_psd, lyapunov_closed_form_2d, lyapunov_residual, lyapunov_vectorized, max_real_eigenvalue, regularized_inverse,
    solve_lyapunov,
};
use lgq_core::model::{purity_of, uncertainty_margin, wigner_contour};
use lgq_core::trajectory::simulate_true;
use lgq_core::{build_opo, GaussianState, Matrix, OpoParams, StateLabel, SymMatrix, TimeGrid, Vector};

/// A random Hurwitz matrix: `B` shifted so its spectral abscissa is `-margin`.
fn hurwitz(entries: &[f64], n: usize, margin: f64) -> Matrix {
    let b = Matrix::from_row_slice(n, n, &entries[..n * n]);
    let shift = max_real_eigenvalue(&b) + margin;
    b - Matrix::identity(n, n) * shift
}

fn spd(entries: &[f64], n: usize, floor: f64) -> SymMatrix {
    let e = Matrix::from_row_slice(n, n, &entries[..n * n]);
    SymMatrix::symmetrize(&e * e.transpose() + Matrix::identity(n, n) * floor)
}

fn entries(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, len)
}

fn opo() -> impl Strategy<Value = OpoParams> {
    (-1.4..1.4f64, -1.4..1.4f64, 0.05..0.95f64).prop_map(|(to, tu, eo)| OpoParams::complementary(to, tu, eo, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_residual_is_small(n in 1usize..=8, a in entries(64), e in entries(64), margin in 0.2..2.0f64) {
        let a = hurwitz(&a, n, margin);
        let rhs = spd(&e, n, 0.0);
        let q = solve_lyapunov(&a, &rhs).unwrap();
        let scale = rhs.norm().max(1e-300);
        prop_assert!(lyapunov_residual(&a, &q, &rhs) <= 1e-10 * scale.max(q.norm() * a.norm()));
        prop_assert!(is_psd(&q, 1e-10 * q.norm().max(1.0)));
    }

    #[test]
    fn closed_form_lyapunov_matches_vectorized(a in entries(4), e in entries(4), margin in 0.05..2.0f64) {
        let a = hurwitz(&a, 2, margin);
        let rhs = spd(&e, 2, 0.0);
        let closed = lyapunov_closed_form_2d(&a, &rhs).unwrap();
        let general = lyapunov_vectorized(&a, &rhs).unwrap();
        prop_assert!((closed.as_matrix() - general.as_matrix()).amax() <= 1e-10 * general.amax().max(1.0));
    }

    #[test]
    fn regularized_inverse_inverts_well_conditioned(n in 1usize..=6, e in entries(36)) {
        let s = spd(&e, n, 0.5);
        let inv = regularized_inverse(&s, 0.0).unwrap();
        let err = (s.as_matrix() * inv.as_matrix() - Matrix::identity(n, n)).amax();
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn contour_points_lie_on_the_ellipse(e in entries(4), mq in -5.0..5.0f64, mp in -5.0..5.0f64, n in 3usize..40) {
        let cov = spd(&e, 2, 0.1);
        let mean = Vector::from_row_slice(&[mq, mp]);
        let state = GaussianState::new(mean.clone(), cov.clone(), 1.0, StateLabel::SmoothedWeakValue).unwrap();
        let inv = cov.as_matrix().clone().try_inverse().unwrap();
        for x in wigner_contour(&state, n).unwrap() {
            let d = &x - &mean;
            prop_assert!(((d.transpose() * &inv * &d)[(0, 0)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn adding_noise_never_raises_purity(e in entries(4), f in entries(4)) {
        let v = SymMatrix::symmetrize(spd(&e, 2, 0.0).as_matrix() + Matrix::identity(2, 2) * 0.5);
        let noisy = SymMatrix::symmetrize(v.as_matrix() + spd(&f, 2, 0.0).as_matrix());
        prop_assert!(uncertainty_margin(&v, 1.0) >= -1e-12);
        prop_assert!(purity_of(&noisy, 1.0).unwrap() <= purity_of(&v, 1.0).unwrap() + 1e-12);
        prop_assert!(purity_of(&v, 1.0).unwrap() <= 1.0 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_deterministic(p in opo(), seed in any::<u64>()) {
        let sys = build_opo(&p).unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 1e-3).unwrap();
        let x0 = Vector::zeros(2);
        let (t1, r1) = simulate_true(&sys, &sys.vacuum(), &x0, &grid, seed).unwrap();
        let (t2, r2) = simulate_true(&sys, &sys.vacuum(), &x0, &grid, seed).unwrap();
        prop_assert_eq!(&t1.means, &t2.means);
        prop_assert_eq!(&r1.y_o_dt, &r2.y_o_dt);
        prop_assert_eq!(&r1.y_u_dt, &r2.y_u_dt);
        let (_, r3) = simulate_true(&sys, &sys.vacuum(), &x0, &grid, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&r1.y_o_dt, &r3.y_o_dt);
    }

    #[test]
    fn smoothing_never_loses_information(p in opo(), seed in 0u64..1000) {
        let sys = build_opo(&p).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1e-3).unwrap();
        let x0 = Vector::zeros(2);
        let (_, record) = simulate_true(&sys, &sys.vacuum(), &x0, &grid, seed).unwrap();
        let run = run_estimation(&sys, &record.observed_only(), &x0, &sys.vacuum()).unwrap();
        for k in 0..grid.n_nodes() {
            let gap = SymMatrix::symmetrize(run.filter.filter.cov[k].as_matrix() - run.smoother.cov[k].as_matrix());
            prop_assert!(gap.min_eigenvalue() >= -1e-9);
            let above_truth = SymMatrix::symmetrize(run.smoother.cov[k].as_matrix() - run.true_cov[k].as_matrix());
            prop_assert!(above_truth.min_eigenvalue() >= -1e-9);
            prop_assert!(run.physical_smoothed[k]);
            prop_assert!(run.purity_smoothed[k] >= run.purity_filtered[k] - 1e-9);
        }
    }

    #[test]
    fn rpr_is_symmetric_under_joint_phase_flip(p in opo()) {
        let a = sweep_point(&p);
        let b = sweep_point(&OpoParams { theta_o: -p.theta_o, theta_u: -p.theta_u, ..p });
        match (a.rpr, b.rpr) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-8);
                prop_assert!(x > 0.0 && x <= 1.0 + 1e-9);
            }
            (x, y) => prop_assert_eq!(x.is_some(), y.is_some()),
        }
    }
}
