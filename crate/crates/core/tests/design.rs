use dfc_core::dfc::{
    evaluate_policy_cost, inverse_pair, lyapunov_residual, lyapunov_solve, model_based_pi, solve_dfc_are,
};
use dfc_core::linalg::sym_eigenvalues;
use dfc_core::maglev;
use dfc_core::sim::{simulate_dfc_closed_loop, ClosedLoopSpec};
use dfc_core::{CostWeights, Gain, StateSpaceModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn weights() -> CostWeights {
    CostWeights::identity_q(4, &[1.0, 2.0]).unwrap()
}

fn x0() -> DVector<f64> {
    DVector::from_column_slice(&[0.005, 0.0, -0.005, 0.0])
}

/// Value matrix of `gain` by the n^2 Kronecker system, independent of the
/// library's reduced solver.
fn kron_lyapunov(m: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(P M) = (M^T (x) I) vec P, vec(M^T P) = (I (x) M^T) vec P
    let op = m.transpose().kronecker(&eye) + eye.kronecker(&m.transpose());
    let rhs = -DVector::from_column_slice(s.as_slice());
    let v = op.lu().solve(&rhs).unwrap();
    DMatrix::from_column_slice(n, n, v.as_slice())
}

fn value_of(model: &StateSpaceModel, gain: &Gain, w: &CostWeights) -> DMatrix<f64> {
    let (abar, bbar) = inverse_pair(model);
    let k = gain.matrix();
    kron_lyapunov(&(abar + bbar * k), &(w.q() + k.transpose() * w.r() * k))
}

#[test]
fn lyapunov_matches_kronecker_system() {
    let m = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.3, -0.5, -1.0, 0.7, 0.1, -0.4, -3.0]);
    let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]);
    let p = lyapunov_solve(&m, &s).unwrap();
    let oracle = kron_lyapunov(&m, &s);
    assert!((&p - &oracle).norm() < 1e-12 * oracle.norm());
}

#[test]
fn lyapunov_matches_eigenbasis_formula() {
    // M = V diag(l) V^-1 with real eigenvalues; in the eigenbasis the
    // equation decouples to P~_ij = -S~_ij / (l_i + l_j).
    let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.4, 1.0, 0.1, 0.0, -0.5, 1.0]);
    let l = [-1.0, -2.5, -4.0];
    let v_inv = v.clone().try_inverse().unwrap();
    let m = &v * DMatrix::from_diagonal(&DVector::from_column_slice(&l)) * &v_inv;
    let s = DMatrix::<f64>::identity(3, 3);
    let s_t = v.transpose() * &s * &v;
    let p_t = DMatrix::from_fn(3, 3, |i, j| -s_t[(i, j)] / (l[i] + l[j]));
    let oracle = v_inv.transpose() * p_t * &v_inv;
    let p = lyapunov_solve(&m, &s).unwrap();
    assert!((&p - &oracle).norm() < 1e-10 * oracle.norm());
}

#[test]
fn scalar_are_closed_form() {
    for (a, b, q, r) in [(2.0, 1.0, 1.0, 1.0), (-3.0, 0.5, 2.0, 0.7), (10.0, 4.0, 0.3, 5.0)] {
        let model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
        )
        .unwrap();
        let w = CostWeights::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap();
        let sol = solve_dfc_are(&model, &w).unwrap();
        let (ab, bb) = (1.0 / a, b / a);
        let p = r * (ab + (ab * ab + bb * bb * q / r).sqrt()) / (bb * bb);
        let k = -bb * p / r;
        assert!((sol.p[(0, 0)] - p).abs() < 1e-9 * p, "p {} vs {p}", sol.p[(0, 0)]);
        assert!((sol.k.matrix()[(0, 0)] - k).abs() < 1e-9 * k.abs());
        // The cost of x' = lambda x from x0 = 1 is -(q + r k^2) lambda / 2.
        let lambda = a / (1.0 + b * k);
        assert!(lambda < 0.0);
        assert!((-(q + r * k * k) * lambda / 2.0 - p).abs() < 1e-9 * p);
    }
}

#[test]
fn are_solution_satisfies_riccati_equation() {
    let model = maglev::printed_model();
    let w = weights();
    let sol = solve_dfc_are(&model, &w).unwrap();
    let (abar, bbar) = inverse_pair(&model);
    let p = &sol.p;
    let ric = abar.transpose() * p + p * &abar - p * &bbar * w.r_inv() * bbar.transpose() * p + w.q();
    assert!(ric.norm() < 1e-8 * p.norm(), "residual {}", ric.norm());
    // The gain is the value matrix of itself.
    let pk = value_of(&model, &sol.k, &w);
    assert!((&pk - p).norm() < 1e-8 * p.norm());
}

#[test]
fn model_based_pi_is_monotone_and_reaches_are() {
    let model = maglev::printed_model();
    let w = weights();
    let star = solve_dfc_are(&model, &w).unwrap();
    let trace = model_based_pi(&model, &w, &maglev::k1_printed(), 1e-10, 50).unwrap();
    assert!(trace.converged);
    for pair in trace.steps.windows(2) {
        let d = &pair[0].p - &pair[1].p;
        let floor = -1e-8 * pair[0].p.norm();
        assert!(sym_eigenvalues(&d).iter().all(|&e| e >= floor));
    }
    for step in &trace.steps {
        let oracle = value_of(&model, &gain_before(&trace, step.iteration), &w);
        assert!((&step.p - &oracle).norm() < 1e-8 * oracle.norm());
    }
    assert!((trace.final_p().unwrap() - &star.p).norm() < 1e-6);
}

fn gain_before(trace: &dfc_core::dfc::PiTrace, iteration: usize) -> Gain {
    if iteration == 1 {
        trace.k1.clone()
    } else {
        trace.steps[iteration - 2].k_next.clone()
    }
}

#[test]
fn simulated_cost_matches_value_matrix() {
    let model = maglev::printed_model();
    let w = weights();
    let star = solve_dfc_are(&model, &w).unwrap();
    let k1 = maglev::k1_printed();
    let mut costs = Vec::new();
    for gain in [&k1, &star.k] {
        let traj = simulate_dfc_closed_loop(&model, &ClosedLoopSpec::ideal(gain.clone(), x0(), 1e-3, 10.0)).unwrap();
        let p = value_of(&model, gain, &w);
        let cost = evaluate_policy_cost(&traj, &w, gain, Some(&p)).unwrap();
        let predicted = (x0().transpose() * &p * x0())[(0, 0)];
        assert!((cost.cost - predicted).abs() < 0.01 * predicted, "{} vs {predicted}", cost.cost);
        assert!(!cost.tail_warning);
        costs.push(cost.cost);
    }
    assert!(costs[0] > costs[1], "initial gain must cost more than the optimum");
}

#[test]
fn optimal_gain_settles_printed_model() {
    let gain = maglev::k_are_printed();
    let traj = simulate_dfc_closed_loop(&maglev::printed_model(), &ClosedLoopSpec::ideal(gain, x0(), 1e-3, 4.0)).unwrap();
    assert!(traj.final_state().norm() < 1e-3 * x0().norm());
}

fn hurwitz_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (proptest::collection::vec(-1.0f64..1.0, 16), 0.1f64..3.0).prop_map(|(v, margin)| {
        let n = DMatrix::from_row_slice(4, 4, &v);
        // Symmetric part -(N N^T + margin I) keeps every eigenvalue in the left half-plane.
        let skew = &n - n.transpose();
        skew - &n * n.transpose() - DMatrix::identity(4, 4) * margin
    })
}

proptest! {
    #[test]
    fn lyapunov_solution_is_symmetric_psd(m in hurwitz_matrix(), v in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let l = DMatrix::from_row_slice(4, 4, &v);
        let s = &l * l.transpose();
        let p = lyapunov_solve(&m, &s).unwrap();
        prop_assert!((&p - p.transpose()).norm() <= 1e-12 * p.norm().max(1.0));
        prop_assert!(lyapunov_residual(&p, &m, &s) <= 1e-9 * s.norm().max(1e-12) * (1.0 + p.norm()));
        prop_assert!(sym_eigenvalues(&p).iter().all(|&e| e >= -1e-9 * p.norm()));
    }
}
