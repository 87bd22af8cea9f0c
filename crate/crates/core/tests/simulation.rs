use dfc_core::dfc::{lqr_state_feedback, solve_dfc_are, trajectory_cost};
use dfc_core::maglev::{self, MaglevPlant};
use dfc_core::sim::{
    integrate, simulate_dfc_closed_loop, ClosedLoopSpec, DerivativeMode, ExcitationSpec, Feedback, FilterSpec,
};
use dfc_core::CostWeights;
use nalgebra::{DMatrix, DVector};

fn forced_decay_error(ts: f64) -> f64 {
    // x' = -2 x + sin(3 t), x(0) = 1
    let traj = integrate(
        |x, u| Ok(DVector::from_element(1, -2.0 * x[0] + u[0])),
        &DVector::from_element(1, 1.0),
        |t, _| Ok(DVector::from_element(1, (3.0 * t).sin())),
        ts,
        2.0,
    )
    .unwrap();
    let t: f64 = 2.0;
    let exact = (1.0 + 3.0 / 13.0) * (-2.0 * t).exp() + (2.0 * (3.0 * t).sin() - 3.0 * (3.0 * t).cos()) / 13.0;
    (traj.final_state()[0] - exact).abs()
}

#[test]
fn rk4_error_shrinks_sixteenfold_per_halving() {
    let coarse = forced_decay_error(0.02);
    let fine = forced_decay_error(0.01);
    let ratio = coarse / fine;
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn unit_decay_reaches_inverse_e() {
    let traj = integrate(
        |x, _| Ok(-x.clone()),
        &DVector::from_element(1, 1.0),
        |_, _| Ok(DVector::zeros(0)),
        1e-3,
        1.0,
    )
    .unwrap();
    assert_eq!(traj.len(), 1001);
    assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-12);
    assert!((traj.xdot_meas[(0, 1000)] + (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn cost_quadrature_of_exponential() {
    let traj = integrate(
        |x, _| Ok(-x.clone()),
        &DVector::from_element(1, 1.0),
        |_, _| Ok(DVector::zeros(1)),
        1e-3,
        1.0,
    )
    .unwrap();
    let w = CostWeights::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
    let cost = trajectory_cost(&traj, &w).unwrap();
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    assert!((cost - exact).abs() < 1e-6, "{cost} vs {exact}");
}

#[test]
fn seeded_runs_are_byte_identical() {
    let model = maglev::printed_model();
    let spec = ClosedLoopSpec::ideal(maglev::k1_printed(), DVector::from_column_slice(&[0.005, 0.0, -0.005, 0.0]), 1e-3, 1.0)
        .with_excitation(ExcitationSpec::default().with_seed(9))
        .with_derivative(DerivativeMode::Filtered(FilterSpec::second_order(2.0)))
        .with_sensor_noise(1e-5, 42);
    let csv = |seed: u64| {
        let traj = simulate_dfc_closed_loop(&model, &spec.clone().with_sensor_noise(1e-5, seed)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(csv(42), csv(42));
    assert_ne!(csv(42), csv(43));
}

#[test]
fn derivative_feedback_ignores_bias_state_feedback_does_not() {
    let model = maglev::printed_model();
    let w = CostWeights::identity_q(4, &[1.0, 2.0]).unwrap();
    let x0 = DVector::from_column_slice(&[0.005, 0.0, -0.005, 0.0]);
    let bias = DVector::from_column_slice(&[0.002, 0.0, -0.001, 0.0]);
    let dfc = solve_dfc_are(&model, &w).unwrap();
    let lqr = lqr_state_feedback(&model, &w).unwrap();

    let d = simulate_dfc_closed_loop(&model, &ClosedLoopSpec::ideal(dfc.k, x0.clone(), 1e-3, 10.0).with_bias(bias.clone()))
        .unwrap();
    assert!(d.final_state().norm() < 1e-6);
    assert!(d.final_input().norm() < 1e-6);

    let s = simulate_dfc_closed_loop(
        &model,
        &ClosedLoopSpec::ideal(lqr.k.clone(), x0, 1e-3, 10.0)
            .with_bias(bias.clone())
            .with_feedback(Feedback::State),
    )
    .unwrap();
    // u = -K (x + x_b) settles where A x = B K (x + x_b).
    let a_cl = model.a() - model.b() * lqr.k.matrix();
    let expected = a_cl.lu().solve(&(model.b() * lqr.k.matrix() * &bias)).unwrap();
    assert!((s.final_state() - &expected).norm() < 1e-6 * expected.norm());
    assert!(s.final_input().norm() > 1e-3);
}

#[test]
fn nonlinear_plant_settles_at_its_own_equilibrium() {
    let plant = MaglevPlant::nominal().unwrap();
    let w = CostWeights::identity_q(4, &[1.0, 2.0]).unwrap();
    let gain = solve_dfc_are(&plant.linearization().unwrap(), &w).unwrap().k;
    let traj = simulate_dfc_closed_loop(
        &plant,
        &ClosedLoopSpec::ideal(gain, DVector::from_column_slice(&[0.005, 0.0, -0.005, 0.0]), 1e-3, 10.0),
    )
    .unwrap();
    let rest = plant.rest_equilibrium_local().unwrap();
    assert!((traj.final_state() - rest).norm() < 1e-6);
    assert!(traj.final_input().norm() < 1e-4);
}
