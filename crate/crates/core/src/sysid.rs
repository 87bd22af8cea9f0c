//! Indirect route: DMDc identification, prediction-error refinement and the
//! model frequency response.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};
use crate::lin_model::StateSpaceModel;
use crate::linalg::mat_serde;
use crate::sim::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmdcConfig {
    /// Fraction of the cumulative squared singular values to retain.
    pub e_min: f64,
    pub q_override: Option<usize>,
}

impl Default for DmdcConfig {
    fn default() -> Self {
        DmdcConfig {
            e_min: 0.99,
            q_override: None,
        }
    }
}

impl DmdcConfig {
    pub fn full_rank() -> Self {
        DmdcConfig {
            e_min: 1.0,
            q_override: None,
        }
    }

    pub fn validate(&self, max_q: usize) -> Result<()> {
        if !(self.e_min > 0.0 && self.e_min <= 1.0) {
            return Err(DfcError::Invalid(format!("e_min {} must lie in (0, 1]", self.e_min)));
        }
        if let Some(q) = self.q_override {
            if q == 0 || q > max_q {
                return Err(DfcError::Invalid(format!("truncation order {q} must lie in 1..={max_q}")));
            }
        }
        Ok(())
    }
}

/// Identified `(A, B)` as raw estimates. Use [`IdentifiedModel::model`] to
/// obtain a validated model (fails when the state estimate is singular).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedModel {
    #[serde(with = "mat_serde")]
    pub a_hat: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub b_hat: DMatrix<f64>,
    /// `||Gamma Phi - Xdot||_F`.
    pub fit_residual: f64,
    /// Spectrum of the stacked data matrix, descending.
    pub singular_values: Vec<f64>,
    pub q_used: usize,
}

impl IdentifiedModel {
    pub fn model(&self) -> Result<StateSpaceModel> {
        StateSpaceModel::new(self.a_hat.clone(), self.b_hat.clone())
    }
}

fn stacked_data(traj: &Trajectory) -> DMatrix<f64> {
    let n = traj.n();
    let m = traj.m();
    let mut phi = DMatrix::zeros(n + m, traj.len());
    phi.rows_mut(0, n).copy_from(&traj.x_meas);
    phi.rows_mut(n, m).copy_from(&traj.u);
    phi
}

/// Smallest `q` whose leading squared singular values hold `e_min` of the
/// total.
pub fn energy_order(singular_values: &[f64], e_min: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= e_min * total * (1.0 - 1e-15) {
            return i + 1;
        }
    }
    singular_values.len()
}

pub fn dmdc_fit(traj: &Trajectory, config: &DmdcConfig) -> Result<IdentifiedModel> {
    let n = traj.n();
    let m = traj.m();
    if traj.len() < n + m {
        return Err(DfcError::DegenerateData(format!(
            "{} samples cannot identify {} regressors",
            traj.len(),
            n + m
        )));
    }
    config.validate(n + m)?;
    let phi = stacked_data(traj);
    if phi.iter().chain(traj.xdot_meas.iter()).any(|v| !v.is_finite()) {
        return Err(DfcError::NonFinite("identification data"));
    }
    let svd = phi.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let floor = f64::MIN_POSITIVE.sqrt();
    if sv.first().is_none_or(|&s| s <= floor) {
        return Err(DfcError::DegenerateData("all singular values vanish".into()));
    }
    let q = config.q_override.unwrap_or_else(|| energy_order(&sv, config.e_min));
    let kept: Vec<usize> = order[..q].iter().copied().filter(|&i| svd.singular_values[i] > sv[0] * 1e-15).collect();
    let u = svd.u.as_ref().ok_or(DfcError::NonFinite("SVD factors"))?;
    let v_t = svd.v_t.as_ref().ok_or(DfcError::NonFinite("SVD factors"))?;
    // Gamma = Xdot V_q Sigma_q^-1 U_q^T
    let mut pinv = DMatrix::zeros(traj.len(), n + m);
    for &i in &kept {
        let s = svd.singular_values[i];
        pinv += v_t.row(i).transpose() * u.column(i).transpose() / s;
    }
    let gamma = &traj.xdot_meas * pinv;
    let fit_residual = (&gamma * &phi - &traj.xdot_meas).norm();
    Ok(IdentifiedModel {
        a_hat: gamma.columns(0, n).into_owned(),
        b_hat: gamma.columns(n, m).into_owned(),
        fit_residual,
        singular_values: sv,
        q_used: q,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemResult {
    #[serde(with = "mat_serde")]
    pub a_hat: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub b_hat: DMatrix<f64>,
    pub j_initial: f64,
    pub j_final: f64,
    pub iterations: usize,
    /// Gradient norm at the returned parameters, relative to the data scale.
    pub grad_norm: f64,
}

impl PemResult {
    pub fn model(&self) -> Result<StateSpaceModel> {
        StateSpaceModel::new(self.a_hat.clone(), self.b_hat.clone())
    }
}

/// Sum of squared one-step derivative prediction errors.
pub fn prediction_cost(traj: &Trajectory, theta: &DMatrix<f64>) -> f64 {
    (&traj.xdot_meas - theta * stacked_data(traj)).norm_squared()
}

pub fn pem_refine(traj: &Trajectory, init: &IdentifiedModel, max_iters: usize, grad_tol: f64) -> Result<PemResult> {
    pem_refine_masked(traj, init, None, max_iters, grad_tol)
}

/// Prediction-error refinement of `[A B]`, optionally restricted to the
/// entries where `mask` (n x (n+m)) is true; the others stay at zero.
///
/// The cost is quadratic in the parameters, so each Gauss-Newton step is
/// the exact least-squares minimizer; steps are only accepted when the
/// cost decreases.
pub fn pem_refine_masked(
    traj: &Trajectory,
    init: &IdentifiedModel,
    mask: Option<&DMatrix<bool>>,
    max_iters: usize,
    grad_tol: f64,
) -> Result<PemResult> {
    let n = traj.n();
    let m = traj.m();
    if init.a_hat.shape() != (n, n) || init.b_hat.shape() != (n, m) {
        return Err(DfcError::Dimension("initial model does not match trajectory".into()));
    }
    if let Some(mask) = mask {
        if mask.shape() != (n, n + m) {
            return Err(DfcError::Dimension("parameter mask must be n x (n+m)".into()));
        }
    }
    let phi = stacked_data(traj);
    let mut theta = DMatrix::zeros(n, n + m);
    theta.columns_mut(0, n).copy_from(&init.a_hat);
    theta.columns_mut(n, m).copy_from(&init.b_hat);
    if let Some(mask) = mask {
        theta.zip_apply(mask, |t, keep| {
            if !keep {
                *t = 0.0
            }
        });
    }
    let j_initial = prediction_cost(traj, &theta);
    if !j_initial.is_finite() {
        return Err(DfcError::NonFinite("prediction-error cost"));
    }
    let grad_scale = 2.0 * traj.xdot_meas.norm() * phi.norm() + f64::MIN_POSITIVE;
    let gradient = |theta: &DMatrix<f64>| -> f64 {
        let mut g = (&traj.xdot_meas - theta * &phi) * phi.transpose() * -2.0;
        if let Some(mask) = mask {
            g.zip_apply(mask, |v, keep| {
                if !keep {
                    *v = 0.0
                }
            });
        }
        g.norm() / grad_scale
    };
    let mut j = j_initial;
    let mut iterations = 0;
    let mut grad_norm = gradient(&theta);
    while iterations < max_iters && grad_norm > grad_tol {
        let candidate = least_squares_rows(&traj.xdot_meas, &phi, mask)?;
        let j_new = prediction_cost(traj, &candidate);
        iterations += 1;
        if !j_new.is_finite() {
            return Err(DfcError::NonFinite("prediction-error cost"));
        }
        if j_new >= j {
            break;
        }
        theta = candidate;
        j = j_new;
        grad_norm = gradient(&theta);
    }
    Ok(PemResult {
        a_hat: theta.columns(0, n).into_owned(),
        b_hat: theta.columns(n, m).into_owned(),
        j_initial,
        j_final: j,
        iterations,
        grad_norm,
    })
}

/// Row-wise minimizer of `||xdot_i - theta_i Phi||` over the free entries.
fn least_squares_rows(xdot: &DMatrix<f64>, phi: &DMatrix<f64>, mask: Option<&DMatrix<bool>>) -> Result<DMatrix<f64>> {
    let n = xdot.nrows();
    let p = phi.nrows();
    let mut theta = DMatrix::zeros(n, p);
    for i in 0..n {
        let free: Vec<usize> = (0..p).filter(|&j| mask.is_none_or(|mk| mk[(i, j)])).collect();
        if free.is_empty() {
            continue;
        }
        let sub = phi.select_rows(&free);
        let target: DVector<f64> = xdot.row(i).transpose();
        let svd = sub.transpose().svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        let coeff = svd
            .solve(&target, tol)
            .map_err(|e| DfcError::DegenerateData(e.to_string()))?;
        for (c, &j) in free.iter().enumerate() {
            theta[(i, j)] = coeff[c];
        }
    }
    Ok(theta)
}

/// `|C (jw I - A)^-1 B|` for one input/position-output pair. Output `o` is
/// the position state `2 o` (states are ordered position, velocity per
/// disk). Frequencies at which `jw I - A` is singular give infinity.
pub fn frequency_response(model: &StateSpaceModel, out_index: usize, in_index: usize, omegas: &[f64]) -> Result<Vec<f64>> {
    let n = model.n();
    let state = 2 * out_index;
    if state >= n || in_index >= model.m() {
        return Err(DfcError::Dimension(format!(
            "channel ({out_index}, {in_index}) outside the model's outputs and inputs"
        )));
    }
    let a = model.a().map(|v| Complex64::new(v, 0.0));
    let b = model.b().column(in_index).map(|v| Complex64::new(v, 0.0));
    let scale = model.a().norm().max(1.0);
    Ok(omegas
        .iter()
        .map(|&w| {
            let lhs = DMatrix::<Complex64>::identity(n, n) * Complex64::new(0.0, w) - &a;
            let sv = lhs.clone().singular_values();
            if sv.min() <= 1e-13 * scale {
                return f64::INFINITY;
            }
            match lhs.lu().solve(&b) {
                Some(z) => z[state].norm(),
                None => f64::INFINITY,
            }
        })
        .collect())
}

/// Logarithmically spaced grid of `count` points from `low` to `high`.
pub fn log_grid(low: f64, high: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![low];
    }
    let (l, h) = (low.ln(), high.ln());
    (0..count)
        .map(|i| (l + (h - l) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_rule_is_minimal() {
        let sv = [10.0, 3.0, 1.0, 0.1];
        let total: f64 = sv.iter().map(|s| s * s).sum();
        for e in [0.5, 0.9, 0.99, 0.9999, 1.0] {
            let q = energy_order(&sv, e);
            let kept: f64 = sv[..q].iter().map(|s| s * s).sum();
            assert!(kept >= e * total * (1.0 - 1e-12));
            if q > 1 {
                let fewer: f64 = sv[..q - 1].iter().map(|s| s * s).sum();
                assert!(fewer < e * total);
            }
        }
    }

    #[test]
    fn first_order_static_gain() {
        let model = StateSpaceModel::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mag = frequency_response(&model, 0, 0, &[0.0, 1.0]).unwrap();
        assert!((mag[0] - 1.0).abs() < 1e-15);
        assert!((mag[1] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn undamped_pole_is_infinite() {
        let model = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let mag = frequency_response(&model, 0, 0, &[2.0]).unwrap();
        assert!(mag[0].is_infinite());
    }

    #[test]
    fn zero_trajectory_is_degenerate() {
        let z = DMatrix::zeros(2, 10);
        let traj = Trajectory::new(
            0.1,
            (0..10).map(|k| k as f64 * 0.1).collect(),
            z.clone(),
            z.clone(),
            z,
            DMatrix::zeros(1, 10),
        )
        .unwrap();
        assert!(matches!(
            dmdc_fit(&traj, &DmdcConfig::default()),
            Err(DfcError::DegenerateData(_))
        ));
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.1, 100.0, 4);
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[3] - 100.0).abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-12);
    }
}
