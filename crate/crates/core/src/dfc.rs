//! Model-based derivative feedback design.
//!
//! Under `u = -K x'` the loop evolves as `x' = (I + B K)^-1 A x`, and the cost
//! `int x'^T Q x' + u^T R u` equals `x0^T P x0` where `P` solves the Lyapunov
//! equation in the inverse closed loop `A^-1 (I + B K) = Abar + Bbar K`, with
//! `Abar = A^-1` and `Bbar = A^-1 B`. The optimal design is therefore the
//! standard Riccati problem for `(Abar, Bbar)`, solved here by Kleinman
//! policy iteration.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};
use crate::lin_model::{is_hurwitz, CostWeights, Gain, StateSpaceModel};
use crate::linalg::{self, mat_serde};
use crate::sim::Trajectory;

pub const DEFAULT_ETA: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_POLES: [f64; 4] = [-5.0, -6.0, -7.0, -8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfcSolution {
    #[serde(with = "mat_serde")]
    pub p: DMatrix<f64>,
    pub k: Gain,
    /// Frobenius norm of the Riccati residual at `p`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiStep {
    pub iteration: usize,
    #[serde(with = "mat_serde")]
    pub p: DMatrix<f64>,
    pub k_next: Gain,
    pub lyapunov_residual: f64,
    /// `||P_i - P_{i-1}||_F`, absent on the first step.
    pub p_change: Option<f64>,
    /// `||K_{i+1} - K_i||_F`.
    pub k_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiTrace {
    pub k1: Gain,
    pub steps: Vec<PiStep>,
    pub converged: bool,
}

impl PiTrace {
    pub fn final_p(&self) -> Option<&DMatrix<f64>> {
        self.steps.last().map(|s| &s.p)
    }

    pub fn final_gain(&self) -> Option<&Gain> {
        self.steps.last().map(|s| &s.k_next)
    }
}

/// Symmetric `P` with `P M + M^T P + S = 0` for Hurwitz `M`.
///
/// Solved as a dense linear system in the `n(n+1)/2` free entries of `P`.
pub fn lyapunov_solve(m: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if !m.is_square() || s.shape() != (n, n) {
        return Err(DfcError::Dimension("Lyapunov equation needs square M and S of equal size".into()));
    }
    if !is_hurwitz(m, 0.0)? {
        return Err(DfcError::NotHurwitz(format!(
            "Lyapunov operator has spectral abscissa {:.3e}",
            linalg::spectral_abscissa(m)
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DfcError::NonFinite("Lyapunov right-hand side"));
    }
    let s = linalg::symmetrize(s);
    let pairs: Vec<(usize, usize)> = linalg::svec_pairs(n).collect();
    let len = pairs.len();
    let mut lhs = DMatrix::zeros(len, len);
    let mut basis = DMatrix::zeros(n, n);
    for (col, &(a, b)) in pairs.iter().enumerate() {
        basis.fill(0.0);
        basis[(a, b)] = 1.0;
        basis[(b, a)] = 1.0;
        let image = &basis * m + m.transpose() * &basis;
        for (row, &(i, j)) in pairs.iter().enumerate() {
            lhs[(row, col)] = image[(i, j)];
        }
    }
    let rhs = -linalg::to_svec(&s);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| DfcError::NotHurwitz("Lyapunov operator singular".into()))?;
    Ok(linalg::from_svec(sol.as_slice(), n))
}

pub fn lyapunov_residual(p: &DMatrix<f64>, m: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    (p * m + m.transpose() * p + s).norm()
}

/// Kleinman iteration for the standard problem `z' = F z + G v`, `v = K z`,
/// cost `z^T Q z + v^T R v`, from a gain with `F + G K0` Hurwitz.
pub fn care_kleinman(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    weights: &CostWeights,
    k0: &Gain,
    eta: f64,
    max_iters: usize,
) -> Result<PiTrace> {
    if !(eta > 0.0) {
        return Err(DfcError::Invalid("convergence tolerance must be positive".into()));
    }
    if max_iters == 0 {
        return Err(DfcError::Invalid("max_iters must be at least 1".into()));
    }
    let q = weights.q();
    let r = weights.r();
    let r_inv = weights.r_inv();
    let mut k = k0.matrix().clone();
    let mut steps: Vec<PiStep> = Vec::new();
    for iteration in 1..=max_iters {
        let closed = f + g * &k;
        let s = q + k.transpose() * r * &k;
        let p = lyapunov_solve(&closed, &s).map_err(|e| DfcError::LyapunovFailure {
            iteration,
            reason: e.to_string(),
        })?;
        let k_next = -(&r_inv * g.transpose() * &p);
        let p_change = steps.last().map(|prev| (&p - &prev.p).norm());
        let step = PiStep {
            iteration,
            lyapunov_residual: lyapunov_residual(&p, &closed, &s),
            k_change: (&k_next - &k).norm(),
            p,
            k_next: Gain(k_next.clone()),
            p_change,
        };
        steps.push(step);
        k = k_next;
        if p_change.is_some_and(|d| d < eta) {
            return Ok(PiTrace {
                k1: k0.clone(),
                steps,
                converged: true,
            });
        }
    }
    Err(DfcError::PiNotConverged {
        trace: Box::new(PiTrace {
            k1: k0.clone(),
            steps,
            converged: false,
        }),
    })
}

/// Policy iteration on the model: policy evaluation by the Lyapunov equation
/// in `A^-1 (I + B K_i)`, improvement `K_{i+1} = -R^-1 B^T A^-T P_i`.
pub fn model_based_pi(
    model: &StateSpaceModel,
    weights: &CostWeights,
    k1: &Gain,
    eta: f64,
    max_iters: usize,
) -> Result<PiTrace> {
    weights.check_dims(model)?;
    k1.check_dims(model)?;
    let (abar, bbar) = inverse_pair(model);
    if !is_hurwitz(&(&abar + &bbar * k1.matrix()), 0.0)? {
        return Err(DfcError::NotHurwitz("initial gain does not stabilize the loop".into()));
    }
    care_kleinman(&abar, &bbar, weights, k1, eta, max_iters)
}

/// `(A^-1, A^-1 B)`.
pub fn inverse_pair(model: &StateSpaceModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let abar = model.a_inv();
    let bbar = &abar * model.b();
    (abar, bbar)
}

/// Optimal derivative feedback gain and value matrix.
pub fn solve_dfc_are(model: &StateSpaceModel, weights: &CostWeights) -> Result<DfcSolution> {
    weights.check_dims(model)?;
    let n = model.n();
    let m = model.m();
    if weights.q().iter().all(|&v| v == 0.0) {
        return Ok(DfcSolution {
            p: DMatrix::zeros(n, n),
            k: Gain::zeros(m, n),
            residual: 0.0,
        });
    }
    if !is_stabilizable(model.a(), model.b()) {
        return Err(DfcError::NotStabilizable);
    }
    if !is_observable(weights.q(), model.a()) {
        return Err(DfcError::NotObservable);
    }
    let (abar, bbar) = inverse_pair(model);
    let seed = bass_seed(&abar, &bbar)?;
    let trace = care_kleinman(&abar, &bbar, weights, &seed, 1e-13, 200).or_else(|e| match e {
        // Kleinman is quadratically convergent; a stalled tolerance at the
        // rounding floor still leaves a usable final iterate.
        DfcError::PiNotConverged { trace } => Ok(*trace),
        other => Err(other),
    })?;
    let p = trace.final_p().cloned().ok_or(DfcError::Invalid("empty trace".into()))?;
    let k = Gain(-(weights.r_inv() * bbar.transpose() * &p));
    let residual = dfc_are_residual(model, weights, &p);
    let sol = DfcSolution { p, k, residual };
    if !crate::lin_model::is_stabilizing(model, &sol.k)? {
        return Err(DfcError::NotHurwitz("Riccati gain does not stabilize the loop".into()));
    }
    Ok(sol)
}

/// Frobenius norm of `P Abar + Abar^T P - P Bbar R^-1 Bbar^T P + Q`.
pub fn dfc_are_residual(model: &StateSpaceModel, weights: &CostWeights, p: &DMatrix<f64>) -> f64 {
    let (abar, bbar) = inverse_pair(model);
    let quad = p * &bbar * weights.r_inv() * bbar.transpose() * p;
    (p * &abar + abar.transpose() * p - quad + weights.q()).norm()
}

/// Standard state-feedback LQR gain for `u = -K x` on the same model.
pub fn lqr_state_feedback(model: &StateSpaceModel, weights: &CostWeights) -> Result<DfcSolution> {
    weights.check_dims(model)?;
    if !is_stabilizable(model.a(), model.b()) {
        return Err(DfcError::NotStabilizable);
    }
    let seed = bass_seed(model.a(), model.b())?;
    let trace = care_kleinman(model.a(), model.b(), weights, &seed, 1e-13, 200).or_else(|e| match e {
        DfcError::PiNotConverged { trace } => Ok(*trace),
        other => Err(other),
    })?;
    let p = trace.final_p().cloned().ok_or(DfcError::Invalid("empty trace".into()))?;
    let k = weights.r_inv() * model.b().transpose() * &p;
    let quad = &p * model.b() * &k;
    let residual = (&p * model.a() + model.a().transpose() * &p - quad + weights.q()).norm();
    Ok(DfcSolution {
        p,
        k: Gain(k),
        residual,
    })
}

/// Bass's construction of `K` with `F + G K` Hurwitz: for `beta` beyond the
/// spectrum of `-F`, solve `(F + beta I) Z + Z (F + beta I)^T = 2 G G^T` and
/// take `K = -2 G^T Z^-1`.
pub fn bass_seed(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Gain> {
    let n = f.nrows();
    let scale = f.norm().max(1e-300);
    let beta = linalg::eigenvalues(f)
        .iter()
        .map(|l| -l.re)
        .fold(0.0, f64::max)
        + 0.1 * scale;
    // Z solves (-(F + beta I)) Z + Z (-(F + beta I))^T + 2 G G^T = 0.
    let shifted = -(f + DMatrix::identity(n, n) * beta);
    let z = lyapunov_solve(&shifted.transpose(), &(g * g.transpose() * 2.0))?;
    let z_inv = z.clone().try_inverse().ok_or(DfcError::NotStabilizable)?;
    let k = -(g.transpose() * z_inv * 2.0);
    if !is_hurwitz(&(f + g * &k), 0.0)? {
        return Err(DfcError::NotStabilizable);
    }
    Ok(Gain(k))
}

/// Gain placing the closed-loop poles of `(I + B K)^-1 A` at the given real
/// values, by Ackermann's formula on `(A^-1, A^-1 B 1)` with the reciprocal
/// targets.
pub fn place_dfc_poles(model: &StateSpaceModel, poles: &[f64]) -> Result<Gain> {
    let n = model.n();
    let m = model.m();
    if poles.len() != n {
        return Err(DfcError::Dimension(format!("need {n} poles, got {}", poles.len())));
    }
    if poles.iter().any(|p| *p == 0.0 || !p.is_finite()) {
        return Err(DfcError::Invalid("poles must be finite and nonzero".into()));
    }
    let (abar, bbar) = inverse_pair(model);
    let v = nalgebra::DVector::from_element(m, 1.0);
    let b = &bbar * &v;
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = &abar * col;
    }
    linalg::ensure_nonsingular(&ctrb, "controllability matrix")?;
    // phi(Abar) = prod (Abar - mu_j I)
    let mut phi = DMatrix::identity(n, n);
    for p in poles {
        phi *= &abar - DMatrix::identity(n, n) * (1.0 / p);
    }
    let ctrb_inv = ctrb.try_inverse().ok_or(DfcError::Singular {
        what: "controllability matrix",
        sigma_min: 0.0,
        threshold: 0.0,
    })?;
    let last = ctrb_inv.row(n - 1).into_owned();
    let row = -(last * phi);
    Ok(Gain(v * row))
}

/// PBH test on the unstable and marginal modes.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    linalg::eigenvalues(a).iter().filter(|l| l.re >= 0.0).all(|&l| {
        let mut pencil = DMatrix::<Complex64>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = Complex64::new(a[(i, j)], 0.0) - if i == j { l } else { Complex64::new(0.0, 0.0) };
            }
            for j in 0..b.ncols() {
                pencil[(i, n + j)] = Complex64::new(b[(i, j)], 0.0);
            }
        }
        full_rank(pencil, n)
    })
}

/// PBH test: no eigenvector of `A` lies in the null space of `Q`.
pub fn is_observable(q: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    linalg::eigenvalues(a).iter().all(|&l| {
        let mut pencil = DMatrix::<Complex64>::zeros(2 * n, n);
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = Complex64::new(a[(i, j)], 0.0) - if i == j { l } else { Complex64::new(0.0, 0.0) };
                pencil[(n + i, j)] = Complex64::new(q[(i, j)], 0.0);
            }
        }
        full_rank(pencil, n)
    })
}

fn full_rank(m: DMatrix<Complex64>, rank: usize) -> bool {
    let sv = m.singular_values();
    let max = sv.max();
    max > 0.0 && sv.iter().filter(|&&s| s > 1e-10 * max).count() >= rank
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCost {
    /// Trapezoidal quadrature of `x'^T (Q + K^T R K) x'`.
    pub cost: f64,
    /// `x0^T P x0` when `P` is supplied.
    pub predicted: Option<f64>,
    /// The integrand has not decayed by the end of the record.
    pub tail_warning: bool,
}

/// Fraction of the peak integrand still present at the final sample that
/// triggers the short-horizon warning.
const TAIL_FRACTION: f64 = 1e-6;

pub fn evaluate_policy_cost(
    traj: &Trajectory,
    weights: &CostWeights,
    gain: &Gain,
    p: Option<&DMatrix<f64>>,
) -> Result<PolicyCost> {
    let n = traj.n();
    let k = gain.matrix();
    if weights.q().nrows() != n || k.shape() != (weights.r().nrows(), n) {
        return Err(DfcError::Dimension("weights or gain do not match trajectory".into()));
    }
    let w = weights.q() + k.transpose() * weights.r() * k;
    let integrand: Vec<f64> = traj
        .xdot_meas
        .column_iter()
        .map(|d| (d.transpose() * &w * d)[(0, 0)])
        .collect();
    let cost = trapezoid(&integrand, traj.ts);
    let peak = integrand.iter().cloned().fold(0.0, f64::max);
    let tail = *integrand.last().unwrap_or(&0.0);
    let predicted = match p {
        Some(p) => {
            if p.shape() != (n, n) {
                return Err(DfcError::Dimension("value matrix does not match trajectory".into()));
            }
            let x0 = traj.x.column(0);
            Some((x0.transpose() * p * x0)[(0, 0)])
        }
        None => None,
    };
    if !cost.is_finite() {
        return Err(DfcError::NonFinite("policy cost"));
    }
    Ok(PolicyCost {
        cost,
        predicted,
        tail_warning: peak > 0.0 && tail > TAIL_FRACTION * peak,
    })
}

/// `int x'^T Q x' + u^T R u` with the recorded input, for comparing
/// controllers of different structure on one footing.
pub fn trajectory_cost(traj: &Trajectory, weights: &CostWeights) -> Result<f64> {
    if weights.q().nrows() != traj.n() || weights.r().nrows() != traj.m() {
        return Err(DfcError::Dimension("weights do not match trajectory".into()));
    }
    let integrand: Vec<f64> = (0..traj.len())
        .map(|k| {
            let d = traj.xdot_meas.column(k);
            let u = traj.u.column(k);
            (d.transpose() * weights.q() * d)[(0, 0)] + (u.transpose() * weights.r() * u)[(0, 0)]
        })
        .collect();
    let cost = trapezoid(&integrand, traj.ts);
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(DfcError::NonFinite("trajectory cost"))
    }
}

pub(crate) fn trapezoid(samples: &[f64], h: f64) -> f64 {
    match samples.len() {
        0 | 1 => 0.0,
        len => h * (0.5 * (samples[0] + samples[len - 1]) + samples[1..len - 1].iter().sum::<f64>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maglev;

    fn weights() -> CostWeights {
        CostWeights::identity_q(4, &[1.0, 2.0]).unwrap()
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let p = lyapunov_solve(&(DMatrix::identity(3, 3) * -0.5), &DMatrix::identity(3, 3)).unwrap();
        assert!((p - DMatrix::identity(3, 3)).amax() < 1e-14);
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[-1.0, -2.0]));
        let p = lyapunov_solve(&m, &DMatrix::identity(2, 2)).unwrap();
        assert!((p - DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25])).amax() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_operator() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            lyapunov_solve(&m, &DMatrix::identity(2, 2)),
            Err(DfcError::NotHurwitz(_))
        ));
    }

    #[test]
    fn printed_are_gain_reproduced() {
        let sol = solve_dfc_are(&maglev::printed_model(), &weights()).unwrap();
        let diff = (sol.k.matrix() - maglev::k_are_printed().matrix()).amax();
        assert!(diff < 1e-2, "max entry difference {diff}\n{}", sol.k.matrix());
        assert!(sol.residual < 1e-8 * weights().q().norm());
    }

    #[test]
    fn zero_state_weight_gives_zero_solution() {
        let w = CostWeights::new(DMatrix::zeros(4, 4), DMatrix::from_diagonal_element(2, 2, 1.0)).unwrap();
        let sol = solve_dfc_are(&maglev::printed_model(), &w).unwrap();
        assert_eq!(sol.p, DMatrix::zeros(4, 4));
        assert_eq!(sol.k, Gain::zeros(2, 4));
    }

    #[test]
    fn printed_initial_gain_stabilizes_and_pi_converges() {
        let model = maglev::printed_model();
        let trace = model_based_pi(&model, &weights(), &maglev::k1_printed(), DEFAULT_ETA, DEFAULT_MAX_ITERS).unwrap();
        assert!(trace.converged);
        assert!(trace.steps.len() <= 10, "{} steps", trace.steps.len());
        let sol = solve_dfc_are(&model, &weights()).unwrap();
        assert!((trace.final_p().unwrap() - &sol.p).norm() < 1e-6);
    }

    #[test]
    fn non_stabilizing_seed_rejected() {
        let model = maglev::printed_model();
        assert!(matches!(
            model_based_pi(&model, &weights(), &Gain::zeros(2, 4), 1e-6, 50),
            Err(DfcError::NotHurwitz(_))
        ));
    }

    #[test]
    fn unstabilizable_pair_rejected() {
        let model = crate::StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let w = CostWeights::identity_q(2, &[1.0]).unwrap();
        assert!(matches!(solve_dfc_are(&model, &w), Err(DfcError::NotStabilizable)));
    }

    #[test]
    fn default_pole_placement_on_maglev() {
        let model = maglev::printed_model();
        let k = place_dfc_poles(&model, &DEFAULT_POLES).unwrap();
        let cl = crate::closed_loop_matrix(&model, &k).unwrap();
        let mut re: Vec<f64> = linalg::eigenvalues(&cl).iter().map(|l| l.re).collect();
        re.sort_by(f64::total_cmp);
        for (got, want) in re.iter().zip([-8.0, -7.0, -6.0, -5.0]) {
            assert!((got - want).abs() < 1e-6 * want.abs(), "{re:?}");
        }
    }

    #[test]
    fn lqr_baseline_stabilizes() {
        let model = maglev::printed_model();
        let sol = lqr_state_feedback(&model, &weights()).unwrap();
        let cl = model.a() - model.b() * sol.k.matrix();
        assert!(is_hurwitz(&cl, 0.0).unwrap());
        assert!(sol.residual < 1e-8 * sol.p.norm().max(1.0));
    }

    #[test]
    fn trapezoid_of_line() {
        assert!((trapezoid(&[0.0, 1.0, 2.0], 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(trapezoid(&[3.0], 1.0), 0.0);
    }

    #[test]
    fn solution_serializes() {
        let sol = solve_dfc_are(&maglev::printed_model(), &weights()).unwrap();
        let text = serde_json::to_string(&sol).unwrap();
        let back: DfcSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
    }
}
