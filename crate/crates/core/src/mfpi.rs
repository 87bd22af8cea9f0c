//! Model-free, multi-epoch policy iteration for derivative feedback.
//!
//! Along any trajectory of `x' = A x + B u` measured as `xm = x + x_b`, the
//! value matrix `P_i` of gain `K_i` and the improved gain `K_{i+1}` satisfy,
//! over every interval `[t, t + T]`,
//!
//! ```text
//! d(xm^T P_i xm) + eps^T d(xm)
//!     - 2 int (x'^T K_i^T R + u^T R) K_{i+1} x'  =  -int x'^T (Q + K_i^T R K_i) x'
//! ```
//!
//! with `eps = -2 P_i x_b`. Stacking intervals gives a linear regression in
//! `(svec P_i, eps, vec K_{i+1})` that needs no knowledge of `A` or `B`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dfc::{evaluate_policy_cost, PolicyCost};
use crate::error::{DfcError, Result};
use crate::lin_model::{is_stabilizing, CostWeights, Gain, StateSpaceModel};
use crate::linalg::{self, mat_serde, vec_serde};
use crate::sim::{
    simulate_dfc_closed_loop, ClosedLoopSpec, DerivativeMode, ExcitationSpec, FilterSpec, InputAffinePlant, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PiConfig {
    /// Interval length `T`, s. Must be a multiple of the sampling interval.
    pub interval: f64,
    /// Number of intervals `N`; the training window is `N T`.
    pub num_intervals: usize,
    pub eta_bar: f64,
    pub zeta_bar: f64,
    pub max_inner_iters: usize,
    pub max_epochs: usize,
    /// Epochs always run before the cost-change test may stop training.
    pub min_epochs: usize,
    /// Tikhonov weight relative to the largest squared singular value of
    /// the column-scaled data matrix; 0 disables it.
    pub ridge: f64,
    pub quadrature: Quadrature,
    /// Leading part of each training record, s, left out of the regression
    /// (lets filter start-up transients die out).
    pub warmup: f64,
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            interval: 0.01,
            num_intervals: 200,
            eta_bar: 1e-6,
            zeta_bar: 1e-8,
            max_inner_iters: 50,
            max_epochs: 5,
            min_epochs: 1,
            ridge: 0.0,
            quadrature: Quadrature::Gregory,
            warmup: 0.0,
        }
    }
}

impl PiConfig {
    /// Length of the regression window, `N T`.
    pub fn window(&self) -> f64 {
        self.interval * self.num_intervals as f64
    }

    /// Length of each training record, warm-up included.
    pub fn record_length(&self) -> f64 {
        self.warmup + self.window()
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if !(self.interval > 0.0) {
            return Err(DfcError::Invalid("interval length must be positive".into()));
        }
        let unknowns = unknown_count(n, m);
        if self.num_intervals < unknowns {
            return Err(DfcError::Invalid(format!(
                "{} intervals cannot determine {unknowns} unknowns",
                self.num_intervals
            )));
        }
        if !(self.eta_bar > 0.0 && self.zeta_bar > 0.0) {
            return Err(DfcError::Invalid("tolerances must be positive".into()));
        }
        if self.max_inner_iters == 0 || self.max_epochs == 0 {
            return Err(DfcError::Invalid("iteration limits must be at least 1".into()));
        }
        if !(self.warmup >= 0.0) {
            return Err(DfcError::Invalid("warm-up must be >= 0".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(DfcError::Invalid("ridge must be >= 0".into()));
        }
        Ok(())
    }
}

/// `n(n+1)/2 + n + m n`.
pub fn unknown_count(n: usize, m: usize) -> usize {
    linalg::svec_len(n) + n + m * n
}

/// Rule used for the interval integrals on the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    Trapezoid,
    /// Composite Simpson; needs an even number of steps per interval.
    Simpson,
    /// Trapezoid with symmetric end corrections on the first and last four
    /// samples, exact for polynomials up to degree 7; needs at least 7 steps
    /// per interval.
    Gregory,
}

/// Number of corrected samples at each end of a Gregory interval.
const GREGORY_POINTS: usize = 4;

impl Quadrature {
    /// Weights (in units of the step) for an interval of `steps` steps.
    pub fn weights(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(DfcError::Invalid("interval must span at least one step".into()));
        }
        let mut w = vec![1.0; steps + 1];
        w[0] = 0.5;
        w[steps] = 0.5;
        match self {
            Quadrature::Trapezoid => {}
            Quadrature::Simpson => {
                if !steps.is_multiple_of(2) {
                    return Err(DfcError::Invalid(format!(
                        "Simpson's rule needs an even number of steps per interval, got {steps}"
                    )));
                }
                for (k, wk) in w.iter_mut().enumerate() {
                    *wk = if k == 0 || k == steps {
                        1.0 / 3.0
                    } else if k % 2 == 1 {
                        4.0 / 3.0
                    } else {
                        2.0 / 3.0
                    };
                }
            }
            Quadrature::Gregory => {
                let r = GREGORY_POINTS;
                if steps + 1 < 2 * r - 1 {
                    return Err(DfcError::Invalid(format!(
                        "Gregory quadrature needs at least {} steps per interval, got {steps}",
                        2 * r - 2
                    )));
                }
                // Symmetric corrections c_0..c_{r-1}, chosen so that the even
                // moments about the midpoint up to degree 2(r-1) are exact;
                // odd moments are exact by symmetry.
                let mid = steps as f64 / 2.0;
                let mut lhs = DMatrix::zeros(r, r);
                let mut rhs = DVector::zeros(r);
                for row in 0..r {
                    let deg = 2 * row as i32;
                    let exact = 2.0 * mid.powi(deg + 1) / (deg + 1) as f64;
                    let current: f64 = w.iter().enumerate().map(|(k, wk)| wk * (k as f64 - mid).powi(deg)).sum();
                    rhs[row] = exact - current;
                    for c in 0..r {
                        let node = (c as f64 - mid).powi(deg);
                        lhs[(row, c)] = if 2 * c == steps { node } else { 2.0 * node };
                    }
                }
                let corr = lhs
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| DfcError::Invalid("Gregory corrections are singular".into()))?;
                for c in 0..r {
                    w[c] += corr[c];
                    if steps - c != c {
                        w[steps - c] += corr[c];
                    }
                }
            }
        }
        Ok(w)
    }
}

/// Interval integrals and endpoint differences, one row per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct KronIntegrals {
    /// `int x'^T (x) x'^T`, N x n^2.
    pub i_xx: DMatrix<f64>,
    /// `int x'^T (x) u^T`, N x nm.
    pub i_xu: DMatrix<f64>,
    /// Differences of `xm (x) xm`, N x n^2.
    pub delta_xk: DMatrix<f64>,
    /// Differences of `xm`, N x n.
    pub delta_x: DMatrix<f64>,
}

impl KronIntegrals {
    pub fn rows(&self) -> usize {
        self.i_xx.nrows()
    }

    /// First `rows` intervals only.
    pub fn truncated(&self, rows: usize) -> Self {
        let rows = rows.min(self.rows());
        KronIntegrals {
            i_xx: self.i_xx.rows(0, rows).into_owned(),
            i_xu: self.i_xu.rows(0, rows).into_owned(),
            delta_xk: self.delta_xk.rows(0, rows).into_owned(),
            delta_x: self.delta_x.rows(0, rows).into_owned(),
        }
    }
}

/// Trapezoidal interval integrals over every complete interval of length
/// `interval` in the record.
pub fn kron_integrals(traj: &Trajectory, interval: f64) -> Result<KronIntegrals> {
    kron_integrals_with(traj, interval, Quadrature::Trapezoid)
}

pub fn kron_integrals_with(traj: &Trajectory, interval: f64, rule: Quadrature) -> Result<KronIntegrals> {
    let ratio = interval / traj.ts;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(DfcError::Invalid(format!(
            "interval {interval} s is not a multiple of the sampling interval {} s",
            traj.ts
        )));
    }
    let steps = steps as usize;
    let weights = rule.weights(steps)?;
    let rows = (traj.len() - 1) / steps;
    if rows == 0 {
        return Err(DfcError::Invalid("trajectory shorter than one interval".into()));
    }
    let n = traj.n();
    let m = traj.m();
    let mut i_xx = DMatrix::zeros(rows, n * n);
    let mut i_xu = DMatrix::zeros(rows, n * m);
    let mut delta_xk = DMatrix::zeros(rows, n * n);
    let mut delta_x = DMatrix::zeros(rows, n);
    let h = traj.ts;
    for j in 0..rows {
        let start = j * steps;
        let end = start + steps;
        for k in start..=end {
            let w = weights[k - start] * h;
            let d = traj.xdot_meas.column(k);
            let u = traj.u.column(k);
            for a in 0..n {
                let wa = w * d[a];
                for b in 0..n {
                    i_xx[(j, a * n + b)] += wa * d[b];
                }
                for b in 0..m {
                    i_xu[(j, a * m + b)] += wa * u[b];
                }
            }
        }
        let x0 = traj.x_meas.column(start);
        let x1 = traj.x_meas.column(end);
        for a in 0..n {
            delta_x[(j, a)] = x1[a] - x0[a];
            for b in 0..n {
                delta_xk[(j, a * n + b)] = x1[a] * x1[b] - x0[a] * x0[b];
            }
        }
    }
    Ok(KronIntegrals {
        i_xx,
        i_xu,
        delta_xk,
        delta_x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub n: usize,
    pub m: usize,
}

impl ColumnLayout {
    pub fn p_block(&self) -> std::ops::Range<usize> {
        0..linalg::svec_len(self.n)
    }

    pub fn eps_block(&self) -> std::ops::Range<usize> {
        let s = linalg::svec_len(self.n);
        s..s + self.n
    }

    pub fn k_block(&self) -> std::ops::Range<usize> {
        let s = linalg::svec_len(self.n) + self.n;
        s..s + self.m * self.n
    }

    pub fn width(&self) -> usize {
        unknown_count(self.n, self.m)
    }
}

/// `X [svec P, eps, vec K_next] = Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub layout: ColumnLayout,
}

/// Assemble the regression for the policy `K_i` from precomputed integrals.
pub fn build_regression(integrals: &KronIntegrals, k_i: &Gain, weights: &CostWeights) -> Result<RegressionSystem> {
    let n = integrals.delta_x.ncols();
    let m = if n == 0 { 0 } else { integrals.i_xu.ncols() / n };
    let k = k_i.matrix();
    if k.shape() != (m, n) || weights.q().nrows() != n || weights.r().nrows() != m {
        return Err(DfcError::Dimension("gain or weights do not match the data".into()));
    }
    let layout = ColumnLayout { n, m };
    let rows = integrals.rows();
    let r = weights.r();
    let w = weights.q() + k.transpose() * r * k;
    let rk = r * k;
    let mut x = DMatrix::zeros(rows, layout.width());
    let mut y = DVector::zeros(rows);
    for j in 0..rows {
        for (c, (a, b)) in linalg::svec_pairs(n).enumerate() {
            x[(j, c)] = if a == b {
                integrals.delta_xk[(j, a * n + a)]
            } else {
                integrals.delta_xk[(j, a * n + b)] + integrals.delta_xk[(j, b * n + a)]
            };
        }
        let eps0 = layout.eps_block().start;
        for a in 0..n {
            x[(j, eps0 + a)] = integrals.delta_x[(j, a)];
        }
        // With S = int x' x'^T and U = int u x'^T, the third block is
        // -2 vec(R K_i S + R U)^T, i.e. -2 I_xx (I (x) K_i^T R) - 2 I_xu (I (x) R).
        let s = DMatrix::from_fn(n, n, |a, b| integrals.i_xx[(j, a * n + b)]);
        let u = DMatrix::from_fn(m, n, |b, a| integrals.i_xu[(j, a * m + b)]);
        let block = (&rk * &s + r * &u) * -2.0;
        let k0 = layout.k_block().start;
        for (idx, v) in block.iter().enumerate() {
            x[(j, k0 + idx)] = *v;
        }
        y[j] = -(w.component_mul(&s)).sum();
    }
    Ok(RegressionSystem { x, y, layout })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiIterate {
    #[serde(with = "mat_serde")]
    pub p_hat: DMatrix<f64>,
    #[serde(with = "vec_serde")]
    pub eps_hat: DVector<f64>,
    pub k_next: Gain,
    pub ls_residual: f64,
    pub condition_number: f64,
    /// `||P_i - P_{i-1}||_F`, absent on the first iterate.
    #[serde(default)]
    pub p_change: Option<f64>,
    #[serde(default)]
    pub k_change: Option<f64>,
}

/// Relative singular-value floor of the column-scaled data matrix.
pub const RANK_TOLERANCE: f64 = 1e-8;

pub fn pi_solve(system: &RegressionSystem) -> Result<PiIterate> {
    pi_solve_ridge(system, 0.0)
}

/// Least squares through the SVD of the column-equilibrated data matrix,
/// optionally Tikhonov-regularized.
pub fn pi_solve_ridge(system: &RegressionSystem, ridge: f64) -> Result<PiIterate> {
    let layout = system.layout;
    let width = layout.width();
    let x = &system.x;
    if x.ncols() != width || x.nrows() != system.y.len() {
        return Err(DfcError::Dimension("regression system is inconsistent".into()));
    }
    if x.iter().chain(system.y.iter()).any(|v| !v.is_finite()) {
        return Err(DfcError::NonFinite("regression data"));
    }
    if x.nrows() < width {
        return Err(DfcError::InsufficientExcitation {
            singular_values: linalg::singular_values(x).iter().copied().collect(),
        });
    }
    let scale: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    if scale.contains(&0.0) {
        let mut sv: Vec<f64> = linalg::singular_values(x).iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        return Err(DfcError::InsufficientExcitation { singular_values: sv });
    }
    let mut xs = x.clone();
    for (j, s) in scale.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = xs.clone().svd(true, true);
    let sv = &svd.singular_values;
    let s_max = sv.max();
    let s_min = sv.min();
    if !(s_min > RANK_TOLERANCE * s_max) {
        let mut profile: Vec<f64> = sv.iter().copied().collect();
        profile.sort_by(|a, b| b.total_cmp(a));
        return Err(DfcError::InsufficientExcitation {
            singular_values: profile,
        });
    }
    let u = svd.u.as_ref().ok_or(DfcError::NonFinite("SVD factors"))?;
    let v_t = svd.v_t.as_ref().ok_or(DfcError::NonFinite("SVD factors"))?;
    let lambda = ridge * s_max * s_max;
    let uty = u.transpose() * &system.y;
    let mut coeff = DVector::zeros(width);
    for i in 0..width {
        coeff[i] = uty[i] * sv[i] / (sv[i] * sv[i] + lambda);
    }
    let theta_scaled = v_t.transpose() * coeff;
    let theta = DVector::from_iterator(width, theta_scaled.iter().zip(&scale).map(|(t, s)| t / s));
    let ls_residual = (x * &theta - &system.y).norm();

    let n = layout.n;
    let m = layout.m;
    let p_hat = linalg::from_svec(&theta.as_slice()[layout.p_block()], n);
    let eps_hat = DVector::from_column_slice(&theta.as_slice()[layout.eps_block()]);
    let k_next = Gain(linalg::unvec(&theta.as_slice()[layout.k_block()], m, n));
    Ok(PiIterate {
        p_hat,
        eps_hat,
        k_next,
        ls_residual,
        condition_number: s_max / s_min,
        p_change: None,
        k_change: None,
    })
}

/// Inner policy iteration on one fixed data set.
pub fn inner_pi(traj: &Trajectory, k1: &Gain, weights: &CostWeights, config: &PiConfig) -> Result<Vec<PiIterate>> {
    config.validate(traj.n(), traj.m())?;
    let integrals = kron_integrals_with(traj, config.interval, config.quadrature)?;
    if integrals.rows() < config.num_intervals {
        return Err(DfcError::Invalid(format!(
            "trajectory holds {} intervals, configuration needs {}",
            integrals.rows(),
            config.num_intervals
        )));
    }
    inner_pi_on(&integrals.truncated(config.num_intervals), k1, weights, config)
}

pub fn inner_pi_on(integrals: &KronIntegrals, k1: &Gain, weights: &CostWeights, config: &PiConfig) -> Result<Vec<PiIterate>> {
    let mut iterates: Vec<PiIterate> = Vec::new();
    let mut k = k1.clone();
    for _ in 0..config.max_inner_iters {
        let system = build_regression(integrals, &k, weights)?;
        let mut it = pi_solve_ridge(&system, config.ridge)?;
        it.k_change = Some((it.k_next.matrix() - k.matrix()).norm());
        it.p_change = iterates.last().map(|prev| (&it.p_hat - &prev.p_hat).norm());
        k = it.k_next.clone();
        let done = it.p_change.is_some_and(|d| d < config.eta_bar);
        iterates.push(it);
        if done {
            return Ok(iterates);
        }
    }
    Err(DfcError::InnerPiNotConverged { iterates })
}

/// Source of training and test data for multi-epoch training.
pub trait ExperimentRig {
    /// Closed-loop run under `gain` plus exploration, for epoch `epoch`
    /// (counted from 1).
    fn training_run(&self, gain: &Gain, epoch: usize) -> Result<Trajectory>;

    /// Excitation-free run under `gain` from the fixed test initial state.
    fn test_run(&self, gain: &Gain) -> Result<Trajectory>;

    /// Filter applied to the recorded derivative, if any. Training data
    /// then gets the same filter on the state and input before regression.
    fn derivative_filter(&self) -> Option<FilterSpec> {
        None
    }

    /// Model used to certify trained gains, when one is known.
    fn reference_model(&self) -> Option<&StateSpaceModel> {
        None
    }
}

/// Rig backed by the simulator. Epoch `k` uses excitation seed
/// `seed + k` and its own sensor-noise stream; the test run uses a stream
/// of its own.
pub struct SimulatedRig<'a, P: InputAffinePlant + ?Sized> {
    pub plant: &'a P,
    pub reference: Option<StateSpaceModel>,
    pub excitation: ExcitationSpec,
    pub bias: DVector<f64>,
    pub derivative: DerivativeMode,
    pub sensor_noise_sd: f64,
    pub seed: u64,
    pub ts: f64,
    pub window: f64,
    pub train_x0: DVector<f64>,
    pub test_x0: DVector<f64>,
    pub test_duration: f64,
}

impl<'a, P: InputAffinePlant + ?Sized> SimulatedRig<'a, P> {
    fn spec(&self, gain: &Gain, x0: &DVector<f64>, duration: f64, stream: u64) -> ClosedLoopSpec {
        ClosedLoopSpec::ideal(gain.clone(), x0.clone(), self.ts, duration)
            .with_bias(self.bias.clone())
            .with_derivative(self.derivative)
            .with_sensor_noise(self.sensor_noise_sd, noise_stream(self.seed, stream))
    }
}

/// Distinct, reproducible noise seed per run.
pub fn noise_stream(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl<'a, P: InputAffinePlant + ?Sized> ExperimentRig for SimulatedRig<'a, P> {
    fn training_run(&self, gain: &Gain, epoch: usize) -> Result<Trajectory> {
        let spec = self
            .spec(gain, &self.train_x0, self.window, epoch as u64)
            .with_excitation(self.excitation.with_seed(self.seed.wrapping_add(epoch as u64)));
        simulate_dfc_closed_loop(self.plant, &spec)
    }

    fn test_run(&self, gain: &Gain) -> Result<Trajectory> {
        simulate_dfc_closed_loop(self.plant, &self.spec(gain, &self.test_x0, self.test_duration, u64::MAX - 1))
    }

    fn derivative_filter(&self) -> Option<FilterSpec> {
        match self.derivative {
            DerivativeMode::Filtered(f) => Some(f),
            DerivativeMode::Ideal => None,
        }
    }

    fn reference_model(&self) -> Option<&StateSpaceModel> {
        self.reference.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Gain that generated this epoch's training data.
    pub gain_in: Gain,
    /// Gain produced by the inner iteration.
    pub gain: Gain,
    pub cost: PolicyCost,
    /// `|V_k - V_{k-1}|`, absent for the first epoch.
    pub delta_v: Option<f64>,
    pub inner: Vec<PiIterate>,
    pub training_id: String,
    /// Certified against the reference model, when the rig has one.
    pub stabilizing: Option<bool>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epochs: Vec<EpochRecord>,
    pub converged: bool,
}

impl EpochTrace {
    pub fn final_gain(&self) -> Option<&Gain> {
        self.epochs.last().map(|e| &e.gain)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.cost.cost).collect()
    }
}

/// Collected artifacts of one epoch handed to an observer, e.g. for saving
/// trajectories as they are produced.
pub struct EpochArtifacts<'a> {
    pub epoch: usize,
    pub training: &'a Trajectory,
    pub test: Option<&'a Trajectory>,
}

/// Multi-epoch training: per epoch, collect data under the latest gain,
/// run the inner iteration, score the new gain on an excitation-free test
/// run, and stop once the cost change drops below `zeta_bar`.
pub fn multi_epoch_train(
    rig: &dyn ExperimentRig,
    k1: &Gain,
    weights: &CostWeights,
    config: &PiConfig,
) -> Result<EpochTrace> {
    multi_epoch_train_observed(rig, k1, weights, config, &mut |_| Ok(()))
}

pub fn multi_epoch_train_observed(
    rig: &dyn ExperimentRig,
    k1: &Gain,
    weights: &CostWeights,
    config: &PiConfig,
    observer: &mut dyn FnMut(EpochArtifacts<'_>) -> Result<()>,
) -> Result<EpochTrace> {
    let n = k1.matrix().ncols();
    let m = k1.matrix().nrows();
    config.validate(n, m)?;
    let mut trace = EpochTrace::default();
    let mut gain = k1.clone();
    let abort = |trace: &EpochTrace, epoch: usize, reason: String| DfcError::EpochAborted {
        epoch,
        reason,
        trace: Box::new(trace.clone()),
    };
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let raw = rig.training_run(&gain, epoch).map_err(|e| abort(&trace, epoch, e.to_string()))?;
        let filtered = match rig.derivative_filter() {
            Some(f) => raw.prefiltered(&f)?,
            None => raw.clone(),
        };
        let data = &filtered.trimmed_front(config.warmup)?;
        let inner = match inner_pi(data, &gain, weights, config) {
            Ok(it) => it,
            Err(e @ DfcError::InsufficientExcitation { .. }) if trace.epochs.is_empty() => return Err(e),
            Err(e) => return Err(abort(&trace, epoch, e.to_string())),
        };
        let trained = inner.last().map(|it| it.k_next.clone()).expect("non-empty inner trace");
        let stabilizing = match rig.reference_model() {
            Some(model) => Some(is_stabilizing(model, &trained)?),
            None => None,
        };
        if stabilizing == Some(false) {
            return Err(abort(&trace, epoch, "trained gain does not stabilize the reference model".into()));
        }
        let test = rig
            .test_run(&trained)
            .map_err(|e| abort(&trace, epoch, format!("test run failed: {e}")))?;
        observer(EpochArtifacts {
            epoch,
            training: &raw,
            test: Some(&test),
        })?;
        let cost = evaluate_policy_cost(&test, weights, &trained, None)?;
        let delta_v = trace.epochs.last().map(|prev| (cost.cost - prev.cost.cost).abs());
        trace.epochs.push(EpochRecord {
            epoch,
            gain_in: gain.clone(),
            gain: trained.clone(),
            cost,
            delta_v,
            inner,
            training_id: format!("epoch-{epoch:03}"),
            stabilizing,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        gain = trained;
        if epoch >= config.min_epochs.max(2) && delta_v.is_some_and(|d| d < config.zeta_bar) {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}
