//! Fixed-step simulation of open- and closed-loop runs.

pub mod excitation;
pub mod filter;
pub mod trajectory;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};
use crate::lin_model::{Gain, StateSpaceModel};

pub use excitation::{excitation_signal, ExcitationSpec, Multisine};
pub use filter::{filtered_derivative, lowpass_rows, FilterSpec, LowPass2};
pub use trajectory::Trajectory;

/// States beyond this magnitude are treated as a diverged run.
const DIVERGENCE_BOUND: f64 = 1e12;

/// Plant of the form `x' = f(x) + G(x) u`.
pub trait InputAffinePlant: Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn input_map(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Input actually delivered when `u` is commanded.
    fn saturate(&self, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    fn has_saturation(&self) -> bool {
        false
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.drift(x)? + self.input_map(x)? * u)
    }
}

impl InputAffinePlant for StateSpaceModel {
    fn n(&self) -> usize {
        StateSpaceModel::n(self)
    }

    fn m(&self) -> usize {
        StateSpaceModel::m(self)
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.a().nrows() {
            return Err(DfcError::Dimension(format!(
                "state has {} entries, model has {}",
                x.len(),
                self.a().nrows()
            )));
        }
        Ok(self.a() * x)
    }

    fn input_map(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.b().clone())
    }
}

/// Classic fixed-step RK4 with the input law evaluated at every stage.
///
/// The stored `xdot_meas` is the dynamics evaluated at the grid points and
/// `x_meas` equals `x`.
pub fn integrate<D, U>(dynamics: D, x0: &DVector<f64>, u_source: U, ts: f64, duration: f64) -> Result<Trajectory>
where
    D: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    U: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(DfcError::Invalid("sampling interval must be positive".into()));
    }
    if !(duration >= ts) || !duration.is_finite() {
        return Err(DfcError::Invalid(format!(
            "duration {duration} must be at least one sampling interval {ts}"
        )));
    }
    let steps = (duration / ts).round() as usize;
    let n = x0.len();
    let f = |t: f64, x: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let u = u_source(t, x)?;
        let d = dynamics(x, &u)?;
        Ok((d, u))
    };

    let mut t = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ds = Vec::with_capacity(steps + 1);
    let mut us = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    check_finite(&x, 0, 0.0)?;
    for k in 0..=steps {
        let tk = k as f64 * ts;
        let (k1, u) = f(tk, &x)?;
        check_finite(&k1, k, tk)?;
        t.push(tk);
        xs.push(x.clone());
        ds.push(k1.clone());
        us.push(u);
        if k == steps {
            break;
        }
        let h = ts;
        let (k2, _) = f(tk + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
        let (k3, _) = f(tk + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
        let (k4, _) = f(tk + h, &(&x + &k3 * h))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_finite(&x, k + 1, tk + h)?;
    }
    let m = us[0].len();
    let x = DMatrix::from_columns(&xs);
    let xdot = DMatrix::from_columns(&ds);
    let u = if m == 0 {
        DMatrix::zeros(0, xs.len())
    } else {
        DMatrix::from_columns(&us)
    };
    debug_assert_eq!(x.nrows(), n);
    Trajectory::new(ts, t, x.clone(), x, xdot, u)
}

fn check_finite(x: &DVector<f64>, index: usize, time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) && x.amax() < DIVERGENCE_BOUND {
        Ok(())
    } else {
        Err(DfcError::Divergence { index, time })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// `u = -K x'`
    Derivative,
    /// `u = -K x_meas`
    State,
}

/// How `xdot_meas` is produced. The loop itself always sees the exact
/// derivative; `Filtered` only changes what is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    Ideal,
    Filtered(FilterSpec),
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSpec {
    pub gain: Gain,
    pub feedback: Feedback,
    pub bias: DVector<f64>,
    pub excitation: Option<ExcitationSpec>,
    pub derivative: DerivativeMode,
    pub sensor_noise_sd: f64,
    pub noise_seed: u64,
    pub ts: f64,
    pub duration: f64,
    pub x0: DVector<f64>,
}

impl ClosedLoopSpec {
    /// Noise-free, bias-free, ideal-derivative run under derivative feedback.
    pub fn ideal(gain: Gain, x0: DVector<f64>, ts: f64, duration: f64) -> Self {
        let n = x0.len();
        ClosedLoopSpec {
            gain,
            feedback: Feedback::Derivative,
            bias: DVector::zeros(n),
            excitation: None,
            derivative: DerivativeMode::Ideal,
            sensor_noise_sd: 0.0,
            noise_seed: 0,
            ts,
            duration,
            x0,
        }
    }

    pub fn with_excitation(mut self, spec: ExcitationSpec) -> Self {
        self.excitation = Some(spec);
        self
    }

    pub fn with_bias(mut self, bias: DVector<f64>) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_feedback(mut self, feedback: Feedback) -> Self {
        self.feedback = feedback;
        self
    }

    pub fn with_derivative(mut self, mode: DerivativeMode) -> Self {
        self.derivative = mode;
        self
    }

    pub fn with_sensor_noise(mut self, sd: f64, seed: u64) -> Self {
        self.sensor_noise_sd = sd;
        self.noise_seed = seed;
        self
    }
}

/// Derivative of the closed loop at `x` and the input applied there.
///
/// Under derivative feedback the algebraic loop `u = -K x' + e` is solved
/// through the input-affine structure, `x' = (I + G K)^-1 (f + G e)`. When
/// the plant saturates, the commanded input is clamped and the derivative
/// recomputed from the delivered input.
pub fn closed_loop_step<P: InputAffinePlant + ?Sized>(
    plant: &P,
    gain: &Gain,
    feedback: Feedback,
    bias: &DVector<f64>,
    x: &DVector<f64>,
    e: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let k = gain.matrix();
    let f = plant.drift(x)?;
    let g = plant.input_map(x)?;
    let commanded = match feedback {
        Feedback::Derivative => {
            let n = plant.n();
            let lhs = DMatrix::identity(n, n) + &g * k;
            let rhs = &f + &g * e;
            let xdot = lhs.lu().solve(&rhs).ok_or(DfcError::AlgebraicLoop)?;
            if !xdot.iter().all(|v| v.is_finite()) {
                return Err(DfcError::AlgebraicLoop);
            }
            if !plant.has_saturation() {
                let u = -(k * &xdot) + e;
                return Ok((xdot, u));
            }
            -(k * xdot) + e
        }
        Feedback::State => -(k * (x + bias)) + e,
    };
    let u = plant.saturate(&commanded);
    Ok((&f + &g * &u, u))
}

/// Closed-loop run under `u = -K x' + e` (or state feedback), recording the
/// biased, optionally noisy measurements the learning routes consume.
pub fn simulate_dfc_closed_loop<P: InputAffinePlant + ?Sized>(plant: &P, spec: &ClosedLoopSpec) -> Result<Trajectory> {
    let n = plant.n();
    let m = plant.m();
    if spec.x0.len() != n || spec.bias.len() != n {
        return Err(DfcError::Dimension(format!(
            "initial state and bias must have {n} entries"
        )));
    }
    if spec.gain.matrix().shape() != (m, n) {
        return Err(DfcError::Dimension(format!(
            "gain is {:?}, plant needs {m}x{n}",
            spec.gain.matrix().shape()
        )));
    }
    if !(spec.sensor_noise_sd >= 0.0) {
        return Err(DfcError::Invalid("sensor noise level must be >= 0".into()));
    }
    if let DerivativeMode::Filtered(filter) = &spec.derivative {
        filter.validate(spec.ts)?;
    }
    let excitation = match &spec.excitation {
        Some(e) => Some(Multisine::new(e, m, spec.duration)?),
        None => None,
    };
    let exc = |t: f64| match &excitation {
        Some(sig) => sig.at(t),
        None => DVector::zeros(m),
    };
    let u_source = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        closed_loop_step(plant, &spec.gain, spec.feedback, &spec.bias, x, &exc(t)).map(|(_, u)| u)
    };
    let mut traj = integrate(|x, u| plant.derivative(x, u), &spec.x0, u_source, spec.ts, spec.duration)?;

    let len = traj.len();
    let mut x_meas = traj.x.clone();
    for mut col in x_meas.column_iter_mut() {
        col += &spec.bias;
    }
    if spec.sensor_noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let normal = Normal::new(0.0, spec.sensor_noise_sd)
            .map_err(|e| DfcError::Invalid(format!("sensor noise: {e}")))?;
        for k in 0..len {
            for i in 0..n {
                x_meas[(i, k)] += normal.sample(&mut rng);
            }
        }
    }
    if let DerivativeMode::Filtered(filter) = &spec.derivative {
        traj.xdot_meas = filtered_derivative(&x_meas, spec.ts, filter)?;
    }
    traj.x_meas = x_meas;
    Ok(traj)
}
