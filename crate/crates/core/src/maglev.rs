//! Two-disk active magnetic levitation plant.
//!
//! Positions in [`MaglevState`] are air-gap coordinates: `y1` (`y2`) is the
//! distance from coil 1 (coil 2) to disk 1 (disk 2), and the force law of a
//! coil on its own disk is `U / (a (y + b)^4)`. The coils pull their disks in,
//! gravity and the far coil push them out, and the disk-disk force enters the
//! two disks with opposite signs so the linearized coupling is symmetric.
//!
//! The linear model works in local coordinates measured toward the coil:
//! `x = [y10 - y1, -y1', y20 - y2, -y2']`, `u = U - u0`. In these coordinates
//! the linearization has the familiar open-loop unstable structure with
//! positive input gains.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};
use crate::lin_model::{Gain, StateSpaceModel};
use crate::sim::InputAffinePlant;

/// Smallest admissible force-law denominator base.
const COLLISION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaglevParams {
    /// Disk mass, kg.
    pub mass: f64,
    /// m/s^2
    pub gravity: f64,
    /// Damping of disk 1 and disk 2, kg/s.
    pub c1: f64,
    pub c2: f64,
    /// Actuator gain inverse, A/(N m^4).
    pub a: f64,
    /// Actuator offset, m.
    pub b: f64,
    /// Magnet-magnet force parameter, N m^4.
    pub c: f64,
    /// Magnet-magnet offset, m.
    pub d: f64,
    /// Coil distance, m.
    pub yc: f64,
}

impl Default for MaglevParams {
    fn default() -> Self {
        MaglevParams {
            mass: 0.126,
            gravity: 9.81,
            c1: 0.96,
            c2: 0.96,
            a: 4.0442e4,
            b: 0.0591,
            c: 4.4408e-8,
            d: 0.042,
            yc: 0.133,
        }
    }
}

impl MaglevParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("c1", self.c1),
            ("c2", self.c2),
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("yc", self.yc),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(DfcError::Invalid(format!(
                    "maglev parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Inter-disk distance `y12 = yc + y2 - y1`.
    pub fn disk_separation(&self, y1: f64, y2: f64) -> f64 {
        self.yc + y2 - y1
    }

    fn magnet_force(&self, y1: f64, y2: f64) -> Result<f64> {
        let den = nonzero(self.disk_separation(y1, y2) + self.d, "y12 + d")?;
        Ok(self.c / den.powi(4))
    }
}

fn nonzero(value: f64, which: &'static str) -> Result<f64> {
    if !value.is_finite() {
        return Err(DfcError::NonFinite(which));
    }
    if value.abs() < COLLISION_TOL {
        return Err(DfcError::MagnetCollision { which, value });
    }
    Ok(value)
}

/// Magnetic equilibrium and the bias currents holding it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub y10: f64,
    pub y20: f64,
    pub u10: f64,
    pub u20: f64,
}

impl OperatingPoint {
    /// Operating point at `(y10, y20)` with bias currents from
    /// [`equilibrium_currents`].
    pub fn at(params: &MaglevParams, y10: f64, y20: f64) -> Result<Self> {
        let (u10, u20) = equilibrium_currents(params, y10, y20)?;
        let op = OperatingPoint { y10, y20, u10, u20 };
        op.validate(params)?;
        Ok(op)
    }

    /// `y10 = 0.01 m`, `y20 = -0.02 m`.
    pub fn nominal(params: &MaglevParams) -> Result<Self> {
        OperatingPoint::at(params, 0.01, -0.02)
    }

    pub fn validate(&self, params: &MaglevParams) -> Result<()> {
        if self.y10 + params.b <= 0.0 || self.y20 + params.b <= 0.0 {
            return Err(DfcError::Invalid(
                "operating point puts a disk inside its coil offset".into(),
            ));
        }
        if self.u10 < 0.0 || self.u20 < 0.0 {
            return Err(DfcError::Invalid("bias currents must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_local(&self, s: &MaglevState) -> DVector<f64> {
        DVector::from_column_slice(&[self.y10 - s.y1, -s.y1dot, self.y20 - s.y2, -s.y2dot])
    }

    pub fn from_local(&self, x: &DVector<f64>) -> MaglevState {
        MaglevState {
            y1: self.y10 - x[0],
            y1dot: -x[1],
            y2: self.y20 - x[2],
            y2dot: -x[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaglevState {
    pub y1: f64,
    pub y1dot: f64,
    pub y2: f64,
    pub y2dot: f64,
}

impl MaglevState {
    pub fn at_rest(y1: f64, y2: f64) -> Self {
        MaglevState {
            y1,
            y1dot: 0.0,
            y2,
            y2dot: 0.0,
        }
    }
}

/// Which coil-disk forces the nonlinear model keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForceModel {
    /// All five forces, including each coil acting on the far disk.
    #[default]
    Full,
    /// Far-coil forces dropped, as assumed by the linearization.
    Simplified,
}

/// Acceleration of each disk split into the current-independent part and
/// the sensitivity to each coil current (the model is affine in currents).
struct AffineAccel {
    drift: [f64; 2],
    /// `per_current[disk][coil]`
    per_current: [[f64; 2]; 2],
}

fn affine_accel(p: &MaglevParams, s: &MaglevState, forces: ForceModel) -> Result<AffineAccel> {
    let own1 = nonzero(s.y1 + p.b, "y1 + b")?;
    let own2 = nonzero(s.y2 + p.b, "y2 + b")?;
    let fm = p.magnet_force(s.y1, s.y2)?;
    let (far12, far21) = match forces {
        ForceModel::Full => {
            let g12 = nonzero(p.yc + s.y2 + p.b, "yc + y2 + b")?;
            let g21 = nonzero(p.yc - s.y1 + p.b, "yc - y1 + b")?;
            (1.0 / (p.a * g12.powi(4)), 1.0 / (p.a * g21.powi(4)))
        }
        ForceModel::Simplified => (0.0, 0.0),
    };
    let m = p.mass;
    Ok(AffineAccel {
        drift: [
            (fm - p.c1 * s.y1dot + m * p.gravity) / m,
            (-fm - p.c2 * s.y2dot + m * p.gravity) / m,
        ],
        per_current: [
            [-1.0 / (m * p.a * own1.powi(4)), far21 / m],
            [far12 / m, -1.0 / (m * p.a * own2.powi(4))],
        ],
    })
}

/// `[y1', y1'', y2', y2'']` under coil currents `u1`, `u2` (full force model).
pub fn dynamics(params: &MaglevParams, state: &MaglevState, u1: f64, u2: f64) -> Result<[f64; 4]> {
    dynamics_with(params, state, u1, u2, ForceModel::Full)
}

pub fn dynamics_with(
    params: &MaglevParams,
    state: &MaglevState,
    u1: f64,
    u2: f64,
    forces: ForceModel,
) -> Result<[f64; 4]> {
    let acc = affine_accel(params, state, forces)?;
    let y1ddot = acc.drift[0] + acc.per_current[0][0] * u1 + acc.per_current[0][1] * u2;
    let y2ddot = acc.drift[1] + acc.per_current[1][0] * u1 + acc.per_current[1][1] * u2;
    Ok([state.y1dot, y1ddot, state.y2dot, y2ddot])
}

/// Bias currents balancing gravity and the disk-disk force at `(y10, y20)`
/// with the far-coil forces neglected.
pub fn equilibrium_currents(params: &MaglevParams, y10: f64, y20: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if y10 + params.b <= 0.0 || y20 + params.b <= 0.0 {
        return Err(DfcError::Invalid(
            "equilibrium positions must keep y + b positive".into(),
        ));
    }
    let fm = params.magnet_force(y10, y20)?;
    let weight = params.mass * params.gravity;
    let u10 = params.a * (y10 + params.b).powi(4) * (fm + weight);
    let u20 = params.a * (y20 + params.b).powi(4) * (weight - fm);
    Ok((u10, u20))
}

/// Stiffness and input coefficients of the linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCoefficients {
    pub k1: f64,
    pub k2: f64,
    pub k12: f64,
    pub ku1: f64,
    pub ku2: f64,
}

pub fn linear_coefficients(params: &MaglevParams, op: &OperatingPoint) -> LinearCoefficients {
    let g1 = op.y10 + params.b;
    let g2 = op.y20 + params.b;
    let sep = params.disk_separation(op.y10, op.y20) + params.d;
    LinearCoefficients {
        k1: 4.0 * op.u10 / (params.a * g1.powi(5)),
        k2: 4.0 * op.u20 / (params.a * g2.powi(5)),
        k12: 4.0 * params.c / sep.powi(5),
        ku1: 1.0 / (params.a * g1.powi(4)),
        ku2: 1.0 / (params.a * g2.powi(4)),
    }
}

/// Linear model about `op` in local coordinates, far-coil forces neglected.
pub fn linearize(params: &MaglevParams, op: &OperatingPoint) -> Result<StateSpaceModel> {
    params.validate()?;
    op.validate(params)?;
    let k = linear_coefficients(params, op);
    let m = params.mass;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0,
            (k.k1 + k.k12) / m, -params.c1 / m, -k.k12 / m, 0.0,
            0.0, 0.0, 0.0, 1.0,
            -k.k12 / m, 0.0, (k.k2 + k.k12) / m, -params.c2 / m,
        ],
    );
    let b = DMatrix::from_row_slice(
        4,
        2,
        &[0.0, 0.0, k.ku1 / m, 0.0, 0.0, 0.0, 0.0, k.ku2 / m],
    );
    StateSpaceModel::new(a, b)
}

/// The nominal linear model with the entries exactly as published (cross
/// coupling rounded to zero).
pub fn printed_model() -> StateSpaceModel {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0,
            567.8, -7.6, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, 1003.7, -7.6,
        ],
    );
    let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 8.6077, 0.0, 0.0, 0.0, 0.0, 83.9636]);
    StateSpaceModel::new(a, b).expect("published model is nonsingular")
}

/// Published pole-placement gain used to start policy iteration.
pub fn k1_printed() -> Gain {
    Gain::from_rows(
        2,
        4,
        &[
            -9.7596, -0.6122, -2.8462, -0.0197,
            0.5168, 0.0038, -1.6957, -0.1015,
        ],
    )
}

/// Published optimal gain for `Q = I4`, `R = diag(1, 2)` on [`printed_model`].
pub fn k_are_printed() -> Gain {
    Gain::from_rows(
        2,
        4,
        &[
            -13.1301, -1.1229, 0.0004, 0.0000,
            -0.0001, -0.0000, -4.2980, -0.7191,
        ],
    )
}

/// Nonlinear plant seen through the local coordinates of an operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaglevPlant {
    pub params: MaglevParams,
    pub op: OperatingPoint,
    pub forces: ForceModel,
    /// Symmetric limit on the absolute coil currents, A.
    pub current_limit: Option<f64>,
}

impl MaglevPlant {
    pub fn nominal() -> Result<Self> {
        let params = MaglevParams::default();
        Ok(MaglevPlant {
            params,
            op: OperatingPoint::nominal(&params)?,
            forces: ForceModel::Full,
            current_limit: None,
        })
    }

    pub fn with_current_limit(mut self, limit: Option<f64>) -> Self {
        self.current_limit = limit;
        self
    }

    pub fn linearization(&self) -> Result<StateSpaceModel> {
        linearize(&self.params, &self.op)
    }

    /// Local state at which the plant rests with the bias currents applied
    /// (differs from the origin when far-coil forces are kept).
    pub fn rest_equilibrium_local(&self) -> Result<DVector<f64>> {
        let (mut y1, mut y2) = (self.op.y10, self.op.y20);
        let accel = |y1: f64, y2: f64| -> Result<[f64; 2]> {
            let d = dynamics_with(
                &self.params,
                &MaglevState::at_rest(y1, y2),
                self.op.u10,
                self.op.u20,
                self.forces,
            )?;
            Ok([d[1], d[3]])
        };
        for _ in 0..50 {
            let f = accel(y1, y2)?;
            if f[0].abs().max(f[1].abs()) < 1e-13 {
                break;
            }
            let h = 1e-7;
            let f1 = accel(y1 + h, y2)?;
            let f2 = accel(y1, y2 + h)?;
            let j = nalgebra::Matrix2::new(
                (f1[0] - f[0]) / h,
                (f2[0] - f[0]) / h,
                (f1[1] - f[1]) / h,
                (f2[1] - f[1]) / h,
            );
            let step = j
                .try_inverse()
                .ok_or_else(|| DfcError::Invalid("rest equilibrium Jacobian singular".into()))?
                * nalgebra::Vector2::new(f[0], f[1]);
            y1 -= step[0];
            y2 -= step[1];
        }
        Ok(self.op.to_local(&MaglevState::at_rest(y1, y2)))
    }

    fn state_of(&self, x: &DVector<f64>) -> Result<MaglevState> {
        if x.len() != 4 {
            return Err(DfcError::Dimension(format!(
                "maglev local state has 4 entries, got {}",
                x.len()
            )));
        }
        Ok(self.op.from_local(x))
    }
}

impl InputAffinePlant for MaglevPlant {
    fn n(&self) -> usize {
        4
    }

    fn m(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.state_of(x)?;
        let d = dynamics_with(&self.params, &s, self.op.u10, self.op.u20, self.forces)?;
        Ok(DVector::from_column_slice(&[-d[0], -d[1], -d[2], -d[3]]))
    }

    fn input_map(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let s = self.state_of(x)?;
        let acc = affine_accel(&self.params, &s, self.forces)?;
        let mut g = DMatrix::zeros(4, 2);
        for coil in 0..2 {
            g[(1, coil)] = -acc.per_current[0][coil];
            g[(3, coil)] = -acc.per_current[1][coil];
        }
        Ok(g)
    }

    fn saturate(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.current_limit {
            None => u.clone(),
            Some(limit) => {
                let bias = [self.op.u10, self.op.u20];
                DVector::from_iterator(
                    2,
                    u.iter()
                        .zip(bias)
                        .map(|(&du, u0)| (u0 + du).clamp(-limit, limit) - u0),
                )
            }
        }
    }

    fn has_saturation(&self) -> bool {
        self.current_limit.is_some()
    }
}
