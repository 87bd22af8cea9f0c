//! Experiment configuration and the two shipped presets.

use std::path::PathBuf;

use dfc_core::dfc::{place_dfc_poles, solve_dfc_are, DEFAULT_POLES};
use dfc_core::maglev::{self, ForceModel, MaglevParams, MaglevPlant, OperatingPoint};
use dfc_core::mfpi::{PiConfig, SimulatedRig};
use dfc_core::sim::{DerivativeMode, ExcitationSpec, InputAffinePlant};
use dfc_core::sysid::DmdcConfig;
use dfc_core::{CostWeights, Gain, StateSpaceModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::files::GainFile;

pub const IDEAL: &str = include_str!("../presets/ideal.json");
pub const HARDWARE: &str = include_str!("../presets/hardware.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    /// The published linear model, entries as printed.
    Printed,
    /// Linearization of the configured parameters about the operating point.
    NominalLinear,
    /// Full nonlinear plant in local coordinates.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialGain {
    /// Published pole-placement gain.
    Printed,
    /// Riccati-optimal gain of the reference model.
    Are,
    /// Pole placement on the reference model.
    Poles { poles: Vec<f64> },
    /// Gain file written by an earlier command.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Equilibrium {
    pub y10: f64,
    pub y20: f64,
}

impl Default for Equilibrium {
    fn default() -> Self {
        Equilibrium { y10: 0.01, y20: -0.02 }
    }
}

/// Multisine shape; the seed is derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exploration {
    pub amplitude: f64,
    pub freq_low: f64,
    pub freq_high: f64,
    pub num_tones: usize,
}

impl Default for Exploration {
    fn default() -> Self {
        let d = ExcitationSpec::default();
        Exploration {
            amplitude: d.amplitude,
            freq_low: d.freq_low,
            freq_high: d.freq_high,
            num_tones: d.num_tones,
        }
    }
}

impl Exploration {
    pub fn spec(&self, seed: u64) -> ExcitationSpec {
        ExcitationSpec {
            amplitude: self.amplitude,
            freq_low: self.freq_low,
            freq_high: self.freq_high,
            num_tones: self.num_tones,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Number of independently seeded identification runs.
    pub runs: usize,
    /// Length of each identification record, s.
    pub duration: f64,
    pub dmdc: DmdcConfig,
    pub pem_iters: usize,
    pub pem_grad_tol: f64,
    /// Frequency-response grid, rad/s.
    pub freq_low: f64,
    pub freq_high: f64,
    pub freq_points: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            runs: 2,
            duration: 2.0,
            dmdc: DmdcConfig {
                e_min: 0.99,
                q_override: Some(4),
            },
            pem_iters: 20,
            pem_grad_tol: 1e-10,
            freq_low: 0.1,
            freq_high: 1000.0,
            freq_points: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Horizon of the shared test scenario, s.
    pub duration: f64,
    /// Settling band as a fraction of the initial deviation.
    pub settle_fraction: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            duration: 10.0,
            settle_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub duration: f64,
    /// Add the exploration signal.
    pub excite: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            duration: 5.0,
            excite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    pub params: MaglevParams,
    pub equilibrium: Equilibrium,
    /// Coil current limit, A; nonlinear plant only.
    pub current_limit: Option<f64>,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    /// Sampling interval, s.
    pub ts: f64,
    pub initial_gain: InitialGain,
    pub pi: PiConfig,
    pub exploration: Exploration,
    pub derivative: DerivativeMode,
    /// Standard deviation of additive position/velocity sensor noise.
    pub sensor_noise_sd: f64,
    pub bias: Vec<f64>,
    /// Initial state of test and comparison runs.
    pub x0: Vec<f64>,
    /// Initial state of training and identification runs.
    pub train_x0: Vec<f64>,
    /// Length of each per-epoch test run, s.
    pub test_duration: f64,
    pub seed: u64,
    pub identify: IdentifyConfig,
    pub compare: CompareConfig,
    pub simulate: SimulateConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            plant: PlantKind::Printed,
            params: MaglevParams::default(),
            equilibrium: Equilibrium::default(),
            current_limit: None,
            q_diag: vec![1.0; 4],
            r_diag: vec![1.0, 2.0],
            ts: 1e-3,
            initial_gain: InitialGain::Printed,
            pi: PiConfig::default(),
            exploration: Exploration::default(),
            derivative: DerivativeMode::Ideal,
            sensor_noise_sd: 0.0,
            bias: vec![0.0; 4],
            x0: vec![0.005, 0.0, -0.005, 0.0],
            train_x0: vec![0.005, 0.0, -0.005, 0.0],
            test_duration: 10.0,
            seed: 1,
            identify: IdentifyConfig::default(),
            compare: CompareConfig::default(),
            simulate: SimulateConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Ideal,
    Hardware,
}

impl Preset {
    pub fn text(self) -> &'static str {
        match self {
            Preset::Ideal => IDEAL,
            Preset::Hardware => HARDWARE,
        }
    }

    pub fn load(self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::from_json(self.text())
    }
}

/// Seed offsets keep every random stream of one experiment distinct.
pub const IDENTIFY_SEED_OFFSET: u64 = 1000;
pub const SIMULATE_SEED_OFFSET: u64 = 2000;

/// The configured plant and the linear model that certifies gains on it.
pub enum Plant {
    Linear(StateSpaceModel),
    Nonlinear(MaglevPlant),
}

impl Plant {
    pub fn dynamics(&self) -> &(dyn InputAffinePlant + '_) {
        match self {
            Plant::Linear(m) => m,
            Plant::Nonlinear(p) => p,
        }
    }

    /// Local state the plant rests at when the control input is zero.
    pub fn true_equilibrium(&self) -> CliResult<DVector<f64>> {
        match self {
            Plant::Linear(m) => Ok(DVector::zeros(m.n())),
            Plant::Nonlinear(p) => Ok(p.rest_equilibrium_local()?),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// SHA-256 of the compact serialization, output directory excluded so
    /// that identical experiments hash alike wherever they are written.
    pub fn hash(&self) -> String {
        let key = ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&key).expect("configuration serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        self.params.validate().map_err(CliError::usage)?;
        for (name, v, len) in [
            ("q_diag", &self.q_diag, 4),
            ("r_diag", &self.r_diag, 2),
            ("bias", &self.bias, 4),
            ("x0", &self.x0, 4),
            ("train_x0", &self.train_x0, 4),
        ] {
            if v.len() != len {
                return usage(format!("{name} needs {len} entries, got {}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return usage(format!("{name} has non-finite entries"));
            }
        }
        if self.q_diag.iter().any(|&q| q < 0.0) || self.r_diag.iter().any(|&r| r <= 0.0) {
            return usage("q_diag must be >= 0 and r_diag > 0".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return usage("ts must be positive".into());
        }
        self.pi.validate(4, 2).map_err(CliError::usage)?;
        let ratio = self.pi.interval / self.ts;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return usage("pi.interval must be a multiple of ts".into());
        }
        self.exploration.spec(self.seed).validate().map_err(CliError::usage)?;
        if let DerivativeMode::Filtered(f) = self.derivative {
            f.validate(self.ts).map_err(CliError::usage)?;
        }
        if !(self.sensor_noise_sd >= 0.0) {
            return usage("sensor_noise_sd must be >= 0".into());
        }
        for (name, d) in [
            ("test_duration", self.test_duration),
            ("identify.duration", self.identify.duration),
            ("compare.duration", self.compare.duration),
            ("simulate.duration", self.simulate.duration),
        ] {
            if !(d >= self.ts && d.is_finite()) {
                return usage(format!("{name} must be at least one sampling interval, got {d}"));
            }
        }
        if self.identify.runs == 0 {
            return usage("identify.runs must be at least 1".into());
        }
        self.identify.dmdc.validate(6).map_err(CliError::usage)?;
        if !(self.identify.freq_low > 0.0 && self.identify.freq_high >= self.identify.freq_low)
            || self.identify.freq_points == 0
        {
            return usage("frequency grid needs 0 < freq_low <= freq_high and at least one point".into());
        }
        if !(self.compare.settle_fraction > 0.0 && self.compare.settle_fraction < 1.0) {
            return usage("compare.settle_fraction must lie in (0, 1)".into());
        }
        if self.current_limit.is_some() && self.plant != PlantKind::Nonlinear {
            return usage("current_limit applies to the nonlinear plant only".into());
        }
        if let Some(l) = self.current_limit {
            if !(l > 0.0) {
                return usage("current_limit must be positive".into());
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> CliResult<CostWeights> {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag));
        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&self.r_diag));
        CostWeights::new(q, r).map_err(CliError::usage)
    }

    fn operating_point(&self) -> CliResult<OperatingPoint> {
        OperatingPoint::at(&self.params, self.equilibrium.y10, self.equilibrium.y20).map_err(CliError::usage)
    }

    pub fn plant(&self) -> CliResult<Plant> {
        Ok(match self.plant {
            PlantKind::Printed => Plant::Linear(maglev::printed_model()),
            PlantKind::NominalLinear => Plant::Linear(maglev::linearize(&self.params, &self.operating_point()?)?),
            PlantKind::Nonlinear => Plant::Nonlinear(MaglevPlant {
                params: self.params,
                op: self.operating_point()?,
                forces: ForceModel::Full,
                current_limit: self.current_limit,
            }),
        })
    }

    /// Linear model used for design and for certifying gains.
    pub fn reference_model(&self) -> CliResult<StateSpaceModel> {
        Ok(match self.plant {
            PlantKind::Printed => maglev::printed_model(),
            PlantKind::NominalLinear | PlantKind::Nonlinear => maglev::linearize(&self.params, &self.operating_point()?)?,
        })
    }

    pub fn initial_gain(&self) -> CliResult<Gain> {
        match &self.initial_gain {
            InitialGain::Printed => Ok(maglev::k1_printed()),
            InitialGain::Are => Ok(solve_dfc_are(&self.reference_model()?, &self.weights()?)?.k),
            InitialGain::Poles { poles } => Ok(place_dfc_poles(&self.reference_model()?, poles)?),
            InitialGain::File { path } => Ok(GainFile::read(path)?.gain),
        }
    }

    pub fn x0_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn bias_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.bias)
    }

    /// Rig for multi-epoch training on the configured plant.
    pub fn rig<'a>(&self, plant: &'a Plant) -> CliResult<SimulatedRig<'a, dyn InputAffinePlant + 'a>> {
        Ok(SimulatedRig {
            plant: plant.dynamics(),
            reference: Some(self.reference_model()?),
            excitation: self.exploration.spec(self.seed),
            bias: self.bias_vec(),
            derivative: self.derivative,
            sensor_noise_sd: self.sensor_noise_sd,
            seed: self.seed,
            ts: self.ts,
            window: self.pi.record_length(),
            train_x0: DVector::from_column_slice(&self.train_x0),
            test_x0: self.x0_vec(),
            test_duration: self.test_duration,
        })
    }
}

/// Default pole set for [`InitialGain::Poles`] documentation and tests.
pub fn default_poles() -> Vec<f64> {
    DEFAULT_POLES.to_vec()
}
