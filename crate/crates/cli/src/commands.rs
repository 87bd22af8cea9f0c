//! The five subcommands. Each writes into an [`OutDir`] and returns its
//! results so callers (and tests) need not re-read the files.

use std::path::{Path, PathBuf};

use dfc_core::dfc::{
    evaluate_policy_cost, lqr_state_feedback, model_based_pi, solve_dfc_are, trajectory_cost, DfcSolution, PiTrace,
    DEFAULT_ETA, DEFAULT_MAX_ITERS,
};
use dfc_core::lin_model::{closed_loop_matrix, is_stabilizing};
use dfc_core::linalg::{eigenvalues, rel_frobenius, spectral_abscissa};
use dfc_core::mfpi::{multi_epoch_train_observed, noise_stream, EpochTrace};
use dfc_core::sim::{simulate_dfc_closed_loop, ClosedLoopSpec, DerivativeMode, Feedback, Trajectory};
use dfc_core::sysid::{dmdc_fit, frequency_response, log_grid, pem_refine, IdentifiedModel, PemResult};
use dfc_core::{DfcError, Gain, StateSpaceModel};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Plant, IDENTIFY_SEED_OFFSET, SIMULATE_SEED_OFFSET};
use crate::error::{CliError, CliResult};
use crate::files::{num, opt_num, read_json, GainFile, ModelFile, OutDir};

/// Noise stream shared by every controller in one comparison.
pub const COMPARE_STREAM: u64 = 3000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignReport {
    pub source: String,
    pub solution: DfcSolution,
    /// Closed-loop eigenvalues as `[re, im]`.
    pub closed_loop_eigenvalues: Vec<[f64; 2]>,
    pub hurwitz_margin: f64,
    pub stabilizing: bool,
    /// State-feedback baseline, when the standard Riccati equation is solvable.
    pub lqr_gain: Option<Gain>,
    pub lqr_note: Option<String>,
}

pub struct DesignOutput {
    pub report: DesignReport,
    pub pi_trace: Option<PiTrace>,
}

fn margin_and_eigs(m: &nalgebra::DMatrix<f64>) -> (f64, Vec<[f64; 2]>) {
    let eigs = eigenvalues(m).iter().map(|l| [l.re, l.im]).collect();
    (-spectral_abscissa(m), eigs)
}

pub fn design(cfg: &ExperimentConfig, out: &mut OutDir, model_path: Option<&Path>) -> CliResult<DesignOutput> {
    let weights = cfg.weights()?;
    let (model, source) = match model_path {
        Some(p) => (read_json::<ModelFile>(p)?.model()?, p.display().to_string()),
        None => (cfg.reference_model()?, format!("{:?}", cfg.plant).to_lowercase()),
    };
    let sol = solve_dfc_are(&model, &weights)?;
    out.write_json("solution.json", &sol)?;
    let label = if model_path.is_some() { "K_design" } else { "K_ARE" };
    out.write_json("gain-are.json", &GainFile::derivative(label, sol.k.clone()))?;

    let cl = closed_loop_matrix(&model, &sol.k)?;
    let (hurwitz_margin, closed_loop_eigenvalues) = margin_and_eigs(&cl);

    // Model-based policy iteration from the configured initial gain, as
    // convergence plot data.
    let mut pi_trace = None;
    if model_path.is_none() && weights.q().iter().any(|&q| q != 0.0) {
        let k1 = cfg.initial_gain()?;
        if is_stabilizing(&model, &k1)? {
            let trace = model_based_pi(&model, &weights, &k1, DEFAULT_ETA, DEFAULT_MAX_ITERS)?;
            let rows: Vec<Vec<String>> = trace
                .steps
                .iter()
                .map(|s| {
                    vec![
                        s.iteration.to_string(),
                        num((&s.p - &sol.p).norm()),
                        num((s.k_next.matrix() - sol.k.matrix()).norm()),
                        opt_num(s.p_change),
                        num(s.k_change),
                        num(s.lyapunov_residual),
                    ]
                })
                .collect();
            out.write_table(
                "pi-convergence.csv",
                &["iteration", "p_error", "k_error", "p_change", "k_change", "lyapunov_residual"],
                &rows,
            )?;
            out.write_json("pi-trace.json", &trace)?;
            pi_trace = Some(trace);
        }
    }

    let (lqr_gain, lqr_note) = match lqr_state_feedback(&model, &weights) {
        Ok(l) => {
            out.write_json(
                "gain-lqr.json",
                &GainFile {
                    label: "K_LQR".into(),
                    feedback: Feedback::State,
                    gain: l.k.clone(),
                },
            )?;
            (Some(l.k), None)
        }
        Err(e) => (None, Some(format!("state-feedback baseline not available: {e}"))),
    };
    let report = DesignReport {
        source,
        stabilizing: hurwitz_margin > 0.0,
        solution: sol,
        closed_loop_eigenvalues,
        hurwitz_margin,
        lqr_gain,
        lqr_note,
    };
    out.write_json("design-report.json", &report)?;
    Ok(DesignOutput { report, pi_trace })
}

pub struct TrainOutput {
    pub trace: EpochTrace,
    /// `x0^T P* x0` of the reference model.
    pub optimal_cost: f64,
}

fn write_trace(out: &mut OutDir, trace: &EpochTrace, optimal_cost: f64) -> CliResult<()> {
    out.write_json("trace.json", trace)?;
    let epochs: Vec<Vec<String>> = trace
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.cost.cost),
                opt_num(e.delta_v),
                num(optimal_cost),
                e.inner.len().to_string(),
                e.stabilizing.map(|s| s.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    out.write_table(
        "epochs.csv",
        &["epoch", "cost", "delta_v", "optimal_cost", "inner_iterations", "stabilizing"],
        &epochs,
    )?;
    let mut inner = Vec::new();
    for e in &trace.epochs {
        for (i, it) in e.inner.iter().enumerate() {
            inner.push(vec![
                e.epoch.to_string(),
                (i + 1).to_string(),
                opt_num(it.p_change),
                opt_num(it.k_change),
                num(it.ls_residual),
                num(it.condition_number),
            ]);
        }
    }
    out.write_table(
        "inner.csv",
        &["epoch", "iteration", "p_change", "k_change", "ls_residual", "condition_number"],
        &inner,
    )?;
    Ok(())
}

/// Multi-epoch model-free training. On failure the partial trace is
/// written before the error is returned.
pub fn train(cfg: &ExperimentConfig, out: &mut OutDir) -> CliResult<TrainOutput> {
    let weights = cfg.weights()?;
    let plant = cfg.plant()?;
    let rig = cfg.rig(&plant)?;
    let k1 = cfg.initial_gain()?;
    let reference = cfg.reference_model()?;
    let x0 = cfg.x0_vec();
    let optimal_cost = match solve_dfc_are(&reference, &weights) {
        Ok(s) => (x0.transpose() * &s.p * &x0)[(0, 0)],
        Err(_) => f64::NAN,
    };
    let mut write_err = None;
    let result = multi_epoch_train_observed(&rig, &k1, &weights, &cfg.pi, &mut |a| {
        let mut save = || -> CliResult<()> {
            out.write_trajectory(&format!("epoch-{:03}-train.csv", a.epoch), a.training)?;
            if let Some(t) = a.test {
                out.write_trajectory(&format!("epoch-{:03}-test.csv", a.epoch), t)?;
            }
            Ok(())
        };
        save().map_err(|e| {
            let msg = e.to_string();
            write_err = Some(e);
            DfcError::Invalid(msg)
        })
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    match result {
        Ok(trace) => {
            write_trace(out, &trace, optimal_cost)?;
            if let Some(k) = trace.final_gain() {
                out.write_json("gain-trained.json", &GainFile::derivative("K_trained", k.clone()))?;
            }
            Ok(TrainOutput { trace, optimal_cost })
        }
        Err(DfcError::EpochAborted { epoch, reason, trace }) => {
            write_trace(out, &trace, optimal_cost)?;
            Err(DfcError::EpochAborted { epoch, reason, trace }.into())
        }
        Err(e) => {
            write_trace(out, &EpochTrace::default(), optimal_cost)?;
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyRun {
    pub run: usize,
    pub excitation_seed: u64,
    pub dmdc: IdentifiedModel,
    pub pem: PemResult,
    /// Relative Frobenius errors of the refined model against the
    /// configured reference model.
    pub rel_error_a: f64,
    pub rel_error_b: f64,
    pub gain: Option<Gain>,
    pub design_error: Option<String>,
    pub stabilizes_reference: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub runs: Vec<IdentifyRun>,
}

/// Excitation seed of identification run `run`; hashed so neighbouring
/// global seeds never share runs.
fn run_seed(cfg: &ExperimentConfig, run: usize) -> u64 {
    noise_stream(cfg.seed, IDENTIFY_SEED_OFFSET + run as u64)
}

/// Closed-loop excitation run, prefiltered and trimmed like training data.
pub fn identification_data(cfg: &ExperimentConfig, plant: &Plant, k1: &Gain, run: usize) -> CliResult<Trajectory> {
    let spec = ClosedLoopSpec::ideal(
        k1.clone(),
        DVector::from_column_slice(&cfg.train_x0),
        cfg.ts,
        cfg.identify.duration + cfg.pi.warmup,
    )
    .with_excitation(cfg.exploration.spec(run_seed(cfg, run)))
    .with_bias(cfg.bias_vec())
    .with_derivative(cfg.derivative)
    .with_sensor_noise(cfg.sensor_noise_sd, noise_stream(cfg.seed, 2 * IDENTIFY_SEED_OFFSET + run as u64));
    let raw = simulate_dfc_closed_loop(plant.dynamics(), &spec)?;
    let data = match cfg.derivative {
        DerivativeMode::Filtered(f) => raw.prefiltered(&f)?,
        DerivativeMode::Ideal => raw,
    };
    Ok(data.trimmed_front(cfg.pi.warmup)?)
}

pub fn identify(cfg: &ExperimentConfig, out: &mut OutDir) -> CliResult<IdentifyReport> {
    let weights = cfg.weights()?;
    let plant = cfg.plant()?;
    let reference = cfg.reference_model()?;
    let k1 = cfg.initial_gain()?;
    let omegas = log_grid(cfg.identify.freq_low, cfg.identify.freq_high, cfg.identify.freq_points);
    let mut runs = Vec::new();
    for run in 1..=cfg.identify.runs {
        let data = identification_data(cfg, &plant, &k1, run)?;
        out.write_trajectory(&format!("id-run-{run}.csv"), &data)?;
        let dmdc = dmdc_fit(&data, &cfg.identify.dmdc)?;
        out.write_json(&format!("model-{run}-dmdc.json"), &dmdc)?;
        let pem = pem_refine(&data, &dmdc, cfg.identify.pem_iters, cfg.identify.pem_grad_tol)?;
        out.write_json(&format!("model-{run}-pem.json"), &pem)?;
        let designed = pem.model().and_then(|m| {
            let sol = solve_dfc_are(&m, &weights)?;
            Ok((m, sol))
        });
        let (gain, design_error, stabilizes_reference) = match designed {
            Ok((m, sol)) => {
                for o in 0..2 {
                    for i in 0..2 {
                        let mag = frequency_response(&m, o, i, &omegas)?;
                        let rows: Vec<Vec<String>> =
                            omegas.iter().zip(&mag).map(|(w, g)| vec![num(*w), num(*g)]).collect();
                        out.write_table(&format!("freq-{run}-y{}-u{}.csv", o + 1, i + 1), &["omega", "magnitude"], &rows)?;
                    }
                }
                out.write_json(&format!("gain-id-{run}.json"), &GainFile::derivative(&format!("K_id-{run}"), sol.k.clone()))?;
                let stab = is_stabilizing(&reference, &sol.k)?;
                (Some(sol.k), None, Some(stab))
            }
            Err(e) => (None, Some(e.to_string()), None),
        };
        runs.push(IdentifyRun {
            run,
            excitation_seed: run_seed(cfg, run),
            rel_error_a: rel_frobenius(&pem.a_hat, reference.a()),
            rel_error_b: rel_frobenius(&pem.b_hat, reference.b()),
            dmdc,
            pem,
            gain,
            design_error,
            stabilizes_reference,
        });
    }
    let report = IdentifyReport { runs };
    out.write_json("identify-report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub label: String,
    pub feedback: Feedback,
    pub gain: Gain,
    /// Quadrature of `x'^T Q x' + u^T R u` with the applied input.
    pub cost: Option<f64>,
    /// Quadrature of `x'^T (Q + K^T R K) x'`; derivative feedback only.
    pub policy_cost: Option<f64>,
    /// Distance of the final true state from the plant's true equilibrium.
    pub steady_state_offset: Option<f64>,
    /// Largest final input magnitude, A.
    pub steady_state_input: Option<f64>,
    pub peak_input: Option<f64>,
    pub settling_time: Option<f64>,
    /// Negative spectral abscissa of the closed loop on the reference model.
    pub hurwitz_margin: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub bias: Vec<f64>,
    pub noise_seed: u64,
    pub true_equilibrium: Vec<f64>,
    pub records: Vec<ControllerRecord>,
}

impl ComparisonReport {
    pub fn record(&self, label: &str) -> Option<&ControllerRecord> {
        self.records.iter().find(|r| r.label == label)
    }
}

fn settling_time(traj: &Trajectory, eq: &DVector<f64>, fraction: f64) -> Option<f64> {
    let dev = |k: usize| (traj.x_at(k) - eq).norm();
    let band = fraction * dev(0);
    let last_out = (0..traj.len()).rev().find(|&k| dev(k) > band);
    match last_out {
        None => Some(0.0),
        Some(k) if k + 1 < traj.len() => Some(traj.t[k + 1]),
        Some(_) => None,
    }
}

fn closed_loop_margin(model: &StateSpaceModel, g: &GainFile) -> f64 {
    let m = match g.feedback {
        Feedback::Derivative => closed_loop_matrix(model, &g.gain),
        Feedback::State => Ok(model.a() - model.b() * g.gain.matrix()),
    };
    m.map(|m| -spectral_abscissa(&m)).unwrap_or(f64::NEG_INFINITY)
}

/// Shared test scenario of a comparison.
pub fn compare_spec(cfg: &ExperimentConfig, g: &GainFile) -> ClosedLoopSpec {
    ClosedLoopSpec::ideal(g.gain.clone(), cfg.x0_vec(), cfg.ts, cfg.compare.duration)
        .with_feedback(g.feedback)
        .with_bias(cfg.bias_vec())
        .with_derivative(cfg.derivative)
        .with_sensor_noise(cfg.sensor_noise_sd, noise_stream(cfg.seed, COMPARE_STREAM))
}

/// Evaluate every controller on one scenario; controllers run in parallel.
pub fn compare_gains(cfg: &ExperimentConfig, gains: &[GainFile]) -> CliResult<(ComparisonReport, Vec<Option<Trajectory>>)> {
    if gains.is_empty() {
        return Err(CliError::Usage("compare needs at least one gain file".into()));
    }
    for g in gains {
        if g.gain.matrix().shape() != (2, 4) {
            return Err(CliError::Usage(format!(
                "gain '{}' is {}x{}, the plant needs 2x4",
                g.label,
                g.gain.matrix().nrows(),
                g.gain.matrix().ncols()
            )));
        }
    }
    let weights = cfg.weights()?;
    let plant = cfg.plant()?;
    let reference = cfg.reference_model()?;
    let eq = plant.true_equilibrium()?;
    let runs: Vec<dfc_core::Result<Trajectory>> = std::thread::scope(|s| {
        let handles: Vec<_> = gains
            .iter()
            .map(|g| {
                let spec = compare_spec(cfg, g);
                let plant = &plant;
                s.spawn(move || simulate_dfc_closed_loop(plant.dynamics(), &spec))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("controller run panicked")).collect()
    });
    let mut records = Vec::new();
    let mut trajectories = Vec::new();
    for (g, run) in gains.iter().zip(runs) {
        let hurwitz_margin = closed_loop_margin(&reference, g);
        let mut rec = ControllerRecord {
            label: g.label.clone(),
            feedback: g.feedback,
            gain: g.gain.clone(),
            cost: None,
            policy_cost: None,
            steady_state_offset: None,
            steady_state_input: None,
            peak_input: None,
            settling_time: None,
            hurwitz_margin,
            error: None,
        };
        match run {
            Ok(traj) => {
                rec.cost = Some(trajectory_cost(&traj, &weights)?);
                if g.feedback == Feedback::Derivative {
                    rec.policy_cost = Some(evaluate_policy_cost(&traj, &weights, &g.gain, None)?.cost);
                }
                rec.steady_state_offset = Some((traj.final_state() - &eq).norm());
                rec.steady_state_input = Some(traj.final_input().amax());
                rec.peak_input = Some(traj.u.amax());
                rec.settling_time = settling_time(&traj, &eq, cfg.compare.settle_fraction);
                trajectories.push(Some(traj));
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                trajectories.push(None);
            }
        }
        records.push(rec);
    }
    let report = ComparisonReport {
        x0: cfg.x0.clone(),
        horizon: cfg.compare.duration,
        bias: cfg.bias.clone(),
        noise_seed: noise_stream(cfg.seed, COMPARE_STREAM),
        true_equilibrium: eq.iter().copied().collect(),
        records,
    };
    Ok((report, trajectories))
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn compare(cfg: &ExperimentConfig, out: &mut OutDir, gain_paths: &[PathBuf]) -> CliResult<ComparisonReport> {
    let gains = gain_paths.iter().map(|p| GainFile::read(p)).collect::<CliResult<Vec<_>>>()?;
    let (report, trajectories) = compare_gains(cfg, &gains)?;
    for (i, (rec, traj)) in report.records.iter().zip(&trajectories).enumerate() {
        if let Some(t) = traj {
            out.write_trajectory(&format!("traj-{}-{}.csv", i + 1, file_label(&rec.label)), t)?;
        }
    }
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:?}", r.feedback).to_lowercase(),
                opt_num(r.cost),
                opt_num(r.policy_cost),
                opt_num(r.steady_state_offset),
                opt_num(r.steady_state_input),
                opt_num(r.peak_input),
                opt_num(r.settling_time),
                num(r.hurwitz_margin),
            ]
        })
        .collect();
    out.write_table(
        "compare-summary.csv",
        &[
            "label",
            "feedback",
            "cost",
            "policy_cost",
            "steady_state_offset",
            "steady_state_input",
            "peak_input",
            "settling_time",
            "hurwitz_margin",
        ],
        &rows,
    )?;
    out.write_json("compare.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub label: String,
    pub cost: f64,
    pub final_state: Vec<f64>,
    pub final_input: Vec<f64>,
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut OutDir, gain_path: Option<&Path>) -> CliResult<SimulateReport> {
    let g = match gain_path {
        Some(p) => GainFile::read(p)?,
        None => GainFile::derivative("K1", cfg.initial_gain()?),
    };
    let plant = cfg.plant()?;
    let mut spec = ClosedLoopSpec::ideal(g.gain.clone(), cfg.x0_vec(), cfg.ts, cfg.simulate.duration)
        .with_feedback(g.feedback)
        .with_bias(cfg.bias_vec())
        .with_derivative(cfg.derivative)
        .with_sensor_noise(cfg.sensor_noise_sd, noise_stream(cfg.seed, SIMULATE_SEED_OFFSET));
    if cfg.simulate.excite {
        spec = spec.with_excitation(cfg.exploration.spec(cfg.seed.wrapping_add(SIMULATE_SEED_OFFSET)));
    }
    let traj = simulate_dfc_closed_loop(plant.dynamics(), &spec)?;
    out.write_trajectory("trajectory.csv", &traj)?;
    let report = SimulateReport {
        label: g.label,
        cost: trajectory_cost(&traj, &cfg.weights()?)?,
        final_state: traj.final_state().iter().copied().collect(),
        final_input: traj.final_input().iter().copied().collect(),
    };
    out.write_json("simulate-report.json", &report)?;
    Ok(report)
}

/// Named random streams a command draws from, for the manifest.
pub fn derived_seeds(cfg: &ExperimentConfig, command: &str) -> Vec<(String, u64)> {
    match command {
        "train" => (1..=cfg.pi.max_epochs)
            .map(|e| (format!("epoch-{e}-excitation"), cfg.seed.wrapping_add(e as u64)))
            .collect(),
        "identify" => (1..=cfg.identify.runs)
            .map(|r| (format!("identify-{r}-excitation"), run_seed(cfg, r)))
            .collect(),
        "compare" => vec![("compare-noise".into(), noise_stream(cfg.seed, COMPARE_STREAM))],
        "simulate" => vec![("simulate-excitation".into(), cfg.seed.wrapping_add(SIMULATE_SEED_OFFSET))],
        _ => Vec::new(),
    }
}

