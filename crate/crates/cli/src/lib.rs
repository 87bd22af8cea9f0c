//! Command-line harness around `dfc-core`: experiment configuration,
//! the subcommands, and reproducible output directories.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;

use std::time::Instant;

use cli::{Cli, Command};
use config::{ExperimentConfig, Preset};
use error::{CliError, CliResult};
use files::{Manifest, OutDir};

/// Resolve the configuration from flags: preset or file, then overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(p)) => Preset::from(p).load()?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, command: &Command, out: &mut OutDir) -> CliResult<(String, Vec<(String, f64)>)> {
    Ok(match command {
        Command::Design { model } => {
            let d = commands::design(cfg, out, model.as_deref())?;
            let gain = d.report.solution.k.matrix().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>();
            (format!("design: K = [{}] (column-major), margin {:.4}", gain.join(", "), d.report.hurwitz_margin), Vec::new())
        }
        Command::Train => {
            let t = commands::train(cfg, out)?;
            let timings = t.trace.epochs.iter().map(|e| (format!("epoch-{}", e.epoch), e.elapsed_s)).collect();
            let last = t.trace.epochs.last().map(|e| e.cost.cost).unwrap_or(f64::NAN);
            (
                format!(
                    "train: {} epochs, converged {}, final cost {last:.6e} (optimum {:.6e})",
                    t.trace.epochs.len(),
                    t.trace.converged,
                    t.optimal_cost
                ),
                timings,
            )
        }
        Command::Identify => {
            let r = commands::identify(cfg, out)?;
            let errs = r.runs.iter().map(|x| format!("{:.3e}", x.rel_error_a)).collect::<Vec<_>>();
            (format!("identify: {} runs, relative A error [{}]", r.runs.len(), errs.join(", ")), Vec::new())
        }
        Command::Compare { gains } => {
            let r = commands::compare(cfg, out, gains)?;
            let lines = r
                .records
                .iter()
                .map(|c| match (&c.error, c.cost) {
                    (Some(e), _) => format!("  {}: failed: {e}", c.label),
                    (None, cost) => format!(
                        "  {}: cost {:.6e}, offset {:.3e}",
                        c.label,
                        cost.unwrap_or(f64::NAN),
                        c.steady_state_offset.unwrap_or(f64::NAN)
                    ),
                })
                .collect::<Vec<_>>();
            (format!("compare:\n{}", lines.join("\n")), Vec::new())
        }
        Command::Simulate { gain } => {
            let r = commands::simulate(cfg, out, gain.as_deref())?;
            (format!("simulate: {} cost {:.6e}", r.label, r.cost), Vec::new())
        }
    })
}

/// Run one command. The manifest is written even when the command fails,
/// provided the output directory could be created.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = resolve_config(cli)?;
    let started = Instant::now();
    let mut out = OutDir::create(&cfg.out_dir)?;
    let result = execute(&cfg, &cli.command, &mut out);
    let (status, timings) = match &result {
        Ok((_, t)) => ("ok".to_string(), t.clone()),
        Err(e) => (format!("error (exit {}): {e}", e.exit_code()), Vec::new()),
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: dfc_core::VERSION.into(),
        command: cli.command.name().into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        derived_seeds: commands::derived_seeds(&cfg, cli.command.name()),
        outputs: out.written().to_vec(),
        elapsed_s: started.elapsed().as_secs_f64(),
        timings,
        status,
        config: cfg.clone(),
    };
    out.write_json("manifest.json", &manifest)?;
    result.map(|(summary, _)| summary)
}
