//! On-disk formats owned by the harness: gain files, model files, CSV
//! helpers and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dfc_core::sim::{Feedback, Trajectory};
use dfc_core::sysid::{IdentifiedModel, PemResult};
use dfc_core::{Gain, StateSpaceModel};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// A controller to compare: the gain plus the signal it multiplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainFile {
    pub label: String,
    pub feedback: Feedback,
    pub gain: Gain,
}

impl GainFile {
    pub fn derivative(label: &str, gain: Gain) -> Self {
        GainFile {
            label: label.to_string(),
            feedback: Feedback::Derivative,
            gain,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        read_json(path)
    }
}

/// Any file a linear model can be taken from.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    Pem(PemResult),
    Identified(IdentifiedModel),
    Plain(StateSpaceModel),
}

impl ModelFile {
    pub fn model(&self) -> CliResult<StateSpaceModel> {
        Ok(match self {
            ModelFile::Pem(p) => p.model()?,
            ModelFile::Identified(m) => m.model()?,
            ModelFile::Plain(m) => m.clone(),
        })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Output directory plus the list of files written into it.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("output serializes");
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_trajectory(&mut self, name: &str, traj: &Trajectory) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    /// CSV from a header and rows of already formatted fields.
    pub fn write_table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Usage(format!("csv: {e}"));
        wtr.write_record(header).map_err(io)?;
        for r in rows {
            wtr.write_record(r).map_err(io)?;
        }
        let bytes = wtr.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))?;
        self.write_bytes(name, &bytes)
    }
}

/// Full-precision field; empty for missing values.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Named random streams derived from the global seed.
    pub derived_seeds: Vec<(String, u64)>,
    pub outputs: Vec<String>,
    pub elapsed_s: f64,
    /// Extra timings, e.g. per epoch.
    pub timings: Vec<(String, f64)>,
    pub status: String,
    pub config: ExperimentConfig,
}
