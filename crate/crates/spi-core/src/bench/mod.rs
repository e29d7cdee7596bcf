//! Benchmark harness: named experiments with CSV/JSON reports.
//!
//! Every experiment is fully seeded and writes three files under the output
//! directory: `<name>.csv` (deterministic rows), `<name>_timings.csv`
//! (wall-clock measurements, split out so the deterministic outputs stay
//! byte-reproducible), and `<name>.json` (deterministic summary). A failed
//! run leaves its partial CSV plus a `<name>.FAILED` marker.

pub mod experiments;
pub mod world;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, SpiError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = SpiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(SpiError::InvalidConfig(format!("unknown format {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    pub repetitions: usize,
    /// key=value overrides of experiment defaults.
    pub overrides: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new(name: &str, out_dir: &Path, seed: u64) -> Self {
        ExperimentConfig {
            name: name.into(),
            seed,
            out_dir: out_dir.to_path_buf(),
            format: OutputFormat::Csv,
            repetitions: 1,
            overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return Err(SpiError::InvalidConfig("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.overrides.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| SpiError::InvalidConfig(format!("{key}: bad integer {v:?}"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.overrides.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| SpiError::InvalidConfig(format!("{key}: bad float {v:?}"))),
        }
    }
}

/// Incremental CSV writer: rows hit the disk as they are produced, so a
/// failing run leaves its partial results behind.
pub struct CsvOut {
    file: File,
}

impl CsvOut {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        file.flush()?;
        Ok(CsvOut { file })
    }

    pub fn row(&mut self, row: &str) -> Result<()> {
        writeln!(self.file, "{row}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Fixed-precision float formatting shared by all deterministic CSV output.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Run a named experiment, writing reports under `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<serde_json::Value> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let marker = config.out_dir.join(format!("{}.FAILED", config.name));
    let _ = std::fs::remove_file(&marker);

    let outcome = match config.name.as_str() {
        "consistency" => experiments::consistency(config),
        "levels-ablation" => experiments::levels_ablation(config),
        "control-ablation" => experiments::control_ablation(config),
        "scaling" => experiments::scaling(config),
        "streaming" => experiments::streaming(config),
        "exactness" => experiments::exactness(config),
        "fault-tolerance" => experiments::fault_tolerance(config),
        other => Err(SpiError::InvalidConfig(format!(
            "unknown experiment {other:?}; expected one of consistency, levels-ablation, \
             control-ablation, scaling, streaming, exactness, fault-tolerance"
        ))),
    };

    match outcome {
        Ok(summary) => {
            let json_path = config.out_dir.join(format!("{}.json", config.name));
            std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
            Ok(summary)
        }
        Err(e) => {
            std::fs::write(&marker, format!("{e}\n"))?;
            Err(e)
        }
    }
}

impl From<serde_json::Error> for SpiError {
    fn from(e: serde_json::Error) -> Self {
        SpiError::Other(format!("json: {e}"))
    }
}
