use std::path::{Path, PathBuf};

use clap::ValueEnum;
use d2ip_core::baselines::{TVConfig, TikhonovConfig};
use d2ip_core::d2ip::RunConfig;
use d2ip_core::geometry::ProtocolScheme;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "D2IP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Case1,
    Case2,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    D2ip,
    Tikhonov,
    Tv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Simulation,
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TikhonovSection {
    pub mu: f64,
    /// When nonempty, one reconstruction per value instead of `mu`.
    pub sweep: Vec<f64>,
}

impl Default for TikhonovSection {
    fn default() -> Self {
        Self {
            mu: TikhonovConfig::default().mu,
            sweep: Vec::new(),
        }
    }
}

/// Everything needed to reproduce one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub rows: usize,
    pub cols: usize,
    pub planes: usize,
    pub frames: usize,
    /// `None` for noise-free data.
    pub snr_db: Option<f64>,
    pub scheme: ProtocolScheme,
    pub seed: u64,
    pub method: Method,
    pub d2ip: RunConfig,
    pub tikhonov: TikhonovSection,
    pub tv: TVConfig,
    pub parallel: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Case1,
            rows: 16,
            cols: 16,
            planes: 8,
            frames: 20,
            snr_db: None,
            scheme: ProtocolScheme::AdjacentInLayer,
            seed: 0,
            method: Method::D2ip,
            d2ip: RunConfig::default(),
            tikhonov: TikhonovSection::default(),
            tv: TVConfig::default(),
            parallel: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.to_path_buf()))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.frames == 0 {
            return Err(CliError::Config("frames must be >= 1".into()));
        }
        if self.scenario == Scenario::Case2 && self.frames < 2 {
            return Err(CliError::Config("case2 needs at least 2 frames".into()));
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return Err(CliError::Config(format!("snr_db must be finite or inf, got {s}")));
            }
        }
        self.d2ip.validate()?;
        self.tv.validate()?;
        for mu in self.mu_values() {
            TikhonovConfig::new(mu)?;
        }
        Ok(())
    }

    pub fn mu_values(&self) -> Vec<f64> {
        if self.tikhonov.sweep.is_empty() {
            vec![self.tikhonov.mu]
        } else {
            self.tikhonov.sweep.clone()
        }
    }

    pub fn noise_snr(&self) -> f64 {
        self.snr_db.unwrap_or(f64::INFINITY)
    }
}

/// Relative output directories are placed under `$D2IP_OUTPUT_ROOT` when set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
