//! Experiment description read from JSON.

use std::path::PathBuf;

use lsfd_core::channel::Estimator;
use lsfd_core::optimizer::ConvergenceOptions;
use lsfd_core::scenario::NetworkConfig;
use lsfd_core::se::Combiner;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// The six benchmark pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Single-layer decoding, full power.
    #[serde(rename = "i")]
    SingleFixed,
    /// Single-layer decoding, optimized power.
    #[serde(rename = "ii")]
    SingleOptimized,
    /// Optimal LSFD, full power.
    #[serde(rename = "iii")]
    LsfdFixed,
    /// LSFD from diagonal correlation only, full power.
    #[serde(rename = "iv")]
    ApproxLsfdFixed,
    /// Joint power and LSFD optimization.
    #[serde(rename = "v")]
    LsfdOptimized,
    /// Joint optimization with LSFD directions from diagonal correlation.
    #[serde(rename = "vi")]
    ApproxLsfdOptimized,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::SingleFixed,
        Mode::SingleOptimized,
        Mode::LsfdFixed,
        Mode::ApproxLsfdFixed,
        Mode::LsfdOptimized,
        Mode::ApproxLsfdOptimized,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Mode::SingleFixed => "i",
            Mode::SingleOptimized => "ii",
            Mode::LsfdFixed => "iii",
            Mode::ApproxLsfdFixed => "iv",
            Mode::LsfdOptimized => "v",
            Mode::ApproxLsfdOptimized => "vi",
        }
    }

    /// Modes that can run on the Monte Carlo path of a general combiner.
    pub fn supports_general_combiner(self) -> bool {
        matches!(self, Mode::SingleFixed | Mode::LsfdFixed)
    }

    pub fn needs_diagonal_approx(self) -> bool {
        matches!(self, Mode::ApproxLsfdFixed | Mode::ApproxLsfdOptimized)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    #[default]
    None,
    CorrMagnitude,
    Antennas,
    UsersPerCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    #[serde(default)]
    pub values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::None,
            values: Vec::new(),
        }
    }
}

impl Sweep {
    /// Sweep points; a single `0` when nothing is swept.
    pub fn points(&self) -> Vec<f64> {
        match self.parameter {
            SweepParameter::None => vec![0.0],
            _ => self.values.clone(),
        }
    }
}

fn default_small_scale() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub network: NetworkConfig,
    pub estimator: Estimator,
    pub combiner: Combiner,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub sweep: Sweep,
    pub n_drops: usize,
    /// Channel realizations per drop for Monte Carlo paths.
    #[serde(default = "default_small_scale")]
    pub n_small_scale: usize,
    #[serde(default)]
    pub convergence: ConvergenceOptions,
    /// Write per-iteration sum SE of the optimized modes.
    #[serde(default)]
    pub record_trace: bool,
    /// Measure wall time per drop and mode; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    /// Run only these drop indices (all of `0..n_drops` when absent).
    #[serde(default)]
    pub drops: Option<Vec<usize>>,
    /// Path prefix of the output files, without extension.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("bad experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return usage("name must be a nonempty file stem".into());
        }
        if self.n_drops == 0 {
            return usage("n_drops must be at least 1".into());
        }
        if self.modes.is_empty() {
            return usage("at least one mode is required".into());
        }
        if self.combiner != Combiner::Mrc {
            if let Some(m) = self.modes.iter().find(|m| !m.supports_general_combiner()) {
                return usage(format!("mode ({m}) needs the closed-form MRC path; {} supports (i) and (iii)", self.combiner));
            }
            if self.n_small_scale < 100 {
                return usage("n_small_scale must be at least 100".into());
            }
        }
        if self.sweep.parameter != SweepParameter::None && self.sweep.values.is_empty() {
            return usage("sweep needs at least one value".into());
        }
        if let Some(drops) = &self.drops {
            if let Some(d) = drops.iter().find(|&&d| d >= self.n_drops) {
                return usage(format!("drop index {d} is not below n_drops"));
            }
        }
        self.convergence.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for v in self.sweep.points() {
            self.network_at(v)?.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// Network configuration at one sweep point.
    pub fn network_at(&self, value: f64) -> CliResult<NetworkConfig> {
        let mut cfg = self.network.clone();
        let count = |v: f64| -> CliResult<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Usage(format!("sweep value {v} is not a positive integer")))
            }
        };
        match self.sweep.parameter {
            SweepParameter::None => {}
            SweepParameter::CorrMagnitude => cfg.corr_magnitude = value,
            SweepParameter::Antennas => cfg.antennas = count(value)?,
            SweepParameter::UsersPerCell => cfg.users_per_cell = count(value)?,
        }
        Ok(cfg)
    }

    pub fn drop_indices(&self) -> Vec<usize> {
        match &self.drops {
            Some(d) => d.clone(),
            None => (0..self.n_drops).collect(),
        }
    }

    /// Output prefix, with the directory replaced by `dir_override` when given.
    pub fn output_prefix(&self, dir_override: Option<&std::path::Path>) -> PathBuf {
        let base = self
            .output_path
            .clone()
            .unwrap_or_else(|| PathBuf::from("results").join(&self.name));
        match dir_override {
            Some(dir) => dir.join(base.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&self.name))),
            None => base,
        }
    }
}
