//! Run configuration file.
//!
//! A TOML document with the optional sections `[task]`, `[train]`,
//! `[train.arch]`, `[calibrate]`, `[shifts]` and `[output]`. Missing keys take
//! their defaults; unknown keys are rejected with the line they appear on.

use std::fs;
use std::path::{Path, PathBuf};

use geodin::bench::{ScoreName, ShiftKind, ShiftSpec, SyntheticTask, TaskConfig};
use geodin::calibration::CalibConfig;
use geodin::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub calibrate: CalibConfig,
    pub shifts: ShiftsConfig,
    pub output: OutputConfig,
}

/// Which detection cells `detect` evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftsConfig {
    /// Include the clean-vs-clean control row.
    pub control: bool,
    pub kinds: Vec<ShiftKind>,
    pub severities: Vec<usize>,
    /// Include one row per held-out concept group.
    pub concept: bool,
    pub scores: Vec<ScoreName>,
}

impl Default for ShiftsConfig {
    fn default() -> Self {
        ShiftsConfig {
            control: true,
            kinds: ShiftKind::COVARIATE.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            concept: true,
            scores: ScoreName::ALL.to_vec(),
        }
    }
}

impl ShiftsConfig {
    pub fn specs(&self, task: &SyntheticTask) -> Result<Vec<ShiftSpec>, CliError> {
        let mut specs = Vec::new();
        if self.control {
            specs.push(ShiftSpec::control());
        }
        for &kind in &self.kinds {
            if !kind.is_covariate() {
                return Err(CliError::config(format!(
                    "shifts.kinds accepts covariate kinds only, got `{kind}`"
                )));
            }
            for &s in &self.severities {
                specs.push(ShiftSpec::new(kind, s)?);
            }
        }
        if self.concept {
            specs.extend((0..task.concept.len()).map(|g| ShiftSpec {
                kind: ShiftKind::ConceptSplit,
                severity: g,
            }));
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory for files whose path is not given on the command line.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            CliError::Config {
                origin: origin.to_string(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.task.validate()?;
        self.train.validate()?;
        self.calibrate.validate()?;
        if self.shifts.scores.is_empty() {
            return Err(CliError::config("shifts.scores must name at least one score"));
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.train.seed = seed;
        self.calibrate.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serialises")
    }
}

/// 1-based line containing byte `offset`.
fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}
