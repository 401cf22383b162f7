use std::fs;
use std::path::{Path, PathBuf};

use frs_core::data::SynthConfig;
use frs_core::detector::DetectorConfig;
use frs_core::frs::DistillConfig;
use frs_core::train::TrainConfig;
use frs_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Every section is optional in the
/// JSON file; missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub teacher: DetectorConfig,
    pub student: DetectorConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub tau: f64,
    /// Print a progress line every this many iterations.
    pub log_every: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            teacher: DetectorConfig::teacher(),
            student: DetectorConfig::student(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            tau: 0.5,
            log_every: 50,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parses `fpn`, `head` or `fpn,head` into the two enable flags.
pub fn parse_modules(s: &str) -> Result<(bool, bool)> {
    let (mut fpn, mut head) = (false, false);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "fpn" => fpn = true,
            "head" => head = true,
            other => return Err(Error::Config(format!("unknown module `{other}`, expected fpn or head"))),
        }
    }
    if !fpn && !head {
        return Err(Error::Config("--modules needs at least one of fpn, head".into()));
    }
    Ok((fpn, head))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir.to_path_buf())
}
