//! TOML run configuration.
//!
//! Every section is optional and falls back to defaults; unknown keys are
//! rejected. A minimal file:
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//!
//! [paths]
//! data_root = "data"
//! output_root = "run"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::VoteConfig;
use crate::error::{Error, Result};
use crate::expert3d::Stage1Config;
use crate::expert_ctx::Stage2bConfig;
use crate::expert_slice::Stage2aConfig;
use crate::ledger::{apply_corrections, official_ledger, builtin_corrections, read_corrections, SplitLedger};
use crate::metrics::PerSourceMode;
use crate::prep::PrepConfig;
use crate::source::Stage3Config;
use crate::synth::SynthConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory holding `manifest.csv`.
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    /// Base ledger CSV; the built-in official counts when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
    /// Corrections CSV; the built-in set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrections: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            output_root: "run".into(),
            ledger: None,
            corrections: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    /// Ledger scale in percent (half-up rounding per cell).
    pub percent: u64,
    pub excluded_test_scans: usize,
    pub test_positive_fraction: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            percent: 10,
            excluded_test_scans: d.excluded_test_scans,
            test_positive_fraction: d.test_positive_fraction,
        }
    }
}

impl SynthSettings {
    pub fn to_synth_config(&self) -> SynthConfig {
        SynthConfig {
            excluded_test_scans: self.excluded_test_scans,
            test_positive_fraction: self.test_positive_fraction,
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub per_source: PerSourceMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthSettings,
    pub prep: PrepConfig,
    pub stage1: Stage1Config,
    pub stage2a: Stage2aConfig,
    pub stage2b: Stage2bConfig,
    pub stage3: Stage3Config,
    pub vote: VoteConfig,
    pub evaluate: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            paths: PathsConfig::default(),
            synth: SynthSettings::default(),
            prep: PrepConfig::default(),
            stage1: Stage1Config::default(),
            stage2a: Stage2aConfig::default(),
            stage2b: Stage2bConfig::default(),
            stage3: Stage3Config::default(),
            vote: VoteConfig::default(),
            evaluate: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.synth.percent == 0 || !(0.0..=1.0).contains(&self.synth.test_positive_fraction) {
            return Err(Error::InvalidArgument("synth.percent must be positive and test_positive_fraction in [0, 1]".into()));
        }
        for t in [
            &self.stage1.train,
            &self.stage2a.train,
            &self.stage2b.train,
            &self.stage3.train,
        ] {
            t.validate()?;
        }
        self.stage1.augment.validate()?;
        self.stage2a.encoder.validate()?;
        if self.stage2b.variants.is_empty() {
            return Err(Error::InvalidArgument("stage2b.variants is empty".into()));
        }
        self.vote.validate()
    }

    /// Base ledger with corrections applied, before scaling.
    pub fn resolved_ledger(&self) -> Result<SplitLedger> {
        let base = match &self.paths.ledger {
            Some(p) => SplitLedger::read_csv(p)?,
            None => official_ledger(),
        };
        let corrections = match &self.paths.corrections {
            Some(p) => read_corrections(p)?,
            None => builtin_corrections(),
        };
        apply_corrections(&base, &corrections)
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data_root);
        fix(&mut self.paths.output_root);
        if let Some(p) = self.paths.ledger.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.corrections.as_mut() {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_and_rejections() {
        let cfg = RunConfig::from_toml("schema_version = 1\nseed = 3\n[stage1.train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage1.train.epochs, 2);
        assert_eq!(cfg.stage1.train.batch_size, Stage1Config::default().train.batch_size);
        assert!(RunConfig::from_toml("schema_version = 2").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\nsede = 3").is_err());
        assert!(RunConfig::from_toml("[stage2b]\nvariants = [\"trans_all\"]").is_err());
    }
}
