//! Pipeline configuration: one TOML file, validated at load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{Partisanship, DEFAULT_PARTISAN_CUTOFF};
use crate::botdetect::{FactorGraphParams, DEFAULT_BOT_THRESHOLD, DEFAULT_HISTOGRAM_BINS};
use crate::ingest::DEFAULT_FOLLOWINGS_CAP;
use crate::opinion::{SolverSettings, DEFAULT_HIGH_PERCENTILE, DEFAULT_LOW_PERCENTILE};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tweets: PathBuf,
    pub profiles: PathBuf,
    /// Optional; media-quality columns are left empty without it.
    pub ratings: Option<PathBuf>,
    /// Replaces the built-in Qanon keyword list when set.
    pub qanon_keywords: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            tweets: "tweets.jsonl".into(),
            profiles: "profiles.jsonl".into(),
            ratings: Some("ratings.csv".into()),
            qanon_keywords: None,
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Mean opinions at or below the cutoff are anti.
    pub partisan_cutoff: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            partisan_cutoff: DEFAULT_PARTISAN_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BotDetectionConfig {
    /// Bot when the daily probability strictly exceeds this.
    pub threshold: f64,
    pub histogram_bins: usize,
    pub params: FactorGraphParams,
}

impl Default for BotDetectionConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_BOT_THRESHOLD,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            params: FactorGraphParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpinionConfig {
    pub low_percentile: f64,
    pub high_percentile: f64,
    pub followings_cap: usize,
    pub solver: SolverSettings,
}

impl Default for OpinionConfig {
    fn default() -> Self {
        Self {
            low_percentile: DEFAULT_LOW_PERCENTILE,
            high_percentile: DEFAULT_HIGH_PERCENTILE,
            followings_cap: DEFAULT_FOLLOWINGS_CAP,
            solver: SolverSettings::default(),
        }
    }
}

/// Bots selected by partisanship and Qanon flag; unset fields match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDefinition {
    pub name: String,
    #[serde(default)]
    pub partisanship: Option<Partisanship>,
    #[serde(default)]
    pub qanon: Option<bool>,
}

impl GroupDefinition {
    pub fn matches(&self, partisanship: Option<Partisanship>, qanon: bool) -> bool {
        self.partisanship.is_none_or(|p| partisanship == Some(p)) && self.qanon.is_none_or(|q| q == qanon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhicConfig {
    pub groups: Vec<GroupDefinition>,
}

impl Default for GhicConfig {
    fn default() -> Self {
        Self {
            groups: vec![
                GroupDefinition {
                    name: "anti_bots".into(),
                    partisanship: Some(Partisanship::Anti),
                    qanon: None,
                },
                GroupDefinition {
                    name: "pro_bots".into(),
                    partisanship: Some(Partisanship::Pro),
                    qanon: Some(false),
                },
                GroupDefinition {
                    name: "qanon_bots".into(),
                    partisanship: Some(Partisanship::Pro),
                    qanon: Some(true),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub classify: ClassifyConfig,
    pub bot_detection: BotDetectionConfig,
    pub opinion: OpinionConfig,
    pub ghic: GhicConfig,
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates `path`; relative paths inside resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.tweets);
        fix(&mut self.paths.profiles);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.paths.ratings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.qanon_keywords.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self.classify.partisan_cutoff;
        if !(0.0..=1.0).contains(&c) {
            return Err(invalid("classify.partisan_cutoff", format!("{c} outside [0,1]")));
        }
        let b = &self.bot_detection;
        if !(b.threshold > 0.5 && b.threshold <= 1.0) {
            return Err(invalid("bot_detection.threshold", format!("{} outside (0.5,1]", b.threshold)));
        }
        if b.histogram_bins < 2 {
            return Err(invalid("bot_detection.histogram_bins", "need at least 2 bins"));
        }
        b.params
            .validate()
            .map_err(|e| invalid("bot_detection.params", e.to_string()))?;
        if b.params.max_iterations == 0 {
            return Err(invalid("bot_detection.params.max_iterations", "must be positive"));
        }
        if !(b.params.tolerance > 0.0) {
            return Err(invalid("bot_detection.params.tolerance", "must be positive"));
        }
        let o = &self.opinion;
        if !(0.0 <= o.low_percentile && o.low_percentile < o.high_percentile && o.high_percentile <= 1.0) {
            return Err(invalid(
                "opinion.low_percentile/high_percentile",
                format!("need 0 <= low < high <= 1, got {} and {}", o.low_percentile, o.high_percentile),
            ));
        }
        if o.followings_cap == 0 {
            return Err(invalid("opinion.followings_cap", "must be positive"));
        }
        if !(o.solver.tolerance > 0.0 && o.solver.tolerance < 1.0) {
            return Err(invalid("opinion.solver.tolerance", format!("{} outside (0,1)", o.solver.tolerance)));
        }
        if o.solver.max_iterations == 0 {
            return Err(invalid("opinion.solver.max_iterations", "must be positive"));
        }
        if self.ghic.groups.is_empty() {
            return Err(invalid("ghic.groups", "at least one group is required"));
        }
        let mut names = std::collections::BTreeSet::new();
        for g in &self.ghic.groups {
            if g.name.is_empty() || g.name.contains(',') {
                return Err(invalid("ghic.groups.name", format!("`{}` is empty or contains a comma", g.name)));
            }
            if !names.insert(&g.name) {
                return Err(invalid("ghic.groups.name", format!("duplicate group `{}`", g.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn out_of_range_fields_named() {
        let err = PipelineConfig::from_toml("[bot_detection]\nthreshold = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "bot_detection.threshold"));
        let err = PipelineConfig::from_toml("[classify]\npartisan_cutoff = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "classify.partisan_cutoff"));
        let err = PipelineConfig::from_toml("[opinion]\nlow_percentile = 0.9\nhigh_percentile = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }));
        let err = PipelineConfig::from_toml("[bot_detection.params]\nprior_bot = 0.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "bot_detection.params"));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1\n"), Err(ConfigError::Parse(_))));
        let dup = "[[ghic.groups]]\nname = \"a\"\n[[ghic.groups]]\nname = \"a\"\n";
        assert!(matches!(PipelineConfig::from_toml(dup), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn group_matching() {
        let g = GroupDefinition {
            name: "q".into(),
            partisanship: Some(Partisanship::Pro),
            qanon: Some(true),
        };
        assert!(g.matches(Some(Partisanship::Pro), true));
        assert!(!g.matches(Some(Partisanship::Pro), false));
        assert!(!g.matches(None, true));
        let any = GroupDefinition { name: "all".into(), partisanship: None, qanon: None };
        assert!(any.matches(None, false));
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\ntweets = \"data/t.jsonl\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.tweets, dir.path().join("data/t.jsonl"));
        assert_eq!(cfg.paths.output_dir, dir.path().join("out"));
    }
}
