//! Pipeline configuration: one TOML document drives every command.
//! Unknown keys are rejected so typos fail fast.

use crate::access_log::LogSchema;
use crate::detection::{ForestTuneParams, GmmTuneParams, Thresholds};
use crate::synth::WorkloadConfig;
use crate::validation::{
    AoProfileExpectation, CalendarEvent, EventCalendar, EventKind, ValidationParams,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub input_log: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub calendar: Option<PathBuf>,
    #[serde(default)]
    pub ao_expectations: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub scenarios: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    /// Records with more empty fields than this are dropped.
    pub max_empty_fields: usize,
    /// Request-popularity threshold above which an IP counts as
    /// legitimate for the node features.
    pub legit_popularity: f64,
    /// Recompute the popularity baseline per UTC day for request-level
    /// averages instead of once per window.
    pub daily_popularity: bool,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            max_empty_fields: 3,
            legit_popularity: 0.9,
            daily_popularity: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub enabled: bool,
    pub batch_size: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            batch_size: 10_000,
        }
    }
}

/// The whole pipeline configuration. Seeds for every randomized stage
/// derive from the single top-level seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cleaning: CleaningConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub validation: ValidationParams,
    #[serde(default)]
    pub node_tuning: ForestTuneParams,
    #[serde(default)]
    pub content_tuning: GmmTuneParams,
    #[serde(default)]
    pub ip_tuning: GmmTuneParams,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub workload: Option<WorkloadConfig>,
}

fn default_seed() -> u64 {
    42
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config: PipelineConfig = read_toml(path)?;
        // Paths in the file are relative to the file's directory.
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        fix(&mut self.paths.input_log);
        fix(&mut self.paths.output_dir);
        for opt in [
            &mut self.paths.truth,
            &mut self.paths.calendar,
            &mut self.paths.ao_expectations,
            &mut self.paths.schema,
            &mut self.paths.scenarios,
        ] {
            if let Some(p) = opt {
                fix(p);
            }
        }
    }

    /// Short content hash of the effective configuration; stamped into
    /// every output file.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Per-stage seeds, all derived from the top-level one.
    pub fn stage_seed(&self, stage: StageSeed) -> u64 {
        self.seed.wrapping_add(stage as u64)
    }

    pub fn load_schema(&self) -> Result<LogSchema, ConfigError> {
        match &self.paths.schema {
            Some(path) => read_toml(path),
            None => Ok(LogSchema::default()),
        }
    }

    pub fn load_calendar(&self) -> Result<Option<EventCalendar>, ConfigError> {
        let Some(path) = &self.paths.calendar else {
            return Ok(None);
        };
        let file: CalendarFile = read_toml(path)?;
        let calendar = file.into_calendar().map_err(|message| ConfigError::Invalid {
            path: path.clone(),
            message,
        })?;
        Ok(Some(calendar))
    }

    pub fn load_ao_expectations(&self) -> Result<Option<Vec<AoProfileExpectation>>, ConfigError> {
        let Some(path) = &self.paths.ao_expectations else {
            return Ok(None);
        };
        let file: AoExpectationFile = read_toml(path)?;
        Ok(Some(file.aos))
    }

    pub fn load_scenarios(&self) -> Result<Vec<crate::synth::AttackScenario>, ConfigError> {
        let Some(path) = &self.paths.scenarios else {
            return Ok(Vec::new());
        };
        let file: ScenarioFile = read_toml(path)?;
        Ok(file.scenarios)
    }
}

#[repr(u64)]
#[derive(Debug, Clone, Copy)]
pub enum StageSeed {
    Workload = 0,
    NodeTuning = 1,
    ContentTuning = 2,
    IpDosTuning = 3,
    IpCpaTuning = 4,
    Latency = 5,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenarios: Vec<crate::synth::AttackScenario>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalendarFile {
    events: Vec<CalendarEventFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalendarEventFile {
    /// RFC 3339 instants.
    start: String,
    end: String,
    kind: EventKind,
    #[serde(default)]
    note: String,
}

impl CalendarFile {
    fn into_calendar(self) -> Result<EventCalendar, String> {
        let mut events = Vec::with_capacity(self.events.len());
        for e in self.events {
            let parse = |s: &str| {
                chrono::DateTime::parse_from_rfc3339(s)
                    .map(|dt| dt.timestamp())
                    .map_err(|err| format!("bad timestamp '{s}': {err}"))
            };
            events.push(CalendarEvent {
                start: parse(&e.start)?,
                end: parse(&e.end)?,
                kind: e.kind,
                note: e.note,
            });
        }
        let calendar = EventCalendar { events };
        calendar.validate()?;
        Ok(calendar)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AoExpectationFile {
    aos: Vec<AoProfileExpectation>,
}
