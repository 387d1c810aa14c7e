//! Labeled synthetic CDN workloads: Zipf-shaped legitimate traffic
//! over per-node LRU caches, plus injected crowd events and
//! LDA/FLA/DoS/DDoS scenarios, emitted in the same combined log format
//! the parser reads.

mod cache;
mod generator;

pub use cache::LruCache;
pub use generator::generate_log;

use crate::detection::Label;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid workload or scenario config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ground truth serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub n_days: u32,
    pub n_nodes: u32,
    pub n_contents: u32,
    pub n_ips: u32,
    /// Zipf exponent for legitimate content popularity.
    pub zipf_s: f64,
    /// Aggregate legitimate request rate, requests per hour.
    pub base_rate: f64,
    /// LRU entries per node.
    pub cache_capacity: usize,
    pub seed: u64,
    /// Log start instant, RFC 3339.
    pub start_time: String,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_days: 2,
            n_nodes: 5,
            n_contents: 20_000,
            n_ips: 5_000,
            zipf_s: 1.0,
            base_rate: 8_000.0,
            cache_capacity: 500,
            seed: 42,
            start_time: "2026-01-05T00:00:00Z".to_string(),
        }
    }
}

impl WorkloadConfig {
    pub fn start_epoch(&self) -> Result<i64, SynthError> {
        chrono::DateTime::parse_from_rfc3339(&self.start_time)
            .map(|dt| dt.timestamp())
            .map_err(|e| SynthError::ConfigInvalid(format!("bad start_time: {e}")))
    }

    pub fn span_seconds(&self) -> i64 {
        self.n_days as i64 * 86_400
    }

    fn validate(&self) -> Result<(), SynthError> {
        let all_positive = self.n_days >= 1
            && self.n_nodes >= 1
            && self.n_contents >= 1
            && self.n_ips >= 1
            && self.cache_capacity >= 1;
        if !all_positive {
            return Err(SynthError::ConfigInvalid(
                "all counts must be at least 1".to_string(),
            ));
        }
        if self.zipf_s <= 0.0 {
            return Err(SynthError::ConfigInvalid("zipf_s must be positive".to_string()));
        }
        if self.base_rate <= 0.0 {
            return Err(SynthError::ConfigInvalid("base_rate must be positive".to_string()));
        }
        self.start_epoch().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Lda,
    Fla,
    Dos,
    Ddos,
    Crowd,
}

impl ScenarioKind {
    pub fn truth_label(&self) -> Label {
        match self {
            Self::Lda => Label::CpaLda,
            Self::Fla => Label::CpaFla,
            Self::Dos | Self::Ddos => Label::Dos,
            Self::Crowd => Label::Normal,
        }
    }
}

pub const FLA_MAX_TARGET_CONTENTS: u32 = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    /// Offset from the workload start, hours.
    pub start_hour: f64,
    pub duration_hours: f64,
    pub n_attackers: u32,
    /// Requests per second per attacker (or per crowd client).
    pub rate_per_attacker: f64,
    /// Node indices the scenario aims at; each actor sticks to one.
    pub target_nodes: Vec<u32>,
    /// FLA: number of pinned target contents (small). LDA: size of the
    /// generated unpopular content pool.
    #[serde(default)]
    pub target_contents: u32,
    /// DoS/DDoS: fraction of requests for nonexistent URLs (404s).
    #[serde(default)]
    pub error_fraction: f64,
}

impl AttackScenario {
    fn validate(&self, config: &WorkloadConfig) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::ConfigInvalid(msg));
        if self.start_hour < 0.0
            || self.duration_hours <= 0.0
            || (self.start_hour + self.duration_hours) * 3600.0 > config.span_seconds() as f64
        {
            return bad(format!(
                "{:?} window [{}h, {}h) falls outside the {}-day workload",
                self.kind,
                self.start_hour,
                self.start_hour + self.duration_hours,
                config.n_days
            ));
        }
        if self.n_attackers == 0 || self.rate_per_attacker <= 0.0 {
            return bad(format!("{:?} needs attackers with a positive rate", self.kind));
        }
        if self.target_nodes.is_empty() || self.target_nodes.iter().any(|&n| n >= config.n_nodes)
        {
            return bad(format!("{:?} target_nodes out of range", self.kind));
        }
        match self.kind {
            ScenarioKind::Fla => {
                if self.target_contents == 0 || self.target_contents > FLA_MAX_TARGET_CONTENTS {
                    return bad(format!(
                        "fla needs 1..={FLA_MAX_TARGET_CONTENTS} target contents"
                    ));
                }
            }
            ScenarioKind::Lda => {
                if self.target_contents == 0 {
                    return bad("lda needs a nonzero generated content pool".to_string());
                }
            }
            ScenarioKind::Dos | ScenarioKind::Ddos => {
                if !(0.0..=1.0).contains(&self.error_fraction) {
                    return bad("error_fraction must lie in [0, 1]".to_string());
                }
            }
            ScenarioKind::Crowd => {}
        }
        Ok(())
    }

    pub fn window_epochs(&self, config: &WorkloadConfig) -> Result<(i64, i64), SynthError> {
        let start = config.start_epoch()? + (self.start_hour * 3600.0) as i64;
        Ok((start, start + (self.duration_hours * 3600.0) as i64))
    }
}

pub fn validate_scenarios(
    config: &WorkloadConfig,
    scenarios: &[AttackScenario],
) -> Result<(), SynthError> {
    config.validate()?;
    for s in scenarios {
        s.validate(config)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthWindow {
    pub kind: ScenarioKind,
    pub start: i64,
    pub end: i64,
    pub target_nodes: Vec<String>,
}

/// Per-entity labels plus the injected windows; covers exactly the
/// entities that appear in the emitted log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ip_labels: BTreeMap<String, Label>,
    pub node_labels: BTreeMap<String, Label>,
    pub content_labels: BTreeMap<String, Label>,
    pub attack_windows: Vec<TruthWindow>,
}

pub fn emit_ground_truth<W: Write>(truth: &GroundTruth, w: W) -> Result<(), SynthError> {
    serde_json::to_writer_pretty(w, truth)?;
    Ok(())
}

pub fn read_ground_truth<R: Read>(r: R) -> Result<GroundTruth, SynthError> {
    Ok(serde_json::from_reader(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_outside_span_is_rejected() {
        let config = WorkloadConfig::default();
        let s = AttackScenario {
            kind: ScenarioKind::Ddos,
            start_hour: 47.0,
            duration_hours: 2.0,
            n_attackers: 5,
            rate_per_attacker: 1.0,
            target_nodes: vec![0],
            target_contents: 0,
            error_fraction: 0.9,
        };
        assert!(matches!(
            validate_scenarios(&config, &[s]),
            Err(SynthError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn fla_target_content_count_is_bounded() {
        let config = WorkloadConfig::default();
        let s = AttackScenario {
            kind: ScenarioKind::Fla,
            start_hour: 0.0,
            duration_hours: 1.0,
            n_attackers: 3,
            rate_per_attacker: 1.0,
            target_nodes: vec![0],
            target_contents: 50,
            error_fraction: 0.0,
        };
        assert!(validate_scenarios(&config, &[s]).is_err());
    }

    #[test]
    fn ground_truth_round_trips() {
        let mut truth = GroundTruth::default();
        truth.ip_labels.insert("10.0.0.1".into(), Label::Normal);
        truth.ip_labels.insert("198.18.0.1".into(), Label::Dos);
        truth.attack_windows.push(TruthWindow {
            kind: ScenarioKind::Ddos,
            start: 100,
            end: 200,
            target_nodes: vec!["edge-00".into()],
        });
        let mut buf = Vec::new();
        emit_ground_truth(&truth, &mut buf).unwrap();
        let back = read_ground_truth(buf.as_slice()).unwrap();
        assert_eq!(back.ip_labels, truth.ip_labels);
        assert_eq!(back.attack_windows.len(), 1);
    }

    #[test]
    fn empty_truth_serializes() {
        let mut buf = Vec::new();
        emit_ground_truth(&GroundTruth::default(), &mut buf).unwrap();
        let back = read_ground_truth(buf.as_slice()).unwrap();
        assert!(back.ip_labels.is_empty());
    }
}
