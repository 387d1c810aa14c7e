//! Attack pattern profiles: qualitative "low/high/large/short" rules
//! resolved against dataset statistics.

use crate::normalize::quantile;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Dos,
    Cpa,
    CpaLda,
    CpaFla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Le,
    Ge,
}

/// How a condition's threshold is fixed: an absolute value, or a
/// dataset quantile optionally clamped into `[floor, cap]` so that a
/// degenerate column (all zeros, all ones) cannot make the whole
/// dataset look anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Absolute(f64),
    Quantile {
        q: f64,
        #[serde(default)]
        floor: Option<f64>,
        #[serde(default)]
        cap: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub comparator: Comparator,
    pub mode: ThresholdMode,
}

impl Condition {
    fn le(feature: &str, mode: ThresholdMode) -> Self {
        Self {
            feature: feature.into(),
            comparator: Comparator::Le,
            mode,
        }
    }

    fn ge(feature: &str, mode: ThresholdMode) -> Self {
        Self {
            feature: feature.into(),
            comparator: Comparator::Ge,
            mode,
        }
    }
}

/// A named attack pattern: all conditions must hold for a match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternProfile {
    pub name: ProfileKind,
    pub conditions: Vec<Condition>,
}

/// A condition with its threshold pinned against a concrete dataset.
#[derive(Debug, Clone)]
pub struct ResolvedCondition {
    pub feature: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl ResolvedCondition {
    pub fn matches(&self, value: f64) -> bool {
        match self.comparator {
            Comparator::Le => value <= self.threshold,
            Comparator::Ge => value >= self.threshold,
        }
    }

    pub fn describe(&self) -> String {
        let op = match self.comparator {
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
        };
        format!("{} {} {}", self.feature, op, self.threshold)
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedProfile {
    pub name: ProfileKind,
    pub conditions: Vec<ResolvedCondition>,
}

impl ResolvedProfile {
    /// Evaluates a row (entity values or a cluster centroid); returns
    /// the matched conditions with the observed values, or None.
    pub fn matches(&self, row: &dyn Fn(&str) -> f64) -> Option<Vec<(ResolvedCondition, f64)>> {
        let mut hits = Vec::with_capacity(self.conditions.len());
        for c in &self.conditions {
            let v = row(&c.feature);
            if !c.matches(v) {
                return None;
            }
            hits.push((c.clone(), v));
        }
        Some(hits)
    }
}

/// Pins every quantile threshold against the dataset's raw columns.
/// Missing columns panic: profiles must only reference features that
/// exist in the target perspective's schema.
pub fn resolve_profile(
    profile: &PatternProfile,
    columns: &HashMap<&str, Vec<f64>>,
) -> ResolvedProfile {
    let conditions = profile
        .conditions
        .iter()
        .map(|c| {
            let threshold = match c.mode {
                ThresholdMode::Absolute(v) => v,
                ThresholdMode::Quantile { q, floor, cap } => {
                    let col = columns
                        .get(c.feature.as_str())
                        .unwrap_or_else(|| panic!("profile references unknown feature {}", c.feature));
                    let mut t = quantile(col, q);
                    if let Some(f) = floor {
                        t = t.max(f);
                    }
                    if let Some(cp) = cap {
                        t = t.min(cp);
                    }
                    t
                }
            };
            ResolvedCondition {
                feature: c.feature.clone(),
                comparator: c.comparator,
                threshold,
            }
        })
        .collect();
    ResolvedProfile {
        name: profile.name,
        conditions,
    }
}

/// Tunable knobs behind the default profiles. The quantiles mirror the
/// qualitative pattern tables; floors and caps keep conditions inert on
/// datasets where a column is flat (for example all-zero error rates in
/// attack-free traffic).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub q_low: f64,
    pub q_high: f64,
    pub q_interval: f64,
    /// Variant split: req-per-content (IPs) or req-per-IP (contents) at
    /// or above this dataset quantile means FLA, below means LDA.
    pub fla_split_q: f64,
    /// Absolute "low cache hit rate" bound for nodes.
    pub node_hit_abs: f64,
    pub error_floor: f64,
    pub nreq_floor: f64,
    pub interval_cap_s: f64,
    pub rpn_floor: f64,
    pub nodes_small_floor: f64,
    pub popularity_floor: f64,
    pub popularity_cap: f64,
    /// Members assigned to a flagged cluster with responsibility below
    /// this revert to normal as low-confidence.
    pub responsibility_demote: f64,
    /// Fallback contamination when tuning is degenerate.
    pub fallback_contamination: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            q_low: 0.25,
            q_high: 0.90,
            q_interval: 0.10,
            fla_split_q: 0.95,
            node_hit_abs: 0.5,
            error_floor: 0.05,
            nreq_floor: 10.0,
            interval_cap_s: 10.0,
            rpn_floor: 5.0,
            nodes_small_floor: 1.0,
            popularity_floor: 0.35,
            popularity_cap: 0.5,
            responsibility_demote: 0.5,
            fallback_contamination: 0.1,
        }
    }
}

impl Thresholds {
    fn q(&self, q: f64) -> ThresholdMode {
        ThresholdMode::Quantile {
            q,
            floor: None,
            cap: None,
        }
    }

    /// DoS node pattern: collapsed hit rate, depressed transfer rate,
    /// elevated error rate.
    pub fn node_dos_profile(&self) -> PatternProfile {
        PatternProfile {
            name: ProfileKind::Dos,
            conditions: vec![
                Condition::le("cache_hit_rate", ThresholdMode::Absolute(self.node_hit_abs)),
                Condition::le("data_transfer_rate_mbps", self.q(self.q_low)),
                Condition::ge(
                    "request_error_rate",
                    ThresholdMode::Quantile {
                        q: self.q_high,
                        floor: Some(self.error_floor),
                        cap: None,
                    },
                ),
            ],
        }
    }

    /// CPA node pattern: low hit rates (own and legitimate-IP), low
    /// transfer rate, low request popularity relative to peers.
    pub fn node_cpa_profile(&self) -> PatternProfile {
        PatternProfile {
            name: ProfileKind::Cpa,
            conditions: vec![
                Condition::le("cache_hit_rate", ThresholdMode::Absolute(self.node_hit_abs)),
                Condition::le("legit_ip_cache_hit_rate", self.q(self.q_low)),
                Condition::le("data_transfer_rate_mbps", self.q(self.q_low)),
                Condition::le("avg_request_popularity", self.q(self.q_low)),
            ],
        }
    }

    /// DoS IP pattern: many requests at short intervals against few
    /// nodes. Hit and error rates deliberately stay out: legitimate
    /// crowd surges share this shape and are separated later by the
    /// calendar-based validation.
    pub fn ip_dos_profile(&self) -> PatternProfile {
        PatternProfile {
            name: ProfileKind::Dos,
            conditions: vec![
                Condition::ge(
                    "n_requests",
                    ThresholdMode::Quantile {
                        q: self.q_high,
                        floor: Some(self.nreq_floor),
                        cap: None,
                    },
                ),
                Condition::le(
                    "avg_request_interval_s",
                    ThresholdMode::Quantile {
                        q: self.q_interval,
                        floor: None,
                        cap: Some(self.interval_cap_s),
                    },
                ),
                Condition::le(
                    "n_nodes",
                    ThresholdMode::Quantile {
                        q: self.q_low,
                        floor: Some(self.nodes_small_floor),
                        cap: None,
                    },
                ),
            ],
        }
    }

    /// CPA IP pattern: many requests, short intervals, few nodes, low
    /// request popularity. The LDA/FLA variant split happens afterwards
    /// on the req-per-content ratio.
    pub fn ip_cpa_profile(&self) -> PatternProfile {
        PatternProfile {
            name: ProfileKind::Cpa,
            conditions: vec![
                Condition::ge(
                    "n_requests",
                    ThresholdMode::Quantile {
                        q: self.q_high,
                        floor: Some(self.nreq_floor),
                        cap: None,
                    },
                ),
                Condition::le(
                    "avg_request_interval_s",
                    ThresholdMode::Quantile {
                        q: self.q_interval,
                        floor: None,
                        cap: Some(self.interval_cap_s),
                    },
                ),
                Condition::le(
                    "n_nodes",
                    ThresholdMode::Quantile {
                        q: self.q_low,
                        floor: Some(self.nodes_small_floor),
                        cap: None,
                    },
                ),
                Condition::le(
                    "avg_request_popularity",
                    ThresholdMode::Quantile {
                        q: self.q_low,
                        floor: Some(self.popularity_floor),
                        cap: Some(self.popularity_cap),
                    },
                ),
            ],
        }
    }

    /// CPA content pattern: unpopular content hammered hard per node.
    pub fn content_cpa_profile(&self) -> PatternProfile {
        PatternProfile {
            name: ProfileKind::Cpa,
            conditions: vec![
                Condition::le(
                    "popularity",
                    ThresholdMode::Quantile {
                        q: self.q_low,
                        floor: Some(self.popularity_floor),
                        cap: Some(self.popularity_cap),
                    },
                ),
                Condition::ge(
                    "req_per_node",
                    ThresholdMode::Quantile {
                        q: self.q_high,
                        floor: Some(self.rpn_floor),
                        cap: None,
                    },
                ),
            ],
        }
    }
}
