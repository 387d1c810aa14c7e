//! Multi-perspective result validation: time-series analysis against a
//! calendar of known legitimate events, cross-perspective
//! corroboration, and account-offering analysis.
//!
//! Rules run in a fixed order that is part of the contract:
//! crowd filter, abnormal-period analysis, cross-perspective checks,
//! then AO checks. Every label change is logged as a [`RuleTrace`].

mod rules;
mod series;

pub use rules::{
    analyze_abnormal_period, ao_validate, cross_perspective_validate, crowd_event_filter,
    AttackHypothesis, PeriodFindings,
};
pub use series::{build_hourly_series, find_abnormal_periods, HourlySeries, SeriesMetric};

use crate::access_log::CleanRecord;
use crate::detection::{GmmTuneParams, Label, Perspective, Thresholds, Verdict};
use crate::features::{FeatureTables, Popularity};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("records span less than two hours; no hourly series possible")]
    SpanTooShort,
    #[error("abnormal period contains no records")]
    EmptyPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Crowd,
    Maintenance,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalendarEvent {
    pub start: i64,
    pub end: i64,
    pub kind: EventKind,
    #[serde(default)]
    pub note: String,
}

/// Known legitimate events supplied by the operator.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventCalendar {
    pub events: Vec<CalendarEvent>,
}

impl EventCalendar {
    pub fn validate(&self) -> Result<(), String> {
        for e in &self.events {
            if e.start >= e.end {
                return Err(format!("calendar event '{}' has start >= end", e.note));
            }
        }
        Ok(())
    }

    pub fn covers(&self, start: i64, end: i64) -> bool {
        self.events.iter().any(|e| e.start < end && start < e.end)
    }

    pub fn contains_instant(&self, t: i64) -> bool {
        self.events.iter().any(|e| e.start <= t && t < e.end)
    }
}

/// A window where a monitored series deviated. Windows overlapping the
/// calendar are kept but annotated legitimate, and are not treated as
/// attack candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbnormalPeriod {
    pub start: i64,
    pub end: i64,
    pub metric: SeriesMetric,
    /// Robust z-score magnitude (or absolute rate drop) that fired.
    pub deviation: f64,
    pub legitimate: bool,
}

/// Declared behavior of an account offering, from operator config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AoProfileExpectation {
    pub ao_id: String,
    pub service_type: String,
    #[serde(default)]
    pub note: String,
    /// Expected request-popularity band, within [0, 1].
    pub popularity_band: (f64, f64),
    /// Expected cache-hit-rate band, within [0, 1].
    pub hit_band: (f64, f64),
    /// Declared legitimate source of low-popularity traffic (archive
    /// tests and similar); flagged entities dominated by such an AO are
    /// false positives.
    #[serde(default)]
    pub benign_low_popularity: bool,
}

/// One label change, by which rule and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTrace {
    pub entity_id: String,
    pub perspective: Perspective,
    pub rule: String,
    pub old_label: Label,
    pub new_label: Label,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationParams {
    /// Robust z-score threshold on hourly series.
    pub z_thresh: f64,
    /// Absolute hit-rate drop below the series median that also flags.
    pub hit_drop: f64,
    /// Fraction of an IP's requests that must fall inside legitimate
    /// windows for the crowd filter (1.0 = all of them).
    pub crowd_fraction: f64,
    /// Minimum cache hit rate for the crowd filter.
    pub crowd_hit_min: f64,
    /// Requests from flagged IPs needed before a node can be recovered
    /// as a missed target.
    pub min_attack_requests: u64,
    /// Hit-rate drop versus the baseline days that counts as degraded.
    pub node_hit_drop: f64,
    /// In-period cluster bounds that identify flood traffic.
    pub period_error_min: f64,
    pub period_hit_max: f64,
    /// Contents flagged cpa revert to normal when their requesters are
    /// all normal and they sit at least at this popularity quantile.
    pub content_revert_popularity_q: f64,
}

impl Default for ValidationParams {
    fn default() -> Self {
        Self {
            z_thresh: 3.0,
            hit_drop: 0.15,
            crowd_fraction: 1.0,
            crowd_hit_min: 0.99,
            min_attack_requests: 100,
            node_hit_drop: 0.1,
            period_error_min: 0.5,
            period_hit_max: 0.3,
            content_revert_popularity_q: 0.5,
        }
    }
}

pub struct ValidationContext<'a> {
    pub records: &'a [CleanRecord],
    pub popularity: &'a Popularity,
    pub tables: &'a FeatureTables,
    pub calendar: Option<&'a EventCalendar>,
    pub expectations: Option<&'a [AoProfileExpectation]>,
    pub params: &'a ValidationParams,
    pub thresholds: &'a Thresholds,
    pub gmm_tune: &'a GmmTuneParams,
}

pub struct ValidationOutcome {
    pub node_verdicts: Vec<Verdict>,
    pub ip_verdicts: Vec<Verdict>,
    pub content_verdicts: Vec<Verdict>,
    pub series: Vec<HourlySeries>,
    pub periods: Vec<AbnormalPeriod>,
    pub hypotheses: Vec<AttackHypothesis>,
    pub traces: Vec<RuleTrace>,
    pub warnings: Vec<String>,
}

/// Merges overlapping candidate windows (across metrics) into disjoint
/// spans for the per-period re-analysis.
pub(crate) fn merge_windows(periods: &[AbnormalPeriod]) -> Vec<(i64, i64)> {
    let mut spans: Vec<(i64, i64)> = periods
        .iter()
        .filter(|p| !p.legitimate)
        .map(|p| (p.start, p.end))
        .collect();
    spans.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// Runs the full validation chain over pattern-stage verdicts.
pub fn validate(
    ctx: &ValidationContext<'_>,
    node_verdicts: Vec<Verdict>,
    ip_verdicts: Vec<Verdict>,
    content_verdicts: Vec<Verdict>,
) -> ValidationOutcome {
    let mut out = ValidationOutcome {
        node_verdicts,
        ip_verdicts,
        content_verdicts,
        series: Vec::new(),
        periods: Vec::new(),
        hypotheses: Vec::new(),
        traces: Vec::new(),
        warnings: Vec::new(),
    };

    let metrics = [
        SeriesMetric::NRequests,
        SeriesMetric::CacheHitRate,
        SeriesMetric::AvgPopularity,
    ];
    for metric in metrics {
        match build_hourly_series(ctx.records, metric, ctx.popularity) {
            Ok(series) => {
                let periods = find_abnormal_periods(
                    &series,
                    ctx.calendar,
                    ctx.params.z_thresh,
                    ctx.params.hit_drop,
                );
                out.periods.extend(periods);
                out.series.push(series);
            }
            Err(e) => out
                .warnings
                .push(format!("time-series analysis skipped for {metric:?}: {e}")),
        }
    }
    if ctx.calendar.is_none() {
        out.warnings.push(
            "no event calendar supplied: abnormal periods are unverified and the crowd filter is skipped"
                .to_string(),
        );
    }

    // 1. Crowd filter.
    if let Some(calendar) = ctx.calendar {
        let traces = crowd_event_filter(&mut out.ip_verdicts, ctx.records, calendar, ctx.params);
        out.traces.extend(traces);
    }

    // 2. Re-analysis of entities active in each candidate window.
    let windows = merge_windows(&out.periods);
    for &(start, end) in &windows {
        match analyze_abnormal_period(ctx, (start, end), &mut out.ip_verdicts) {
            Ok(findings) => {
                out.traces.extend(findings.traces);
                out.hypotheses.push(findings.hypothesis);
            }
            Err(e) => out
                .warnings
                .push(format!("period {start}..{end} analysis failed: {e}")),
        }
    }

    // 3. Cross-perspective corroboration.
    let traces = cross_perspective_validate(
        ctx,
        &windows,
        &mut out.node_verdicts,
        &out.ip_verdicts,
        &mut out.content_verdicts,
    );
    out.traces.extend(traces);

    // 4. Account-offering analysis.
    let (traces, warnings) = ao_validate(ctx, &mut out.ip_verdicts, &mut out.content_verdicts);
    out.traces.extend(traces);
    out.warnings.extend(warnings);

    for v in out
        .node_verdicts
        .iter_mut()
        .chain(out.ip_verdicts.iter_mut())
        .chain(out.content_verdicts.iter_mut())
    {
        v.stage = crate::detection::Stage::Validated;
    }
    out
}
