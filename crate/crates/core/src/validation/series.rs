//! Hourly time series over the log and robust deviation detection.

use super::{AbnormalPeriod, EventCalendar, ValidationError};
use crate::access_log::CleanRecord;
use crate::features::Popularity;
use crate::normalize::median;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesMetric {
    NRequests,
    CacheHitRate,
    AvgPopularity,
}

impl SeriesMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NRequests => "n_requests",
            Self::CacheHitRate => "cache_hit_rate",
            Self::AvgPopularity => "avg_popularity",
        }
    }
}

/// Contiguous UTC hour buckets. Hours without traffic hold 0 for the
/// request count and are absent (`None`) for rate metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HourlySeries {
    pub metric: SeriesMetric,
    pub buckets: Vec<(i64, Option<f64>)>,
}

pub fn build_hourly_series(
    records: &[CleanRecord],
    metric: SeriesMetric,
    popularity: &Popularity,
) -> Result<HourlySeries, ValidationError> {
    if records.is_empty() {
        return Err(ValidationError::SpanTooShort);
    }
    let hour_of = |t: i64| t.div_euclid(3600) * 3600;
    let first = hour_of(records.iter().map(|r| r.timestamp).min().unwrap());
    let last = hour_of(records.iter().map(|r| r.timestamp).max().unwrap());
    if first == last {
        return Err(ValidationError::SpanTooShort);
    }

    // (count, hits, popularity sum) per hour.
    let mut acc: BTreeMap<i64, (u64, u64, f64)> = BTreeMap::new();
    for r in records {
        let slot = acc.entry(hour_of(r.timestamp)).or_insert((0, 0, 0.0));
        slot.0 += 1;
        slot.1 += r.cache_hit as u64;
        slot.2 += popularity.of_request(r);
    }

    let mut buckets = Vec::new();
    let mut hour = first;
    while hour <= last {
        let value = match (metric, acc.get(&hour)) {
            (SeriesMetric::NRequests, Some(&(n, _, _))) => Some(n as f64),
            (SeriesMetric::NRequests, None) => Some(0.0),
            (SeriesMetric::CacheHitRate, Some(&(n, hits, _))) => Some(hits as f64 / n as f64),
            (SeriesMetric::AvgPopularity, Some(&(n, _, pop))) => Some(pop / n as f64),
            (_, None) => None,
        };
        buckets.push((hour, value));
        hour += 3600;
    }
    Ok(HourlySeries { metric, buckets })
}

/// Flags hours whose value deviates from the series median by more
/// than `z_thresh` robust (median/MAD) z-scores, or for the hit-rate
/// metric drops more than `hit_drop` below the median. Adjacent
/// abnormal hours merge into one period; periods overlapping the
/// calendar are annotated legitimate.
pub fn find_abnormal_periods(
    series: &HourlySeries,
    calendar: Option<&EventCalendar>,
    z_thresh: f64,
    hit_drop: f64,
) -> Vec<AbnormalPeriod> {
    let present: Vec<f64> = series.buckets.iter().filter_map(|&(_, v)| v).collect();
    if present.len() < 2 {
        return Vec::new();
    }
    let med = median(&present);
    let deviations: Vec<f64> = present.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&deviations);
    let scale = 1.4826 * mad;

    let mut flagged: Vec<(i64, f64)> = Vec::new();
    for &(hour, value) in &series.buckets {
        let Some(v) = value else { continue };
        let z = if scale > 0.0 {
            (v - med).abs() / scale
        } else if v != med {
            f64::INFINITY
        } else {
            0.0
        };
        let dropped = series.metric == SeriesMetric::CacheHitRate && (med - v) > hit_drop;
        if z > z_thresh || dropped {
            let deviation = if z.is_finite() && z > z_thresh { z } else { med - v };
            flagged.push((hour, deviation));
        }
    }

    let mut periods: Vec<AbnormalPeriod> = Vec::new();
    for (hour, deviation) in flagged {
        match periods.last_mut() {
            Some(p) if p.end == hour => {
                p.end = hour + 3600;
                p.deviation = p.deviation.max(deviation);
            }
            _ => periods.push(AbnormalPeriod {
                start: hour,
                end: hour + 3600,
                metric: series.metric,
                deviation,
                legitimate: false,
            }),
        }
    }
    for p in &mut periods {
        p.legitimate = calendar.map_or(false, |c| c.covers(p.start, p.end));
    }
    periods
}
