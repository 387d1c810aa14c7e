//! The validation rules that rewrite verdicts: crowd filtering,
//! abnormal-period re-analysis, cross-perspective corroboration, and
//! account-offering checks.

use super::{
    AoProfileExpectation, EventKind, RuleTrace, ValidationContext, ValidationError,
};
use crate::access_log::CleanRecord;
use crate::detection::{tune_components, Evidence, Label, Stage, Verdict};
use crate::features::aggregate_by_ip;
use crate::normalize::quantile;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

fn trace_and_relabel(
    verdict: &mut Verdict,
    new_label: Label,
    rule: &str,
    detail: String,
) -> RuleTrace {
    let trace = RuleTrace {
        entity_id: verdict.entity_id.clone(),
        perspective: verdict.perspective,
        rule: rule.to_string(),
        old_label: verdict.label,
        new_label,
        detail: detail.clone(),
    };
    verdict.label = new_label;
    verdict.stage = Stage::Validated;
    verdict.evidence.push(Evidence::rule(rule, detail));
    trace
}

fn index_by_id(verdicts: &[Verdict]) -> HashMap<String, usize> {
    verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| (v.entity_id.clone(), i))
        .collect()
}

// ---------------------------------------------------------------------
// 1. Crowd filter
// ---------------------------------------------------------------------

/// Clears DoS flags from IPs that were only ever active inside known
/// crowd windows and were served almost entirely from cache. Bots do
/// not get both properties: they either run outside the windows or
/// drag their hit rate down with misses and errors.
pub fn crowd_event_filter(
    ip_verdicts: &mut [Verdict],
    records: &[CleanRecord],
    calendar: &super::EventCalendar,
    params: &super::ValidationParams,
) -> Vec<RuleTrace> {
    let crowd_windows: Vec<(i64, i64)> = calendar
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Crowd)
        .map(|e| (e.start, e.end))
        .collect();
    if crowd_windows.is_empty() {
        return Vec::new();
    }
    let inside = |t: i64| crowd_windows.iter().any(|&(s, e)| s <= t && t < e);

    let mut stats: HashMap<&str, (u64, u64, u64)> = HashMap::new();
    for r in records {
        let s = stats.entry(&r.ip).or_insert((0, 0, 0));
        s.0 += 1;
        s.1 += inside(r.timestamp) as u64;
        s.2 += r.cache_hit as u64;
    }

    let mut traces = Vec::new();
    for v in ip_verdicts.iter_mut().filter(|v| v.label == Label::Dos) {
        let Some(&(n, in_window, hits)) = stats.get(v.entity_id.as_str()) else {
            continue;
        };
        let in_fraction = in_window as f64 / n as f64;
        let hit_rate = hits as f64 / n as f64;
        if in_fraction >= params.crowd_fraction && hit_rate >= params.crowd_hit_min {
            traces.push(trace_and_relabel(
                v,
                Label::Normal,
                "crowd_event_filter",
                format!(
                    "{:.1}% of requests inside crowd windows with hit rate {hit_rate:.3}",
                    in_fraction * 100.0
                ),
            ));
        }
    }
    traces
}

// ---------------------------------------------------------------------
// 2. Abnormal-period analysis
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackHypothesis {
    pub window: (i64, i64),
    pub kind: Label,
    pub primary_target_node: Option<String>,
    pub secondary_target_nodes: Vec<String>,
    pub n_active_ips: usize,
    pub n_flagged_ips: usize,
}

pub struct PeriodFindings {
    pub traces: Vec<RuleTrace>,
    pub hypothesis: AttackHypothesis,
}

/// Re-runs feature engineering and clustering on the records inside one
/// unexplained window. Clusters that are mostly errors with almost no
/// cache hits are flood traffic; their members get DoS labels. The
/// hypothesis names the node that absorbed the most error requests as
/// the primary target.
pub fn analyze_abnormal_period(
    ctx: &ValidationContext<'_>,
    window: (i64, i64),
    ip_verdicts: &mut [Verdict],
) -> Result<PeriodFindings, ValidationError> {
    let (start, end) = window;
    let period: Vec<CleanRecord> = ctx
        .records
        .iter()
        .filter(|r| r.timestamp >= start && r.timestamp < end)
        .cloned()
        .collect();
    if period.is_empty() {
        return Err(ValidationError::EmptyPeriod);
    }

    let ips = aggregate_by_ip(&period, ctx.popularity);
    let by_id = index_by_id(ip_verdicts);
    let mut traces = Vec::new();
    let mut flagged = 0usize;

    if ips.len() > 2 {
        let matrix = crate::features::select_feature_subset(
            &crate::features::PerspectiveRows::Ip(&ips),
            crate::features::SubsetPurpose::DosIp,
        )
        .expect("ip rows with dos purpose");
        let mut tune = ctx.gmm_tune.clone();
        tune.k_hi = tune.k_hi.min(10);
        if let Ok(tuned) = tune_components(&matrix, &tune) {
            if let Ok(assignments) = crate::ml::gmm_assign_all(&tuned.params, &matrix) {
                let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); tuned.k];
                for (row, &(c, _)) in ips.iter().zip(&assignments) {
                    sums[c].0 += row.request_error_rate;
                    sums[c].1 += row.cache_hit_rate;
                    sums[c].2 += 1;
                }
                let flood: Vec<bool> = sums
                    .iter()
                    .map(|&(err, hit, n)| {
                        n > 0
                            && err / n as f64 >= ctx.params.period_error_min
                            && hit / n as f64 <= ctx.params.period_hit_max
                    })
                    .collect();
                for (row, &(c, _)) in ips.iter().zip(&assignments) {
                    if !flood[c] {
                        continue;
                    }
                    flagged += 1;
                    if let Some(&i) = by_id.get(&row.ip) {
                        if ip_verdicts[i].label != Label::Dos {
                            traces.push(trace_and_relabel(
                                &mut ip_verdicts[i],
                                Label::Dos,
                                "abnormal_period_dos",
                                format!(
                                    "in-period cluster {c}: error rate {:.3}, hit rate {:.3}",
                                    row.request_error_rate, row.cache_hit_rate
                                ),
                            ));
                        }
                    }
                }
            }
        }
    }

    // Target nodes, ranked by absorbed error requests.
    let mut node_errors: BTreeMap<&str, u64> = BTreeMap::new();
    let mut node_requests: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &period {
        *node_requests.entry(&r.node).or_insert(0) += 1;
        if r.is_error() {
            *node_errors.entry(&r.node).or_insert(0) += 1;
        }
    }
    let ranking = if node_errors.values().any(|&c| c > 0) {
        &node_errors
    } else {
        &node_requests
    };
    let mut ranked: Vec<(&str, u64)> = ranking.iter().map(|(&n, &c)| (n, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let primary = ranked.first().map(|&(n, _)| n.to_string());
    let secondary: Vec<String> = match ranked.first() {
        Some(&(_, top)) if top > 0 => ranked
            .iter()
            .skip(1)
            .filter(|&&(_, c)| c >= top / 10 && c > 0)
            .map(|&(n, _)| n.to_string())
            .collect(),
        _ => Vec::new(),
    };

    Ok(PeriodFindings {
        traces,
        hypothesis: AttackHypothesis {
            window,
            kind: if flagged > 0 { Label::Dos } else { Label::CpaUnspecified },
            primary_target_node: primary,
            secondary_target_nodes: secondary,
            n_active_ips: ips.len(),
            n_flagged_ips: flagged,
        },
    })
}

// ---------------------------------------------------------------------
// 3. Cross-perspective corroboration
// ---------------------------------------------------------------------

/// Three checks across perspectives:
///
/// (a) a normal node that absorbed enough requests from flagged IPs
///     inside candidate windows, with a degraded hit rate against its
///     other-day baseline, is recovered as a missed target;
/// (b) a cpa-labeled content whose requesters are all normal and whose
///     popularity is not actually low reverts to normal;
/// (c) a dos-labeled node never touched by a dos IP and without an
///     elevated error rate is re-typed as cpa.
pub fn cross_perspective_validate(
    ctx: &ValidationContext<'_>,
    windows: &[(i64, i64)],
    node_verdicts: &mut [Verdict],
    ip_verdicts: &[Verdict],
    content_verdicts: &mut [Verdict],
) -> Vec<RuleTrace> {
    let mut traces = Vec::new();
    let ip_label: HashMap<&str, Label> = ip_verdicts
        .iter()
        .map(|v| (v.entity_id.as_str(), v.label))
        .collect();
    let in_window = |t: i64| windows.iter().any(|&(s, e)| s <= t && t < e);
    let abnormal_days: HashSet<i64> = windows
        .iter()
        .flat_map(|&(s, e)| s.div_euclid(86_400)..=(e - 1).div_euclid(86_400))
        .collect();

    struct NodeStats {
        window_attack: BTreeMap<Label, u64>,
        total_dos_requests: u64,
        window_hits: u64,
        window_n: u64,
        base_hits: u64,
        base_n: u64,
        off_window_hits: u64,
        off_window_n: u64,
    }
    let mut per_node: HashMap<&str, NodeStats> = HashMap::new();
    let mut content_touched_by_flagged: HashSet<&str> = HashSet::new();
    for r in ctx.records {
        let label = ip_label.get(r.ip.as_str()).copied().unwrap_or(Label::Normal);
        if label.is_abnormal() {
            content_touched_by_flagged.insert(&r.content_url);
        }
        let s = per_node.entry(&r.node).or_insert_with(|| NodeStats {
            window_attack: BTreeMap::new(),
            total_dos_requests: 0,
            window_hits: 0,
            window_n: 0,
            base_hits: 0,
            base_n: 0,
            off_window_hits: 0,
            off_window_n: 0,
        });
        if label == Label::Dos {
            s.total_dos_requests += 1;
        }
        if in_window(r.timestamp) {
            s.window_n += 1;
            s.window_hits += r.cache_hit as u64;
            if label.is_abnormal() {
                *s.window_attack.entry(label).or_insert(0) += 1;
            }
        } else {
            s.off_window_n += 1;
            s.off_window_hits += r.cache_hit as u64;
        }
        if !abnormal_days.contains(&r.timestamp.div_euclid(86_400)) {
            s.base_n += 1;
            s.base_hits += r.cache_hit as u64;
        }
    }

    // (a) false-negative recovery.
    for v in node_verdicts.iter_mut().filter(|v| v.label == Label::Normal) {
        let Some(s) = per_node.get(v.entity_id.as_str()) else { continue };
        let attack_requests: u64 = s.window_attack.values().sum();
        if attack_requests < ctx.params.min_attack_requests || s.window_n == 0 {
            continue;
        }
        let (base_hits, base_n) = if s.base_n > 0 {
            (s.base_hits, s.base_n)
        } else {
            (s.off_window_hits, s.off_window_n)
        };
        if base_n == 0 {
            continue;
        }
        let base_rate = base_hits as f64 / base_n as f64;
        let window_rate = s.window_hits as f64 / s.window_n as f64;
        if base_rate - window_rate < ctx.params.node_hit_drop {
            continue;
        }
        // Inherit the label that sent the most attack requests;
        // deterministic tie-break on the label ordering.
        let label = s
            .window_attack
            .iter()
            .max_by(|a, b| a.1.cmp(b.1))
            .map(|(&l, _)| l)
            .unwrap_or(Label::CpaUnspecified);
        traces.push(trace_and_relabel(
            v,
            label,
            "cross_perspective_recovery",
            format!(
                "{attack_requests} requests from flagged IPs in candidate windows; hit rate {window_rate:.3} vs baseline {base_rate:.3}"
            ),
        ));
    }

    // (b) content false-positive reversion.
    let pop_col: Vec<f64> = ctx.tables.contents.iter().map(|c| c.popularity).collect();
    let pop_floor = quantile(&pop_col, ctx.params.content_revert_popularity_q);
    let content_pop: HashMap<&str, f64> = ctx
        .tables
        .contents
        .iter()
        .map(|c| (c.content_id.as_str(), c.popularity))
        .collect();
    for v in content_verdicts.iter_mut().filter(|v| v.label.is_cpa()) {
        let touched = content_touched_by_flagged.contains(v.entity_id.as_str());
        let pop = content_pop.get(v.entity_id.as_str()).copied().unwrap_or(0.0);
        if !touched && pop >= pop_floor {
            traces.push(trace_and_relabel(
                v,
                Label::Normal,
                "cross_perspective_content_revert",
                format!("all requesters normal and popularity {pop:.3} >= {pop_floor:.3}"),
            ));
        }
    }

    // (c) attack-type consistency for nodes.
    let node_error: HashMap<&str, f64> = ctx
        .tables
        .nodes
        .iter()
        .map(|n| (n.node_id.as_str(), n.request_error_rate))
        .collect();
    for v in node_verdicts.iter_mut().filter(|v| v.label == Label::Dos) {
        let Some(s) = per_node.get(v.entity_id.as_str()) else { continue };
        let err = node_error.get(v.entity_id.as_str()).copied().unwrap_or(0.0);
        let cpa_requests: u64 = s
            .window_attack
            .iter()
            .filter(|(l, _)| l.is_cpa())
            .map(|(_, &c)| c)
            .sum();
        if s.total_dos_requests == 0 && cpa_requests > 0 && err < ctx.thresholds.error_floor {
            traces.push(trace_and_relabel(
                v,
                Label::CpaUnspecified,
                "cross_perspective_type_consistency",
                format!("attacked only by cpa IPs and error rate {err:.4} is not elevated"),
            ));
        }
    }

    traces
}

// ---------------------------------------------------------------------
// 4. Account-offering analysis
// ---------------------------------------------------------------------

fn dominant_ao(shares: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (ao, &share) in shares {
        if best.map_or(true, |(_, b)| share > b) {
            best = Some((ao.as_str(), share));
        }
    }
    best.map(|(ao, _)| ao)
}

fn within(band: (f64, f64), v: f64) -> bool {
    v >= band.0 && v <= band.1
}

/// Checks flagged IPs and contents against the declared account
/// offering configuration. Entities dominated by a declared benign
/// low-popularity source (whose observed behavior matches its bands)
/// are false positives; entities on deviating or undeclared AOs keep
/// their labels, the latter with a warning.
pub fn ao_validate(
    ctx: &ValidationContext<'_>,
    ip_verdicts: &mut [Verdict],
    content_verdicts: &mut [Verdict],
) -> (Vec<RuleTrace>, Vec<String>) {
    let mut traces = Vec::new();
    let mut warnings = Vec::new();
    let Some(expectations) = ctx.expectations else {
        warnings.push("no AO expectations configured: AO analysis skipped".to_string());
        return (traces, warnings);
    };
    let expected: HashMap<&str, &AoProfileExpectation> =
        expectations.iter().map(|e| (e.ao_id.as_str(), e)).collect();
    let observed: HashMap<&str, &crate::features::AoFeatures> =
        ctx.tables.aos.iter().map(|a| (a.ao_id.as_str(), a)).collect();
    let mut missing: std::collections::BTreeSet<String> = Default::default();

    let mut clears = |entity_ao: &str| -> Option<String> {
        let Some(exp) = expected.get(entity_ao) else {
            missing.insert(entity_ao.to_string());
            return None;
        };
        if !exp.benign_low_popularity {
            return None;
        }
        let Some(obs) = observed.get(entity_ao) else {
            return None;
        };
        if within(exp.popularity_band, obs.request_popularity)
            && within(exp.hit_band, obs.cache_hit_rate)
        {
            Some(format!(
                "dominant AO {entity_ao} is a declared benign low-popularity source ({}); observed popularity {:.3} and hit rate {:.3} inside declared bands",
                exp.note, obs.request_popularity, obs.cache_hit_rate
            ))
        } else {
            None
        }
    };

    let ip_ao: HashMap<&str, Option<&str>> = ctx
        .tables
        .ips
        .iter()
        .map(|r| (r.ip.as_str(), dominant_ao(&r.ao_request_rate)))
        .collect();
    for v in ip_verdicts.iter_mut().filter(|v| v.label.is_abnormal()) {
        if let Some(Some(ao)) = ip_ao.get(v.entity_id.as_str()) {
            if let Some(detail) = clears(ao) {
                traces.push(trace_and_relabel(v, Label::Normal, "ao_benign_source", detail));
            }
        }
    }

    // Contents carry no AO share in their feature row; derive the
    // dominant AO from the records.
    let mut content_ao_counts: HashMap<&str, HashMap<&str, u64>> = HashMap::new();
    for r in ctx.records {
        *content_ao_counts
            .entry(&r.content_url)
            .or_default()
            .entry(&r.account_offering)
            .or_insert(0) += 1;
    }
    for v in content_verdicts.iter_mut().filter(|v| v.label.is_abnormal()) {
        let Some(counts) = content_ao_counts.get(v.entity_id.as_str()) else {
            continue;
        };
        let mut pairs: Vec<(&str, u64)> = counts.iter().map(|(&a, &c)| (a, c)).collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(&(ao, _)) = pairs.first() {
            if let Some(detail) = clears(ao) {
                traces.push(trace_and_relabel(v, Label::Normal, "ao_benign_source", detail));
            }
        }
    }

    for ao in missing {
        warnings.push(format!(
            "AO {ao} referenced by flagged entities has no configured expectation; entities kept flagged"
        ));
    }
    (traces, warnings)
}
