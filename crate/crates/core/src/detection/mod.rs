//! Model-driven detection per perspective: tuned isolation forest for
//! nodes, tuned mixture clustering for IPs and contents, and pattern
//! matching that turns numeric outliers into attack-typed verdicts.

mod patterns;

pub use patterns::{
    resolve_profile, Comparator, Condition, PatternProfile, ProfileKind, ResolvedProfile,
    ThresholdMode, Thresholds,
};

use crate::features::{ContentFeatures, FeatureMatrix, IpFeatures, NodeFeatures};
use crate::ml::{
    bo_gp_optimize, gmm_assign_all, gmm_fit_em, silhouette, BoConfig, GmmParams, IsolationForest,
    MlError, SearchSpace,
};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Node,
    Ip,
    Content,
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Node => "node",
            Self::Ip => "ip",
            Self::Content => "content",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Dos,
    CpaLda,
    CpaFla,
    CpaUnspecified,
}

impl Label {
    pub fn is_abnormal(&self) -> bool {
        !matches!(self, Self::Normal)
    }

    pub fn is_cpa(&self) -> bool {
        matches!(self, Self::CpaLda | Self::CpaFla | Self::CpaUnspecified)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Dos => "dos",
            Self::CpaLda => "cpa_lda",
            Self::CpaFla => "cpa_fla",
            Self::CpaUnspecified => "cpa_unspecified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "normal" => Self::Normal,
            "dos" => Self::Dos,
            "cpa_lda" => Self::CpaLda,
            "cpa_fla" => Self::CpaFla,
            "cpa_unspecified" => Self::CpaUnspecified,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Model,
    Pattern,
    Validated,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::Pattern => "pattern",
            Self::Validated => "validated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "model" => Self::Model,
            "pattern" => Self::Pattern,
            "validated" => Self::Validated,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub feature: String,
    pub value: f64,
    pub condition: String,
}

impl Evidence {
    pub fn rule(name: &str, detail: String) -> Self {
        Self {
            feature: name.to_string(),
            value: f64::NAN,
            condition: detail,
        }
    }
}

/// Per-entity outcome of one perspective. Abnormal labels always carry
/// evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub entity_id: String,
    pub perspective: Perspective,
    pub label: Label,
    pub stage: Stage,
    pub evidence: Vec<Evidence>,
    pub cluster_id: Option<usize>,
    pub score: Option<f64>,
}

impl Verdict {
    fn normal(entity_id: String, perspective: Perspective, stage: Stage) -> Self {
        Self {
            entity_id,
            perspective,
            label: Label::Normal,
            stage,
            evidence: Vec::new(),
            cluster_id: None,
            score: None,
        }
    }
}

/// Average raw feature values of one cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub centroid: Vec<(String, f64)>,
}

impl ClusterSummary {
    pub fn value(&self, feature: &str) -> f64 {
        self.centroid
            .iter()
            .find(|(n, _)| n == feature)
            .map(|&(_, v)| v)
            .unwrap_or(f64::NAN)
    }
}

pub const NODE_FEATURES: [&str; 6] = [
    "n_requests",
    "cache_hit_rate",
    "legit_ip_cache_hit_rate",
    "data_transfer_rate_mbps",
    "request_error_rate",
    "avg_request_popularity",
];

pub const IP_FEATURES: [&str; 9] = [
    "n_requests",
    "avg_request_interval_s",
    "n_nodes",
    "n_contents",
    "req_per_content",
    "req_per_node",
    "avg_request_popularity",
    "cache_hit_rate",
    "request_error_rate",
];

pub const CONTENT_FEATURES: [&str; 5] = [
    "n_requests",
    "popularity",
    "cache_hit_rate",
    "req_per_ip",
    "req_per_node",
];

pub fn node_value(r: &NodeFeatures, feature: &str) -> f64 {
    match feature {
        "n_requests" => r.n_requests as f64,
        "cache_hit_rate" => r.cache_hit_rate,
        "legit_ip_cache_hit_rate" => r.legit_ip_cache_hit_rate,
        "data_transfer_rate_mbps" => r.data_transfer_rate_mbps,
        "request_error_rate" => r.request_error_rate,
        "avg_request_popularity" => r.avg_request_popularity,
        _ => f64::NAN,
    }
}

pub fn ip_value(r: &IpFeatures, feature: &str) -> f64 {
    match feature {
        "n_requests" => r.n_requests as f64,
        "avg_request_interval_s" => r.avg_request_interval_s,
        "n_nodes" => r.n_nodes as f64,
        "n_contents" => r.n_contents as f64,
        "req_per_content" => r.req_per_content,
        "req_per_node" => r.req_per_node,
        "avg_request_popularity" => r.avg_request_popularity,
        "cache_hit_rate" => r.cache_hit_rate,
        "request_error_rate" => r.request_error_rate,
        _ => f64::NAN,
    }
}

pub fn content_value(r: &ContentFeatures, feature: &str) -> f64 {
    match feature {
        "n_requests" => r.n_requests as f64,
        "popularity" => r.popularity,
        "cache_hit_rate" => r.cache_hit_rate,
        "req_per_ip" => r.req_per_ip,
        "req_per_node" => r.req_per_node,
        _ => f64::NAN,
    }
}

fn evidence_from(hits: Vec<(patterns::ResolvedCondition, f64)>) -> Vec<Evidence> {
    hits.into_iter()
        .map(|(c, v)| Evidence {
            feature: c.feature.clone(),
            value: v,
            condition: c.describe(),
        })
        .collect()
}

// ---------------------------------------------------------------------
// Contamination tuning (node perspective)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestTuneParams {
    pub contamination_lo: f64,
    pub contamination_hi: f64,
    pub n_trees: usize,
    pub subsample_size: usize,
    pub bo_budget: usize,
    pub bo_n_init: usize,
    pub silhouette_cap: usize,
    pub seed: u64,
}

impl Default for ForestTuneParams {
    fn default() -> Self {
        Self {
            contamination_lo: 0.02,
            contamination_hi: 0.5,
            n_trees: crate::ml::iforest::DEFAULT_N_TREES,
            subsample_size: crate::ml::iforest::DEFAULT_SUBSAMPLE,
            bo_budget: crate::ml::bo::DEFAULT_BUDGET,
            bo_n_init: crate::ml::bo::DEFAULT_N_INIT,
            silhouette_cap: crate::ml::silhouette::DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TunedForest {
    pub contamination: f64,
    pub model: IsolationForest,
    pub silhouette: f64,
    pub warnings: Vec<String>,
}

/// Tunes the contamination level by maximizing the silhouette of the
/// flagged/unflagged split. Tree structure does not depend on the
/// contamination, so the ensemble is fitted once and re-thresholded per
/// candidate. Degenerate inputs fall back to a default contamination
/// with a warning.
pub fn tune_contamination(
    x: &FeatureMatrix,
    params: &ForestTuneParams,
    thresholds: &Thresholds,
) -> Result<TunedForest, MlError> {
    let mut warnings = Vec::new();
    let degenerate = {
        let first = x.row(0).to_vec();
        x.rows().all(|r| r == first.as_slice())
    };
    let base = IsolationForest::fit(
        x,
        thresholds.fallback_contamination,
        params.n_trees,
        params.subsample_size,
        params.seed,
    )?;
    if degenerate {
        warnings.push(format!(
            "all rows identical; silhouette undefined, falling back to contamination {}",
            thresholds.fallback_contamination
        ));
        return Ok(TunedForest {
            contamination: thresholds.fallback_contamination,
            model: base,
            silhouette: f64::NAN,
            warnings,
        });
    }

    let objective = |c: f64| -> f64 {
        let model = base.with_contamination(c);
        let labels: Vec<usize> = model.train_flags().iter().map(|&b| b as usize).collect();
        silhouette(x, &labels, params.silhouette_cap).unwrap_or(-1.0)
    };
    let result = bo_gp_optimize(
        objective,
        &BoConfig {
            space: SearchSpace::Continuous {
                lo: params.contamination_lo,
                hi: params.contamination_hi,
            },
            budget: params.bo_budget,
            n_init: params.bo_n_init,
            seed: params.seed,
        },
    );
    if result.best_y <= -1.0 + 1e-12 {
        warnings.push(format!(
            "no contamination level produced a valid split; falling back to {}",
            thresholds.fallback_contamination
        ));
        return Ok(TunedForest {
            contamination: thresholds.fallback_contamination,
            model: base,
            silhouette: f64::NAN,
            warnings,
        });
    }
    Ok(TunedForest {
        contamination: result.best_x,
        model: base.with_contamination(result.best_x),
        silhouette: result.best_y,
        warnings,
    })
}

// ---------------------------------------------------------------------
// Component-count tuning (IP / content perspectives)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmTuneParams {
    pub k_lo: usize,
    pub k_hi: usize,
    pub reg_eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub bo_budget: usize,
    pub bo_n_init: usize,
    pub silhouette_cap: usize,
    pub seed: u64,
}

impl Default for GmmTuneParams {
    fn default() -> Self {
        Self {
            k_lo: 2,
            k_hi: 50,
            reg_eps: crate::ml::gmm::DEFAULT_REG_EPS,
            max_iter: crate::ml::gmm::DEFAULT_MAX_ITER,
            tol: crate::ml::gmm::DEFAULT_TOL,
            bo_budget: crate::ml::bo::DEFAULT_BUDGET,
            bo_n_init: crate::ml::bo::DEFAULT_N_INIT,
            silhouette_cap: crate::ml::silhouette::DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TunedGmm {
    pub k: usize,
    pub params: GmmParams,
    pub silhouette: f64,
}

/// Tunes the component count by maximizing the silhouette of the hard
/// assignments. Each candidate K gets its own derived seed so the
/// objective is deterministic per K.
pub fn tune_components(x: &FeatureMatrix, params: &GmmTuneParams) -> Result<TunedGmm, MlError> {
    let lo = params.k_lo.max(2);
    let hi = params.k_hi.min(x.n_rows().saturating_sub(1)).max(lo);

    let fit_one = |k: usize| -> Result<(GmmParams, f64), MlError> {
        let fitted = gmm_fit_em(
            x,
            k,
            params.reg_eps,
            params.max_iter,
            params.tol,
            params.seed.wrapping_add(k as u64),
        )?;
        let labels: Vec<usize> = gmm_assign_all(&fitted, x)?.into_iter().map(|(c, _)| c).collect();
        let sil = silhouette(x, &labels, params.silhouette_cap).unwrap_or(-1.0);
        Ok((fitted, sil))
    };

    if lo == hi {
        let (fitted, sil) = fit_one(lo)?;
        return Ok(TunedGmm {
            k: lo,
            params: fitted,
            silhouette: sil,
        });
    }

    let cache: RefCell<HashMap<usize, (GmmParams, f64)>> = RefCell::new(HashMap::new());
    let error: RefCell<Option<MlError>> = RefCell::new(None);
    let objective = |kf: f64| -> f64 {
        let k = kf.round() as usize;
        if let Some((_, sil)) = cache.borrow().get(&k) {
            return *sil;
        }
        match fit_one(k) {
            Ok((fitted, sil)) => {
                cache.borrow_mut().insert(k, (fitted, sil));
                sil
            }
            Err(e) => {
                error.borrow_mut().get_or_insert(e);
                -1.0
            }
        }
    };
    let budget = params.bo_budget.max(params.bo_n_init + 1);
    let result = bo_gp_optimize(
        objective,
        &BoConfig {
            space: SearchSpace::Integer {
                lo: lo as i64,
                hi: hi as i64,
            },
            budget,
            n_init: params.bo_n_init,
            seed: params.seed,
        },
    );
    let best_k = result.best_x.round() as usize;
    let entry = cache.borrow_mut().remove(&best_k);
    match entry {
        Some((fitted, sil)) => Ok(TunedGmm {
            k: best_k,
            params: fitted,
            silhouette: sil,
        }),
        None => Err(error.into_inner().unwrap_or(MlError::SingleCluster)),
    }
}

// ---------------------------------------------------------------------
// Node detection
// ---------------------------------------------------------------------

/// Two-step node detection: numeric outliers from the tuned forest,
/// then pattern matching. DoS is checked before CPA; outliers matching
/// neither (for example unusually fast nodes) revert to normal.
pub fn detect_abnormal_nodes(
    rows: &[NodeFeatures],
    tuned: &TunedForest,
    thresholds: &Thresholds,
) -> Vec<Verdict> {
    let columns: HashMap<&str, Vec<f64>> = NODE_FEATURES
        .iter()
        .map(|&f| (f, rows.iter().map(|r| node_value(r, f)).collect()))
        .collect();
    let dos = resolve_profile(&thresholds.node_dos_profile(), &columns);
    let cpa = resolve_profile(&thresholds.node_cpa_profile(), &columns);

    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let flagged = tuned.model.train_flags().get(i).copied().unwrap_or(false);
            let score = tuned.model.train_scores().get(i).copied();
            let mut verdict = Verdict::normal(r.node_id.clone(), Perspective::Node, Stage::Pattern);
            verdict.score = score;
            if !flagged {
                return verdict;
            }
            let value_of = |f: &str| node_value(r, f);
            if let Some(hits) = dos.matches(&value_of) {
                verdict.label = Label::Dos;
                verdict.evidence = evidence_from(hits);
            } else if let Some(hits) = cpa.matches(&value_of) {
                verdict.label = Label::CpaUnspecified;
                verdict.evidence = evidence_from(hits);
            } else {
                verdict.evidence = vec![Evidence::rule(
                    "model_flag_reverted",
                    "numeric outlier without a matching attack pattern".to_string(),
                )];
            }
            verdict
        })
        .collect()
}

// ---------------------------------------------------------------------
// Cluster-level detection (contents and IPs)
// ---------------------------------------------------------------------

fn summarize_clusters<T>(
    rows: &[T],
    assignments: &[(usize, f64)],
    k: usize,
    features: &[&str],
    value: fn(&T, &str) -> f64,
) -> Vec<ClusterSummary> {
    let mut sums = vec![vec![0.0; features.len()]; k];
    let mut sizes = vec![0usize; k];
    for (row, &(c, _)) in rows.iter().zip(assignments) {
        sizes[c] += 1;
        for (j, &f) in features.iter().enumerate() {
            sums[c][j] += value(row, f);
        }
    }
    (0..k)
        .map(|c| ClusterSummary {
            cluster_id: c,
            size: sizes[c],
            centroid: features
                .iter()
                .enumerate()
                .map(|(j, &f)| {
                    (
                        f.to_string(),
                        if sizes[c] > 0 { sums[c][j] / sizes[c] as f64 } else { f64::NAN },
                    )
                })
                .collect(),
        })
        .collect()
}

/// Decides the CPA variant for a matched cluster from its concentration
/// ratio against the dataset split threshold.
fn cpa_variant(concentration: f64, r_fla: f64) -> Label {
    if concentration >= r_fla {
        Label::CpaFla
    } else {
        Label::CpaLda
    }
}

fn cluster_member_verdicts<T>(
    rows: &[T],
    assignments: &[(usize, f64)],
    cluster_labels: &[Option<(Label, Vec<Evidence>)>],
    perspective: Perspective,
    id_of: fn(&T) -> &str,
    demote_below: f64,
) -> Vec<Verdict> {
    rows.iter()
        .zip(assignments)
        .map(|(row, &(c, resp))| {
            let mut v = Verdict::normal(id_of(row).to_string(), perspective, Stage::Pattern);
            v.cluster_id = Some(c);
            v.score = Some(resp);
            if let Some((label, evidence)) = &cluster_labels[c] {
                if resp < demote_below {
                    v.evidence = vec![Evidence::rule(
                        "low_confidence_demotion",
                        format!(
                            "cluster {c} matched {} but membership responsibility {resp:.3} < {demote_below}",
                            label.as_str()
                        ),
                    )];
                } else {
                    v.label = *label;
                    v.evidence = evidence.clone();
                }
            }
            v
        })
        .collect()
}

/// Labels content clusters whose centroids look like cache pollution:
/// unpopular content with a high per-node request concentration. The
/// per-IP concentration splits FLA (few contents hammered by few IPs)
/// from LDA (many contents cycled).
pub fn detect_abnormal_contents(
    rows: &[ContentFeatures],
    x: &FeatureMatrix,
    tuned: &TunedGmm,
    thresholds: &Thresholds,
) -> Result<(Vec<Verdict>, Vec<ClusterSummary>), MlError> {
    let assignments = gmm_assign_all(&tuned.params, x)?;
    let summaries = summarize_clusters(rows, &assignments, tuned.k, &CONTENT_FEATURES, content_value);

    let columns: HashMap<&str, Vec<f64>> = CONTENT_FEATURES
        .iter()
        .map(|&f| (f, rows.iter().map(|r| content_value(r, f)).collect()))
        .collect();
    let profile = resolve_profile(&thresholds.content_cpa_profile(), &columns);
    let r_fla = crate::normalize::quantile(&columns["req_per_ip"], thresholds.fla_split_q);

    let cluster_labels: Vec<Option<(Label, Vec<Evidence>)>> = summaries
        .iter()
        .map(|s| {
            if s.size == 0 {
                return None;
            }
            let centroid = |f: &str| s.value(f);
            profile.matches(&centroid).map(|hits| {
                let label = cpa_variant(s.value("req_per_ip"), r_fla);
                let mut ev = evidence_from(hits);
                ev.push(Evidence {
                    feature: "req_per_ip".to_string(),
                    value: s.value("req_per_ip"),
                    condition: format!("variant split at {r_fla}"),
                });
                (label, ev)
            })
        })
        .collect();

    let verdicts = cluster_member_verdicts(
        rows,
        &assignments,
        &cluster_labels,
        Perspective::Content,
        |r| &r.content_id,
        thresholds.responsibility_demote,
    );
    Ok((verdicts, summaries))
}

/// Labels IP clusters matching the DoS shape: very many requests at
/// short intervals against few nodes. Popularity is not consulted;
/// high-popularity floods are still floods.
pub fn detect_dos_ips(
    rows: &[IpFeatures],
    dos_matrix: &FeatureMatrix,
    tuned: &TunedGmm,
    thresholds: &Thresholds,
) -> Result<(Vec<Verdict>, Vec<ClusterSummary>), MlError> {
    let assignments = gmm_assign_all(&tuned.params, dos_matrix)?;
    let summaries = summarize_clusters(rows, &assignments, tuned.k, &IP_FEATURES, ip_value);

    let columns: HashMap<&str, Vec<f64>> = IP_FEATURES
        .iter()
        .map(|&f| (f, rows.iter().map(|r| ip_value(r, f)).collect()))
        .collect();
    let profile = resolve_profile(&thresholds.ip_dos_profile(), &columns);

    let cluster_labels: Vec<Option<(Label, Vec<Evidence>)>> = summaries
        .iter()
        .map(|s| {
            if s.size == 0 {
                return None;
            }
            let centroid = |f: &str| s.value(f);
            profile.matches(&centroid).map(|hits| (Label::Dos, evidence_from(hits)))
        })
        .collect();

    let verdicts = cluster_member_verdicts(
        rows,
        &assignments,
        &cluster_labels,
        Perspective::Ip,
        |r| &r.ip,
        thresholds.responsibility_demote,
    );
    Ok((verdicts, summaries))
}

/// Labels IP clusters matching the CPA shape (heavy unpopular-content
/// requesters), split into FLA/LDA on the req-per-content ratio.
pub fn detect_cpa_ips(
    rows: &[IpFeatures],
    cpa_matrix: &FeatureMatrix,
    tuned: &TunedGmm,
    thresholds: &Thresholds,
) -> Result<(Vec<Verdict>, Vec<ClusterSummary>), MlError> {
    let assignments = gmm_assign_all(&tuned.params, cpa_matrix)?;
    let summaries = summarize_clusters(rows, &assignments, tuned.k, &IP_FEATURES, ip_value);

    let columns: HashMap<&str, Vec<f64>> = IP_FEATURES
        .iter()
        .map(|&f| (f, rows.iter().map(|r| ip_value(r, f)).collect()))
        .collect();
    let profile = resolve_profile(&thresholds.ip_cpa_profile(), &columns);
    let r_fla = crate::normalize::quantile(&columns["req_per_content"], thresholds.fla_split_q);

    let cluster_labels: Vec<Option<(Label, Vec<Evidence>)>> = summaries
        .iter()
        .map(|s| {
            if s.size == 0 {
                return None;
            }
            let centroid = |f: &str| s.value(f);
            profile.matches(&centroid).map(|hits| {
                let label = cpa_variant(s.value("req_per_content"), r_fla);
                let mut ev = evidence_from(hits);
                ev.push(Evidence {
                    feature: "req_per_content".to_string(),
                    value: s.value("req_per_content"),
                    condition: format!("variant split at {r_fla}"),
                });
                (label, ev)
            })
        })
        .collect();

    let verdicts = cluster_member_verdicts(
        rows,
        &assignments,
        &cluster_labels,
        Perspective::Ip,
        |r| &r.ip,
        thresholds.responsibility_demote,
    );
    Ok((verdicts, summaries))
}

/// Folds the DoS-pipeline and CPA-pipeline IP verdicts into one verdict
/// per IP. When both pipelines flag an IP the error rate arbitrates:
/// floods produce errors, pollution does not.
pub fn merge_ip_verdicts(
    dos: Vec<Verdict>,
    cpa: Vec<Verdict>,
    rows: &[IpFeatures],
    thresholds: &Thresholds,
) -> Vec<Verdict> {
    assert_eq!(dos.len(), cpa.len());
    dos.into_iter()
        .zip(cpa)
        .zip(rows)
        .map(|((d, c), row)| {
            debug_assert_eq!(d.entity_id, c.entity_id);
            match (d.label.is_abnormal(), c.label.is_abnormal()) {
                (false, false) => d,
                (true, false) => d,
                (false, true) => c,
                (true, true) => {
                    let mut winner = if row.request_error_rate >= thresholds.error_floor {
                        d
                    } else {
                        c
                    };
                    winner.evidence.push(Evidence::rule(
                        "dos_cpa_arbitration",
                        format!(
                            "both pipelines matched; error_rate={:.4} decided",
                            row.request_error_rate
                        ),
                    ));
                    winner
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{select_feature_subset, PerspectiveRows, SubsetPurpose};
    use std::collections::BTreeMap;

    fn node(
        id: &str,
        hit: f64,
        legit: f64,
        transfer: f64,
        error: f64,
        pop: f64,
        n: u64,
    ) -> NodeFeatures {
        NodeFeatures {
            node_id: id.to_string(),
            n_requests: n,
            cache_hit_rate: hit,
            legit_ip_cache_hit_rate: legit,
            data_transfer_rate_mbps: transfer,
            request_error_rate: error,
            avg_request_popularity: pop,
            ao_request_rate: BTreeMap::new(),
        }
    }

    /// Healthy fleet plus three numeric outliers: a flooded node, a
    /// polluted node and a suspiciously fast one.
    fn node_fixture() -> Vec<NodeFeatures> {
        let mut rows: Vec<NodeFeatures> = (0..17)
            .map(|i| {
                node(
                    &format!("edge-{i:02}"),
                    0.88 + 0.002 * (i % 5) as f64,
                    0.92 + 0.002 * (i % 3) as f64,
                    0.95 + 0.01 * (i % 4) as f64,
                    0.002 + 0.0002 * (i % 3) as f64,
                    0.97 + 0.001 * (i % 4) as f64,
                    10_000,
                )
            })
            .collect();
        rows.push(node("node-25", 0.21, 0.30, 0.37, 0.61, 0.961, 531_044));
        rows.push(node("node-05", 0.06, 0.08, 0.13, 0.0, 0.905, 2_384));
        rows.push(node("node-fast", 0.99, 0.95, 9.0, 0.0, 0.99, 50));
        rows.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        rows
    }

    fn detect_fixture_nodes() -> Vec<Verdict> {
        let rows = node_fixture();
        let x = select_feature_subset(&PerspectiveRows::Node(&rows), SubsetPurpose::Node).unwrap();
        let forest = IsolationForest::fit(&x, 0.15, 100, 256, 7).unwrap();
        let tuned = TunedForest {
            contamination: 0.15,
            model: forest,
            silhouette: 0.0,
            warnings: vec![],
        };
        let verdicts = detect_abnormal_nodes(&rows, &tuned, &Thresholds::default());
        assert_eq!(verdicts.len(), rows.len());
        verdicts
    }

    fn label_of<'a>(verdicts: &'a [Verdict], id: &str) -> &'a Verdict {
        verdicts.iter().find(|v| v.entity_id == id).unwrap()
    }

    #[test]
    fn flooded_node_is_dos() {
        let verdicts = detect_fixture_nodes();
        let v = label_of(&verdicts, "node-25");
        assert_eq!(v.label, Label::Dos);
        assert!(!v.evidence.is_empty());
    }

    #[test]
    fn polluted_node_is_cpa() {
        let verdicts = detect_fixture_nodes();
        let v = label_of(&verdicts, "node-05");
        assert_eq!(v.label, Label::CpaUnspecified);
    }

    #[test]
    fn fast_outlier_reverts_to_normal() {
        let verdicts = detect_fixture_nodes();
        let v = label_of(&verdicts, "node-fast");
        assert_eq!(v.label, Label::Normal);
        assert!(v.evidence.iter().any(|e| e.feature == "model_flag_reverted"));
    }

    #[test]
    fn verdicts_partition_all_entities() {
        let verdicts = detect_fixture_nodes();
        let rows = node_fixture();
        assert_eq!(verdicts.len(), rows.len());
        for (v, r) in verdicts.iter().zip(&rows) {
            assert_eq!(v.entity_id, r.node_id);
            if v.label.is_abnormal() {
                assert!(!v.evidence.is_empty());
            }
        }
    }

    fn ip(
        id: &str,
        n: u64,
        interval: f64,
        nodes: u64,
        rpc: f64,
        pop: f64,
        hit: f64,
        error: f64,
    ) -> IpFeatures {
        IpFeatures {
            ip: id.to_string(),
            n_requests: n,
            avg_request_interval_s: interval,
            n_nodes: nodes,
            n_contents: (n as f64 / rpc).max(1.0) as u64,
            req_per_content: rpc,
            req_per_node: n as f64 / nodes.max(1) as f64,
            avg_request_popularity: pop,
            cache_hit_rate: hit,
            request_error_rate: error,
            ao_request_rate: BTreeMap::new(),
        }
    }

    /// Mirrors the published cluster shapes: bulk of light clients, a
    /// crowd-like heavy cluster, and the flood cluster.
    #[test]
    fn dos_profile_separates_flood_centroid_from_light_traffic() {
        let thresholds = Thresholds::default();
        let mut rows: Vec<IpFeatures> = (0..200)
            .map(|i| {
                ip(
                    &format!("10.0.{}.{}", i / 250, i % 250),
                    4 + (i % 5) as u64,
                    1.4 + (i % 7) as f64 * 200.0,
                    17 + (i % 9),
                    1.0,
                    0.976,
                    0.925,
                    0.0,
                )
            })
            .collect();
        rows.push(ip("31.13.64.1", 405_607, 0.673, 16, 1.2, 0.998, 0.868, 0.124));
        let columns: HashMap<&str, Vec<f64>> = IP_FEATURES
            .iter()
            .map(|&f| (f, rows.iter().map(|r| ip_value(r, f)).collect()))
            .collect();
        let profile = resolve_profile(&thresholds.ip_dos_profile(), &columns);

        let flood = rows.last().unwrap();
        assert!(profile.matches(&|f: &str| ip_value(flood, f)).is_some());
        let light = &rows[0];
        assert!(profile.matches(&|f: &str| ip_value(light, f)).is_none());
    }

    #[test]
    fn cpa_profile_splits_fla_from_lda_centroids() {
        let thresholds = Thresholds::default();
        // Background population with moderate popularity and tiny
        // req-per-content ratios.
        let mut rows: Vec<IpFeatures> = (0..500)
            .map(|i| {
                ip(
                    &format!("10.1.{}.{}", i / 250, i % 250),
                    100 + (i % 300) as u64,
                    300.0 + (i % 11) as f64 * 90.0,
                    5 + (i % 9),
                    1.0 + (i % 4) as f64 * 0.2,
                    0.5 + 0.001 * (i % 400) as f64,
                    0.9,
                    0.005,
                )
            })
            .collect();
        let fla = ip("41.0.0.1", 4427, 1.0, 2, 769.8, 0.186, 0.856, 0.04);
        let lda = ip("41.0.0.2", 16028, 0.8, 5, 1.1, 0.359, 0.077, 0.019);
        let faint = ip("41.0.0.3", 1, 0.0, 1, 1.0, 0.5, 0.057, 0.019);
        rows.extend([fla.clone(), lda.clone(), faint.clone()]);

        let columns: HashMap<&str, Vec<f64>> = IP_FEATURES
            .iter()
            .map(|&f| (f, rows.iter().map(|r| ip_value(r, f)).collect()))
            .collect();
        let profile = resolve_profile(&thresholds.ip_cpa_profile(), &columns);
        let r_fla =
            crate::normalize::quantile(&columns["req_per_content"], thresholds.fla_split_q);

        assert!(profile.matches(&|f: &str| ip_value(&fla, f)).is_some());
        assert_eq!(cpa_variant(fla.req_per_content, r_fla), Label::CpaFla);
        assert!(profile.matches(&|f: &str| ip_value(&lda, f)).is_some());
        assert_eq!(cpa_variant(lda.req_per_content, r_fla), Label::CpaLda);
        assert!(profile.matches(&|f: &str| ip_value(&faint, f)).is_none());
    }

    fn content(id: &str, n: u64, pop: f64, hit: f64, rpi: f64, rpn: f64) -> ContentFeatures {
        ContentFeatures {
            content_id: id.to_string(),
            n_requests: n,
            popularity: pop,
            cache_hit_rate: hit,
            req_per_ip: rpi,
            req_per_node: rpn,
        }
    }

    #[test]
    fn content_profile_flags_pollution_shape_only() {
        let thresholds = Thresholds::default();
        let mut rows: Vec<ContentFeatures> = (0..300)
            .map(|i| content(&format!("/c/{i}"), 1 + (i % 4) as u64, 0.0, 0.134, 1.0, 1.0))
            .collect();
        // Popular well-served content.
        for i in 0..50 {
            rows.push(content(&format!("/hot/{i}"), 226, 1.0, 0.857, 1.2, 8.2));
        }
        let polluted = content("/atk/1", 1021, 0.254, 0.835, 580.8, 601.2);
        rows.push(polluted.clone());

        let columns: HashMap<&str, Vec<f64>> = CONTENT_FEATURES
            .iter()
            .map(|&f| (f, rows.iter().map(|r| content_value(r, f)).collect()))
            .collect();
        let profile = resolve_profile(&thresholds.content_cpa_profile(), &columns);
        let r_fla = crate::normalize::quantile(&columns["req_per_ip"], thresholds.fla_split_q);

        assert!(profile.matches(&|f: &str| content_value(&polluted, f)).is_some());
        assert_eq!(cpa_variant(polluted.req_per_ip, r_fla), Label::CpaFla);

        let hot = content("/hot/0", 226, 1.0, 0.857, 1.2, 8.2);
        assert!(profile.matches(&|f: &str| content_value(&hot, f)).is_none());
        let cold = content("/c/0", 1, 0.0, 0.134, 1.0, 1.0);
        assert!(profile.matches(&|f: &str| content_value(&cold, f)).is_none());
    }

    #[test]
    fn tune_components_finds_two_planted_clusters() {
        // Two tight blobs; the exhaustive sweep oracle and the tuner
        // must both pick K=2.
        let mut rows = Vec::new();
        for i in 0..120 {
            let (cx, cy) = if i % 2 == 0 { (0.0, 0.0) } else { (10.0, 10.0) };
            rows.push(ip(
                &format!("ip{i}"),
                (cx * 10.0) as u64 + 10 + (i % 3) as u64,
                cy + 1.0 + (i % 5) as f64 * 0.01,
                1,
                1.0,
                0.5,
                0.9,
                0.0,
            ));
        }
        let x = select_feature_subset(&PerspectiveRows::Ip(&rows), SubsetPurpose::DosIp).unwrap();

        let mut params = GmmTuneParams {
            k_lo: 2,
            k_hi: 6,
            bo_budget: 10,
            bo_n_init: 3,
            seed: 5,
            ..Default::default()
        };
        let tuned = tune_components(&x, &params).unwrap();

        // Oracle: exhaustive sweep over the same seeds.
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 2..=6 {
            let fitted = gmm_fit_em(&x, k, params.reg_eps, params.max_iter, params.tol, params.seed.wrapping_add(k as u64)).unwrap();
            let labels: Vec<usize> =
                gmm_assign_all(&fitted, &x).unwrap().into_iter().map(|(c, _)| c).collect();
            let sil = silhouette(&x, &labels, params.silhouette_cap).unwrap_or(-1.0);
            if sil > best.1 {
                best = (k, sil);
            }
        }
        assert_eq!(best.0, 2);
        assert_eq!(tuned.k, 2);

        // Degenerate range short-circuits.
        params.k_lo = 2;
        params.k_hi = 2;
        let fixed = tune_components(&x, &params).unwrap();
        assert_eq!(fixed.k, 2);
    }

    #[test]
    fn tune_contamination_flags_planted_anomalies() {
        let mut rows = node_fixture();
        rows.truncate(17); // keep only the healthy fleet
        for i in 0..45 {
            rows.push(node(
                &format!("extra-{i:02}"),
                0.87 + 0.003 * (i % 4) as f64,
                0.91 + 0.003 * (i % 3) as f64,
                0.93 + 0.012 * (i % 5) as f64,
                0.001 + 0.0004 * (i % 4) as f64,
                0.965 + 0.002 * (i % 5) as f64,
                9_000,
            ));
        }
        rows.truncate(45);
        for i in 0..5 {
            rows.push(node(
                &format!("bad-{i}"),
                0.1 + 0.02 * i as f64,
                0.1,
                0.2,
                0.5,
                0.3,
                100_000,
            ));
        }
        rows.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        let x = select_feature_subset(&PerspectiveRows::Node(&rows), SubsetPurpose::Node).unwrap();
        let tuned = tune_contamination(
            &x,
            &ForestTuneParams {
                seed: 3,
                bo_budget: 20,
                ..Default::default()
            },
            &Thresholds::default(),
        )
        .unwrap();
        assert!(
            tuned.contamination >= 0.06 && tuned.contamination <= 0.2,
            "contamination = {}",
            tuned.contamination
        );
        for (i, r) in rows.iter().enumerate() {
            if r.node_id.starts_with("bad-") {
                assert!(tuned.model.train_flags()[i], "{} not flagged", r.node_id);
            }
        }
    }

    #[test]
    fn tune_contamination_falls_back_on_identical_rows() {
        let rows: Vec<NodeFeatures> =
            (0..10).map(|i| node(&format!("n{i}"), 0.9, 0.9, 1.0, 0.0, 0.9, 100)).collect();
        let x = select_feature_subset(&PerspectiveRows::Node(&rows), SubsetPurpose::Node).unwrap();
        let tuned =
            tune_contamination(&x, &ForestTuneParams::default(), &Thresholds::default()).unwrap();
        assert_eq!(tuned.contamination, 0.1);
        assert!(!tuned.warnings.is_empty());
    }

    #[test]
    fn merge_prefers_dos_when_errors_are_high() {
        let rows = vec![
            ip("bot", 10_000, 0.5, 1, 1.0, 0.05, 0.03, 0.95),
            ip("lda", 10_000, 0.5, 1, 1.5, 0.05, 0.10, 0.0),
        ];
        let mk = |id: &str, label: Label| Verdict {
            entity_id: id.to_string(),
            perspective: Perspective::Ip,
            label,
            stage: Stage::Pattern,
            evidence: vec![Evidence::rule("test", "seed".into())],
            cluster_id: Some(0),
            score: Some(1.0),
        };
        let dos = vec![mk("bot", Label::Dos), mk("lda", Label::Dos)];
        let cpa = vec![mk("bot", Label::CpaLda), mk("lda", Label::CpaLda)];
        let merged = merge_ip_verdicts(dos, cpa, &rows, &Thresholds::default());
        // The flood IP produced errors; the polluter did not.
        assert_eq!(merged[0].label, Label::Dos);
        assert_eq!(merged[1].label, Label::CpaLda);
    }
}
