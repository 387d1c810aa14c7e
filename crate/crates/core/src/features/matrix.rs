//! Rectangular, normalized feature matrices fed to the models.

use super::{ContentFeatures, FeatureError, IpFeatures, NodeFeatures};
use crate::normalize::ColumnStats;
use serde::{Deserialize, Serialize};

/// Named columns of equal length, min-max normalized, with the fit
/// stats kept alongside so raw values can be recovered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub entity_ids: Vec<String>,
    pub column_names: Vec<String>,
    pub stats: Vec<ColumnStats>,
    /// Row-major normalized values, `n_rows * n_cols`.
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl FeatureMatrix {
    /// Builds from raw columns: fits per-column stats, then scales.
    pub fn from_raw_columns(
        entity_ids: Vec<String>,
        named_columns: Vec<(&str, Vec<f64>)>,
    ) -> Self {
        let n_rows = entity_ids.len();
        let n_cols = named_columns.len();
        let mut column_names = Vec::with_capacity(n_cols);
        let mut stats = Vec::with_capacity(n_cols);
        let mut data = vec![0.0; n_rows * n_cols];
        for (j, (name, col)) in named_columns.into_iter().enumerate() {
            assert_eq!(col.len(), n_rows, "ragged column {name}");
            let st = ColumnStats::fit(&col);
            for (i, &v) in col.iter().enumerate() {
                data[i * n_cols + j] = st.apply(v);
            }
            column_names.push(name.to_string());
            stats.push(st);
        }
        Self {
            entity_ids,
            column_names,
            stats,
            data,
            n_rows,
            n_cols,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.data[i * self.n_cols + j]).collect()
    }

    /// Recovers the raw (pre-normalization) value at (i, j).
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.stats[j].invert(self.data[i * self.n_cols + j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetPurpose {
    DosIp,
    CpaIp,
    Node,
    Content,
}

/// Rows from one perspective, borrowed for subset selection.
pub enum PerspectiveRows<'a> {
    Content(&'a [ContentFeatures]),
    Node(&'a [NodeFeatures]),
    Ip(&'a [IpFeatures]),
}

/// Picks the model feature subset for a purpose and normalizes it.
///
/// DoS IP detection clusters on request volume, per-node concentration
/// and request interval; CPA IP detection on volume, per-content
/// concentration and popularity. Node and content matrices carry all
/// numeric columns of their row type.
pub fn select_feature_subset(
    rows: &PerspectiveRows<'_>,
    purpose: SubsetPurpose,
) -> Result<FeatureMatrix, FeatureError> {
    match (rows, purpose) {
        (PerspectiveRows::Ip(ips), SubsetPurpose::DosIp) => {
            let ids = ips.iter().map(|r| r.ip.clone()).collect();
            Ok(FeatureMatrix::from_raw_columns(
                ids,
                vec![
                    ("n_requests", ips.iter().map(|r| r.n_requests as f64).collect()),
                    ("req_per_node", ips.iter().map(|r| r.req_per_node).collect()),
                    (
                        "avg_request_interval_s",
                        ips.iter().map(|r| r.avg_request_interval_s).collect(),
                    ),
                ],
            ))
        }
        (PerspectiveRows::Ip(ips), SubsetPurpose::CpaIp) => {
            let ids = ips.iter().map(|r| r.ip.clone()).collect();
            Ok(FeatureMatrix::from_raw_columns(
                ids,
                vec![
                    ("n_requests", ips.iter().map(|r| r.n_requests as f64).collect()),
                    ("req_per_content", ips.iter().map(|r| r.req_per_content).collect()),
                    (
                        "avg_request_popularity",
                        ips.iter().map(|r| r.avg_request_popularity).collect(),
                    ),
                ],
            ))
        }
        (PerspectiveRows::Node(nodes), SubsetPurpose::Node) => {
            let ids = nodes.iter().map(|r| r.node_id.clone()).collect();
            Ok(FeatureMatrix::from_raw_columns(
                ids,
                vec![
                    ("cache_hit_rate", nodes.iter().map(|r| r.cache_hit_rate).collect()),
                    (
                        "legit_ip_cache_hit_rate",
                        nodes.iter().map(|r| r.legit_ip_cache_hit_rate).collect(),
                    ),
                    (
                        "data_transfer_rate_mbps",
                        nodes.iter().map(|r| r.data_transfer_rate_mbps).collect(),
                    ),
                    (
                        "request_error_rate",
                        nodes.iter().map(|r| r.request_error_rate).collect(),
                    ),
                    (
                        "avg_request_popularity",
                        nodes.iter().map(|r| r.avg_request_popularity).collect(),
                    ),
                ],
            ))
        }
        (PerspectiveRows::Content(contents), SubsetPurpose::Content) => {
            let ids = contents.iter().map(|r| r.content_id.clone()).collect();
            Ok(FeatureMatrix::from_raw_columns(
                ids,
                vec![
                    (
                        "n_requests",
                        contents.iter().map(|r| r.n_requests as f64).collect(),
                    ),
                    ("popularity", contents.iter().map(|r| r.popularity).collect()),
                    (
                        "cache_hit_rate",
                        contents.iter().map(|r| r.cache_hit_rate).collect(),
                    ),
                    ("req_per_ip", contents.iter().map(|r| r.req_per_ip).collect()),
                    ("req_per_node", contents.iter().map(|r| r.req_per_node).collect()),
                ],
            ))
        }
        _ => Err(FeatureError::WrongPerspective),
    }
}
