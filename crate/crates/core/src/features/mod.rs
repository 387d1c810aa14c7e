//! Per-entity feature aggregation over clean records.
//!
//! Every record contributes to exactly one row in each of the four
//! perspectives (content, node, client IP, account offering). All
//! aggregations are order-independent: shuffling the input records
//! changes no feature value.

mod matrix;

pub use matrix::{select_feature_subset, FeatureMatrix, PerspectiveRows, SubsetPurpose};

use crate::access_log::{CleanRecord, ContentType, ServiceType};
use crate::normalize::ColumnStats;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("rows do not match the requested perspective")]
    WrongPerspective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentFeatures {
    pub content_id: String,
    pub n_requests: u64,
    pub popularity: f64,
    pub cache_hit_rate: f64,
    pub req_per_ip: f64,
    pub req_per_node: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub node_id: String,
    pub n_requests: u64,
    pub cache_hit_rate: f64,
    /// Mean per-node hit rate of IPs whose request popularity clears the
    /// legitimacy threshold; 0 when no such IP touched the node.
    pub legit_ip_cache_hit_rate: f64,
    pub data_transfer_rate_mbps: f64,
    pub request_error_rate: f64,
    pub avg_request_popularity: f64,
    /// Share of the node's requests per account offering; sums to 1.
    pub ao_request_rate: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpFeatures {
    pub ip: String,
    pub n_requests: u64,
    /// Mean gap between consecutive requests, seconds; 0 for a single
    /// request.
    pub avg_request_interval_s: f64,
    pub n_nodes: u64,
    pub n_contents: u64,
    pub req_per_content: f64,
    pub req_per_node: f64,
    pub avg_request_popularity: f64,
    pub cache_hit_rate: f64,
    pub request_error_rate: f64,
    pub ao_request_rate: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoFeatures {
    pub ao_id: String,
    pub n_requests: u64,
    pub n_nodes: u64,
    /// Modal service type among the AO's requests.
    pub service_type: ServiceType,
    /// Modal content type among the AO's requests.
    pub content_type: ContentType,
    pub cache_hit_rate: f64,
    pub request_popularity: f64,
}

/// Content popularity: the min-max-normalized count of distinct IPs
/// that requested each content.
pub fn compute_popularity(records: &[CleanRecord]) -> Result<HashMap<String, f64>, FeatureError> {
    if records.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let mut ip_sets: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in records {
        ip_sets.entry(&r.content_url).or_default().insert(&r.ip);
    }
    let counts: Vec<f64> = ip_sets.values().map(|s| s.len() as f64).collect();
    let stats = ColumnStats::fit(&counts);
    Ok(ip_sets
        .into_iter()
        .map(|(c, ips)| (c.to_string(), stats.apply(ips.len() as f64)))
        .collect())
}

/// Per-UTC-day popularity maps, for workflows that want the popularity
/// baseline recomputed daily instead of over the whole window.
pub fn compute_popularity_daily(
    records: &[CleanRecord],
) -> Result<BTreeMap<i64, HashMap<String, f64>>, FeatureError> {
    if records.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let mut by_day: BTreeMap<i64, Vec<&CleanRecord>> = BTreeMap::new();
    for r in records {
        by_day.entry(r.timestamp.div_euclid(86_400)).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (day, day_records) in by_day {
        let owned: Vec<CleanRecord> = day_records.into_iter().cloned().collect();
        out.insert(day, compute_popularity(&owned)?);
    }
    Ok(out)
}

/// Popularity lookup used for request-level averages. The per-content
/// feature always comes from the whole-window map; the optional daily
/// maps only change what each request contributes.
pub struct Popularity {
    pub global: HashMap<String, f64>,
    pub daily: Option<BTreeMap<i64, HashMap<String, f64>>>,
}

impl Popularity {
    pub fn global_only(global: HashMap<String, f64>) -> Self {
        Self { global, daily: None }
    }

    pub fn of_content(&self, content: &str) -> f64 {
        self.global.get(content).copied().unwrap_or(0.0)
    }

    pub fn of_request(&self, r: &CleanRecord) -> f64 {
        if let Some(daily) = &self.daily {
            if let Some(day_map) = daily.get(&r.timestamp.div_euclid(86_400)) {
                return day_map.get(&r.content_url).copied().unwrap_or(0.0);
            }
        }
        self.of_content(&r.content_url)
    }
}

fn sorted_shares(counts: HashMap<String, u64>, total: u64) -> BTreeMap<String, f64> {
    counts
        .into_iter()
        .map(|(k, v)| (k, v as f64 / total.max(1) as f64))
        .collect()
}

pub fn aggregate_by_content(
    records: &[CleanRecord],
    popularity: &Popularity,
) -> Vec<ContentFeatures> {
    struct Acc<'a> {
        n: u64,
        hits: u64,
        ips: HashSet<&'a str>,
        nodes: HashSet<&'a str>,
    }
    let mut acc: HashMap<&str, Acc> = HashMap::new();
    for r in records {
        let a = acc.entry(&r.content_url).or_insert_with(|| Acc {
            n: 0,
            hits: 0,
            ips: HashSet::new(),
            nodes: HashSet::new(),
        });
        a.n += 1;
        a.hits += r.cache_hit as u64;
        a.ips.insert(&r.ip);
        a.nodes.insert(&r.node);
    }
    let mut rows: Vec<ContentFeatures> = acc
        .into_iter()
        .map(|(content, a)| ContentFeatures {
            content_id: content.to_string(),
            n_requests: a.n,
            popularity: popularity.of_content(content),
            cache_hit_rate: a.hits as f64 / a.n as f64,
            req_per_ip: a.n as f64 / a.ips.len() as f64,
            req_per_node: a.n as f64 / a.nodes.len() as f64,
        })
        .collect();
    rows.sort_by(|a, b| a.content_id.cmp(&b.content_id));
    rows
}

pub fn aggregate_by_ip(records: &[CleanRecord], popularity: &Popularity) -> Vec<IpFeatures> {
    struct Acc<'a> {
        n: u64,
        hits: u64,
        errors: u64,
        pop_sum: f64,
        t_min: i64,
        t_max: i64,
        nodes: HashSet<&'a str>,
        contents: HashSet<&'a str>,
        aos: HashMap<String, u64>,
    }
    let mut acc: HashMap<&str, Acc> = HashMap::new();
    for r in records {
        let a = acc.entry(&r.ip).or_insert_with(|| Acc {
            n: 0,
            hits: 0,
            errors: 0,
            pop_sum: 0.0,
            t_min: i64::MAX,
            t_max: i64::MIN,
            nodes: HashSet::new(),
            contents: HashSet::new(),
            aos: HashMap::new(),
        });
        a.n += 1;
        a.hits += r.cache_hit as u64;
        a.errors += r.is_error() as u64;
        a.pop_sum += popularity.of_request(r);
        a.t_min = a.t_min.min(r.timestamp);
        a.t_max = a.t_max.max(r.timestamp);
        a.nodes.insert(&r.node);
        a.contents.insert(&r.content_url);
        *a.aos.entry(r.account_offering.clone()).or_insert(0) += 1;
    }
    let mut rows: Vec<IpFeatures> = acc
        .into_iter()
        .map(|(ip, a)| {
            // The mean of consecutive sorted gaps telescopes to
            // (last - first) / (n - 1).
            let interval = if a.n > 1 {
                (a.t_max - a.t_min) as f64 / (a.n - 1) as f64
            } else {
                0.0
            };
            IpFeatures {
                ip: ip.to_string(),
                n_requests: a.n,
                avg_request_interval_s: interval,
                n_nodes: a.nodes.len() as u64,
                n_contents: a.contents.len() as u64,
                req_per_content: a.n as f64 / a.contents.len() as f64,
                req_per_node: a.n as f64 / a.nodes.len() as f64,
                avg_request_popularity: a.pop_sum / a.n as f64,
                cache_hit_rate: a.hits as f64 / a.n as f64,
                request_error_rate: a.errors as f64 / a.n as f64,
                ao_request_rate: sorted_shares(a.aos, a.n),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.ip.cmp(&b.ip));
    rows
}

/// Node aggregation. `ip_features` supplies the set of legitimate IPs
/// (request popularity at or above `legit_popularity`), whose per-node
/// hit rates feed `legit_ip_cache_hit_rate`.
pub fn aggregate_by_node(
    records: &[CleanRecord],
    popularity: &Popularity,
    ip_features: &[IpFeatures],
    legit_popularity: f64,
) -> Vec<NodeFeatures> {
    let legit_ips: HashSet<&str> = ip_features
        .iter()
        .filter(|f| f.avg_request_popularity >= legit_popularity)
        .map(|f| f.ip.as_str())
        .collect();

    struct Acc {
        n: u64,
        hits: u64,
        errors: u64,
        bytes: u64,
        delivery_ms: u64,
        pop_sum: f64,
        aos: HashMap<String, u64>,
        legit: HashMap<String, (u64, u64)>,
    }
    let mut acc: HashMap<&str, Acc> = HashMap::new();
    for r in records {
        let a = acc.entry(&r.node).or_insert_with(|| Acc {
            n: 0,
            hits: 0,
            errors: 0,
            bytes: 0,
            delivery_ms: 0,
            pop_sum: 0.0,
            aos: HashMap::new(),
            legit: HashMap::new(),
        });
        a.n += 1;
        a.hits += r.cache_hit as u64;
        a.errors += r.is_error() as u64;
        a.bytes += r.bytes;
        a.delivery_ms += r.delivery_time_ms;
        a.pop_sum += popularity.of_request(r);
        *a.aos.entry(r.account_offering.clone()).or_insert(0) += 1;
        if legit_ips.contains(r.ip.as_str()) {
            let slot = a.legit.entry(r.ip.clone()).or_insert((0, 0));
            slot.0 += r.cache_hit as u64;
            slot.1 += 1;
        }
    }
    let mut rows: Vec<NodeFeatures> = acc
        .into_iter()
        .map(|(node, a)| {
            let legit_rate = if a.legit.is_empty() {
                0.0
            } else {
                a.legit.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>()
                    / a.legit.len() as f64
            };
            let transfer = if a.delivery_ms == 0 {
                0.0
            } else {
                (a.bytes as f64 / 1e6) / (a.delivery_ms as f64 / 1e3)
            };
            NodeFeatures {
                node_id: node.to_string(),
                n_requests: a.n,
                cache_hit_rate: a.hits as f64 / a.n as f64,
                legit_ip_cache_hit_rate: legit_rate,
                data_transfer_rate_mbps: transfer,
                request_error_rate: a.errors as f64 / a.n as f64,
                avg_request_popularity: a.pop_sum / a.n as f64,
                ao_request_rate: sorted_shares(a.aos, a.n),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    rows
}

pub fn aggregate_by_ao(records: &[CleanRecord], popularity: &Popularity) -> Vec<AoFeatures> {
    struct Acc<'a> {
        n: u64,
        hits: u64,
        pop_sum: f64,
        nodes: HashSet<&'a str>,
        services: HashMap<ServiceType, u64>,
        contents: HashMap<ContentType, u64>,
    }
    let mut acc: HashMap<&str, Acc> = HashMap::new();
    for r in records {
        let a = acc.entry(&r.account_offering).or_insert_with(|| Acc {
            n: 0,
            hits: 0,
            pop_sum: 0.0,
            nodes: HashSet::new(),
            services: HashMap::new(),
            contents: HashMap::new(),
        });
        a.n += 1;
        a.hits += r.cache_hit as u64;
        a.pop_sum += popularity.of_request(r);
        a.nodes.insert(&r.node);
        *a.services.entry(r.service_type).or_insert(0) += 1;
        *a.contents.entry(r.content_type).or_insert(0) += 1;
    }
    fn modal<T: Copy + Ord>(counts: &HashMap<T, u64>) -> T {
        // Highest count, ties broken by the enum's ordering.
        let mut pairs: Vec<(&T, &u64)> = counts.iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        *pairs[0].0
    }
    let mut rows: Vec<AoFeatures> = acc
        .into_iter()
        .map(|(ao, a)| AoFeatures {
            ao_id: ao.to_string(),
            n_requests: a.n,
            n_nodes: a.nodes.len() as u64,
            service_type: modal(&a.services),
            content_type: modal(&a.contents),
            cache_hit_rate: a.hits as f64 / a.n as f64,
            request_popularity: a.pop_sum / a.n as f64,
        })
        .collect();
    rows.sort_by(|a, b| a.ao_id.cmp(&b.ao_id));
    rows
}

/// All four perspectives built from one record set.
pub struct FeatureTables {
    pub popularity: Popularity,
    pub contents: Vec<ContentFeatures>,
    pub nodes: Vec<NodeFeatures>,
    pub ips: Vec<IpFeatures>,
    pub aos: Vec<AoFeatures>,
}

pub fn build_all(
    records: &[CleanRecord],
    legit_popularity: f64,
    daily_popularity: bool,
) -> Result<FeatureTables, FeatureError> {
    let global = compute_popularity(records)?;
    let daily = if daily_popularity {
        Some(compute_popularity_daily(records)?)
    } else {
        None
    };
    let popularity = Popularity { global, daily };
    let contents = aggregate_by_content(records, &popularity);
    let ips = aggregate_by_ip(records, &popularity);
    let nodes = aggregate_by_node(records, &popularity, &ips, legit_popularity);
    let aos = aggregate_by_ao(records, &popularity);
    Ok(FeatureTables {
        popularity,
        contents,
        nodes,
        ips,
        aos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access_log::HttpMethod;

    pub(crate) fn record(
        ip: &str,
        ts: i64,
        status: u16,
        bytes: u64,
        delivery_ms: u64,
        hit: bool,
        node: &str,
        ao: &str,
        content: &str,
    ) -> CleanRecord {
        CleanRecord {
            ip: ip.to_string(),
            timestamp: ts,
            http_method: HttpMethod::Get,
            status_code: status,
            bytes,
            delivery_time_ms: delivery_ms,
            service_type: ServiceType::Static,
            cache_hit: hit,
            node: node.to_string(),
            account_offering: ao.to_string(),
            content_url: content.to_string(),
            content_type: ContentType::Image,
        }
    }

    #[test]
    fn single_content_has_zero_popularity() {
        let records = vec![record("a", 1, 200, 1, 1, true, "n1", "ao", "/c")];
        let pop = compute_popularity(&records).unwrap();
        assert_eq!(pop["/c"], 0.0);
    }

    #[test]
    fn popularity_normalizes_distinct_ip_counts() {
        let mut records = Vec::new();
        // /a: 1 ip, /b: 5 ips, /c: 9 ips.
        records.push(record("ip0", 1, 200, 1, 1, true, "n", "ao", "/a"));
        for i in 0..5 {
            records.push(record(&format!("ip{i}"), 1, 200, 1, 1, true, "n", "ao", "/b"));
        }
        for i in 0..9 {
            records.push(record(&format!("ip{i}"), 1, 200, 1, 1, true, "n", "ao", "/c"));
        }
        let pop = compute_popularity(&records).unwrap();
        assert_eq!(pop["/a"], 0.0);
        assert_eq!(pop["/b"], 0.5);
        assert_eq!(pop["/c"], 1.0);
    }

    #[test]
    fn popularity_rejects_empty_input() {
        assert_eq!(compute_popularity(&[]).unwrap_err(), FeatureError::EmptyInput);
    }

    #[test]
    fn content_ratios_follow_distinct_counts() {
        let records = vec![
            record("ip1", 1, 200, 1, 1, true, "n1", "ao", "/x"),
            record("ip1", 2, 200, 1, 1, true, "n1", "ao", "/x"),
            record("ip2", 3, 200, 1, 1, true, "n1", "ao", "/x"),
            record("ip2", 4, 200, 1, 1, false, "n1", "ao", "/x"),
        ];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let rows = aggregate_by_content(&records, &pop);
        assert_eq!(rows.len(), 1);
        let c = &rows[0];
        assert_eq!(c.n_requests, 4);
        assert_eq!(c.req_per_ip, 2.0);
        assert_eq!(c.req_per_node, 4.0);
        assert_eq!(c.cache_hit_rate, 0.75);
    }

    #[test]
    fn node_rates_and_transfer() {
        // 1 MB in 1 s each; one hit/200, one miss/404.
        let records = vec![
            record("ip1", 1, 200, 1_000_000, 1000, true, "n1", "ao", "/a"),
            record("ip2", 2, 404, 1_000_000, 1000, false, "n1", "ao", "/b"),
        ];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let ips = aggregate_by_ip(&records, &pop);
        let nodes = aggregate_by_node(&records, &pop, &ips, 0.9);
        assert_eq!(nodes.len(), 1);
        let n = &nodes[0];
        assert_eq!(n.cache_hit_rate, 0.5);
        assert_eq!(n.request_error_rate, 0.5);
        assert!((n.data_transfer_rate_mbps - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ip_interval_is_mean_consecutive_gap() {
        let records = vec![
            record("ip1", 0, 200, 1, 1, true, "n1", "ao", "/a"),
            record("ip1", 10, 200, 1, 1, true, "n1", "ao", "/b"),
            record("ip1", 30, 200, 1, 1, true, "n2", "ao", "/a"),
        ];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let rows = aggregate_by_ip(&records, &pop);
        let ip = &rows[0];
        assert_eq!(ip.avg_request_interval_s, 15.0);
        assert_eq!(ip.n_nodes, 2);
        assert_eq!(ip.n_contents, 2);
        assert_eq!(ip.req_per_content, 1.5);
    }

    #[test]
    fn single_request_ip_has_zero_interval() {
        let records = vec![record("ip1", 100, 200, 1, 1, true, "n1", "ao", "/a")];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let rows = aggregate_by_ip(&records, &pop);
        assert_eq!(rows[0].avg_request_interval_s, 0.0);
        assert_eq!(rows[0].n_requests, 1);
    }

    #[test]
    fn ao_with_one_request() {
        let records = vec![record("ip1", 1, 200, 1, 1, true, "n1", "ao-9", "/a")];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let rows = aggregate_by_ao(&records, &pop);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n_requests, 1);
        assert_eq!(rows[0].n_nodes, 1);
    }

    #[test]
    fn static_ao_full_hits_top_popularity() {
        // Everything through one AO, all hits, on the most popular content.
        let mut records: Vec<CleanRecord> = (0..4)
            .map(|i| record(&format!("ip{i}"), i, 200, 1, 1, true, "n1", "ao-1", "/top"))
            .collect();
        records.push(record("ip0", 9, 200, 1, 1, true, "n1", "ao-1", "/rare"));
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let rows = aggregate_by_ao(&records, &pop);
        let ao = rows.iter().find(|a| a.ao_id == "ao-1").unwrap();
        assert_eq!(ao.cache_hit_rate, 1.0);
        assert_eq!(ao.service_type, ServiceType::Static);
        assert!((ao.request_popularity - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ao_shares_sum_to_one() {
        let records = vec![
            record("ip1", 1, 200, 1, 1, true, "n1", "ao-1", "/a"),
            record("ip2", 2, 200, 1, 1, true, "n1", "ao-1", "/b"),
            record("ip3", 3, 200, 1, 1, true, "n1", "ao-2", "/c"),
        ];
        let pop = Popularity::global_only(compute_popularity(&records).unwrap());
        let ips = aggregate_by_ip(&records, &pop);
        let nodes = aggregate_by_node(&records, &pop, &ips, 0.9);
        let total: f64 = nodes[0].ao_request_rate.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!((nodes[0].ao_request_rate["ao-1"] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn request_totals_partition_across_perspectives() {
        let mut records = Vec::new();
        for i in 0..50 {
            records.push(record(
                &format!("ip{}", i % 7),
                i,
                if i % 9 == 0 { 404 } else { 200 },
                100,
                10,
                i % 3 == 0,
                &format!("n{}", i % 4),
                &format!("ao{}", i % 2),
                &format!("/c{}", i % 11),
            ));
        }
        let tables = build_all(&records, 0.9, false).unwrap();
        let total = records.len() as u64;
        assert_eq!(tables.contents.iter().map(|c| c.n_requests).sum::<u64>(), total);
        assert_eq!(tables.nodes.iter().map(|n| n.n_requests).sum::<u64>(), total);
        assert_eq!(tables.ips.iter().map(|i| i.n_requests).sum::<u64>(), total);
        assert_eq!(tables.aos.iter().map(|a| a.n_requests).sum::<u64>(), total);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut records = Vec::new();
        for i in 0..40 {
            records.push(record(
                &format!("ip{}", i % 5),
                (i * 13) % 97,
                200,
                50 + i as u64,
                5,
                i % 2 == 0,
                &format!("n{}", i % 3),
                "ao",
                &format!("/c{}", i % 6),
            ));
        }
        let forward = build_all(&records, 0.9, false).unwrap();
        records.reverse();
        let reversed = build_all(&records, 0.9, false).unwrap();
        assert_eq!(forward.contents, reversed.contents);
        assert_eq!(forward.ips, reversed.ips);
        assert_eq!(forward.nodes, reversed.nodes);
        assert_eq!(forward.aos, reversed.aos);
    }
}
