//! Event generation and log emission.

use super::cache::LruCache;
use super::{
    AttackScenario, GroundTruth, ScenarioKind, SynthError, TruthWindow, WorkloadConfig,
};
use crate::detection::Label;
use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Zipf};
use std::collections::HashMap;

/// What a single simulated request asks for.
#[derive(Debug, Clone)]
enum Target {
    /// Catalog content by popularity rank (0 = most popular).
    Catalog(u32),
    /// Generated attack content: (scenario index, object index).
    Generated(usize, u32),
    /// Unique nonexistent URL: (scenario index, sequence).
    Missing(usize, u64),
}

#[derive(Debug, Clone)]
struct Event {
    t: f64,
    seq: u64,
    ip: String,
    node: u32,
    target: Target,
    source: Option<usize>, // scenario index; None = legitimate
}

/// Deterministic per-content metadata derived from a small hash.
fn mix(seed: u64) -> u64 {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x2545_f491_4f6c_dd1d);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

struct Catalog<'a> {
    config: &'a WorkloadConfig,
}

impl Catalog<'_> {
    fn url(&self, rank: u32) -> String {
        format!("/content/{rank:06}")
    }

    /// Account offering by popularity band: the head of the catalog is
    /// served by the big static offerings, the middle by a secondary
    /// static one and the live streams, and the deep tail is the
    /// progressive-download archive.
    fn ao(&self, rank: u32) -> (&'static str, &'static str, &'static str) {
        let n = self.config.n_contents as f64;
        let frac = rank as f64 / n;
        let h = mix(rank as u64 ^ 0xa0);
        if frac < 0.3 {
            let which = ["ao-1", "ao-2", "ao-3", "ao-4"][(h % 4) as usize];
            (which, "static", if h % 3 == 0 { "text" } else { "image" })
        } else if frac < 0.6 {
            ("ao-8", "static", "image")
        } else if frac < 0.9 {
            let which = if h % 2 == 0 { "ao-6" } else { "ao-7" };
            (which, "live_streaming", "video")
        } else {
            ("ao-5", "progressive_download", "video")
        }
    }

    fn bytes(&self, rank: u32) -> u64 {
        let (_, _, ctype) = self.ao(rank);
        let h = mix(rank as u64 ^ 0xb1);
        match ctype {
            "video" => 500_000 + h % 4_000_000,
            "image" => 20_000 + h % 300_000,
            _ => 2_000 + h % 50_000,
        }
    }
}

fn generated_url(scenario: usize, object: u32) -> String {
    format!("/archive/s{scenario}/obj{object:06}")
}

fn missing_url(scenario: usize, seq: u64) -> String {
    format!("/missing/s{scenario}/{seq:08x}")
}

fn generated_bytes(scenario: usize, object: u32) -> u64 {
    200_000 + mix((scenario as u64) << 32 | object as u64) % 1_800_000
}

fn legit_ip(i: u32) -> String {
    format!("10.{}.{}.{}", (i >> 16) & 0xff, (i >> 8) & 0xff, i & 0xff)
}

fn actor_ip(kind: ScenarioKind, scenario: usize, attacker: u32) -> String {
    // Benchmark range for attack actors, a distinct block for crowds.
    let block = match kind {
        ScenarioKind::Crowd => 19,
        _ => 18,
    };
    format!(
        "198.{}.{}.{}",
        block,
        (scenario as u32 * 8 + (attacker >> 8)) & 0xff,
        attacker & 0xff
    )
}

fn node_name(i: u32) -> String {
    format!("edge-{i:02}")
}

fn clf_time(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0)
        .expect("valid epoch")
        .format("%d/%b/%Y:%H:%M:%S +0000")
        .to_string()
}

/// Generates the labeled workload: combined-format lines sorted by
/// timestamp, plus ground truth covering every entity in the log.
pub fn generate_log(
    config: &WorkloadConfig,
    scenarios: &[AttackScenario],
) -> Result<(Vec<String>, GroundTruth), SynthError> {
    super::validate_scenarios(config, scenarios)?;
    let start_epoch = config.start_epoch()?;
    let span = config.span_seconds() as f64;
    let catalog = Catalog { config };

    let mut events: Vec<Event> = Vec::new();
    let mut seq = 0u64;

    // Legitimate traffic: one Poisson stream over all clients, content
    // by Zipf rank, node mostly the client's home with some spillover.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1e61));
        let exp = Exp::new(config.base_rate / 3600.0)
            .map_err(|e| SynthError::ConfigInvalid(format!("bad base rate: {e}")))?;
        let zipf = Zipf::new(config.n_contents as f64, config.zipf_s)
            .map_err(|e| SynthError::ConfigInvalid(format!("bad zipf exponent: {e}")))?;
        let mut t = exp.sample(&mut rng);
        while t < span {
            let ip_idx = rng.random_range(0..config.n_ips);
            let rank = (zipf.sample(&mut rng) as u32).saturating_sub(1).min(config.n_contents - 1);
            let home = (mix(ip_idx as u64) % config.n_nodes as u64) as u32;
            let node = if config.n_nodes > 1 && rng.random::<f64>() < 0.1 {
                let hop = 1 + rng.random_range(0..config.n_nodes - 1);
                (home + hop) % config.n_nodes
            } else {
                home
            };
            events.push(Event {
                t,
                seq,
                ip: legit_ip(ip_idx),
                node,
                target: Target::Catalog(rank),
                source: None,
            });
            seq += 1;
            t += exp.sample(&mut rng);
        }
    }

    // Scenario traffic: an independent Poisson stream per actor.
    let mut missing_seq = 0u64;
    for (si, scenario) in scenarios.iter().enumerate() {
        let w_start = scenario.start_hour * 3600.0;
        let w_end = w_start + scenario.duration_hours * 3600.0;
        for a in 0..scenario.n_attackers {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ mix(0x5ce0 + si as u64) ^ mix(0xac70 + a as u64),
            );
            let exp = Exp::new(scenario.rate_per_attacker)
                .map_err(|e| SynthError::ConfigInvalid(format!("bad attacker rate: {e}")))?;
            let node =
                scenario.target_nodes[(mix(a as u64) % scenario.target_nodes.len() as u64) as usize];
            let ip = actor_ip(scenario.kind, si, a);
            let crowd_zipf = Zipf::new(100.0_f64.min(config.n_contents as f64), 1.1).unwrap();
            let mut t = w_start + exp.sample(&mut rng);
            while t < w_end {
                let target = match scenario.kind {
                    ScenarioKind::Lda => {
                        Target::Generated(si, rng.random_range(0..scenario.target_contents))
                    }
                    ScenarioKind::Fla => {
                        Target::Generated(si, rng.random_range(0..scenario.target_contents))
                    }
                    ScenarioKind::Crowd => {
                        let rank = (crowd_zipf.sample(&mut rng) as u32).saturating_sub(1);
                        Target::Catalog(rank.min(config.n_contents - 1))
                    }
                    ScenarioKind::Dos | ScenarioKind::Ddos => {
                        if rng.random::<f64>() < scenario.error_fraction {
                            missing_seq += 1;
                            Target::Missing(si, missing_seq)
                        } else {
                            let rank = (crowd_zipf.sample(&mut rng) as u32).saturating_sub(1);
                            Target::Catalog(rank.min(config.n_contents - 1))
                        }
                    }
                };
                events.push(Event {
                    t,
                    seq,
                    ip: ip.clone(),
                    node,
                    target,
                    source: Some(si),
                });
                seq += 1;
                t += exp.sample(&mut rng);
            }
        }
    }

    events.sort_by(|a, b| {
        a.t.partial_cmp(&b.t).expect("finite event times").then(a.seq.cmp(&b.seq))
    });

    // Replay through per-node LRU caches and emit lines.
    let mut caches: Vec<LruCache> =
        (0..config.n_nodes).map(|_| LruCache::new(config.cache_capacity)).collect();
    let mut content_keys: HashMap<String, u32> = HashMap::new();
    let mut delivery_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xde11));
    let hit_rate_mbps = Normal::<f64>::new(1.2, 0.15).unwrap();
    let miss_rate_mbps = Normal::<f64>::new(0.8, 0.12).unwrap();

    let mut truth = GroundTruth::default();
    for i in 0..config.n_nodes {
        truth.node_labels.insert(node_name(i), Label::Normal);
    }
    for (si, s) in scenarios.iter().enumerate() {
        let (ws, we) = s.window_epochs(config)?;
        truth.attack_windows.push(TruthWindow {
            kind: s.kind,
            start: ws,
            end: we,
            target_nodes: s.target_nodes.iter().map(|&n| node_name(n)).collect(),
        });
        let label = s.kind.truth_label();
        if label.is_abnormal() {
            for &n in &s.target_nodes {
                let slot = truth.node_labels.get_mut(&node_name(n)).expect("node exists");
                if *slot == Label::Normal {
                    *slot = label;
                }
            }
        }
        let _ = si;
    }

    let mut lines = Vec::with_capacity(events.len());
    for ev in &events {
        let epoch = start_epoch + ev.t as i64;
        let scenario_label =
            ev.source.map(|si| scenarios[si].kind.truth_label()).unwrap_or(Label::Normal);

        let (url, bytes, status, ao, service, ctype) = match &ev.target {
            Target::Catalog(rank) => {
                let (ao, service, ctype) = catalog.ao(*rank);
                (catalog.url(*rank), catalog.bytes(*rank), 200u16, ao, service, ctype)
            }
            Target::Generated(si, obj) => (
                generated_url(*si, *obj),
                generated_bytes(*si, *obj),
                200u16,
                "ao-8",
                "static",
                "video",
            ),
            Target::Missing(si, s) => {
                let ao = ["ao-6", "ao-7", "ao-8"][(s % 3) as usize];
                (missing_url(*si, *s), 500u64, 404u16, ao, "live_streaming", "other")
            }
        };

        let next_key = content_keys.len() as u32;
        let key = *content_keys.entry(url.clone()).or_insert(next_key);
        let cacheable = status == 200;
        let hit = cacheable && caches[ev.node as usize].access(key);

        let delivery_ms = if status == 404 {
            150 + (mix(ev.seq) % 300) as u64
        } else {
            let mbps = if hit {
                hit_rate_mbps.sample(&mut delivery_rng).clamp(0.6, 2.0)
            } else {
                miss_rate_mbps.sample(&mut delivery_rng).clamp(0.4, 1.5)
            };
            ((bytes as f64 / 1e6) / mbps * 1000.0).max(1.0) as u64
        };

        let node = node_name(ev.node);
        lines.push(format!(
            "{} - - [{}] \"GET {} HTTP/1.1\" {} {} {} {} {} {} {} {}",
            ev.ip,
            clf_time(epoch),
            url,
            status,
            bytes,
            delivery_ms,
            service,
            if hit { "hit" } else { "miss" },
            node,
            ao,
            ctype,
        ));

        let ip_slot = truth.ip_labels.entry(ev.ip.clone()).or_insert(Label::Normal);
        if scenario_label.is_abnormal() {
            *ip_slot = scenario_label;
        }
        let content_slot = truth.content_labels.entry(url).or_insert(Label::Normal);
        if scenario_label.is_abnormal() && !matches!(ev.target, Target::Catalog(_)) {
            *content_slot = scenario_label;
        }
    }

    Ok((lines, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access_log::{parse_log_line, LogSchema};
    use std::collections::HashSet;

    fn small_config() -> WorkloadConfig {
        WorkloadConfig {
            n_days: 1,
            n_nodes: 3,
            n_contents: 500,
            n_ips: 80,
            zipf_s: 1.0,
            base_rate: 2_000.0,
            cache_capacity: 60,
            seed: 7,
            start_time: "2026-01-05T00:00:00Z".to_string(),
        }
    }

    fn ddos() -> AttackScenario {
        AttackScenario {
            kind: ScenarioKind::Ddos,
            start_hour: 10.0,
            duration_hours: 2.0,
            n_attackers: 10,
            rate_per_attacker: 0.5,
            target_nodes: vec![1],
            target_contents: 0,
            error_fraction: 0.95,
        }
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let config = small_config();
        let scenarios = vec![ddos()];
        let (a, _) = generate_log(&config, &scenarios).unwrap();
        let (b, _) = generate_log(&config, &scenarios).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lines_parse_with_the_default_schema_and_are_sorted() {
        let (lines, _) = generate_log(&small_config(), &[]).unwrap();
        assert!(!lines.is_empty());
        let schema = LogSchema::default();
        let mut prev = i64::MIN;
        for line in &lines {
            let parsed = parse_log_line(line, &schema).unwrap();
            assert!(parsed.record.timestamp >= prev);
            prev = parsed.record.timestamp;
        }
    }

    #[test]
    fn attack_free_log_labels_everything_normal() {
        let (_, truth) = generate_log(&small_config(), &[]).unwrap();
        assert!(truth.ip_labels.values().all(|&l| l == Label::Normal));
        assert!(truth.node_labels.values().all(|&l| l == Label::Normal));
        assert!(truth.content_labels.values().all(|&l| l == Label::Normal));
        assert!(truth.attack_windows.is_empty());
    }

    #[test]
    fn truth_covers_exactly_the_entities_in_the_log() {
        let config = small_config();
        let (lines, truth) = generate_log(&config, &[ddos()]).unwrap();
        let schema = LogSchema::default();
        let mut ips = HashSet::new();
        let mut contents = HashSet::new();
        let mut nodes = HashSet::new();
        for line in &lines {
            let r = parse_log_line(line, &schema).unwrap().record;
            ips.insert(r.ip);
            contents.insert(r.content_url);
            nodes.insert(r.node);
        }
        let truth_ips: HashSet<String> = truth.ip_labels.keys().cloned().collect();
        let truth_contents: HashSet<String> = truth.content_labels.keys().cloned().collect();
        assert_eq!(ips, truth_ips);
        assert_eq!(contents, truth_contents);
        // Every node in the log is labeled (idle nodes may also carry a
        // normal label).
        assert!(nodes.iter().all(|n| truth.node_labels.contains_key(n)));
        // Bots are labeled dos and appear in the log.
        let bots: Vec<&String> =
            truth.ip_labels.iter().filter(|(_, &l)| l == Label::Dos).map(|(ip, _)| ip).collect();
        assert_eq!(bots.len(), 10);
        assert!(bots.iter().all(|b| ips.contains(b.as_str())));
    }

    #[test]
    fn ddos_drops_victim_hit_rate_inside_window() {
        let config = small_config();
        let scenario = ddos();
        let (lines, _) = generate_log(&config, &[scenario.clone()]).unwrap();
        let schema = LogSchema::default();
        let (w_start, w_end) = scenario.window_epochs(&config).unwrap();

        let mut inside = (0u64, 0u64);
        let mut outside_hours: HashMap<i64, (u64, u64)> = HashMap::new();
        for line in &lines {
            let r = parse_log_line(line, &schema).unwrap().record;
            if r.node != "edge-01" {
                continue;
            }
            if r.timestamp >= w_start && r.timestamp < w_end {
                inside.0 += r.cache_hit as u64;
                inside.1 += 1;
            } else {
                let slot = outside_hours.entry(r.timestamp.div_euclid(3600)).or_insert((0, 0));
                slot.0 += r.cache_hit as u64;
                slot.1 += 1;
            }
        }
        let inside_rate = inside.0 as f64 / inside.1 as f64;
        let mut outside_rates: Vec<f64> =
            outside_hours.values().map(|&(h, n)| h as f64 / n as f64).collect();
        outside_rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let outside_median = outside_rates[outside_rates.len() / 2];
        assert!(
            outside_median - inside_rate > 0.15,
            "median {outside_median:.3} vs window {inside_rate:.3}"
        );
    }

    #[test]
    fn fla_targets_get_extreme_req_per_ip() {
        let config = small_config();
        let fla = AttackScenario {
            kind: ScenarioKind::Fla,
            start_hour: 5.0,
            duration_hours: 2.0,
            n_attackers: 3,
            rate_per_attacker: 0.5,
            target_nodes: vec![0],
            target_contents: 5,
            error_fraction: 0.0,
        };
        let (lines, truth) = generate_log(&config, &[fla]).unwrap();
        let schema = LogSchema::default();
        let mut per_content: HashMap<String, (u64, HashSet<String>)> = HashMap::new();
        for line in &lines {
            let r = parse_log_line(line, &schema).unwrap().record;
            let slot = per_content.entry(r.content_url).or_insert((0, HashSet::new()));
            slot.0 += 1;
            slot.1.insert(r.ip);
        }
        let mut ratios: Vec<(f64, bool)> = per_content
            .iter()
            .map(|(url, (n, ips))| {
                let truth_cpa = truth.content_labels[url] == Label::CpaFla;
                (*n as f64 / ips.len() as f64, truth_cpa)
            })
            .collect();
        ratios.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let q95 = ratios[(ratios.len() as f64 * 0.95) as usize].0;
        for (ratio, is_target) in ratios {
            if is_target {
                assert!(ratio > q95, "target ratio {ratio} under q95 {q95}");
            }
        }
    }

    #[test]
    fn attacker_request_shapes_follow_their_kind() {
        let config = small_config();
        let lda = AttackScenario {
            kind: ScenarioKind::Lda,
            start_hour: 3.0,
            duration_hours: 2.0,
            n_attackers: 3,
            rate_per_attacker: 0.5,
            target_nodes: vec![2],
            target_contents: 400,
            error_fraction: 0.0,
        };
        let fla = AttackScenario {
            kind: ScenarioKind::Fla,
            start_hour: 14.0,
            duration_hours: 2.0,
            n_attackers: 3,
            rate_per_attacker: 0.5,
            target_nodes: vec![0],
            target_contents: 4,
            error_fraction: 0.0,
        };
        let (lines, truth) = generate_log(&config, &[lda, fla, ddos()]).unwrap();
        let schema = LogSchema::default();
        let mut per_ip: HashMap<String, (u64, HashSet<String>, i64, i64)> = HashMap::new();
        for line in &lines {
            let r = parse_log_line(line, &schema).unwrap().record;
            let slot = per_ip.entry(r.ip).or_insert((0, HashSet::new(), i64::MAX, i64::MIN));
            slot.0 += 1;
            slot.1.insert(r.content_url);
            slot.2 = slot.2.min(r.timestamp);
            slot.3 = slot.3.max(r.timestamp);
        }
        let rpc = |ip: &str| {
            let (n, contents, _, _) = &per_ip[ip];
            *n as f64 / contents.len() as f64
        };
        let interval = |ip: &str| {
            let (n, _, lo, hi) = &per_ip[ip];
            if *n > 1 { (*hi - *lo) as f64 / (*n - 1) as f64 } else { 0.0 }
        };

        let label_of = |l: Label| {
            truth
                .ip_labels
                .iter()
                .filter(move |(_, &v)| v == l)
                .map(|(ip, _)| ip.clone())
                .collect::<Vec<_>>()
        };
        let fla_min_rpc = label_of(Label::CpaFla).iter().map(|ip| rpc(ip)).fold(f64::MAX, f64::min);
        let lda_max_rpc = label_of(Label::CpaLda).iter().map(|ip| rpc(ip)).fold(0.0, f64::max);
        assert!(fla_min_rpc > lda_max_rpc);

        let legit_intervals: Vec<f64> = truth
            .ip_labels
            .iter()
            .filter(|(ip, &l)| l == Label::Normal && per_ip[ip.as_str()].0 > 1)
            .map(|(ip, _)| interval(ip))
            .collect();
        let mut sorted = legit_intervals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let legit_median = sorted[sorted.len() / 2];
        for bot in label_of(Label::Dos) {
            assert!(interval(&bot) < legit_median);
        }
    }
}
