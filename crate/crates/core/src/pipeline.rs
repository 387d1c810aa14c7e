//! File-based pipeline commands behind the CLI: generate, detect,
//! validate, evaluate. Each command stamps its outputs with the config
//! hash and takes an exclusive lock on the output directory.

use crate::access_log::{read_log, CleanRecord};
use crate::config::{PipelineConfig, StageSeed};
use crate::detection::{
    detect_abnormal_contents, detect_abnormal_nodes, detect_cpa_ips, detect_dos_ips,
    merge_ip_verdicts, tune_components, tune_contamination, ClusterSummary, Evidence, Label,
    Perspective, Stage, Verdict,
};
use crate::eval::{
    measure_latency, score, LatencyHarnessParams, LatencyRecord, LatencySummary, ScoreReport,
    ALL_ABNORMAL, CPA_FAMILY, DOS_ONLY,
};
use crate::features::{
    build_all, select_feature_subset, FeatureTables, PerspectiveRows, SubsetPurpose,
};
use crate::ml::{GmmParams, IsolationForest};
use crate::synth::{emit_ground_truth, generate_log, read_ground_truth, GroundTruth};
use crate::validation::{
    validate as run_validation_chain, AttackHypothesis, RuleTrace, ValidationContext,
    ValidationOutcome,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("log-model: no records survived cleaning")]
    NoRecords,
    #[error("features: {0}")]
    Features(#[from] crate::features::FeatureError),
    #[error("ml-core: {0}")]
    Ml(#[from] crate::ml::MlError),
    #[error("synth: {0}")]
    Synth(#[from] crate::synth::SynthError),
    #[error("eval: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("detect outputs missing: {0} (run `detect` first)")]
    MissingDetectOutput(PathBuf),
    #[error("ground truth file missing: {0}")]
    MissingTruth(PathBuf),
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error("{0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Exclusive lock on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".cdnwatch.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(source) => Err(PipelineError::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_hash: String,
}

const F_VERDICTS: [(&str, Perspective); 3] = [
    ("verdicts_node.csv", Perspective::Node),
    ("verdicts_ip.csv", Perspective::Ip),
    ("verdicts_content.csv", Perspective::Content),
];
const F_VERDICTS_VALIDATED: [(&str, Perspective); 3] = [
    ("verdicts_node_validated.csv", Perspective::Node),
    ("verdicts_ip_validated.csv", Perspective::Ip),
    ("verdicts_content_validated.csv", Perspective::Content),
];

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let config_hash = config.config_hash();
        Self {
            config,
            config_hash,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.output_dir.join(name)
    }

    fn csv_writer(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>, PipelineError> {
        let path = self.out(name);
        let mut file = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        writeln!(file, "# config {}", self.config_hash).map_err(io_err(&path))?;
        Ok(csv::Writer::from_writer(file))
    }

    fn csv_reader(&self, name: &str) -> Result<csv::Reader<BufReader<File>>, PipelineError> {
        let path = self.out(name);
        if !path.exists() {
            return Err(PipelineError::MissingDetectOutput(path));
        }
        let file = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = self.out(name);
        let file = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        serde_json::to_writer_pretty(file, value)
            .map_err(|e| PipelineError::Malformed(format!("writing {name}: {e}")))?;
        Ok(())
    }

    // -----------------------------------------------------------------
    // generate
    // -----------------------------------------------------------------

    /// Generates a synthetic labeled workload into the configured input
    /// log path plus the truth file.
    pub fn generate(&self) -> Result<GenerateSummary, PipelineError> {
        let _lock = DirLock::acquire(&self.config.paths.output_dir)?;
        let mut workload = self.config.workload.clone().unwrap_or_default();
        workload.seed = self.config.stage_seed(StageSeed::Workload);
        let scenarios = self.config.load_scenarios()?;
        let (lines, truth) = generate_log(&workload, &scenarios)?;

        let log_path = &self.config.paths.input_log;
        if let Some(parent) = log_path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut w = BufWriter::new(File::create(log_path).map_err(io_err(log_path))?);
        for line in &lines {
            writeln!(w, "{line}").map_err(io_err(log_path))?;
        }
        w.flush().map_err(io_err(log_path))?;

        let truth_path = self.truth_path();
        let truth_file = BufWriter::new(File::create(&truth_path).map_err(io_err(&truth_path))?);
        emit_ground_truth(&truth, truth_file)?;

        Ok(GenerateSummary {
            lines: lines.len(),
            log_path: log_path.clone(),
            truth_path,
            scenarios: scenarios.len(),
        })
    }

    fn truth_path(&self) -> PathBuf {
        self.config
            .paths
            .truth
            .clone()
            .unwrap_or_else(|| self.out("truth.json"))
    }

    // -----------------------------------------------------------------
    // detect
    // -----------------------------------------------------------------

    pub fn read_records(&self) -> Result<Vec<CleanRecord>, PipelineError> {
        let schema = self.config.load_schema()?;
        let path = &self.config.paths.input_log;
        let file = BufReader::new(File::open(path).map_err(io_err(path))?);
        let (records, _dropped) =
            read_log(file, &schema, self.config.cleaning.max_empty_fields).map_err(io_err(path))?;
        if records.is_empty() {
            return Err(PipelineError::NoRecords);
        }
        Ok(records)
    }

    /// Full pattern-stage detection: parse, clean, aggregate, tune and
    /// run the models, write verdicts and cluster summaries.
    pub fn detect(&self) -> Result<DetectSummary, PipelineError> {
        let _lock = DirLock::acquire(&self.config.paths.output_dir)?;
        let records = self.read_records()?;
        let tables = build_all(
            &records,
            self.config.cleaning.legit_popularity,
            self.config.cleaning.daily_popularity,
        )?;
        self.write_feature_tables(&tables)?;

        let thresholds = &self.config.thresholds;
        let mut warnings = Vec::new();

        // Nodes: isolation forest with tuned contamination.
        let node_matrix =
            select_feature_subset(&PerspectiveRows::Node(&tables.nodes), SubsetPurpose::Node)?;
        let mut node_tuning = self.config.node_tuning.clone();
        node_tuning.seed = self.config.stage_seed(StageSeed::NodeTuning);
        let forest = tune_contamination(&node_matrix, &node_tuning, thresholds)?;
        warnings.extend(forest.warnings.iter().cloned());
        let node_verdicts = detect_abnormal_nodes(&tables.nodes, &forest, thresholds);

        // Contents: mixture with tuned component count.
        let content_matrix = select_feature_subset(
            &PerspectiveRows::Content(&tables.contents),
            SubsetPurpose::Content,
        )?;
        let mut content_tuning = self.config.content_tuning.clone();
        content_tuning.seed = self.config.stage_seed(StageSeed::ContentTuning);
        let content_gmm = tune_components(&content_matrix, &content_tuning)?;
        let (content_verdicts, content_clusters) =
            detect_abnormal_contents(&tables.contents, &content_matrix, &content_gmm, thresholds)?;

        // IPs: two mixtures on the DoS and CPA feature subsets, merged.
        let dos_matrix =
            select_feature_subset(&PerspectiveRows::Ip(&tables.ips), SubsetPurpose::DosIp)?;
        let cpa_matrix =
            select_feature_subset(&PerspectiveRows::Ip(&tables.ips), SubsetPurpose::CpaIp)?;
        let mut ip_dos_tuning = self.config.ip_tuning.clone();
        ip_dos_tuning.seed = self.config.stage_seed(StageSeed::IpDosTuning);
        let dos_gmm = tune_components(&dos_matrix, &ip_dos_tuning)?;
        let (dos_verdicts, dos_clusters) =
            detect_dos_ips(&tables.ips, &dos_matrix, &dos_gmm, thresholds)?;
        let mut ip_cpa_tuning = self.config.ip_tuning.clone();
        ip_cpa_tuning.seed = self.config.stage_seed(StageSeed::IpCpaTuning);
        let cpa_gmm = tune_components(&cpa_matrix, &ip_cpa_tuning)?;
        let (cpa_verdicts, cpa_clusters) =
            detect_cpa_ips(&tables.ips, &cpa_matrix, &cpa_gmm, thresholds)?;
        let ip_verdicts = merge_ip_verdicts(dos_verdicts, cpa_verdicts, &tables.ips, thresholds);

        let summary = DetectSummary {
            records: records.len(),
            contamination: forest.contamination,
            node_silhouette: forest.silhouette,
            content_k: content_gmm.k,
            content_silhouette: content_gmm.silhouette,
            ip_dos_k: dos_gmm.k,
            ip_dos_silhouette: dos_gmm.silhouette,
            ip_cpa_k: cpa_gmm.k,
            ip_cpa_silhouette: cpa_gmm.silhouette,
            abnormal_nodes: node_verdicts.iter().filter(|v| v.label.is_abnormal()).count(),
            abnormal_ips: ip_verdicts.iter().filter(|v| v.label.is_abnormal()).count(),
            abnormal_contents: content_verdicts.iter().filter(|v| v.label.is_abnormal()).count(),
            warnings: warnings.clone(),
        };

        for (name, verdicts) in [
            ("verdicts_node.csv", &node_verdicts),
            ("verdicts_ip.csv", &ip_verdicts),
            ("verdicts_content.csv", &content_verdicts),
        ] {
            self.write_verdicts(name, verdicts)?;
        }
        self.write_clusters("clusters_content.csv", &content_clusters)?;
        self.write_clusters("clusters_ip_dos.csv", &dos_clusters)?;
        self.write_clusters("clusters_ip_cpa.csv", &cpa_clusters)?;

        self.write_json(
            "models.json",
            &ModelsDoc {
                version: 1,
                config_hash: self.config_hash.clone(),
                contamination: forest.contamination,
                node_silhouette: forest.silhouette,
                content_k: content_gmm.k,
                content_silhouette: content_gmm.silhouette,
                ip_dos_k: dos_gmm.k,
                ip_dos_silhouette: dos_gmm.silhouette,
                ip_cpa_k: cpa_gmm.k,
                ip_cpa_silhouette: cpa_gmm.silhouette,
                forest: forest.model.clone(),
                content_gmm: content_gmm.params.clone(),
                ip_dos_gmm: dos_gmm.params.clone(),
                ip_cpa_gmm: cpa_gmm.params.clone(),
            },
        )?;
        self.write_findings_report(
            "report.json",
            &summary,
            [&node_verdicts, &ip_verdicts, &content_verdicts],
        )?;
        Ok(summary)
    }

    fn write_feature_tables(&self, tables: &FeatureTables) -> Result<(), PipelineError> {
        let mut w = self.csv_writer("features_content.csv")?;
        w.write_record(["content_id", "n_requests", "popularity", "cache_hit_rate", "req_per_ip", "req_per_node"]).map_err(csv_err)?;
        for c in &tables.contents {
            w.write_record([
                c.content_id.as_str(),
                &c.n_requests.to_string(),
                &c.popularity.to_string(),
                &c.cache_hit_rate.to_string(),
                &c.req_per_ip.to_string(),
                &c.req_per_node.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        let mut w = self.csv_writer("features_node.csv")?;
        w.write_record([
            "node_id",
            "n_requests",
            "cache_hit_rate",
            "legit_ip_cache_hit_rate",
            "data_transfer_rate_mbps",
            "request_error_rate",
            "avg_request_popularity",
            "top_ao",
            "top_ao_share",
        ])
        .map_err(csv_err)?;
        for n in &tables.nodes {
            let (top_ao, share) = top_share(&n.ao_request_rate);
            w.write_record([
                n.node_id.as_str(),
                &n.n_requests.to_string(),
                &n.cache_hit_rate.to_string(),
                &n.legit_ip_cache_hit_rate.to_string(),
                &n.data_transfer_rate_mbps.to_string(),
                &n.request_error_rate.to_string(),
                &n.avg_request_popularity.to_string(),
                top_ao,
                &share.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        let mut w = self.csv_writer("features_ip.csv")?;
        w.write_record([
            "ip",
            "n_requests",
            "avg_request_interval_s",
            "n_nodes",
            "n_contents",
            "req_per_content",
            "req_per_node",
            "avg_request_popularity",
            "cache_hit_rate",
            "request_error_rate",
            "top_ao",
            "top_ao_share",
        ])
        .map_err(csv_err)?;
        for i in &tables.ips {
            let (top_ao, share) = top_share(&i.ao_request_rate);
            w.write_record([
                i.ip.as_str(),
                &i.n_requests.to_string(),
                &i.avg_request_interval_s.to_string(),
                &i.n_nodes.to_string(),
                &i.n_contents.to_string(),
                &i.req_per_content.to_string(),
                &i.req_per_node.to_string(),
                &i.avg_request_popularity.to_string(),
                &i.cache_hit_rate.to_string(),
                &i.request_error_rate.to_string(),
                top_ao,
                &share.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        let mut w = self.csv_writer("features_ao.csv")?;
        w.write_record([
            "ao_id",
            "n_requests",
            "n_nodes",
            "service_type",
            "content_type",
            "cache_hit_rate",
            "request_popularity",
        ])
        .map_err(csv_err)?;
        for a in &tables.aos {
            w.write_record([
                a.ao_id.as_str(),
                &a.n_requests.to_string(),
                &a.n_nodes.to_string(),
                a.service_type.as_str(),
                a.content_type.as_str(),
                &a.cache_hit_rate.to_string(),
                &a.request_popularity.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        // Normalization sidecar for the model matrices.
        let mut w = self.csv_writer("normalization.csv")?;
        w.write_record(["matrix", "column", "min", "max"]).map_err(csv_err)?;
        for (name, rows) in [
            ("node", select_feature_subset(&PerspectiveRows::Node(&tables.nodes), SubsetPurpose::Node)?),
            ("content", select_feature_subset(&PerspectiveRows::Content(&tables.contents), SubsetPurpose::Content)?),
            ("ip_dos", select_feature_subset(&PerspectiveRows::Ip(&tables.ips), SubsetPurpose::DosIp)?),
            ("ip_cpa", select_feature_subset(&PerspectiveRows::Ip(&tables.ips), SubsetPurpose::CpaIp)?),
        ] {
            for (col, stats) in rows.column_names.iter().zip(&rows.stats) {
                w.write_record([name, col, &stats.min.to_string(), &stats.max.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;
        Ok(())
    }

    fn write_verdicts(&self, name: &str, verdicts: &[Verdict]) -> Result<(), PipelineError> {
        let mut w = self.csv_writer(name)?;
        w.write_record(["entity_id", "perspective", "label", "stage", "cluster_id", "score", "evidence"])
            .map_err(csv_err)?;
        for v in verdicts {
            let evidence = serde_json::to_string(&v.evidence)
                .map_err(|e| PipelineError::Malformed(e.to_string()))?;
            w.write_record([
                v.entity_id.as_str(),
                &v.perspective.to_string(),
                v.label.as_str(),
                v.stage.as_str(),
                &v.cluster_id.map(|c| c.to_string()).unwrap_or_default(),
                &v.score.map(|s| s.to_string()).unwrap_or_default(),
                &evidence,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;
        Ok(())
    }

    pub fn read_verdicts(&self, name: &str, perspective: Perspective) -> Result<Vec<Verdict>, PipelineError> {
        let mut r = self.csv_reader(name)?;
        let mut out = Vec::new();
        for row in r.records() {
            let row = row.map_err(|e| PipelineError::Malformed(e.to_string()))?;
            let get = |i: usize| row.get(i).unwrap_or("");
            out.push(Verdict {
                entity_id: get(0).to_string(),
                perspective,
                label: Label::parse(get(2))
                    .ok_or_else(|| PipelineError::Malformed(format!("bad label {}", get(2))))?,
                stage: Stage::parse(get(3))
                    .ok_or_else(|| PipelineError::Malformed(format!("bad stage {}", get(3))))?,
                cluster_id: get(4).parse().ok(),
                score: get(5).parse().ok(),
                evidence: serde_json::from_str(get(6)).unwrap_or_default(),
            });
        }
        Ok(out)
    }

    fn write_clusters(&self, name: &str, clusters: &[ClusterSummary]) -> Result<(), PipelineError> {
        let mut w = self.csv_writer(name)?;
        let features: Vec<String> = clusters
            .first()
            .map(|c| c.centroid.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default();
        let mut header = vec!["cluster_id".to_string(), "size".to_string()];
        header.extend(features.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for c in clusters {
            let mut row = vec![c.cluster_id.to_string(), c.size.to_string()];
            row.extend(c.centroid.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;
        Ok(())
    }

    fn write_findings_report(
        &self,
        name: &str,
        summary: &DetectSummary,
        verdicts: [&Vec<Verdict>; 3],
    ) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Finding<'a> {
            entity_id: &'a str,
            perspective: Perspective,
            label: Label,
            stage: Stage,
            cluster_id: Option<usize>,
            score: Option<f64>,
            evidence: &'a [Evidence],
        }
        #[derive(Serialize)]
        struct Report<'a> {
            config_hash: &'a str,
            summary: &'a DetectSummary,
            findings: Vec<Finding<'a>>,
        }
        let findings: Vec<Finding> = verdicts
            .iter()
            .flat_map(|vs| vs.iter())
            .filter(|v| v.label.is_abnormal())
            .map(|v| Finding {
                entity_id: &v.entity_id,
                perspective: v.perspective,
                label: v.label,
                stage: v.stage,
                cluster_id: v.cluster_id,
                score: v.score,
                evidence: &v.evidence,
            })
            .collect();
        self.write_json(
            name,
            &Report {
                config_hash: &self.config_hash,
                summary,
                findings,
            },
        )
    }

    // -----------------------------------------------------------------
    // validate
    // -----------------------------------------------------------------

    /// Runs the validation chain over the detect outputs and writes the
    /// final verdicts, rule trace and hourly series files.
    pub fn validate(&self) -> Result<ValidateSummary, PipelineError> {
        let _lock = DirLock::acquire(&self.config.paths.output_dir)?;
        let node_v = self.read_verdicts("verdicts_node.csv", Perspective::Node)?;
        let ip_v = self.read_verdicts("verdicts_ip.csv", Perspective::Ip)?;
        let content_v = self.read_verdicts("verdicts_content.csv", Perspective::Content)?;

        let records = self.read_records()?;
        let tables = build_all(
            &records,
            self.config.cleaning.legit_popularity,
            self.config.cleaning.daily_popularity,
        )?;
        let calendar = self.config.load_calendar()?;
        let expectations = self.config.load_ao_expectations()?;
        let mut gmm_tune = self.config.ip_tuning.clone();
        gmm_tune.seed = self.config.stage_seed(StageSeed::IpDosTuning);

        let ctx = ValidationContext {
            records: &records,
            popularity: &tables.popularity,
            tables: &tables,
            calendar: calendar.as_ref(),
            expectations: expectations.as_deref(),
            params: &self.config.validation,
            thresholds: &self.config.thresholds,
            gmm_tune: &gmm_tune,
        };
        let outcome = run_validation_chain(&ctx, node_v, ip_v, content_v);
        self.write_validation_outputs(&outcome)?;

        Ok(ValidateSummary {
            abnormal_nodes: outcome.node_verdicts.iter().filter(|v| v.label.is_abnormal()).count(),
            abnormal_ips: outcome.ip_verdicts.iter().filter(|v| v.label.is_abnormal()).count(),
            abnormal_contents: outcome
                .content_verdicts
                .iter()
                .filter(|v| v.label.is_abnormal())
                .count(),
            label_changes: outcome.traces.len(),
            candidate_periods: outcome.periods.iter().filter(|p| !p.legitimate).count(),
            legitimate_periods: outcome.periods.iter().filter(|p| p.legitimate).count(),
            hypotheses: outcome.hypotheses.clone(),
            warnings: outcome.warnings.clone(),
        })
    }

    fn write_validation_outputs(&self, outcome: &ValidationOutcome) -> Result<(), PipelineError> {
        for (name, verdicts) in [
            ("verdicts_node_validated.csv", &outcome.node_verdicts),
            ("verdicts_ip_validated.csv", &outcome.ip_verdicts),
            ("verdicts_content_validated.csv", &outcome.content_verdicts),
        ] {
            self.write_verdicts(name, verdicts)?;
        }

        let mut w = self.csv_writer("rule_trace.csv")?;
        w.write_record(["entity_id", "perspective", "rule", "old_label", "new_label", "detail"])
            .map_err(csv_err)?;
        for t in &outcome.traces {
            w.write_record([
                t.entity_id.as_str(),
                &t.perspective.to_string(),
                t.rule.as_str(),
                t.old_label.as_str(),
                t.new_label.as_str(),
                t.detail.as_str(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        for series in &outcome.series {
            let mut w = self.csv_writer(&format!("series_{}.csv", series.metric.as_str()))?;
            w.write_record(["hour_epoch", "value"]).map_err(csv_err)?;
            for &(hour, value) in &series.buckets {
                w.write_record([
                    hour.to_string(),
                    value.map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;
        }

        let mut w = self.csv_writer("periods.csv")?;
        w.write_record(["start", "end", "metric", "deviation", "legitimate"]).map_err(csv_err)?;
        for p in &outcome.periods {
            w.write_record([
                p.start.to_string(),
                p.end.to_string(),
                p.metric.as_str().to_string(),
                p.deviation.to_string(),
                p.legitimate.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        #[derive(Serialize)]
        struct ValidationReport<'a> {
            config_hash: &'a str,
            hypotheses: &'a [AttackHypothesis],
            traces: &'a [RuleTrace],
            warnings: &'a [String],
        }
        self.write_json(
            "validation_report.json",
            &ValidationReport {
                config_hash: &self.config_hash,
                hypotheses: &outcome.hypotheses,
                traces: &outcome.traces,
                warnings: &outcome.warnings,
            },
        )
    }

    // -----------------------------------------------------------------
    // evaluate
    // -----------------------------------------------------------------

    /// Scores pattern-stage and validated verdicts against ground
    /// truth; optionally runs the latency replay harness.
    pub fn evaluate(&self, skip_validation: bool) -> Result<EvaluateSummary, PipelineError> {
        let _lock = DirLock::acquire(&self.config.paths.output_dir)?;
        let truth_path = self.truth_path();
        if !truth_path.exists() {
            return Err(PipelineError::MissingTruth(truth_path));
        }
        let truth_file = BufReader::new(File::open(&truth_path).map_err(io_err(&truth_path))?);
        let truth = read_ground_truth(truth_file)?;

        let mut rows: Vec<MetricsRow> = Vec::new();
        let mut stages: Vec<(&str, [(&str, Perspective); 3])> = vec![("pattern", F_VERDICTS)];
        if !skip_validation {
            stages.push(("validated", F_VERDICTS_VALIDATED));
        }
        for (stage_name, files) in &stages {
            for (file, perspective) in files {
                let verdicts = self.read_verdicts(file, *perspective)?;
                let truth_map = truth_map_for(&truth, *perspective);
                for (set_name, set) in [
                    ("any", &ALL_ABNORMAL[..]),
                    ("dos", &DOS_ONLY[..]),
                    ("cpa", &CPA_FAMILY[..]),
                ] {
                    let report = score(&verdicts, &truth_map, set)?;
                    rows.push(MetricsRow {
                        stage: stage_name.to_string(),
                        perspective: *perspective,
                        positive_set: set_name.to_string(),
                        report,
                    });
                }
            }
        }

        let mut w = self.csv_writer("metrics.csv")?;
        w.write_record([
            "stage",
            "perspective",
            "positive_set",
            "tp",
            "fp",
            "tn",
            "fn",
            "accuracy",
            "precision",
            "recall",
            "f1",
        ])
        .map_err(csv_err)?;
        for row in &rows {
            let c = row.report.counts;
            w.write_record([
                row.stage.as_str(),
                &row.perspective.to_string(),
                row.positive_set.as_str(),
                &c.tp.to_string(),
                &c.fp.to_string(),
                &c.tn.to_string(),
                &c.fn_.to_string(),
                &row.report.accuracy.to_string(),
                &row.report.precision.to_string(),
                &row.report.recall.to_string(),
                &row.report.f1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        // The validation chain must not hurt: compare stage F1 on the
        // headline positive set.
        let f1_of = |stage: &str, p: Perspective| {
            rows.iter()
                .find(|r| r.stage == stage && r.perspective == p && r.positive_set == "any")
                .map(|r| r.report.f1)
        };
        let mut validation_gain_ok = true;
        if !skip_validation {
            for p in [Perspective::Node, Perspective::Ip, Perspective::Content] {
                if let (Some(pattern), Some(validated)) = (f1_of("pattern", p), f1_of("validated", p)) {
                    if validated + 1e-12 < pattern {
                        validation_gain_ok = false;
                    }
                }
            }
        }

        let latency = if self.config.latency.enabled {
            Some(self.run_latency(&truth)?)
        } else {
            None
        };

        let summary = EvaluateSummary {
            rows,
            validation_gain_ok,
            latency,
        };
        self.write_json(
            "eval_report.json",
            &EvalReportDoc {
                config_hash: &self.config_hash,
                validation_gain_ok: summary.validation_gain_ok,
                metrics: &summary.rows,
            },
        )?;
        Ok(summary)
    }

    fn run_latency(
        &self,
        truth: &GroundTruth,
    ) -> Result<(Vec<LatencyRecord>, Vec<LatencySummary>), PipelineError> {
        let records = self.read_records()?;
        // Reuse the hyper-parameters the detect stage tuned; fall back
        // to defaults when detect has not run.
        let models = self.read_models().ok();
        let mut gmm = self.config.ip_tuning.clone();
        gmm.seed = self.config.stage_seed(StageSeed::Latency);
        let mut forest = self.config.node_tuning.clone();
        forest.seed = self.config.stage_seed(StageSeed::Latency);
        let params = LatencyHarnessParams {
            batch_size: self.config.latency.batch_size,
            contamination: models.as_ref().map(|m| m.contamination).unwrap_or(0.1),
            k_content: models.as_ref().map(|m| m.content_k).unwrap_or(8),
            k_ip: models.as_ref().map(|m| m.ip_dos_k).unwrap_or(8),
            forest,
            gmm,
            thresholds: self.config.thresholds.clone(),
            legit_popularity: self.config.cleaning.legit_popularity,
        };
        let (latency_records, summaries) = measure_latency(&records, truth, &params);

        let mut w = self.csv_writer("latency_records.csv")?;
        w.write_record([
            "entity_id",
            "perspective",
            "affected_at",
            "detected_at",
            "latency_s",
            "feature_s",
            "model_s",
        ])
        .map_err(csv_err)?;
        for r in &latency_records {
            w.write_record([
                r.entity_id.as_str(),
                &r.perspective.to_string(),
                &r.affected_at.to_string(),
                &r.detected_at.to_string(),
                &r.latency_s.to_string(),
                &r.feature_s.to_string(),
                &r.model_s.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;

        let mut w = self.csv_writer("latency.csv")?;
        w.write_record([
            "perspective",
            "detected",
            "missed",
            "feature_avg_s",
            "feature_max_s",
            "model_avg_s",
            "model_max_s",
            "total_avg_s",
            "total_max_s",
        ])
        .map_err(csv_err)?;
        for s in &summaries {
            w.write_record([
                s.perspective.to_string(),
                s.detected.to_string(),
                s.missed.to_string(),
                s.avg_feature_s.to_string(),
                s.max_feature_s.to_string(),
                s.avg_model_s.to_string(),
                s.max_model_s.to_string(),
                s.avg_total_s.to_string(),
                s.max_total_s.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PipelineError::Malformed(e.to_string()))?;
        Ok((latency_records, summaries))
    }

    pub fn read_models(&self) -> Result<ModelsDoc, PipelineError> {
        let path = self.out("models.json");
        if !path.exists() {
            return Err(PipelineError::MissingDetectOutput(path));
        }
        let file = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        serde_json::from_reader(file).map_err(|e| PipelineError::Malformed(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Malformed(e.to_string())
}

fn top_share(shares: &BTreeMap<String, f64>) -> (&str, f64) {
    let mut best: (&str, f64) = ("", 0.0);
    for (ao, &share) in shares {
        if share > best.1 {
            best = (ao.as_str(), share);
        }
    }
    best
}

pub fn truth_map_for(truth: &GroundTruth, perspective: Perspective) -> BTreeMap<String, Label> {
    match perspective {
        Perspective::Node => truth.node_labels.clone(),
        Perspective::Ip => truth.ip_labels.clone(),
        Perspective::Content => truth.content_labels.clone(),
    }
}

/// Serialized model state for reuse across invocations.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelsDoc {
    pub version: u32,
    pub config_hash: String,
    pub contamination: f64,
    pub node_silhouette: f64,
    pub content_k: usize,
    pub content_silhouette: f64,
    pub ip_dos_k: usize,
    pub ip_dos_silhouette: f64,
    pub ip_cpa_k: usize,
    pub ip_cpa_silhouette: f64,
    pub forest: IsolationForest,
    pub content_gmm: GmmParams,
    pub ip_dos_gmm: GmmParams,
    pub ip_cpa_gmm: GmmParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub lines: usize,
    pub log_path: PathBuf,
    pub truth_path: PathBuf,
    pub scenarios: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectSummary {
    pub records: usize,
    pub contamination: f64,
    pub node_silhouette: f64,
    pub content_k: usize,
    pub content_silhouette: f64,
    pub ip_dos_k: usize,
    pub ip_dos_silhouette: f64,
    pub ip_cpa_k: usize,
    pub ip_cpa_silhouette: f64,
    pub abnormal_nodes: usize,
    pub abnormal_ips: usize,
    pub abnormal_contents: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateSummary {
    pub abnormal_nodes: usize,
    pub abnormal_ips: usize,
    pub abnormal_contents: usize,
    pub label_changes: usize,
    pub candidate_periods: usize,
    pub legitimate_periods: usize,
    pub hypotheses: Vec<AttackHypothesis>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub stage: String,
    pub perspective: Perspective,
    pub positive_set: String,
    #[serde(flatten)]
    pub report: ScoreReport,
}

#[derive(Serialize)]
struct EvalReportDoc<'a> {
    config_hash: &'a str,
    validation_gain_ok: bool,
    metrics: &'a [MetricsRow],
}

pub struct EvaluateSummary {
    pub rows: Vec<MetricsRow>,
    pub validation_gain_ok: bool,
    pub latency: Option<(Vec<LatencyRecord>, Vec<LatencySummary>)>,
}

/// Reads raw lines of a log file, for byte-level comparisons in tests.
pub fn read_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let file = BufReader::new(File::open(path).map_err(io_err(path))?);
    file.lines().collect::<Result<_, _>>().map_err(io_err(path))
}
