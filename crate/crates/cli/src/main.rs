//! cdnwatch: detect cache pollution and DoS activity in CDN access
//! logs, with a synthetic workload generator and evaluation harness.

use anyhow::{Context, Result};
use cdnwatch_core::config::PipelineConfig;
use cdnwatch_core::detection::Perspective;
use cdnwatch_core::pipeline::Pipeline;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cdnwatch", version, about, long_about = None)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(short, long, global = true, default_value = "cdnwatch.toml")]
    config: PathBuf,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled workload into the input log path.
    Generate,
    /// Parse the log, build features, tune and run the models, and
    /// write pattern-stage verdicts.
    Detect,
    /// Run the multi-perspective validation chain over detect outputs.
    Validate,
    /// Score verdicts against ground truth; optionally measure
    /// detection latency.
    Evaluate {
        /// Score only the pattern stage (skip validated verdicts).
        #[arg(long)]
        skip_validation: bool,
    },
    /// Print a human-readable summary of existing outputs.
    Report {
        /// Restrict the verdict summary to one perspective.
        #[arg(long)]
        perspective: Option<String>,
    },
}

fn load_pipeline(cli: &Cli) -> Result<Pipeline> {
    let mut config = PipelineConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let Some(workload) = &mut config.workload {
            workload.seed = seed;
        }
    }
    Ok(Pipeline::new(config))
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let pipeline = load_pipeline(cli)?;
    println!("config {}", pipeline.config_hash);
    match &cli.command {
        Command::Generate => {
            let s = pipeline.generate()?;
            println!(
                "generated {} lines from {} scenario(s) -> {}",
                s.lines,
                s.scenarios,
                s.log_path.display()
            );
            println!("ground truth -> {}", s.truth_path.display());
        }
        Command::Detect => {
            let s = pipeline.detect()?;
            println!("records: {}", s.records);
            println!(
                "node model: contamination {:.4} (silhouette {:.3})",
                s.contamination, s.node_silhouette
            );
            println!(
                "content model: K={} (silhouette {:.3}); ip models: K={}/{} (silhouette {:.3}/{:.3})",
                s.content_k,
                s.content_silhouette,
                s.ip_dos_k,
                s.ip_cpa_k,
                s.ip_dos_silhouette,
                s.ip_cpa_silhouette
            );
            println!(
                "abnormal at pattern stage: {} node(s), {} ip(s), {} content(s)",
                s.abnormal_nodes, s.abnormal_ips, s.abnormal_contents
            );
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Validate => {
            let s = pipeline.validate()?;
            println!(
                "abnormal after validation: {} node(s), {} ip(s), {} content(s)",
                s.abnormal_nodes, s.abnormal_ips, s.abnormal_contents
            );
            println!(
                "{} label change(s); {} candidate period(s), {} legitimate period(s)",
                s.label_changes, s.candidate_periods, s.legitimate_periods
            );
            for h in &s.hypotheses {
                println!(
                    "hypothesis: {:?} in [{}, {}), primary target {:?}, {} flagged of {} active ips",
                    h.kind, h.window.0, h.window.1, h.primary_target_node, h.n_flagged_ips, h.n_active_ips
                );
            }
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Evaluate { skip_validation } => {
            let s = pipeline.evaluate(*skip_validation)?;
            println!("stage      perspective positive   acc     pre     rec     f1");
            for row in &s.rows {
                println!(
                    "{:<10} {:<11} {:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                    row.stage,
                    row.perspective.to_string(),
                    row.positive_set,
                    row.report.accuracy,
                    row.report.precision,
                    row.report.recall,
                    row.report.f1
                );
            }
            if !skip_validation {
                println!(
                    "validation F1 gain check: {}",
                    if s.validation_gain_ok { "ok" } else { "REGRESSED" }
                );
            }
            if let Some((records, summaries)) = &s.latency {
                println!("latency ({} detected anomalies):", records.len());
                println!("perspective  detected missed  feat_avg feat_max model_avg model_max total_avg total_max");
                for l in summaries {
                    println!(
                        "{:<12} {:>8} {:>6} {:>9.2} {:>8.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                        l.perspective.to_string(),
                        l.detected,
                        l.missed,
                        l.avg_feature_s,
                        l.max_feature_s,
                        l.avg_model_s,
                        l.max_model_s,
                        l.avg_total_s,
                        l.max_total_s
                    );
                }
            }
        }
        Command::Report { perspective } => {
            report(&pipeline, perspective.as_deref())?;
        }
    }
    Ok(())
}

fn report(pipeline: &Pipeline, perspective: Option<&str>) -> Result<()> {
    let wanted: Vec<(&str, Perspective)> = match perspective {
        Some("node") => vec![("verdicts_node_validated.csv", Perspective::Node)],
        Some("ip") => vec![("verdicts_ip_validated.csv", Perspective::Ip)],
        Some("content") => vec![("verdicts_content_validated.csv", Perspective::Content)],
        Some(other) => anyhow::bail!("unknown perspective '{other}' (node|ip|content)"),
        None => vec![
            ("verdicts_node_validated.csv", Perspective::Node),
            ("verdicts_ip_validated.csv", Perspective::Ip),
            ("verdicts_content_validated.csv", Perspective::Content),
        ],
    };
    for (file, p) in wanted {
        // Fall back to pattern-stage files when validate has not run.
        let pattern_file = file.replace("_validated", "");
        let verdicts = pipeline
            .read_verdicts(file, p)
            .or_else(|_| pipeline.read_verdicts(&pattern_file, p))
            .with_context(|| format!("no verdicts for {p}; run detect/validate first"))?;
        let total = verdicts.len();
        let mut by_label: std::collections::BTreeMap<&str, usize> = Default::default();
        for v in &verdicts {
            *by_label.entry(v.label.as_str()).or_default() += 1;
        }
        println!("{p}: {total} entities");
        for (label, count) in &by_label {
            println!("  {label:<16} {count}");
        }
        for v in verdicts.iter().filter(|v| v.label.is_abnormal()).take(20) {
            let why = v
                .evidence
                .iter()
                .map(|e| e.condition.as_str())
                .collect::<Vec<_>>()
                .join("; ");
            println!("  {} -> {} [{}]", v.entity_id, v.label.as_str(), why);
        }
    }
    Ok(())
}
