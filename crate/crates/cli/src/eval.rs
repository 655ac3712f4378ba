use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use daco::llm::{report_usage, UsageLedger, UsageSummary};
use daco::metrics::{build_report, MetricsReport, ScoredEpisode};
use daco::scene::{load_scene, SceneGraph};
use daco::trace::EpisodeTrace;
use serde::{Deserialize, Serialize};

use crate::{usage, EvalArgs, ReportArgs, ReportKind};

#[derive(Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub columns: Vec<String>,
    pub runs: BTreeMap<String, UsageSummary>,
    pub overall: UsageSummary,
    /// Every ledger's totals equal the sum of its call records.
    pub ledgers_consistent: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.metrics {
            out.push_str(&m.to_table());
        }
        if let Some(c) = &self.cost {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str("== cost ==\n");
            for (label, summary) in &c.runs {
                let _ = writeln!(out, "run {label} ({} tasks, {} calls)", summary.tasks, summary.calls);
                out.push_str(&summary.to_table());
            }
            if c.runs.len() > 1 {
                let _ = writeln!(out, "all runs ({} tasks, {} calls)", c.overall.tasks, c.overall.calls);
                out.push_str(&c.overall.to_table());
            }
            if !c.ledgers_consistent {
                out.push_str("warning: some usage ledgers do not add up\n");
            }
        }
        out
    }
}

/// Trace files under `dir`: `*.jsonl` directly inside it and inside each
/// immediate subdirectory, in path order.
fn trace_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let is_trace = |p: &Path| p.extension().is_some_and(|e| e == "jsonl");
    let mut files = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| usage(format!("cannot read trace directory {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path)? {
                let inner = inner?.path();
                if inner.is_file() && is_trace(&inner) {
                    files.push(inner);
                }
            }
        } else if is_trace(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn evaluate(traces_dir: &Path, scene_dir: &Path, kind: ReportKind) -> anyhow::Result<EvalReport> {
    let files = trace_files(traces_dir)?;
    if files.is_empty() {
        return Err(usage(format!("no traces found under {}", traces_dir.display())));
    }
    let mut graphs: BTreeMap<String, SceneGraph> = BTreeMap::new();
    let mut scored = Vec::new();
    let mut ledgers: BTreeMap<String, Vec<UsageLedger>> = BTreeMap::new();
    for path in &files {
        let trace = EpisodeTrace::load(path).with_context(|| format!("unparsable trace {}", path.display()))?;
        let scan = trace.header.episode.scan.clone();
        if !graphs.contains_key(&scan) {
            let graph = load_scene(scene_dir.join(format!("{scan}.json")))?;
            graphs.insert(scan.clone(), graph);
        }
        if kind != ReportKind::Cost {
            let s = ScoredEpisode::from_trace(&graphs[&scan], &trace)
                .with_context(|| format!("cannot score {}", path.display()))?;
            scored.push(s);
        }
        ledgers
            .entry(trace.header.run_label.clone())
            .or_default()
            .push(trace.summary.usage);
    }
    let metrics = (kind != ReportKind::Cost).then(|| build_report(&scored));
    let cost = if kind == ReportKind::Metrics {
        None
    } else {
        let all: Vec<UsageLedger> = ledgers.values().flatten().cloned().collect();
        Some(CostReport {
            columns: UsageSummary::COLUMNS.iter().map(|c| c.to_string()).collect(),
            runs: ledgers
                .iter()
                .map(|(k, v)| (k.clone(), report_usage(v).expect("non-empty")))
                .collect(),
            overall: report_usage(&all).expect("non-empty"),
            ledgers_consistent: all.iter().all(UsageLedger::is_consistent),
        })
    };
    Ok(EvalReport { metrics, cost })
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let report = evaluate(&args.traces, &args.scene_dir, args.report)?;
    let text = report.to_text();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        std::fs::write(out.join("report.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.report)
        .map_err(|e| usage(format!("cannot read report {}: {e}", args.report.display())))?;
    let report: EvalReport =
        serde_json::from_str(&text).with_context(|| format!("malformed report {}", args.report.display()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}
