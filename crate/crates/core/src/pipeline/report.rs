//! Run report, manifest and tabular exports.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{Session, WorkKey};
use super::PipelineError;
use crate::engine::{
    aggregate_run, cooccurrence_hallucination_fraction, subset_scores, topk_sweep, CaptionRecord, EngineError,
    RunAggregate, Subset, SubsetAggregate,
};
use crate::gateway::{GatewayMode, GatewayStats};
use crate::similarity::StoreSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    #[serde(flatten)]
    pub key: WorkKey,
    pub error: String,
}

/// Results for one (model, instruction) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub model: String,
    pub instruction_id: String,
    pub aggregate: RunAggregate,
    /// Subset name → store name → scores.
    pub subsets: BTreeMap<String, BTreeMap<String, SubsetAggregate>>,
    /// Store name → k → aggregate CAOS_K.
    pub topk_sweep: BTreeMap<String, BTreeMap<usize, Option<f64>>>,
    pub cooccurrence_fraction: Option<f64>,
}

/// Deterministic summary of a run: no timestamps, no cache statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub k: usize,
    pub stores: Vec<String>,
    pub work_items: usize,
    pub failed_items: usize,
    pub status: RunStatus,
    pub groups: Vec<GroupReport>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreInfo {
    pub name: String,
    pub dimension: usize,
    pub source: StoreSource,
}

/// Provenance of a run: what went in and how the caches behaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub mode: GatewayMode,
    pub endpoints: Vec<String>,
    pub oracle_template_version: String,
    pub extraction_prompt_version: String,
    pub instructions_version: String,
    pub stores: Vec<StoreInfo>,
    pub k: usize,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub gateway: GatewayStats,
    pub verdict_cache_hits: usize,
    pub verdict_cache_misses: usize,
    pub embedding_cache_hits: usize,
    pub embedding_cache_misses: usize,
    pub records: usize,
    pub status: RunStatus,
}

fn stage(e: EngineError) -> PipelineError {
    PipelineError::Stage(e.to_string())
}

/// Aggregate sorted records into a report.
pub fn build_report(
    session: &Session,
    records: &[CaptionRecord],
    failures: Vec<FailureRecord>,
    work_items: usize,
) -> Result<RunReport, PipelineError> {
    let store_names: Vec<String> = session.stores.iter().map(|s| s.name().to_string()).collect();
    let subsets = [
        Subset::All,
        Subset::InDomainOnly,
        Subset::OutOfDomainOnly,
        Subset::ExcludingTopFrequent(session.top_m()),
    ];
    let sweep_range = session.sweep_range();
    let mut groups = Vec::new();
    for chunk in records.chunk_by(|a, b| a.model == b.model && a.instruction_id == b.instruction_id) {
        let aggregate = aggregate_run(chunk).map_err(stage)?;
        let mut by_subset = BTreeMap::new();
        for subset in &subsets {
            let mut per_store = BTreeMap::new();
            for s in &store_names {
                per_store.insert(
                    s.clone(),
                    subset_scores(chunk, s, subset, &session.resources.frequency).map_err(stage)?,
                );
            }
            by_subset.insert(subset.name(), per_store);
        }
        let mut sweep = BTreeMap::new();
        if !sweep_range.is_empty() {
            for s in &store_names {
                let store = session.store(s).expect("store exists");
                sweep.insert(
                    s.clone(),
                    topk_sweep(chunk, s, store, &session.resources.frequency, &sweep_range).map_err(stage)?,
                );
            }
        }
        groups.push(GroupReport {
            model: chunk[0].model.clone(),
            instruction_id: chunk[0].instruction_id.clone(),
            aggregate,
            subsets: by_subset,
            topk_sweep: sweep,
            cooccurrence_fraction: session
                .resources
                .cooccurrence
                .as_ref()
                .and_then(|c| cooccurrence_hallucination_fraction(chunk, c)),
        });
    }
    let failed_items = failures.len();
    let failed = work_items > 0 && failed_items as f64 / work_items as f64 > session.config.max_failure_fraction;
    Ok(RunReport {
        k: session.config.k,
        stores: store_names,
        work_items,
        failed_items,
        status: if failed { RunStatus::Failed } else { RunStatus::Ok },
        groups,
        failures,
    })
}

/// Flat exports of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Summary,
    PerCaption,
    Sweep,
    Subsets,
    InstructionVariability,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 5] = [
        Self::Summary,
        Self::PerCaption,
        Self::Sweep,
        Self::Subsets,
        Self::InstructionVariability,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Summary => "summary.csv",
            Self::PerCaption => "per_caption.csv",
            Self::Sweep => "sweep.csv",
            Self::Subsets => "subsets.csv",
            Self::InstructionVariability => "variability.csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summary" => Ok(Self::Summary),
            "per-caption" => Ok(Self::PerCaption),
            "sweep" => Ok(Self::Sweep),
            "subsets" => Ok(Self::Subsets),
            "instruction-variability" => Ok(Self::InstructionVariability),
            _ => Err(PipelineError::Config(format!(
                "unknown report format {s:?} (expected summary, per-caption, sweep, subsets or instruction-variability)"
            ))),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = values.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn rows(format: ReportFormat, report: &RunReport, records: &[CaptionRecord]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    match format {
        ReportFormat::Summary => {
            out.push(vec!["model", "instruction_id", "store", "metric", "value"].into_iter().map(String::from).collect());
            for g in &report.groups {
                let a = &g.aggregate;
                let mut push = |store: &str, metric: &str, value: String| {
                    out.push(vec![g.model.clone(), g.instruction_id.clone(), store.to_string(), metric.to_string(), value]);
                };
                push("", "captions", a.captions.to_string());
                push("", "chair_s", a.chair_s.to_string());
                push("", "precision", cell(a.precision));
                push("", "recall", cell(a.recall));
                push("", "objects_per_caption", a.objects_per_caption.to_string());
                push("", "cooccurrence_fraction", cell(g.cooccurrence_fraction));
                for (store, s) in &a.stores {
                    let sc = &s.scores;
                    push(store, "caos_t", cell(sc.caos_t));
                    push(store, "caos_x", cell(sc.caos_x));
                    push(store, "caos_k", cell(sc.caos_k));
                    push(store, "caos_t_over_x", cell(sc.caos_t_over_x));
                    push(store, "caos_x_over_k", cell(sc.caos_x_over_k));
                    push(store, "caos_avg", cell(sc.caos_avg));
                    push(store, "scored_captions", s.scored_captions.to_string());
                    push(store, "unscored_captions", s.unscored_captions.to_string());
                    push(store, "skipped_hallucinations", s.skipped_hallucinations.to_string());
                }
            }
        }
        ReportFormat::PerCaption => {
            out.push(
                [
                    "model", "instruction_id", "image_id", "store", "mentions", "hallucinated", "hallucination_count",
                    "caos_t", "caos_x", "caos_k", "caos_t_over_x", "caos_x_over_k", "caos_avg",
                ]
                .into_iter()
                .map(String::from)
                .collect(),
            );
            for r in records {
                for (store, res) in &r.stores {
                    let s = &res.scores;
                    out.push(vec![
                        r.model.clone(),
                        r.instruction_id.clone(),
                        r.image_id.clone(),
                        store.clone(),
                        r.mentions.len().to_string(),
                        r.hallucinated().to_string(),
                        s.hallucination_count.to_string(),
                        cell(s.caos_t),
                        cell(s.caos_x),
                        cell(s.caos_k),
                        cell(s.caos_t_over_x),
                        cell(s.caos_x_over_k),
                        cell(s.caos_avg),
                    ]);
                }
            }
        }
        ReportFormat::Sweep => {
            out.push(["model", "instruction_id", "store", "k", "caos_k"].into_iter().map(String::from).collect());
            for g in &report.groups {
                for (store, curve) in &g.topk_sweep {
                    for (k, v) in curve {
                        out.push(vec![g.model.clone(), g.instruction_id.clone(), store.clone(), k.to_string(), cell(*v)]);
                    }
                }
            }
        }
        ReportFormat::Subsets => {
            out.push(
                ["model", "instruction_id", "store", "subset", "caos_t", "caos_x", "caos_k", "scored_captions", "unscored_captions"]
                    .into_iter()
                    .map(String::from)
                    .collect(),
            );
            for g in &report.groups {
                for (subset, per_store) in &g.subsets {
                    for (store, s) in per_store {
                        out.push(vec![
                            g.model.clone(),
                            g.instruction_id.clone(),
                            store.clone(),
                            subset.clone(),
                            cell(s.scores.caos_t),
                            cell(s.scores.caos_x),
                            cell(s.scores.caos_k),
                            s.scored_captions.to_string(),
                            s.unscored_captions.to_string(),
                        ]);
                    }
                }
            }
        }
        ReportFormat::InstructionVariability => {
            out.push(
                ["model", "store", "instruction_id", "caos_t", "caos_x", "caos_k", "caos_t_over_x", "caos_x_over_k", "caos_avg"]
                    .into_iter()
                    .map(String::from)
                    .collect(),
            );
            type Rows<'a> = Vec<(&'a str, [Option<f64>; 6])>;
            let mut by_model: BTreeMap<(&str, &str), Rows> = BTreeMap::new();
            for g in &report.groups {
                for (store, s) in &g.aggregate.stores {
                    let sc = &s.scores;
                    by_model.entry((g.model.as_str(), store.as_str())).or_default().push((
                        g.instruction_id.as_str(),
                        [sc.caos_t, sc.caos_x, sc.caos_k, sc.caos_t_over_x, sc.caos_x_over_k, sc.caos_avg],
                    ));
                }
            }
            for ((model, store), rows) in by_model {
                for (instr, vals) in &rows {
                    let mut row = vec![model.to_string(), store.to_string(), instr.to_string()];
                    row.extend(vals.iter().map(|v| cell(*v)));
                    out.push(row);
                }
                let mut row = vec![model.to_string(), store.to_string(), "mean".to_string()];
                row.extend((0..6).map(|i| cell(mean_of(rows.iter().map(|r| r.1[i])))));
                out.push(row);
            }
        }
    }
    out
}

/// Write one export as CSV with a header row.
pub fn write_table(
    format: ReportFormat,
    report: &RunReport,
    records: &[CaptionRecord],
    path: &Path,
) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for row in rows(format, report, records) {
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Render one export as CSV text.
pub fn render_table(format: ReportFormat, report: &RunReport, records: &[CaptionRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows(format, report, records) {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}
